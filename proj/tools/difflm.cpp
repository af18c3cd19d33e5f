// Command-line front end for the synthesis pipeline. Subcommands map 1:1
// onto the stage functions; every stage reads/writes artifacts under the run
// directory given by --out. Exit codes: 0 success, 1 usage or configuration
// error, 2 runtime failure (training, generation, io).

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "difflm/pipeline.hpp"
#include "difflm/toy.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "run";
  int64_t seed_override = -1;
};

difflm::RunConfig resolve_config(const CommonArgs &a) {
  difflm::RunConfig cfg = difflm::load_run_config(a.config_path);
  if (a.seed_override >= 0) cfg.seed = uint64_t(a.seed_override);
  return cfg;
}

void add_common(CLI::App *cmd, CommonArgs &a) {
  cmd->add_option("--config", a.config_path, "Run configuration JSON")
      ->required();
  cmd->add_option("--out", a.out_dir, "Run directory for artifacts");
  cmd->add_option("--seed", a.seed_override,
                  "Override the seed from the config");
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Structured-data synthesis pipeline"};
  app.require_subcommand(1);

  CommonArgs a;
  bool prior = false;

  auto *c_pretrain =
      app.add_subcommand("pretrain", "Train and freeze the decoder");
  add_common(c_pretrain, a);

  auto *c_vae = app.add_subcommand(
      "train-vae", "Train encoder and injector against the frozen decoder");
  add_common(c_vae, a);

  auto *c_diff = app.add_subcommand(
      "train-diffusion", "Train the latent denoiser on posterior means");
  add_common(c_diff, a);

  auto *c_sample =
      app.add_subcommand("sample", "Generate synthetic records");
  add_common(c_sample, a);
  c_sample->add_flag("--prior", prior,
                     "Draw latents from the standard normal prior instead of "
                     "the diffusion model");

  auto *c_eval =
      app.add_subcommand("eval", "Score generated records against real splits");
  add_common(c_eval, a);
  c_eval->add_flag("--prior", prior, "Score the prior-baseline sample file");

  auto *c_pipe =
      app.add_subcommand("pipeline", "Run all stages in order");
  add_common(c_pipe, a);

  std::string toy_dir = "toy";
  int64_t toy_n = 2500;
  int64_t toy_seed = 1;
  auto *c_toy = app.add_subcommand(
      "make-toy", "Write a synthetic benchmark dataset (csv + schema)");
  c_toy->add_option("--out", toy_dir, "Output directory");
  c_toy->add_option("--n", toy_n, "Number of records")
      ->check(CLI::PositiveNumber);
  c_toy->add_option("--seed", toy_seed, "Generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_toy->parsed()) {
      const auto [csv, schema] =
          difflm::write_toy_dataset(toy_dir, size_t(toy_n),
                                    uint64_t(toy_seed));
      std::cout << "wrote " << csv << " and " << schema << "\n";
      return 0;
    }
    const difflm::RunConfig cfg = resolve_config(a);
    if (c_pretrain->parsed()) {
      difflm::cmd_pretrain(cfg, a.out_dir, &std::cout);
    } else if (c_vae->parsed()) {
      difflm::cmd_train_vae(cfg, a.out_dir, &std::cout);
    } else if (c_diff->parsed()) {
      difflm::cmd_train_diffusion(cfg, a.out_dir, &std::cout);
    } else if (c_sample->parsed()) {
      difflm::cmd_sample(cfg, a.out_dir, prior, &std::cout);
    } else if (c_eval->parsed()) {
      difflm::cmd_eval(cfg, a.out_dir, prior, &std::cout);
    } else if (c_pipe->parsed()) {
      difflm::cmd_pipeline(cfg, a.out_dir, &std::cout);
    }
  } catch (const difflm::ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const difflm::IoError &e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const difflm::Error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
