#pragma once

// End-to-end orchestration: pretrain -> train-vae -> train-diffusion ->
// sample -> eval, every stage reading and writing artifacts under one run
// directory so any prefix of the chain can be rerun or audited in isolation.
// All stages derive their data splits and rng streams from the single config
// seed, which makes the whole run reproducible from config.json alone.

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <unordered_set>
#include <vector>

#include "difflm/checkpoint.hpp"
#include "difflm/data.hpp"
#include "difflm/diffusion.hpp"
#include "difflm/error.hpp"
#include "difflm/eval.hpp"
#include "difflm/injection.hpp"
#include "difflm/lm.hpp"
#include "difflm/vae.hpp"

namespace difflm {

// The pipeline trains in float: the decoder is the cost center and float
// halves its memory traffic. Oracles and gradchecks run in double elsewhere.
using PipelineReal = float;

// ---- configuration ----------------------------------------------------------

struct DataConfig {
  std::string csv;
  std::string schema;
  double f_train = 0.8;
  double f_val = 0.1;
  double f_test = 0.1;
};

struct SamplingConfig {
  int64_t n_samples = 0;  // 0 = size of the training split
  double temperature = 0.7;
  double top_p = 0.95;
  int64_t max_len = 256;
  int64_t max_attempts_multiplier = 20;
};

struct RunConfig {
  DataConfig data;
  uint64_t seed = 42;
  TransformerConfig decoder;  // causal language model
  TransformerConfig encoder;  // bidirectional posterior encoder
  int64_t d_latent = 16;
  InjectorConfig injector;
  BetaSchedule beta;
  DiffusionConfig diffusion;
  TrainHyper pretrain;
  VaeHyper vae;
  DiffusionHyper denoiser;
  SamplingConfig sampling;

  RunConfig() {
    encoder.causal = false;
    encoder.n_layers = 2;
    pretrain.max_epochs = 4;
    vae.max_epochs = 14;
    denoiser.max_epochs = 400;
  }

  // Derived fields the injector and denoiser must agree on. Applied before
  // every stage so a hand-edited config cannot drift internally.
  RunConfig normalized() const {
    RunConfig c = *this;
    c.encoder.causal = false;
    c.injector.d_latent = c.d_latent;
    c.injector.d_model = c.decoder.d_model;
    c.injector.n_layers = c.decoder.n_layers;
    c.diffusion.d_latent = c.d_latent;
    return c;
  }

  void validate() const {
    if (data.csv.empty() || data.schema.empty())
      throw ConfigError("config: data.csv and data.schema are required");
    if (d_latent < 1) throw ConfigError("config: d_latent must be positive");
    if (sampling.n_samples < 0 || sampling.max_attempts_multiplier < 1 ||
        sampling.max_len < 3 || !(sampling.temperature >= 0) ||
        !(sampling.top_p > 0 && sampling.top_p <= 1))
      throw ConfigError("config: bad sampling controls");
    const RunConfig n = normalized();
    n.decoder.validate();
    n.encoder.validate();
    n.injector.validate();
    n.diffusion.validate();
    n.beta.validate();
  }
};

namespace detail {

template <typename T>
void overlay(const json &j, const char *key, T &v) {
  if (j.contains(key)) v = j.at(key).template get<T>();
}

inline void overlay_transformer(const json &j, TransformerConfig &c) {
  overlay(j, "vocab", c.vocab);
  overlay(j, "d_model", c.d_model);
  overlay(j, "n_layers", c.n_layers);
  overlay(j, "n_heads", c.n_heads);
  overlay(j, "d_ff", c.d_ff);
  overlay(j, "max_seq_len", c.max_seq_len);
  overlay(j, "causal", c.causal);
}

}  // namespace detail

inline json run_config_to_json(const RunConfig &cfg) {
  json j;
  j["data"] = {{"csv", cfg.data.csv},
               {"schema", cfg.data.schema},
               {"f_train", cfg.data.f_train},
               {"f_val", cfg.data.f_val},
               {"f_test", cfg.data.f_test}};
  j["seed"] = cfg.seed;
  j["decoder"] = transformer_config_to_json(cfg.decoder);
  j["encoder"] = transformer_config_to_json(cfg.encoder);
  j["d_latent"] = cfg.d_latent;
  j["injector"] = injector_config_to_json(cfg.injector);
  j["beta"] = {{"mode", beta_mode_name(cfg.beta.mode)},
               {"beta_max", cfg.beta.beta_max},
               {"beta_min", cfg.beta.beta_min},
               {"patience", cfg.beta.patience},
               {"decay_factor", cfg.beta.decay},
               {"rel_improve", cfg.beta.rel_improve},
               {"cycle_period", cfg.beta.cycle_period},
               {"cycle_peak", cfg.beta.cycle_peak}};
  j["diffusion"] = diffusion_config_to_json(cfg.diffusion);
  j["pretrain"] = {{"lr", cfg.pretrain.lr},
                   {"batch_size", cfg.pretrain.batch_size},
                   {"max_epochs", cfg.pretrain.max_epochs},
                   {"val_fraction", cfg.pretrain.val_fraction},
                   {"max_pos_offset", cfg.pretrain.max_pos_offset}};
  j["vae"] = {{"lr", cfg.vae.lr},
              {"batch_size", cfg.vae.batch_size},
              {"max_epochs", cfg.vae.max_epochs},
              {"stop_patience", cfg.vae.stop_patience},
              {"free_bits", cfg.vae.free_bits}};
  j["denoiser"] = {{"lr", cfg.denoiser.lr},
                   {"batch_size", cfg.denoiser.batch_size},
                   {"max_epochs", cfg.denoiser.max_epochs}};
  j["sampling"] = {
      {"n_samples", cfg.sampling.n_samples},
      {"temperature", cfg.sampling.temperature},
      {"top_p", cfg.sampling.top_p},
      {"max_len", cfg.sampling.max_len},
      {"max_attempts_multiplier", cfg.sampling.max_attempts_multiplier}};
  return j;
}

// Absent keys keep their defaults, so a config file may be as small as the
// data paths.
inline RunConfig run_config_from_json(const json &j) {
  RunConfig cfg;
  using detail::overlay;
  if (j.contains("data")) {
    const json &d = j.at("data");
    overlay(d, "csv", cfg.data.csv);
    overlay(d, "schema", cfg.data.schema);
    overlay(d, "f_train", cfg.data.f_train);
    overlay(d, "f_val", cfg.data.f_val);
    overlay(d, "f_test", cfg.data.f_test);
  }
  overlay(j, "seed", cfg.seed);
  if (j.contains("decoder"))
    detail::overlay_transformer(j.at("decoder"), cfg.decoder);
  if (j.contains("encoder"))
    detail::overlay_transformer(j.at("encoder"), cfg.encoder);
  overlay(j, "d_latent", cfg.d_latent);
  if (j.contains("injector")) {
    const json &i = j.at("injector");
    if (i.contains("method"))
      cfg.injector.method =
          injection_method_from_name(i.at("method").get<std::string>());
    overlay(i, "d_latent", cfg.injector.d_latent);
    overlay(i, "k", cfg.injector.k);
    overlay(i, "d_model", cfg.injector.d_model);
    overlay(i, "n_layers", cfg.injector.n_layers);
    overlay(i, "d_hidden", cfg.injector.d_hidden);
  }
  if (j.contains("beta")) {
    const json &b = j.at("beta");
    if (b.contains("mode"))
      cfg.beta.mode = beta_mode_from_name(b.at("mode").get<std::string>());
    overlay(b, "beta_max", cfg.beta.beta_max);
    overlay(b, "beta_min", cfg.beta.beta_min);
    overlay(b, "patience", cfg.beta.patience);
    overlay(b, "decay_factor", cfg.beta.decay);
    overlay(b, "rel_improve", cfg.beta.rel_improve);
    overlay(b, "cycle_period", cfg.beta.cycle_period);
    overlay(b, "cycle_peak", cfg.beta.cycle_peak);
  }
  if (j.contains("diffusion")) {
    const json &d = j.at("diffusion");
    overlay(d, "sigma_min", cfg.diffusion.sigma_min);
    overlay(d, "sigma_max", cfg.diffusion.sigma_max);
    overlay(d, "n_sample_steps", cfg.diffusion.n_sample_steps);
    if (d.contains("sampler"))
      cfg.diffusion.sampler =
          sampler_from_name(d.at("sampler").get<std::string>());
    overlay(d, "d_latent", cfg.diffusion.d_latent);
    overlay(d, "d_hidden", cfg.diffusion.d_hidden);
    overlay(d, "n_time_features", cfg.diffusion.n_time_features);
  }
  if (j.contains("pretrain")) {
    const json &p = j.at("pretrain");
    overlay(p, "lr", cfg.pretrain.lr);
    overlay(p, "batch_size", cfg.pretrain.batch_size);
    overlay(p, "max_epochs", cfg.pretrain.max_epochs);
    overlay(p, "val_fraction", cfg.pretrain.val_fraction);
    overlay(p, "max_pos_offset", cfg.pretrain.max_pos_offset);
  }
  if (j.contains("vae")) {
    const json &v = j.at("vae");
    overlay(v, "lr", cfg.vae.lr);
    overlay(v, "batch_size", cfg.vae.batch_size);
    overlay(v, "max_epochs", cfg.vae.max_epochs);
    overlay(v, "stop_patience", cfg.vae.stop_patience);
    overlay(v, "free_bits", cfg.vae.free_bits);
  }
  if (j.contains("denoiser")) {
    const json &d = j.at("denoiser");
    overlay(d, "lr", cfg.denoiser.lr);
    overlay(d, "batch_size", cfg.denoiser.batch_size);
    overlay(d, "max_epochs", cfg.denoiser.max_epochs);
  }
  if (j.contains("sampling")) {
    const json &s = j.at("sampling");
    overlay(s, "n_samples", cfg.sampling.n_samples);
    overlay(s, "temperature", cfg.sampling.temperature);
    overlay(s, "top_p", cfg.sampling.top_p);
    overlay(s, "max_len", cfg.sampling.max_len);
    overlay(s, "max_attempts_multiplier", cfg.sampling.max_attempts_multiplier);
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string &path) {
  if (!std::filesystem::exists(path))
    throw IoError("config file not found: " + path);
  return run_config_from_json(json::parse(read_file(path)));
}

// ---- run directory layout ------------------------------------------------------

struct RunPaths {
  std::filesystem::path root;

  explicit RunPaths(const std::string &dir) : root(dir) {}

  std::string config_json() const { return (root / "config.json").string(); }
  std::string decoder_dir() const { return (root / "decoder").string(); }
  std::string vae_dir() const { return (root / "vae").string(); }
  std::string diffusion_dir() const { return (root / "diffusion").string(); }
  std::string latents_bin() const { return (root / "latents.bin").string(); }
  std::string samples_jsonl(bool prior) const {
    return (root / (prior ? "samples_prior.jsonl" : "samples.jsonl")).string();
  }
  std::string sampling_report_json(bool prior) const {
    return (root /
            (prior ? "sampling_report_prior.json" : "sampling_report.json"))
        .string();
  }
  std::string eval_report_json(bool prior) const {
    return (root / (prior ? "eval_report_prior.json" : "eval_report.json"))
        .string();
  }
  std::string dcr_hist_csv() const { return (root / "dcr_hist.csv").string(); }
  std::string log(const std::string &stage) const {
    return (root / "logs" / (stage + ".jsonl")).string();
  }
};

// Fixed rng stream ids per stage; child streams never collide across stages.
enum RngStream : uint64_t {
  kStreamSplit = 0,
  kStreamPretrain = 1,
  kStreamVae = 2,
  kStreamDiffusion = 3,
  kStreamSample = 4,
  kStreamPrior = 5,
};

struct SplitData {
  TableSchema schema;
  Splits splits;
};

// Single source of truth for the train/val/test partition: every stage and
// the evaluator re-derive it from (csv, seed), so they can never disagree.
inline SplitData load_and_split(const RunConfig &cfg) {
  if (!std::filesystem::exists(cfg.data.csv))
    throw IoError("dataset csv not found: " + cfg.data.csv);
  if (!std::filesystem::exists(cfg.data.schema))
    throw IoError("schema file not found: " + cfg.data.schema);
  SplitData sd;
  sd.schema = load_schema(cfg.data.schema);
  const auto records = load_csv(cfg.data.csv, sd.schema);
  Rng rng = Rng(cfg.seed).fork(kStreamSplit);
  sd.splits = split_records(records, cfg.data.f_train, cfg.data.f_val,
                                    cfg.data.f_test, rng);
  return sd;
}

namespace detail {

inline void write_log(const std::string &path, const std::vector<json> &rows) {
  std::filesystem::create_directories(
      std::filesystem::path(path).parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("log: cannot open " + path);
  for (const auto &r : rows) f << r.dump() << "\n";
}

inline void note(std::ostream *progress, const std::string &line) {
  if (progress) (*progress) << line << "\n" << std::flush;
}

}  // namespace detail

// ---- stages ----------------------------------------------------------------------

// Next-token pretraining on the canonical JSON of the training split. The
// checkpoint stores the decoder already frozen.
inline PretrainResult<PipelineReal> cmd_pretrain(
    const RunConfig &cfg, const std::string &run_dir,
    std::ostream *progress = nullptr) {
  cfg.validate();
  const RunConfig n = cfg.normalized();
  const RunPaths paths(run_dir);
  const auto sd = load_and_split(n);

  std::vector<std::string> corpus;
  corpus.reserve(sd.splits.train.size());
  for (const auto &r : sd.splits.train)
    corpus.push_back(to_canonical_json(r, sd.schema));

  Rng rng = Rng(n.seed).fork(kStreamPretrain);
  auto res = pretrain_decoder<PipelineReal>(corpus, n.decoder, n.pretrain, rng);

  DecoderCheckpoint<PipelineReal> ck;
  ck.decoder = res.params;
  ck.seed = n.seed;
  ck.config = run_config_to_json(cfg);
  save_decoder_checkpoint(paths.decoder_dir(), ck);

  std::vector<json> rows;
  for (const auto &e : res.log)
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss}});
  detail::write_log(paths.log("pretrain"), rows);
  detail::note(progress,
               "pretrain: val " + render_number(res.log.back().val_loss) +
                   " nats/token over " + std::to_string(res.log.size()) +
                   " epochs");
  return res;
}

// Posterior training against the frozen decoder, then the training split is
// encoded to posterior means for the diffusion stage.
inline VaeResult<PipelineReal> cmd_train_vae(const RunConfig &cfg,
                                             const std::string &run_dir,
                                             std::ostream *progress = nullptr) {
  cfg.validate();
  const RunConfig n = cfg.normalized();
  const RunPaths paths(run_dir);
  const auto sd = load_and_split(n);

  auto dck = load_decoder_checkpoint<PipelineReal>(paths.decoder_dir());
  if (!dck.decoder.frozen)
    throw ContractError("train-vae: decoder checkpoint is not frozen");

  TransformerConfig enc_cfg = n.encoder;
  enc_cfg.max_seq_len = n.decoder.max_seq_len;
  Rng rng = Rng(n.seed).fork(kStreamVae);
  auto res = train_vae(sd.splits.train, sd.splits.val, sd.schema, dck.decoder,
                       enc_cfg, n.injector, n.beta, n.vae, rng);

  VaeCheckpoint<PipelineReal> ck;
  ck.decoder = dck.decoder;
  ck.encoder = res.encoder;
  ck.injector = res.injector;
  ck.seed = n.seed;
  ck.config = run_config_to_json(cfg);
  save_vae_checkpoint(paths.vae_dir(), ck);
  audit_decoder_unchanged<PipelineReal>(paths.decoder_dir(), paths.vae_dir());

  const auto latents = encode_dataset(res.encoder, sd.splits.train, sd.schema);
  save_latents(paths.latents_bin(), latents);

  std::vector<json> rows;
  for (const auto &e : res.log)
    rows.push_back({{"epoch", e.epoch},
                    {"beta", e.beta},
                    {"train_rec", e.train_rec},
                    {"train_kl", e.train_kl},
                    {"val_rec", e.val_rec},
                    {"val_kl", e.val_kl}});
  detail::write_log(paths.log("vae"), rows);
  detail::note(progress, "train-vae: best val rec " +
                             render_number(res.best_val_rec) + " at epoch " +
                             std::to_string(res.best_epoch));
  return res;
}

// Denoiser training on the stored posterior means.
inline DiffusionResult<PipelineReal> cmd_train_diffusion(
    const RunConfig &cfg, const std::string &run_dir,
    std::ostream *progress = nullptr) {
  cfg.validate();
  const RunConfig n = cfg.normalized();
  const RunPaths paths(run_dir);

  auto vck = load_vae_checkpoint<PipelineReal>(paths.vae_dir());
  const auto latents = load_latents<PipelineReal>(paths.latents_bin());

  Rng rng = Rng(n.seed).fork(kStreamDiffusion);
  auto res = train_denoiser(latents, n.diffusion, n.denoiser, rng);

  DiffusionCheckpoint<PipelineReal> ck;
  ck.decoder = vck.decoder;
  ck.encoder = vck.encoder;
  ck.injector = vck.injector;
  ck.denoiser = res.denoiser;
  ck.stats = res.stats;
  ck.seed = n.seed;
  ck.config = run_config_to_json(cfg);
  save_diffusion_checkpoint(paths.diffusion_dir(), ck);
  if (std::filesystem::exists(std::filesystem::path(paths.decoder_dir()) /
                              "manifest.json"))
    audit_decoder_unchanged<PipelineReal>(paths.decoder_dir(),
                                          paths.diffusion_dir());

  std::vector<json> rows;
  for (const auto &e : res.log)
    rows.push_back({{"epoch", e.epoch}, {"loss", e.loss}});
  detail::write_log(paths.log("diffusion"), rows);
  detail::note(progress, "train-diffusion: final loss " +
                             render_number(res.log.back().loss) + " after " +
                             std::to_string(res.log.size()) + " epochs");
  return res;
}

struct SampleOutcome {
  int64_t requested = 0;
  int64_t accepted = 0;
  int64_t attempts = 0;
  std::map<std::string, int64_t> rejects;  // reason -> count
  std::vector<Record> records;

  double acceptance_rate() const {
    return attempts ? double(accepted) / double(attempts) : 0.0;
  }
};

// Rejection-sampling loop: latent -> decode -> parse -> train-dedup. With
// prior_baseline the latent is drawn from the standard normal prior instead
// of the learned diffusion model; everything downstream is identical, which
// isolates the diffusion model's contribution in evaluations.
inline SampleOutcome cmd_sample(const RunConfig &cfg,
                                const std::string &run_dir,
                                bool prior_baseline = false,
                                std::ostream *progress = nullptr) {
  cfg.validate();
  const RunConfig n = cfg.normalized();
  const RunPaths paths(run_dir);
  const auto sd = load_and_split(n);

  auto ck = load_diffusion_checkpoint<PipelineReal>(paths.diffusion_dir());

  std::unordered_set<std::string> train_keys;
  train_keys.reserve(sd.splits.train.size() * 2);
  for (const auto &r : sd.splits.train)
    train_keys.insert(to_canonical_json(r, sd.schema));

  SampleOutcome out;
  out.requested = n.sampling.n_samples > 0
                      ? n.sampling.n_samples
                      : int64_t(sd.splits.train.size());
  const int64_t budget = out.requested * n.sampling.max_attempts_multiplier;
  const int64_t d = n.d_latent;
  const Rng base =
      Rng(n.seed).fork(prior_baseline ? kStreamPrior : kStreamSample);

  while (out.accepted < out.requested && out.attempts < budget) {
    Rng lat_rng = base.fork(uint64_t(2 * out.attempts));
    Rng dec_rng = base.fork(uint64_t(2 * out.attempts + 1));
    ++out.attempts;

    std::vector<PipelineReal> z;
    if (prior_baseline)
      z = lat_rng.gaussian_vector<PipelineReal>(size_t(d));
    else
      z = sample_latents(ck.denoiser, ck.stats, 1, lat_rng)[0];
    auto zt = Tensor<PipelineReal>::from({1, d}, std::move(z), false);
    auto cond = make_conditioning(ck.injector, zt);
    auto dec = sample_decode(ck.decoder, &cond, dec_rng, n.sampling.temperature,
                             n.sampling.top_p, n.sampling.max_len);
    const auto pr = parse_candidate(decode_tokens(dec.tokens), sd.schema);
    if (!pr.accepted()) {
      out.rejects[reject_label(pr.reason)] += 1;
      continue;
    }
    if (train_keys.count(to_canonical_json(*pr.record, sd.schema))) {
      out.rejects["train_copy"] += 1;
      continue;
    }
    out.records.push_back(*pr.record);
    ++out.accepted;
  }

  json rep;
  rep["mode"] = prior_baseline ? "prior" : "diffusion";
  rep["requested"] = out.requested;
  rep["accepted"] = out.accepted;
  rep["attempts"] = out.attempts;
  rep["acceptance_rate"] = out.acceptance_rate();
  rep["rejects"] = out.rejects;
  rep["seed"] = n.seed;
  rep["config"] = run_config_to_json(cfg);
  std::filesystem::create_directories(paths.root);
  write_file(paths.sampling_report_json(prior_baseline), rep.dump(2) + "\n");

  if (out.accepted == 0) {
    std::string why;
    for (const auto &[k, v] : out.rejects)
      why += " " + k + "=" + std::to_string(v);
    throw GenerationError("sample: zero acceptances in " +
                          std::to_string(out.attempts) + " attempts;" + why);
  }
  write_jsonl_records(paths.samples_jsonl(prior_baseline), out.records,
                      sd.schema);
  detail::note(progress,
               std::string("sample") + (prior_baseline ? " (prior)" : "") +
                   ": accepted " + std::to_string(out.accepted) + "/" +
                   std::to_string(out.attempts) + " attempts");
  return out;
}

// Scores a synthetic sample file against the real splits re-derived from the
// config. Exact training-set copies are dropped (and counted) before any
// metric sees them.
inline EvalReport cmd_eval(const RunConfig &cfg, const std::string &run_dir,
                           bool prior_baseline = false,
                           std::ostream *progress = nullptr) {
  cfg.validate();
  const RunConfig n = cfg.normalized();
  const RunPaths paths(run_dir);
  const auto sd = load_and_split(n);

  const auto path = paths.samples_jsonl(prior_baseline);
  if (!std::filesystem::exists(path))
    throw IoError("eval: samples file not found: " + path);
  const auto syn = load_jsonl_records(path, sd.schema);
  if (syn.empty()) throw MetricError("eval: no synthetic records in " + path);

  const auto dd = dedup_against_train(syn, sd.splits.train, sd.schema);
  if (dd.kept.empty())
    throw MetricError("eval: every synthetic record is a training copy");

  EvalReport rep = evaluate(sd.splits.train, sd.splits.test, dd.kept, sd.schema);
  rep.copies_removed = dd.removed;
  rep.seed = n.seed;
  rep.config = run_config_to_json(cfg);
  write_file(paths.eval_report_json(prior_baseline), report_to_json(rep));
  if (!prior_baseline) export_dcr_histogram(paths.dcr_hist_csv(), rep.dcr_values);
  detail::note(progress,
               std::string("eval") + (prior_baseline ? " (prior)" : "") +
                   ": rho " + render_number(rep.rho_value) + ", dcr_min " +
                   render_number(rep.dcr_min));
  return rep;
}

// All five stages in order under one run directory.
inline EvalReport cmd_pipeline(const RunConfig &cfg,
                               const std::string &run_dir,
                               std::ostream *progress = nullptr) {
  cfg.validate();
  const RunPaths paths(run_dir);
  std::filesystem::create_directories(paths.root);
  write_file(paths.config_json(), run_config_to_json(cfg).dump(2) + "\n");

  cmd_pretrain(cfg, run_dir, progress);
  cmd_train_vae(cfg, run_dir, progress);
  cmd_train_diffusion(cfg, run_dir, progress);
  cmd_sample(cfg, run_dir, /*prior_baseline=*/false, progress);
  return cmd_eval(cfg, run_dir, /*prior_baseline=*/false, progress);
}

}  // namespace difflm
