#pragma once

// Stage checkpoints. Each checkpoint is a directory holding manifest.json
// plus one raw little-endian float32 file per named parameter. Later stages
// embed everything earlier ones need, so a directory is always sufficient to
// resume from: a vae checkpoint carries the frozen decoder, a diffusion
// checkpoint carries decoder, encoder, injector, denoiser and the latent
// standardization. Manifests record a fingerprint per component; loads
// recompute and refuse silently corrupted or swapped-out weights.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "difflm/data.hpp"
#include "difflm/diffusion.hpp"
#include "difflm/error.hpp"
#include "difflm/injection.hpp"
#include "difflm/lm.hpp"

namespace difflm {

inline constexpr const char *kCheckpointFormat = "difflm-checkpoint-v1";

// ---- config <-> json ---------------------------------------------------------

inline json transformer_config_to_json(const TransformerConfig &c) {
  json j;
  j["vocab"] = c.vocab;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["max_seq_len"] = c.max_seq_len;
  j["causal"] = c.causal;
  return j;
}

inline TransformerConfig transformer_config_from_json(const json &j) {
  TransformerConfig c;
  c.vocab = j.at("vocab").get<int64_t>();
  c.d_model = j.at("d_model").get<int64_t>();
  c.n_layers = j.at("n_layers").get<int64_t>();
  c.n_heads = j.at("n_heads").get<int64_t>();
  c.d_ff = j.at("d_ff").get<int64_t>();
  c.max_seq_len = j.at("max_seq_len").get<int64_t>();
  c.causal = j.at("causal").get<bool>();
  c.validate();
  return c;
}

inline json injector_config_to_json(const InjectorConfig &c) {
  json j;
  j["method"] = injection_method_name(c.method);
  j["d_latent"] = c.d_latent;
  j["k"] = c.k;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["d_hidden"] = c.d_hidden;
  return j;
}

inline InjectorConfig injector_config_from_json(const json &j) {
  InjectorConfig c;
  c.method = injection_method_from_name(j.at("method").get<std::string>());
  c.d_latent = j.at("d_latent").get<int64_t>();
  c.k = j.at("k").get<int64_t>();
  c.d_model = j.at("d_model").get<int64_t>();
  c.n_layers = j.at("n_layers").get<int64_t>();
  c.d_hidden = j.at("d_hidden").get<int64_t>();
  c.validate();
  return c;
}

inline json diffusion_config_to_json(const DiffusionConfig &c) {
  json j;
  j["sigma_min"] = c.sigma_min;
  j["sigma_max"] = c.sigma_max;
  j["n_sample_steps"] = c.n_sample_steps;
  j["sampler"] = sampler_name(c.sampler);
  j["d_latent"] = c.d_latent;
  j["d_hidden"] = c.d_hidden;
  j["n_time_features"] = c.n_time_features;
  return j;
}

inline DiffusionConfig diffusion_config_from_json(const json &j) {
  DiffusionConfig c;
  c.sigma_min = j.at("sigma_min").get<double>();
  c.sigma_max = j.at("sigma_max").get<double>();
  c.n_sample_steps = j.at("n_sample_steps").get<int>();
  c.sampler = sampler_from_name(j.at("sampler").get<std::string>());
  c.d_latent = j.at("d_latent").get<int64_t>();
  c.d_hidden = j.at("d_hidden").get<int64_t>();
  c.n_time_features = j.at("n_time_features").get<int64_t>();
  c.validate();
  return c;
}

// ---- raw parameter files ------------------------------------------------------

namespace detail {

template <typename Real>
void write_param_file(const std::string &path, const Tensor<Real> &t) {
  const auto bytes = to_f32_bytes(t.values());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char *>(bytes.data()),
          std::streamsize(bytes.size()));
  if (!f) throw IoError("checkpoint: short write to " + path);
}

template <typename Real>
std::vector<Real> read_param_file(const std::string &path, size_t numel) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);
  std::vector<unsigned char> bytes(numel * 4);
  f.read(reinterpret_cast<char *>(bytes.data()), std::streamsize(bytes.size()));
  if (size_t(f.gcount()) != bytes.size())
    throw IoError("checkpoint: " + path + " shorter than expected");
  char extra;
  if (f.read(&extra, 1))
    throw IoError("checkpoint: " + path + " longer than expected");
  std::vector<Real> out(numel);
  for (size_t i = 0; i < numel; ++i) {
    const uint32_t u = uint32_t(bytes[i * 4 + 0]) |
                       (uint32_t(bytes[i * 4 + 1]) << 8) |
                       (uint32_t(bytes[i * 4 + 2]) << 16) |
                       (uint32_t(bytes[i * 4 + 3]) << 24);
    float v;
    std::memcpy(&v, &u, 4);
    out[i] = Real(v);
  }
  return out;
}

// Parameter names may contain dots; they map directly onto file names.
inline std::string param_file_name(const std::string &name) {
  return name + ".f32";
}

template <typename Real>
json save_component(const std::filesystem::path &dir,
                    const std::string &component,
                    const NamedParams<Real> &params) {
  std::filesystem::create_directories(dir / component);
  json meta;
  json plist = json::array();
  for (const auto &[name, t] : params) {
    json p;
    p["name"] = name;
    p["shape"] = t.shape();
    p["file"] = component + "/" + param_file_name(name);
    write_param_file((dir / component / param_file_name(name)).string(), t);
    plist.push_back(p);
  }
  meta["params"] = plist;
  meta["fingerprint"] = fingerprint_hex(fingerprint_params(params));
  return meta;
}

// Overwrites the values of `params` in place from the files listed in `meta`,
// then checks the recomputed fingerprint against the recorded one.
template <typename Real>
void load_component(const std::filesystem::path &dir, const json &meta,
                    const std::string &component, NamedParams<Real> params) {
  const auto &plist = meta.at("params");
  if (plist.size() != params.size())
    throw ConfigError("checkpoint: component " + component + " lists " +
                      std::to_string(plist.size()) + " params, model has " +
                      std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const json &p = plist[i];
    auto &[name, t] = params[i];
    if (p.at("name").get<std::string>() != name)
      throw ConfigError("checkpoint: param order mismatch in " + component +
                        ": expected " + name + ", manifest has " +
                        p.at("name").get<std::string>());
    const auto shape = p.at("shape").get<Shape>();
    if (shape != t.shape())
      throw ConfigError("checkpoint: shape mismatch for " + component + "/" +
                        name);
    auto values = read_param_file<Real>(
        (dir / p.at("file").get<std::string>()).string(), t.values().size());
    Tensor<Real> handle = t;
    handle.values_mut() = std::move(values);
  }
  const auto want = meta.at("fingerprint").get<std::string>();
  const auto got = fingerprint_hex(fingerprint_params(params));
  if (want != got)
    throw IoError("checkpoint: fingerprint mismatch for " + component +
                  ": manifest " + want + ", files " + got);
}

inline json read_manifest(const std::filesystem::path &dir,
                          const std::string &expect_stage) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path))
    throw IoError("checkpoint: no manifest at " + path.string());
  json m = json::parse(read_file(path.string()));
  if (m.at("format").get<std::string>() != kCheckpointFormat)
    throw ConfigError("checkpoint: unknown format in " + path.string());
  const auto stage = m.at("stage").get<std::string>();
  if (stage != expect_stage)
    throw ConfigError("checkpoint: " + dir.string() + " holds a " + stage +
                      " checkpoint, expected " + expect_stage);
  return m;
}

inline void write_manifest(const std::filesystem::path &dir, json m) {
  std::filesystem::create_directories(dir);
  write_file((dir / "manifest.json").string(), m.dump(2) + "\n");
}

}  // namespace detail

// ---- decoder stage -------------------------------------------------------------

template <typename Real>
struct DecoderCheckpoint {
  LmParams<Real> decoder;
  uint64_t seed = 0;
  json config;  // run configuration snapshot
};

template <typename Real>
void save_decoder_checkpoint(const std::string &dir_str,
                             const DecoderCheckpoint<Real> &c) {
  const std::filesystem::path dir(dir_str);
  json m;
  m["format"] = kCheckpointFormat;
  m["stage"] = "decoder";
  m["seed"] = c.seed;
  m["config"] = c.config;
  json d = detail::save_component(dir, "decoder", c.decoder.named_params());
  d["config"] = transformer_config_to_json(c.decoder.cfg);
  d["frozen"] = c.decoder.frozen;
  m["decoder"] = d;
  detail::write_manifest(dir, m);
}

namespace detail {

template <typename Real>
LmParams<Real> load_decoder_component(const std::filesystem::path &dir,
                                      const json &meta) {
  const auto cfg = transformer_config_from_json(meta.at("config"));
  Rng scratch(0);
  auto p = LmParams<Real>::init(cfg, scratch);
  load_component<Real>(dir, meta, "decoder", p.named_params());
  if (meta.at("frozen").get<bool>()) p.freeze();
  return p;
}

template <typename Real>
EncoderParams<Real> load_encoder_component(const std::filesystem::path &dir,
                                           const json &meta) {
  auto cfg = transformer_config_from_json(meta.at("config"));
  const auto out_dim = meta.at("out_dim").get<int64_t>();
  Rng scratch(0);
  auto p = EncoderParams<Real>::init(cfg, out_dim, scratch);
  load_component<Real>(dir, meta, "encoder", p.named_params());
  return p;
}

template <typename Real>
InjectorParams<Real> load_injector_component(const std::filesystem::path &dir,
                                             const json &meta) {
  const auto cfg = injector_config_from_json(meta.at("config"));
  Rng scratch(0);
  auto p = InjectorParams<Real>::init(cfg, scratch);
  load_component<Real>(dir, meta, "injector", p.named_params());
  return p;
}

}  // namespace detail

template <typename Real>
DecoderCheckpoint<Real> load_decoder_checkpoint(const std::string &dir_str) {
  const std::filesystem::path dir(dir_str);
  const json m = detail::read_manifest(dir, "decoder");
  DecoderCheckpoint<Real> c;
  c.decoder = detail::load_decoder_component<Real>(dir, m.at("decoder"));
  c.seed = m.at("seed").get<uint64_t>();
  c.config = m.at("config");
  return c;
}

// ---- vae stage -------------------------------------------------------------------

template <typename Real>
struct VaeCheckpoint {
  LmParams<Real> decoder;  // frozen copy carried along for self-containment
  EncoderParams<Real> encoder;
  InjectorParams<Real> injector;
  uint64_t seed = 0;
  json config;
};

template <typename Real>
void save_vae_checkpoint(const std::string &dir_str,
                         const VaeCheckpoint<Real> &c) {
  const std::filesystem::path dir(dir_str);
  json m;
  m["format"] = kCheckpointFormat;
  m["stage"] = "vae";
  m["seed"] = c.seed;
  m["config"] = c.config;
  json d = detail::save_component(dir, "decoder", c.decoder.named_params());
  d["config"] = transformer_config_to_json(c.decoder.cfg);
  d["frozen"] = c.decoder.frozen;
  m["decoder"] = d;
  json e = detail::save_component(dir, "encoder", c.encoder.named_params());
  e["config"] = transformer_config_to_json(c.encoder.backbone.cfg);
  e["out_dim"] = c.encoder.head_w.shape()[1];
  m["encoder"] = e;
  json i = detail::save_component(dir, "injector", c.injector.named_params());
  i["config"] = injector_config_to_json(c.injector.cfg);
  m["injector"] = i;
  detail::write_manifest(dir, m);
}

template <typename Real>
VaeCheckpoint<Real> load_vae_checkpoint(const std::string &dir_str) {
  const std::filesystem::path dir(dir_str);
  const json m = detail::read_manifest(dir, "vae");
  VaeCheckpoint<Real> c;
  c.decoder = detail::load_decoder_component<Real>(dir, m.at("decoder"));
  c.encoder = detail::load_encoder_component<Real>(dir, m.at("encoder"));
  c.injector = detail::load_injector_component<Real>(dir, m.at("injector"));
  c.seed = m.at("seed").get<uint64_t>();
  c.config = m.at("config");
  return c;
}

// ---- diffusion stage --------------------------------------------------------------

template <typename Real>
struct DiffusionCheckpoint {
  LmParams<Real> decoder;
  EncoderParams<Real> encoder;
  InjectorParams<Real> injector;
  DenoiserParams<Real> denoiser;
  LatentStats stats;
  uint64_t seed = 0;
  json config;
};

template <typename Real>
void save_diffusion_checkpoint(const std::string &dir_str,
                               const DiffusionCheckpoint<Real> &c) {
  const std::filesystem::path dir(dir_str);
  json m;
  m["format"] = kCheckpointFormat;
  m["stage"] = "diffusion";
  m["seed"] = c.seed;
  m["config"] = c.config;
  json d = detail::save_component(dir, "decoder", c.decoder.named_params());
  d["config"] = transformer_config_to_json(c.decoder.cfg);
  d["frozen"] = c.decoder.frozen;
  m["decoder"] = d;
  json e = detail::save_component(dir, "encoder", c.encoder.named_params());
  e["config"] = transformer_config_to_json(c.encoder.backbone.cfg);
  e["out_dim"] = c.encoder.head_w.shape()[1];
  m["encoder"] = e;
  json i = detail::save_component(dir, "injector", c.injector.named_params());
  i["config"] = injector_config_to_json(c.injector.cfg);
  m["injector"] = i;
  json n = detail::save_component(dir, "denoiser", c.denoiser.named_params());
  n["config"] = diffusion_config_to_json(c.denoiser.cfg);
  m["denoiser"] = n;
  json s;
  s["mean"] = c.stats.mean;
  s["stddev"] = c.stats.stddev;
  m["latent_stats"] = s;
  detail::write_manifest(dir, m);
}

template <typename Real>
DiffusionCheckpoint<Real> load_diffusion_checkpoint(
    const std::string &dir_str) {
  const std::filesystem::path dir(dir_str);
  const json m = detail::read_manifest(dir, "diffusion");
  DiffusionCheckpoint<Real> c;
  c.decoder = detail::load_decoder_component<Real>(dir, m.at("decoder"));
  c.encoder = detail::load_encoder_component<Real>(dir, m.at("encoder"));
  c.injector = detail::load_injector_component<Real>(dir, m.at("injector"));
  const json &nm = m.at("denoiser");
  const auto dcfg = diffusion_config_from_json(nm.at("config"));
  Rng scratch(0);
  c.denoiser = DenoiserParams<Real>::init(dcfg, scratch);
  detail::load_component<Real>(dir, nm, "denoiser",
                               c.denoiser.named_params());
  c.stats.mean = m.at("latent_stats").at("mean").get<std::vector<double>>();
  c.stats.stddev =
      m.at("latent_stats").at("stddev").get<std::vector<double>>();
  if (c.stats.mean.size() != c.stats.stddev.size())
    throw ConfigError("checkpoint: latent stats length mismatch");
  c.seed = m.at("seed").get<uint64_t>();
  c.config = m.at("config");
  return c;
}

// ---- freeze audit ------------------------------------------------------------------

// The decoder must leave pretraining frozen and never change again. Every
// stage records its fingerprint; this recomputes the fingerprint from the
// weights actually stored under `dir` and compares it to the one recorded by
// the pretraining stage.
template <typename Real>
void audit_decoder_unchanged(const std::string &decoder_dir,
                             const std::string &later_dir) {
  const json dm = detail::read_manifest(decoder_dir, "decoder");
  const auto want =
      dm.at("decoder").at("fingerprint").get<std::string>();

  const std::filesystem::path dir(later_dir);
  json lm = json::parse(read_file((dir / "manifest.json").string()));
  const auto stage = lm.at("stage").get<std::string>();
  if (stage != "vae" && stage != "diffusion")
    throw ConfigError("freeze audit: " + later_dir +
                      " is not a vae or diffusion checkpoint");
  // load_decoder_component recomputes the fingerprint from the raw files and
  // throws if the manifest disagrees, so `got` reflects bytes on disk.
  const auto dec = detail::load_decoder_component<Real>(dir, lm.at("decoder"));
  const auto got = fingerprint_hex(dec.fingerprint());
  if (want != got)
    throw ContractError("freeze audit: decoder fingerprint drifted: " +
                        decoder_dir + " has " + want + ", " + later_dir +
                        " has " + got);
}

// ---- training logs ------------------------------------------------------------------

// One compact JSON object per line; the line count equals the number of
// completed epochs, which makes truncated runs visible at a glance.
inline void append_jsonl(const std::string &path, const json &obj) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw IoError("jsonl: cannot open " + path);
  f << obj.dump() << "\n";
  if (!f) throw IoError("jsonl: short write to " + path);
}

inline std::vector<json> read_jsonl(const std::string &path) {
  std::vector<json> out;
  for (const auto &line : read_lines(path)) {
    if (line.empty()) continue;
    out.push_back(json::parse(line));
  }
  return out;
}

}  // namespace difflm
