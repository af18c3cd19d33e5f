#pragma once

// Variance-exploding diffusion over the latent space. Forward process
// z_t = z_0 + t * eps with sigma(t) = t on [sigma_min, sigma_max]; a denoiser
// MLP predicts eps from (z_t, features(log t)) and sampling integrates the
// reverse process from t = sigma_max down to sigma_min on a geometric grid.
// Everything runs in standardized latent coordinates; LatentStats maps back.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "difflm/adam.hpp"
#include "difflm/data.hpp"
#include "difflm/error.hpp"
#include "difflm/lm.hpp"
#include "difflm/rng.hpp"
#include "difflm/tensor.hpp"

namespace difflm {

enum class SamplerKind { kSdeEuler, kOdeEuler };

inline const char *sampler_name(SamplerKind s) {
  return s == SamplerKind::kSdeEuler ? "sde_euler" : "ode_euler";
}

inline SamplerKind sampler_from_name(const std::string &s) {
  if (s == "sde_euler") return SamplerKind::kSdeEuler;
  if (s == "ode_euler") return SamplerKind::kOdeEuler;
  throw ConfigError("unknown sampler '" + s + "'");
}

struct DiffusionConfig {
  double sigma_min = 0.002;
  double sigma_max = 5.0;
  int n_sample_steps = 50;
  SamplerKind sampler = SamplerKind::kSdeEuler;
  int64_t d_latent = 16;
  int64_t d_hidden = 256;
  int64_t n_time_features = 32;  // sin/cos pairs over log t

  void validate() const {
    if (!(sigma_min > 0) || !(sigma_max > sigma_min))
      throw ConfigError("diffusion: need 0 < sigma_min < sigma_max");
    if (n_sample_steps < 1)
      throw ConfigError("diffusion: n_sample_steps must be positive");
    if (d_latent < 1 || d_hidden < 1)
      throw ConfigError("diffusion: dimensions must be positive");
    if (n_time_features < 2 || n_time_features % 2 != 0)
      throw ConfigError("diffusion: n_time_features must be a positive even number");
  }
};

// Per-dimension affine map between raw latents and the standardized space the
// denoiser sees. Degenerate dimensions get a floored scale instead of a zero
// divide.
struct LatentStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  static constexpr double kStdFloor = 1e-6;

  template <typename Real>
  static LatentStats fit(const std::vector<std::vector<Real>> &latents) {
    if (latents.empty()) throw DataError("latent stats: empty dataset");
    const size_t d = latents[0].size();
    if (d == 0) throw DataError("latent stats: zero-dimensional latents");
    LatentStats s;
    s.mean.assign(d, 0.0);
    s.stddev.assign(d, 0.0);
    for (const auto &row : latents) {
      if (row.size() != d)
        throw DataError("latent stats: ragged latent rows");
      for (size_t j = 0; j < d; ++j) s.mean[j] += double(row[j]);
    }
    for (size_t j = 0; j < d; ++j) s.mean[j] /= double(latents.size());
    for (const auto &row : latents)
      for (size_t j = 0; j < d; ++j) {
        const double c = double(row[j]) - s.mean[j];
        s.stddev[j] += c * c;
      }
    for (size_t j = 0; j < d; ++j)
      s.stddev[j] =
          std::max(kStdFloor, std::sqrt(s.stddev[j] / double(latents.size())));
    return s;
  }

  size_t dim() const { return mean.size(); }

  template <typename Real>
  std::vector<Real> standardize(const std::vector<Real> &x) const {
    if (x.size() != dim()) throw ShapeError("latent stats: dim mismatch");
    std::vector<Real> out(x.size());
    for (size_t j = 0; j < x.size(); ++j)
      out[j] = Real((double(x[j]) - mean[j]) / stddev[j]);
    return out;
  }

  template <typename Real>
  std::vector<Real> destandardize(const std::vector<Real> &x) const {
    if (x.size() != dim()) throw ShapeError("latent stats: dim mismatch");
    std::vector<Real> out(x.size());
    for (size_t j = 0; j < x.size(); ++j)
      out[j] = Real(double(x[j]) * stddev[j] + mean[j]);
    return out;
  }
};

// Sinusoidal features of log t: pairs (sin, cos) at geometrically spaced
// frequencies 0.5 .. 64.
template <typename Real>
std::vector<Real> time_features(double t, int64_t n_features) {
  if (!(t > 0)) throw DomainError("time_features: t must be positive");
  const int64_t pairs = n_features / 2;
  const double lt = std::log(t);
  std::vector<Real> out(static_cast<size_t>(n_features));
  for (int64_t i = 0; i < pairs; ++i) {
    const double frac = pairs > 1 ? double(i) / double(pairs - 1) : 0.0;
    const double freq = 0.5 * std::pow(128.0, frac);
    out[size_t(2 * i)] = Real(std::sin(freq * lt));
    out[size_t(2 * i + 1)] = Real(std::cos(freq * lt));
  }
  return out;
}

template <typename Real>
struct DenoiserParams {
  DiffusionConfig cfg;
  Tensor<Real> w1, b1;  // (d_latent + n_time_features, h)
  Tensor<Real> w2, b2;  // (h, h)
  Tensor<Real> w3, b3;  // (h, h)
  Tensor<Real> w4, b4;  // (h, d_latent)

  static DenoiserParams init(const DiffusionConfig &cfg, Rng &rng) {
    cfg.validate();
    DenoiserParams p;
    p.cfg = cfg;
    const Real s = Real(0.02);
    const int64_t in = cfg.d_latent + cfg.n_time_features;
    const int64_t h = cfg.d_hidden;
    auto mk = [&](Shape shape) {
      auto t = Tensor<Real>::gaussian(rng, shape, s);
      t.node()->requires_grad = true;
      return t;
    };
    p.w1 = mk({in, h});
    p.b1 = Tensor<Real>::zeros({h}, true);
    p.w2 = mk({h, h});
    p.b2 = Tensor<Real>::zeros({h}, true);
    p.w3 = mk({h, h});
    p.b3 = Tensor<Real>::zeros({h}, true);
    p.w4 = mk({h, cfg.d_latent});
    p.b4 = Tensor<Real>::zeros({cfg.d_latent}, true);
    return p;
  }

  NamedParams<Real> named_params() const {
    return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2},
            {"w3", w3}, {"b3", b3}, {"w4", w4}, {"b4", b4}};
  }

  std::vector<Tensor<Real>> trainable_params() const {
    std::vector<Tensor<Real>> out;
    for (auto &[n, t] : named_params())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  uint64_t fingerprint() const { return fingerprint_params(named_params()); }
};

// eps prediction for a batch: z is (B, d), ts has one positive time per row.
template <typename Real>
Tensor<Real> denoiser_forward(const DenoiserParams<Real> &p,
                              const Tensor<Real> &z,
                              const std::vector<double> &ts) {
  const auto &s = z.shape();
  if (s.size() != 2 || s[1] != p.cfg.d_latent)
    throw ShapeError("denoiser_forward: latent batch " + shape_str(s) +
                     " does not match d_latent " +
                     std::to_string(p.cfg.d_latent));
  if (int64_t(ts.size()) != s[0])
    throw ShapeError("denoiser_forward: one time per batch row required");
  const int64_t nf = p.cfg.n_time_features;
  std::vector<Real> feats(size_t(s[0] * nf));
  for (int64_t i = 0; i < s[0]; ++i) {
    auto f = time_features<Real>(ts[size_t(i)], nf);
    std::copy(f.begin(), f.end(), feats.begin() + i * nf);
  }
  auto ft = Tensor<Real>::from({s[0], nf}, std::move(feats), false);
  auto x = concat_cols<Real>({z, ft});
  auto h1 = gelu(add_rowwise(matmul(x, p.w1), p.b1));
  auto h2 = gelu(add_rowwise(matmul(h1, p.w2), p.b2));
  auto h3 = gelu(add_rowwise(matmul(h2, p.w3), p.b3));
  return add_rowwise(matmul(h3, p.w4), p.b4);
}

// z_t = z_0 + t * eps for one standardized latent row; returns (z_t, eps).
template <typename Real>
std::pair<std::vector<Real>, std::vector<Real>> forward_noise(
    const std::vector<Real> &z0, double t, Rng &rng) {
  if (!(t > 0)) throw DomainError("forward_noise: t must be positive");
  std::vector<Real> eps = rng.template gaussian_vector<Real>(z0.size());
  std::vector<Real> zt(z0.size());
  for (size_t i = 0; i < z0.size(); ++i)
    zt[i] = Real(double(z0[i]) + t * double(eps[i]));
  return {std::move(zt), std::move(eps)};
}

// score(z, t) = -eps_hat / t under sigma(t) = t.
template <typename Real>
std::vector<Real> score_from_eps(const std::vector<Real> &eps_hat, double t) {
  if (!(t > 0)) throw DomainError("score_from_eps: t must be positive");
  std::vector<Real> out(eps_hat.size());
  for (size_t i = 0; i < eps_hat.size(); ++i)
    out[i] = Real(-double(eps_hat[i]) / t);
  return out;
}

struct DiffusionHyper {
  double lr = 1e-3;
  int64_t batch_size = 64;
  int max_epochs = 80;
};

struct DiffusionEpochLog {
  int epoch = 0;
  double loss = 0;  // mean squared eps error per element
};

template <typename Real>
struct DiffusionResult {
  DenoiserParams<Real> denoiser;
  LatentStats stats;
  std::vector<DiffusionEpochLog> log;
};

// Denoising score matching: standardize the latents, draw log-uniform times
// and fresh noise per example, regress eps_hat onto eps.
template <typename Real>
DiffusionResult<Real> train_denoiser(
    const std::vector<std::vector<Real>> &latents, const DiffusionConfig &cfg,
    const DiffusionHyper &hyper, Rng &rng) {
  cfg.validate();
  if (hyper.batch_size < 1 || hyper.max_epochs < 1)
    throw ConfigError("train_denoiser: bad hyperparameters");
  if (latents.empty()) throw DataError("train_denoiser: no latents");
  if (int64_t(latents[0].size()) != cfg.d_latent)
    throw DataError("train_denoiser: latent dim " +
                    std::to_string(latents[0].size()) +
                    " does not match config d_latent " +
                    std::to_string(cfg.d_latent));

  DiffusionResult<Real> res;
  res.stats = LatentStats::fit(latents);
  std::vector<std::vector<Real>> z0;
  z0.reserve(latents.size());
  for (const auto &row : latents) z0.push_back(res.stats.standardize(row));

  res.denoiser = DenoiserParams<Real>::init(cfg, rng);
  Adam<Real> opt(Real(hyper.lr));
  opt.add_params(res.denoiser.trainable_params());

  const double log_min = std::log(cfg.sigma_min);
  const double log_max = std::log(cfg.sigma_max);
  const int64_t d = cfg.d_latent;
  const int64_t steps_per_epoch =
      std::max<int64_t>(1, int64_t(latents.size()) / hyper.batch_size);

  for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
    double ep_loss = 0;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      const int64_t B = hyper.batch_size;
      std::vector<Real> zt_flat(size_t(B * d)), eps_flat(size_t(B * d));
      std::vector<double> ts(static_cast<size_t>(B));
      for (int64_t b = 0; b < B; ++b) {
        const auto &row = z0[size_t(rng.uniform_int(z0.size()))];
        const double t = std::exp(rng.uniform(log_min, log_max));
        ts[size_t(b)] = t;
        auto [zt, eps] = forward_noise(row, t, rng);
        std::copy(zt.begin(), zt.end(), zt_flat.begin() + b * d);
        std::copy(eps.begin(), eps.end(), eps_flat.begin() + b * d);
      }
      auto zt_t = Tensor<Real>::from({B, d}, std::move(zt_flat), false);
      auto eps_t = Tensor<Real>::from({B, d}, std::move(eps_flat), false);
      auto err = sub(denoiser_forward(res.denoiser, zt_t, ts), eps_t);
      auto loss = mean_all(mul(err, err));
      const double lv = double(loss.item());
      if (!std::isfinite(lv))
        throw TrainingError("train_denoiser: non-finite loss at epoch " +
                            std::to_string(epoch));
      ep_loss += lv;
      loss.backward();
      opt.step();
    }
    res.log.push_back({epoch, ep_loss / double(steps_per_epoch)});
  }
  return res;
}

// Reverse-time integration grid: geometric from sigma_max down to sigma_min,
// n_sample_steps intervals.
inline std::vector<double> sample_time_grid(const DiffusionConfig &cfg) {
  cfg.validate();
  const int n = cfg.n_sample_steps;
  std::vector<double> grid(size_t(n) + 1);
  const double ratio = cfg.sigma_min / cfg.sigma_max;
  for (int i = 0; i <= n; ++i)
    grid[size_t(i)] = cfg.sigma_max * std::pow(ratio, double(i) / double(n));
  return grid;
}

// Batched denoiser as a plain function so samplers can run against analytic
// closed forms in tests: maps (flat row-major batch, rows, t) to eps_hat.
template <typename Real>
using DenoiserFn = std::function<std::vector<Real>(
    const std::vector<Real> &, int64_t, double)>;

template <typename Real>
DenoiserFn<Real> denoiser_as_fn(const DenoiserParams<Real> &p) {
  return [&p](const std::vector<Real> &flat, int64_t rows, double t) {
    auto z = Tensor<Real>::from({rows, p.cfg.d_latent},
                                std::vector<Real>(flat), false);
    std::vector<double> ts(size_t(rows), t);
    return denoiser_forward(p, z, ts).values();
  };
}

// Integrates n chains of the reverse process in standardized coordinates.
// sde_euler: dz = -2 t * score dt + sqrt(2 t) dw (reverse-time VE SDE);
// ode_euler: dz = -t * score dt (probability flow, no noise). dt < 0 on this
// grid so the noise term uses |dt|.
template <typename Real>
std::vector<std::vector<Real>> sample_standardized_latents(
    const DenoiserFn<Real> &denoiser, const DiffusionConfig &cfg, int64_t n,
    Rng &rng) {
  cfg.validate();
  if (n < 1) throw ContractError("sample_latents: need n >= 1");
  const int64_t d = cfg.d_latent;
  const auto grid = sample_time_grid(cfg);

  std::vector<Real> z = rng.template gaussian_vector<Real>(size_t(n * d));
  for (auto &v : z) v = Real(double(v) * cfg.sigma_max);

  for (size_t i = 0; i + 1 < grid.size(); ++i) {
    const double t = grid[i];
    const double dt = grid[i + 1] - grid[i];  // negative
    const auto eps_hat = denoiser(z, n, t);
    if (int64_t(eps_hat.size()) != n * d)
      throw ContractError("sample_latents: denoiser returned wrong size");
    // score = -eps_hat / t, so -2 t * score * dt = 2 * eps_hat * dt.
    const double drift_coeff =
        (cfg.sampler == SamplerKind::kSdeEuler ? 2.0 : 1.0) * dt;
    const double noise_coeff =
        cfg.sampler == SamplerKind::kSdeEuler ? std::sqrt(2.0 * t * -dt) : 0.0;
    for (size_t j = 0; j < z.size(); ++j) {
      double v = double(z[j]) + drift_coeff * double(eps_hat[j]);
      if (noise_coeff != 0.0) v += noise_coeff * rng.gaussian();
      z[j] = Real(v);
    }
  }

  std::vector<std::vector<Real>> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    out[size_t(i)].assign(z.begin() + i * d, z.begin() + (i + 1) * d);
    for (Real v : out[size_t(i)])
      if (!std::isfinite(double(v)))
        throw GenerationError("sample_latents: non-finite sample");
  }
  return out;
}

// Full sampling path: run in standardized space, then map back to raw latent
// coordinates.
template <typename Real>
std::vector<std::vector<Real>> sample_latents(const DenoiserParams<Real> &p,
                                              const LatentStats &stats,
                                              int64_t n, Rng &rng) {
  auto fn = denoiser_as_fn(p);
  auto std_rows = sample_standardized_latents<Real>(fn, p.cfg, n, rng);
  for (auto &row : std_rows) row = stats.destandardize(row);
  return std_rows;
}

// ---- latent file format ----------------------------------------------------
// Two little-endian u64 (count, dim) then count*dim little-endian f32 values.

namespace detail {

inline void put_u64_le(std::string &out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64_le(const std::string &s, size_t at) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= uint64_t(uint8_t(s[at + size_t(i)])) << (8 * i);
  return v;
}

}  // namespace detail

template <typename Real>
void save_latents(const std::string &path,
                  const std::vector<std::vector<Real>> &latents) {
  const uint64_t count = latents.size();
  const uint64_t dim = count > 0 ? latents[0].size() : 0;
  std::string buf;
  buf.reserve(16 + size_t(count * dim) * 4);
  detail::put_u64_le(buf, count);
  detail::put_u64_le(buf, dim);
  for (const auto &row : latents) {
    if (row.size() != dim) throw DataError("save_latents: ragged rows");
    for (Real v : row) {
      const float f = float(v);
      uint32_t u;
      std::memcpy(&u, &f, 4);
      for (int b = 0; b < 4; ++b) buf.push_back(char((u >> (8 * b)) & 0xff));
    }
  }
  write_file(path, buf);
}

template <typename Real>
std::vector<std::vector<Real>> load_latents(const std::string &path) {
  const std::string buf = read_file(path);
  if (buf.size() < 16)
    throw IoError("load_latents: " + path + " is too short for a header");
  const uint64_t count = detail::get_u64_le(buf, 0);
  const uint64_t dim = detail::get_u64_le(buf, 8);
  if (buf.size() != 16 + count * dim * 4)
    throw IoError("load_latents: " + path + " has " +
                  std::to_string(buf.size()) + " bytes, header implies " +
                  std::to_string(16 + count * dim * 4));
  std::vector<std::vector<Real>> out(static_cast<size_t>(count));
  size_t at = 16;
  for (uint64_t i = 0; i < count; ++i) {
    out[size_t(i)].resize(size_t(dim));
    for (uint64_t j = 0; j < dim; ++j, at += 4) {
      uint32_t u = 0;
      for (int b = 0; b < 4; ++b)
        u |= uint32_t(uint8_t(buf[at + size_t(b)])) << (8 * b);
      float f;
      std::memcpy(&f, &u, 4);
      out[size_t(i)][size_t(j)] = Real(f);
    }
  }
  return out;
}

}  // namespace difflm
