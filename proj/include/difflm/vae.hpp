#pragma once

// Variational autoencoder over serialized records with a frozen decoder.
// Only the encoder and the injector train; the decoder is steered through
// injected conditioning and must come back bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "difflm/adam.hpp"
#include "difflm/data.hpp"
#include "difflm/error.hpp"
#include "difflm/injection.hpp"
#include "difflm/lm.hpp"
#include "difflm/rng.hpp"
#include "difflm/tensor.hpp"

namespace difflm {

template <typename Real>
struct LatentGaussian {
  Tensor<Real> mu;       // (B, d)
  Tensor<Real> log_var;  // (B, d)
};

// Encoder head output carries [mu | log_var] side by side.
template <typename Real>
LatentGaussian<Real> split_gaussian(const Tensor<Real> &pooled) {
  const auto &s = pooled.shape();
  if (s.size() != 2 || s[1] % 2 != 0)
    throw ShapeError("split_gaussian: want (B, 2d), got " + shape_str(s));
  const int64_t d = s[1] / 2;
  return {slice_cols(pooled, 0, d), slice_cols(pooled, d, 2 * d)};
}

// z = mu + sigma * eps with eps ~ N(0, I). eps enters as a constant, so
// gradients flow to mu (identity) and log_var (0.5 * sigma * eps).
template <typename Real>
Tensor<Real> reparameterize(const LatentGaussian<Real> &g, Rng &rng) {
  auto eps = Tensor<Real>::from(
      g.mu.shape(),
      rng.template gaussian_vector<Real>(g.mu.values().size()), false);
  return add(g.mu, mul(exp(scale(g.log_var, Real(0.5))), eps));
}

// Elementwise KL contributions, shape (B, d): 0.5 * (mu^2 + sigma^2 - 1 -
// log sigma^2). Each entry is nonnegative; summing gives the total KL.
template <typename Real>
Tensor<Real> kl_terms(const LatentGaussian<Real> &g) {
  auto var = exp(g.log_var);
  auto term = sub(add(mul(g.mu, g.mu), var),
                  add_scalar(g.log_var, Real(1)));
  return scale(term, Real(0.5));
}

// KL(N(mu, diag(sigma^2)) || N(0, I)) summed over every element of the batch.
template <typename Real>
Tensor<Real> kl_to_standard_normal(const LatentGaussian<Real> &g) {
  return sum_all(kl_terms(g));
}

enum class BetaMode { kConstant, kDecreasing, kCyclical };

inline const char *beta_mode_name(BetaMode m) {
  switch (m) {
    case BetaMode::kConstant: return "constant";
    case BetaMode::kDecreasing: return "decreasing";
    case BetaMode::kCyclical: return "cyclical";
  }
  return "unknown";
}

inline BetaMode beta_mode_from_name(const std::string &s) {
  if (s == "constant") return BetaMode::kConstant;
  if (s == "decreasing") return BetaMode::kDecreasing;
  if (s == "cyclical") return BetaMode::kCyclical;
  throw ConfigError("unknown beta mode '" + s + "'");
}

struct BetaSchedule {
  BetaMode mode = BetaMode::kDecreasing;
  double beta_max = 0.1;
  double beta_min = 0.001;
  int patience = 3;       // epochs without improvement before a decay
  double decay = 0.5;
  double rel_improve = 5e-3;  // relative val-rec gain that counts as progress
  int cycle_period = 10;  // cyclical only
  double cycle_peak = 0.2;

  void validate() const {
    if (beta_max <= 0 || beta_min <= 0 || beta_min > beta_max)
      throw ConfigError("beta schedule: need 0 < beta_min <= beta_max");
    if (patience < 1 || decay <= 0 || decay >= 1)
      throw ConfigError("beta schedule: need patience >= 1, 0 < decay < 1");
    if (cycle_period < 1 || cycle_peak <= 0)
      throw ConfigError("beta schedule: bad cycle parameters");
  }
};

// Beta for the upcoming epoch. Decreasing mode walks the validation history:
// the first entry sets the baseline (and counts as one stale epoch), each
// later entry must beat the best by rel_improve to reset the counter, and
// every `patience` consecutive stale epochs trigger one decay.
inline double beta_step(const BetaSchedule &s, int epoch,
                        const std::vector<double> &val_rec_history) {
  s.validate();
  switch (s.mode) {
    case BetaMode::kConstant:
      return s.beta_max;
    case BetaMode::kCyclical:
      return s.cycle_peak *
             double(epoch % s.cycle_period) / double(s.cycle_period);
    case BetaMode::kDecreasing: {
      if (val_rec_history.empty()) return s.beta_max;
      double best = val_rec_history[0];
      int stale = 0, decays = 0;
      for (double v : val_rec_history) {
        if (v < best * (1.0 - s.rel_improve)) {
          best = v;
          stale = 0;
        } else {
          if (++stale == s.patience) {
            ++decays;
            stale = 0;
          }
        }
      }
      double beta = s.beta_max;
      for (int i = 0; i < decays; ++i) beta *= s.decay;
      return std::max(s.beta_min, beta);
    }
  }
  throw ConfigError("beta schedule: bad mode");
}

struct VaeHyper {
  double lr = 1e-3;
  int64_t batch_size = 16;
  int max_epochs = 24;
  int stop_patience = 10;
  // Free-bits floor in nats per latent dimension: dims whose batch-mean KL
  // sits below this stop receiving KL gradient, which keeps the latent
  // channel open against a strong frozen decoder. 0 restores the plain ELBO.
  double free_bits = 0.5;
};

struct VaeEpochLog {
  int epoch = 0;
  double beta = 0;
  double train_rec = 0;  // mean NLL per target token
  double train_kl = 0;   // mean KL per record
  double val_rec = 0;
  double val_kl = 0;
};

template <typename Real>
struct VaeResult {
  EncoderParams<Real> encoder;
  InjectorParams<Real> injector;
  std::vector<VaeEpochLog> log;
  double best_val_rec = 0;
  int best_epoch = -1;
};

namespace detail {

template <typename Real>
std::vector<std::vector<Real>> snapshot_values(const NamedParams<Real> &ps) {
  std::vector<std::vector<Real>> out;
  out.reserve(ps.size());
  for (auto &[n, t] : ps) out.push_back(t.values());
  return out;
}

template <typename Real>
void restore_values(const NamedParams<Real> &ps,
                    const std::vector<std::vector<Real>> &snap) {
  if (ps.size() != snap.size())
    throw ContractError("restore_values: snapshot size mismatch");
  for (size_t i = 0; i < ps.size(); ++i) {
    Tensor<Real> t = ps[i].second;  // shared handle, storage is mutable
    t.values_mut() = snap[i];
  }
}

// Serialize and tokenize records; rejects rows that do not fit the decoder
// window since a truncated target could never be reconstructed.
template <typename Real>
std::vector<TokenSequence> tokenize_records(const std::vector<Record> &recs,
                                            const TableSchema &schema,
                                            const LmParams<Real> &decoder,
                                            int64_t prefix_len) {
  const int64_t budget = decoder.cfg.max_seq_len - prefix_len;
  std::vector<TokenSequence> out;
  out.reserve(recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    auto toks = encode_text(to_canonical_json(recs[i], schema));
    if (toks.length() > budget)
      throw DataError("record " + std::to_string(i) + " needs " +
                      std::to_string(toks.length()) +
                      " tokens but the decoder window allows " +
                      std::to_string(budget));
    out.push_back(std::move(toks));
  }
  return out;
}

}  // namespace detail

// Posterior for one tokenized sequence.
template <typename Real>
LatentGaussian<Real> encode_posterior(const EncoderParams<Real> &enc,
                                      const TokenSequence &toks) {
  return split_gaussian(encoder_forward(enc, toks));
}

// Trains encoder + injector against a frozen decoder. Loss per batch is
// mean-per-token reconstruction NLL plus beta times mean-per-record KL,
// with the free-bits floor applied per latent dimension. Logged KL values
// are the true unclamped KL. Returns the parameters from the best
// validation epoch.
template <typename Real>
VaeResult<Real> train_vae(const std::vector<Record> &train,
                          const std::vector<Record> &val,
                          const TableSchema &schema,
                          const LmParams<Real> &decoder,
                          const TransformerConfig &encoder_cfg,
                          const InjectorConfig &injector_cfg,
                          const BetaSchedule &schedule, const VaeHyper &hyper,
                          Rng &rng) {
  if (!decoder.frozen)
    throw ContractError("train_vae: decoder must be frozen");
  if (train.empty() || val.empty())
    throw DataError("train_vae: empty train or validation set");
  if (hyper.max_epochs < 1 || hyper.batch_size < 1 || hyper.stop_patience < 1 ||
      hyper.free_bits < 0)
    throw ConfigError("train_vae: bad hyperparameters");
  schedule.validate();
  const uint64_t decoder_fp = decoder.fingerprint();
  const int64_t prefix =
      injector_cfg.method == InjectionMethod::kSoftPrompt ? injector_cfg.k : 0;
  auto train_toks = detail::tokenize_records(train, schema, decoder, prefix);
  auto val_toks = detail::tokenize_records(val, schema, decoder, prefix);

  VaeResult<Real> res;
  res.encoder = EncoderParams<Real>::init(encoder_cfg,
                                          2 * injector_cfg.d_latent, rng);
  res.injector = InjectorParams<Real>::init(injector_cfg, rng);

  Adam<Real> opt(Real(hyper.lr));
  opt.add_params(res.encoder.trainable_params());
  opt.add_params(res.injector.trainable_params());

  auto all_params = res.encoder.named_params();
  for (auto &p : res.injector.named_params()) all_params.push_back(p);

  std::vector<double> val_rec_history;
  std::vector<std::vector<Real>> best_snapshot;
  double best_val = 0;
  int best_epoch = -1;

  std::vector<size_t> order(train_toks.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
    const double beta = beta_step(schedule, epoch, val_rec_history);
    rng.shuffle(order);

    double ep_nll = 0, ep_terms = 0, ep_kl = 0;
    for (size_t start = 0; start < order.size();
         start += size_t(hyper.batch_size)) {
      const size_t stop =
          std::min(order.size(), start + size_t(hyper.batch_size));
      std::vector<Tensor<Real>> nlls, kls;
      double batch_terms = 0;
      for (size_t bi = start; bi < stop; ++bi) {
        const auto &toks = train_toks[order[bi]];
        auto g = encode_posterior(res.encoder, toks);
        auto z = reparameterize(g, rng);
        auto cond = make_conditioning(res.injector, z);
        auto [nll, terms] = decoder_nll_sum(decoder, toks, &cond);
        nlls.push_back(nll);
        kls.push_back(kl_terms(g));
        batch_terms += double(terms);
      }
      Tensor<Real> nll_sum = nlls[0], kl_sum = kls[0];
      for (size_t i = 1; i < nlls.size(); ++i) {
        nll_sum = add(nll_sum, nlls[i]);
        kl_sum = add(kl_sum, kls[i]);
      }
      const Real inv_terms = Real(1.0 / batch_terms);
      const Real inv_b = Real(1.0 / double(stop - start));
      // kl_sum is (1, d); the free-bits floor applies per dimension to the
      // batch-mean KL before the beta weight.
      auto kl_mean = scale(kl_sum, inv_b);
      auto kl_obj = sum_all(clamp_min(kl_mean, Real(hyper.free_bits)));
      auto loss = add(scale(nll_sum, inv_terms), scale(kl_obj, Real(beta)));
      if (!std::isfinite(double(loss.item())))
        throw TrainingError("train_vae: non-finite loss at epoch " +
                            std::to_string(epoch));
      loss.backward();
      opt.step();
      ep_nll += double(nll_sum.item());
      ep_terms += batch_terms;
      ep_kl += double(sum_all(kl_sum).item());
    }

    // Validation uses the posterior mean, no sampling.
    double v_nll = 0, v_terms = 0, v_kl = 0;
    for (const auto &toks : val_toks) {
      auto g = encode_posterior(res.encoder, toks);
      auto cond = make_conditioning(res.injector, g.mu);
      auto [nll, terms] = decoder_nll_sum(decoder, toks, &cond);
      v_nll += double(nll.item());
      v_terms += double(terms);
      v_kl += double(kl_to_standard_normal(g).item());
    }

    VaeEpochLog el;
    el.epoch = epoch;
    el.beta = beta;
    el.train_rec = ep_nll / ep_terms;
    el.train_kl = ep_kl / double(train_toks.size());
    el.val_rec = v_nll / v_terms;
    el.val_kl = v_kl / double(val_toks.size());
    res.log.push_back(el);
    val_rec_history.push_back(el.val_rec);

    if (best_epoch < 0 || el.val_rec < best_val) {
      best_val = el.val_rec;
      best_epoch = epoch;
      best_snapshot = detail::snapshot_values(all_params);
    }
    if (epoch - best_epoch >= hyper.stop_patience) break;
  }

  detail::restore_values(all_params, best_snapshot);
  res.best_val_rec = best_val;
  res.best_epoch = best_epoch;

  if (decoder.fingerprint() != decoder_fp)
    throw ContractError("train_vae: frozen decoder changed during training");
  return res;
}

// Posterior means for a dataset, row-aligned with the input.
template <typename Real>
std::vector<std::vector<Real>> encode_dataset(
    const EncoderParams<Real> &enc, const std::vector<Record> &records,
    const TableSchema &schema) {
  std::vector<std::vector<Real>> out;
  out.reserve(records.size());
  for (const auto &r : records) {
    auto toks = encode_text(to_canonical_json(r, schema));
    auto g = encode_posterior(enc, toks);
    out.push_back(g.mu.values());
  }
  return out;
}

// Fraction of records whose greedy reconstruction from the posterior mean
// parses back into a valid record.
template <typename Real>
double reconstruction_parse_rate(const LmParams<Real> &decoder,
                                 const EncoderParams<Real> &enc,
                                 const InjectorParams<Real> &inj,
                                 const std::vector<Record> &records,
                                 const TableSchema &schema) {
  if (records.empty()) return 0;
  size_t ok = 0;
  for (const auto &r : records) {
    auto toks = encode_text(to_canonical_json(r, schema));
    auto g = encode_posterior(enc, toks);
    auto cond = make_conditioning(inj, g.mu);
    auto dec = greedy_decode(decoder, &cond, decoder.cfg.max_seq_len);
    if (parse_candidate(decode_tokens(dec.tokens), schema).accepted()) ++ok;
  }
  return double(ok) / double(records.size());
}

}  // namespace difflm
