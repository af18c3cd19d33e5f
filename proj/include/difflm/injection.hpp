#pragma once

// Latent injection: maps a latent vector z into decoder conditioning. Three
// wirings share one 2-layer MLP trunk and differ only in how the output is
// attached to the frozen decoder:
//   soft_prompt:   k soft tokens prepended before BOS (positions 0..k-1)
//   embedding_add: one offset added to every token embedding
//   kv_memory:     per layer one (key, value) slot prepended to attention KV

#include <string>
#include <vector>

#include "difflm/error.hpp"
#include "difflm/lm.hpp"
#include "difflm/tensor.hpp"

namespace difflm {

enum class InjectionMethod { kSoftPrompt, kEmbeddingAdd, kKvMemory };

inline const char *injection_method_name(InjectionMethod m) {
  switch (m) {
    case InjectionMethod::kSoftPrompt: return "soft_prompt";
    case InjectionMethod::kEmbeddingAdd: return "embedding_add";
    case InjectionMethod::kKvMemory: return "kv_memory";
  }
  return "unknown";
}

inline InjectionMethod injection_method_from_name(const std::string &s) {
  if (s == "soft_prompt") return InjectionMethod::kSoftPrompt;
  if (s == "embedding_add") return InjectionMethod::kEmbeddingAdd;
  if (s == "kv_memory") return InjectionMethod::kKvMemory;
  throw ConfigError("unknown injection method '" + s + "'");
}

struct InjectorConfig {
  InjectionMethod method = InjectionMethod::kSoftPrompt;
  int64_t d_latent = 16;
  int64_t k = 8;  // soft prompt length
  int64_t d_model = 128;
  int64_t n_layers = 4;  // decoder depth, needed for kv_memory
  int64_t d_hidden = 512;

  int64_t out_dim() const {
    switch (method) {
      case InjectionMethod::kSoftPrompt: return k * d_model;
      case InjectionMethod::kEmbeddingAdd: return d_model;
      case InjectionMethod::kKvMemory: return n_layers * 2 * d_model;
    }
    throw ConfigError("injector: bad method");
  }

  void validate() const {
    if (d_latent < 1 || d_model < 1 || d_hidden < 1)
      throw ConfigError("injector: dimensions must be positive");
    if (method == InjectionMethod::kSoftPrompt && k < 1)
      throw ConfigError("injector: soft prompt needs k >= 1");
    if (method == InjectionMethod::kKvMemory && n_layers < 1)
      throw ConfigError("injector: kv memory needs n_layers >= 1");
  }
};

template <typename Real>
struct InjectorParams {
  InjectorConfig cfg;
  Tensor<Real> w1, b1;  // (d_latent, d_hidden), (d_hidden)
  Tensor<Real> w2, b2;  // (d_hidden, out_dim), (out_dim)

  static InjectorParams init(const InjectorConfig &cfg, Rng &rng) {
    cfg.validate();
    InjectorParams p;
    p.cfg = cfg;
    const Real std0 = Real(0.02);
    p.w1 = Tensor<Real>::gaussian(rng, {cfg.d_latent, cfg.d_hidden}, std0);
    p.w1.node()->requires_grad = true;
    p.b1 = Tensor<Real>::zeros({cfg.d_hidden}, true);
    p.w2 = Tensor<Real>::gaussian(rng, {cfg.d_hidden, cfg.out_dim()}, std0);
    p.w2.node()->requires_grad = true;
    p.b2 = Tensor<Real>::zeros({cfg.out_dim()}, true);
    return p;
  }

  NamedParams<Real> named_params() const {
    return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
  }

  std::vector<Tensor<Real>> trainable_params() const {
    std::vector<Tensor<Real>> out;
    for (auto &[n, t] : named_params())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  uint64_t fingerprint() const { return fingerprint_params(named_params()); }
};

// MLP trunk: (B, d_latent) -> (B, out_dim), differentiable end to end.
template <typename Real>
Tensor<Real> injector_forward(const InjectorParams<Real> &p,
                              const Tensor<Real> &z) {
  if (z.shape().size() != 2 || z.shape()[1] != p.cfg.d_latent)
    throw ShapeError("injector_forward: latent " + shape_str(z.shape()) +
                     " does not match d_latent " +
                     std::to_string(p.cfg.d_latent));
  auto h = gelu(add_rowwise(matmul(z, p.w1), p.b1));
  return add_rowwise(matmul(h, p.w2), p.b2);
}

// Conditioning for one sequence from one latent row (1, d_latent).
template <typename Real>
Conditioning<Real> make_conditioning(const InjectorParams<Real> &p,
                                     const Tensor<Real> &z_row) {
  auto flat = injector_forward(p, z_row);  // (1, out_dim)
  Conditioning<Real> cond;
  switch (p.cfg.method) {
    case InjectionMethod::kSoftPrompt:
      cond.prefix = reshape(flat, {p.cfg.k, p.cfg.d_model});
      break;
    case InjectionMethod::kEmbeddingAdd:
      cond.emb_add = flat;
      break;
    case InjectionMethod::kKvMemory:
      for (int64_t l = 0; l < p.cfg.n_layers; ++l) {
        const int64_t base = l * 2 * p.cfg.d_model;
        cond.kv_mem.push_back(
            {slice_cols(flat, base, base + p.cfg.d_model),
             slice_cols(flat, base + p.cfg.d_model,
                        base + 2 * p.cfg.d_model)});
      }
      break;
  }
  return cond;
}

}  // namespace difflm
