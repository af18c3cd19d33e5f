#pragma once

// Byte-level transformer language models.
//
// Two graph-building forwards share one implementation: a causal decoder that
// can be steered by an injected latent (soft prefix tokens, a broadcast
// embedding offset, or per-layer key/value memory slots) and a bidirectional
// encoder pooled into a fixed-width vector. Generation runs on a separate
// incremental path with per-layer KV caches; it never builds autodiff graphs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "difflm/adam.hpp"
#include "difflm/data.hpp"
#include "difflm/error.hpp"
#include "difflm/rng.hpp"
#include "difflm/tensor.hpp"

namespace difflm {

struct TransformerConfig {
  int64_t vocab = Tokens::kVocab;
  int64_t d_model = 128;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t d_ff = 512;
  int64_t max_seq_len = 256;
  bool causal = true;

  int64_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (vocab < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
        max_seq_len < 2)
      throw ConfigError("transformer: all dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("transformer: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
  }
};

// FNV-1a over the float32 little-endian image of all parameters, in listing
// order. Stable across Real instantiations because hashing always casts to
// f32 (which is also the checkpoint storage type).
inline uint64_t fnv1a64(const unsigned char *data, size_t n, uint64_t h) {
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

template <typename Real>
std::vector<unsigned char> to_f32_bytes(const std::vector<Real> &v) {
  std::vector<unsigned char> out(v.size() * 4);
  for (size_t i = 0; i < v.size(); ++i) {
    const float f = static_cast<float>(v[i]);
    unsigned char b[4];
    std::memcpy(b, &f, 4);
    // Force little-endian byte order regardless of host.
    const uint32_t u = static_cast<uint32_t>(b[0]) |
                       (static_cast<uint32_t>(b[1]) << 8) |
                       (static_cast<uint32_t>(b[2]) << 16) |
                       (static_cast<uint32_t>(b[3]) << 24);
    out[i * 4 + 0] = static_cast<unsigned char>(u & 0xff);
    out[i * 4 + 1] = static_cast<unsigned char>((u >> 8) & 0xff);
    out[i * 4 + 2] = static_cast<unsigned char>((u >> 16) & 0xff);
    out[i * 4 + 3] = static_cast<unsigned char>((u >> 24) & 0xff);
  }
  return out;
}

template <typename Real>
using NamedParams = std::vector<std::pair<std::string, Tensor<Real>>>;

template <typename Real>
uint64_t fingerprint_params(const NamedParams<Real> &params) {
  uint64_t h = 14695981039346656037ull;
  for (const auto &[name, t] : params) {
    h = fnv1a64(reinterpret_cast<const unsigned char *>(name.data()),
                name.size(), h);
    const auto bytes = to_f32_bytes(t.values());
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return h;
}

inline std::string fingerprint_hex(uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

template <typename Real>
struct LmParams {
  TransformerConfig cfg;

  Tensor<Real> tok_emb;  // (V, d)
  Tensor<Real> pos_emb;  // (max_seq_len, d)
  struct Layer {
    Tensor<Real> ln1_g, ln1_b;
    Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<Real> ln2_g, ln2_b;
    Tensor<Real> w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  Tensor<Real> lnf_g, lnf_b;
  Tensor<Real> head_w;  // (d, V)
  Tensor<Real> head_b;  // (V)
  bool frozen = false;

  static LmParams init(const TransformerConfig &cfg, Rng &rng) {
    cfg.validate();
    LmParams p;
    p.cfg = cfg;
    const Real std0 = Real(0.02);
    // Residual output projections start smaller, scaled down with depth.
    const Real std_res =
        Real(0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers)));
    const int64_t d = cfg.d_model;
    auto randn = [&rng](Shape s, Real sd) {
      auto t = Tensor<Real>::gaussian(rng, std::move(s), sd);
      t.node()->requires_grad = true;
      return t;
    };
    auto zeros = [](Shape s) { return Tensor<Real>::zeros(std::move(s), true); };
    auto ones = [](Shape s) {
      return Tensor<Real>::full(std::move(s), Real(1), true);
    };
    p.tok_emb = randn({cfg.vocab, d}, std0);
    p.pos_emb = randn({cfg.max_seq_len, d}, std0);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      Layer L;
      L.ln1_g = ones({d});
      L.ln1_b = zeros({d});
      L.wq = randn({d, d}, std0);
      L.bq = zeros({d});
      L.wk = randn({d, d}, std0);
      L.bk = zeros({d});
      L.wv = randn({d, d}, std0);
      L.bv = zeros({d});
      L.wo = randn({d, d}, std_res);
      L.bo = zeros({d});
      L.ln2_g = ones({d});
      L.ln2_b = zeros({d});
      L.w1 = randn({d, cfg.d_ff}, std0);
      L.b1 = zeros({cfg.d_ff});
      L.w2 = randn({cfg.d_ff, d}, std_res);
      L.b2 = zeros({d});
      p.layers.push_back(std::move(L));
    }
    p.lnf_g = ones({d});
    p.lnf_b = zeros({d});
    p.head_w = randn({d, cfg.vocab}, std0);
    p.head_b = zeros({cfg.vocab});
    return p;
  }

  NamedParams<Real> named_params() const {
    NamedParams<Real> out;
    out.push_back({"tok_emb", tok_emb});
    out.push_back({"pos_emb", pos_emb});
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      const Layer &L = layers[l];
      out.push_back({pre + "ln1_g", L.ln1_g});
      out.push_back({pre + "ln1_b", L.ln1_b});
      out.push_back({pre + "wq", L.wq});
      out.push_back({pre + "bq", L.bq});
      out.push_back({pre + "wk", L.wk});
      out.push_back({pre + "bk", L.bk});
      out.push_back({pre + "wv", L.wv});
      out.push_back({pre + "bv", L.bv});
      out.push_back({pre + "wo", L.wo});
      out.push_back({pre + "bo", L.bo});
      out.push_back({pre + "ln2_g", L.ln2_g});
      out.push_back({pre + "ln2_b", L.ln2_b});
      out.push_back({pre + "w1", L.w1});
      out.push_back({pre + "b1", L.b1});
      out.push_back({pre + "w2", L.w2});
      out.push_back({pre + "b2", L.b2});
    }
    out.push_back({"lnf_g", lnf_g});
    out.push_back({"lnf_b", lnf_b});
    out.push_back({"head_w", head_w});
    out.push_back({"head_b", head_b});
    return out;
  }

  std::vector<Tensor<Real>> trainable_params() const {
    std::vector<Tensor<Real>> out;
    for (auto &[n, t] : named_params())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  // Marks every parameter constant. Training code built on the autodiff
  // engine then never accumulates into them, so a frozen model's fingerprint
  // cannot drift.
  void freeze() {
    for (auto &[n, t] : named_params()) t.node()->requires_grad = false;
    frozen = true;
  }

  uint64_t fingerprint() const { return fingerprint_params(named_params()); }
};

// Latent conditioning for one sequence. At most one member group is active;
// all tensors live in the caller's graph so gradients flow back to whatever
// produced them.
template <typename Real>
struct Conditioning {
  Tensor<Real> prefix;   // (k, d) soft tokens occupying positions 0..k-1
  Tensor<Real> emb_add;  // (1, d) offset added to every token embedding
  // Per layer one (key, value) memory slot, each (1, d), prepended to the
  // attention keys/values without a positional embedding.
  std::vector<std::pair<Tensor<Real>, Tensor<Real>>> kv_mem;
  // Test hook: hide the memory slot behind the attention mask; logits must
  // then equal an unconditioned forward.
  bool mask_memory = false;

  int64_t prefix_len() const { return prefix.defined() ? prefix.shape()[0] : 0; }
  bool has_kv() const { return !kv_mem.empty(); }
};

namespace detail {

// Attention score mask (rows: queries, cols: memory slot + keys).
// 0 where visible, -1e9 where hidden; exp() of masked scores underflows to 0
// so hidden positions carry exactly zero weight.
template <typename Real>
Tensor<Real> attention_mask(int64_t n_q, int64_t n_k, bool causal,
                            int64_t n_mem, bool mask_memory,
                            int64_t n_pad_keys) {
  const int64_t cols = n_mem + n_k;
  std::vector<Real> m(static_cast<size_t>(n_q * cols), Real(0));
  const Real kHide = Real(-1e9);
  for (int64_t q = 0; q < n_q; ++q) {
    for (int64_t c = 0; c < cols; ++c) {
      bool hidden = false;
      if (c < n_mem) {
        hidden = mask_memory;
      } else {
        const int64_t key = c - n_mem;
        if (causal && key > q) hidden = true;
        if (key >= n_k - n_pad_keys) hidden = true;  // PAD keys
      }
      if (hidden) m[q * cols + c] = kHide;
    }
  }
  return Tensor<Real>::from({n_q, cols}, std::move(m), false);
}

}  // namespace detail

// Transformer over embedded rows. `x` is (S, d); returns (S, d) after the
// final layer norm. Factored out so decoder and encoder share one body.
template <typename Real>
Tensor<Real> transformer_trunk(const LmParams<Real> &p, Tensor<Real> x,
                               const Conditioning<Real> *cond,
                               int64_t n_pad_keys = 0) {
  const TransformerConfig &cfg = p.cfg;
  const int64_t S = x.shape()[0];
  const int64_t d = cfg.d_model;
  const int64_t dk = cfg.d_head();
  const bool has_mem = cond && cond->has_kv();
  const int64_t n_mem = has_mem ? 1 : 0;
  const Real inv_sqrt_dk = Real(1) / std::sqrt(static_cast<Real>(dk));

  const Tensor<Real> mask = detail::attention_mask<Real>(
      S, S, cfg.causal, n_mem, cond && cond->mask_memory, n_pad_keys);

  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const auto &L = p.layers[l];
    auto h = layer_norm(x, L.ln1_g, L.ln1_b);
    auto q = add_rowwise(matmul(h, L.wq), L.bq);
    auto k = add_rowwise(matmul(h, L.wk), L.bk);
    auto v = add_rowwise(matmul(h, L.wv), L.bv);
    if (has_mem) {
      k = concat_rows<Real>({cond->kv_mem[l].first, k});
      v = concat_rows<Real>({cond->kv_mem[l].second, v});
    }
    std::vector<Tensor<Real>> heads;
    heads.reserve(cfg.n_heads);
    for (int64_t hh = 0; hh < cfg.n_heads; ++hh) {
      auto qh = slice_cols(q, hh * dk, (hh + 1) * dk);
      auto kh = slice_cols(k, hh * dk, (hh + 1) * dk);
      auto vh = slice_cols(v, hh * dk, (hh + 1) * dk);
      auto scores = scale(matmul(qh, kh, false, true), inv_sqrt_dk);
      auto att = softmax(add(scores, mask), 1);
      heads.push_back(matmul(att, vh));
    }
    auto att_out = add_rowwise(matmul(concat_cols(heads), L.wo), L.bo);
    x = add(x, att_out);
    auto h2 = layer_norm(x, L.ln2_g, L.ln2_b);
    auto ffn = add_rowwise(
        matmul(gelu(add_rowwise(matmul(h2, L.w1), L.b1)), L.w2), L.b2);
    x = add(x, ffn);
  }
  return layer_norm(x, p.lnf_g, p.lnf_b);
}

// Next-token logits for every token position of one sequence: (L, vocab).
// Prefix soft tokens shift real tokens to positions k..k+L-1 and are excluded
// from the output rows. pos_offset shifts every position id by a constant;
// pretraining randomizes it so the frozen decoder stays usable under the
// position shift a soft prefix introduces later.
template <typename Real>
Tensor<Real> decoder_forward(const LmParams<Real> &p,
                             const std::vector<int32_t> &tokens,
                             const Conditioning<Real> *cond = nullptr,
                             int64_t pos_offset = 0) {
  if (!p.cfg.causal)
    throw ContractError("decoder_forward: config is not causal");
  const int64_t L = static_cast<int64_t>(tokens.size());
  if (L < 1) throw ContractError("decoder_forward: empty sequence");
  if (pos_offset < 0) throw ContractError("decoder_forward: negative offset");
  const int64_t k = cond ? cond->prefix_len() : 0;
  if (pos_offset + k + L > p.cfg.max_seq_len)
    throw ContractError("decoder_forward: sequence of " + std::to_string(L) +
                        " tokens plus prefix " + std::to_string(k) +
                        " at offset " + std::to_string(pos_offset) +
                        " exceeds max_seq_len " +
                        std::to_string(p.cfg.max_seq_len));

  std::vector<int32_t> pos(L);
  for (int64_t i = 0; i < L; ++i)
    pos[i] = static_cast<int32_t>(pos_offset + k + i);
  auto x = add(embedding_rows(p.tok_emb, tokens), embedding_rows(p.pos_emb, pos));
  if (cond && cond->emb_add.defined()) x = add_rowwise(x, cond->emb_add);
  if (k > 0) {
    std::vector<int32_t> ppos(k);
    for (int64_t i = 0; i < k; ++i)
      ppos[i] = static_cast<int32_t>(pos_offset + i);
    auto prefix = add(cond->prefix, embedding_rows(p.pos_emb, ppos));
    x = concat_rows<Real>({prefix, x});
  }
  auto hidden = transformer_trunk(p, x, cond);
  if (k > 0) hidden = slice_rows(hidden, k, k + L);
  return add_rowwise(matmul(hidden, p.head_w), p.head_b);
}

// Summed next-token negative log likelihood of a sequence under the decoder,
// plus the number of prediction terms (length - 1).
template <typename Real>
std::pair<Tensor<Real>, int64_t> decoder_nll_sum(
    const LmParams<Real> &p, const TokenSequence &seq,
    const Conditioning<Real> *cond = nullptr, int64_t pos_offset = 0) {
  const int64_t L = seq.length();
  if (L < 2)
    throw ContractError("decoder_nll_sum: need at least 2 tokens");
  auto logits = decoder_forward(p, seq.ids, cond, pos_offset);
  auto pred = slice_rows(logits, 0, L - 1);
  std::vector<int32_t> targets(seq.ids.begin() + 1, seq.ids.end());
  return {sum_all(cross_entropy_logits(pred, targets)), L - 1};
}

// Bidirectional encoder with mean pooling and a linear head. PAD positions
// (only legal as a suffix) are hidden from attention keys and excluded from
// the pooled mean, so padding never changes the output.
template <typename Real>
struct EncoderParams {
  LmParams<Real> backbone;
  Tensor<Real> head_w;  // (d, out)
  Tensor<Real> head_b;  // (out)

  static EncoderParams init(const TransformerConfig &cfg, int64_t out_dim,
                            Rng &rng) {
    if (cfg.causal)
      throw ConfigError("encoder: config must not be causal");
    EncoderParams e;
    e.backbone = LmParams<Real>::init(cfg, rng);
    e.head_w = Tensor<Real>::gaussian(rng, {cfg.d_model, out_dim}, Real(0.02));
    e.head_w.node()->requires_grad = true;
    e.head_b = Tensor<Real>::zeros({out_dim}, true);
    return e;
  }

  NamedParams<Real> named_params() const {
    NamedParams<Real> out = backbone.named_params();
    out.push_back({"pool_head_w", head_w});
    out.push_back({"pool_head_b", head_b});
    return out;
  }

  std::vector<Tensor<Real>> trainable_params() const {
    std::vector<Tensor<Real>> out;
    for (auto &[n, t] : named_params())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  uint64_t fingerprint() const { return fingerprint_params(named_params()); }
};

template <typename Real>
Tensor<Real> encoder_forward(const EncoderParams<Real> &enc,
                             const TokenSequence &seq) {
  const LmParams<Real> &p = enc.backbone;
  const int64_t L = seq.length();
  if (L < 1) throw ContractError("encoder_forward: empty sequence");
  if (L > p.cfg.max_seq_len)
    throw ContractError("encoder_forward: sequence of " + std::to_string(L) +
                        " tokens exceeds max_seq_len " +
                        std::to_string(p.cfg.max_seq_len));
  int64_t n_valid = 0;
  while (n_valid < L && seq.ids[n_valid] != Tokens::kPad) ++n_valid;
  for (int64_t i = n_valid; i < L; ++i)
    if (seq.ids[i] != Tokens::kPad)
      throw ContractError("encoder_forward: PAD only legal as a suffix");
  if (n_valid == 0) throw ContractError("encoder_forward: all-PAD sequence");

  std::vector<int32_t> pos(L);
  for (int64_t i = 0; i < L; ++i) pos[i] = static_cast<int32_t>(i);
  auto x = add(embedding_rows(p.tok_emb, seq.ids),
               embedding_rows(p.pos_emb, pos));
  auto hidden = transformer_trunk<Real>(p, x, nullptr, L - n_valid);
  auto pooled = scale(sum_axis(slice_rows(hidden, 0, n_valid), 0),
                      Real(1) / static_cast<Real>(n_valid));
  return add_rowwise(matmul(pooled, enc.head_w), enc.head_b);  // (1, out)
}

// ---- incremental generation ---------------------------------------------------

// Inference-only decoder pass over per-layer KV caches. Numerically this is
// the same network as decoder_forward; consistency between the two paths is
// covered by tests.
template <typename Real>
class DecoderIncremental {
 public:
  explicit DecoderIncremental(const LmParams<Real> &p) : p_(p) {
    caches_.resize(p.cfg.n_layers);
  }

  // Installs conditioning and replays prefix soft tokens through the caches.
  void reset(const Conditioning<Real> *cond) {
    const auto &cfg = p_.cfg;
    for (auto &c : caches_) {
      c.k.clear();
      c.v.clear();
    }
    emb_add_ = nullptr;
    pos_ = 0;
    if (!cond) return;
    if (cond->has_kv()) {
      for (int64_t l = 0; l < cfg.n_layers; ++l) {
        caches_[l].k.insert(caches_[l].k.end(),
                            cond->kv_mem[l].first.values().begin(),
                            cond->kv_mem[l].first.values().end());
        caches_[l].v.insert(caches_[l].v.end(),
                            cond->kv_mem[l].second.values().begin(),
                            cond->kv_mem[l].second.values().end());
      }
    }
    if (cond->emb_add.defined()) emb_add_ = &cond->emb_add.values();
    if (cond->prefix.defined()) {
      const int64_t k = cond->prefix.shape()[0];
      for (int64_t i = 0; i < k; ++i) {
        std::vector<Real> row(cond->prefix.values().begin() + i * cfg.d_model,
                              cond->prefix.values().begin() +
                                  (i + 1) * cfg.d_model);
        add_pos(row, pos_);
        advance(row, nullptr);
        ++pos_;
      }
    }
  }

  // Feeds one token, returns next-token logits (vocab).
  std::vector<Real> step(int32_t token) {
    const auto &cfg = p_.cfg;
    if (pos_ >= cfg.max_seq_len)
      throw GenerationError("decode: exceeded max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    std::vector<Real> x(p_.tok_emb.values().begin() + token * cfg.d_model,
                        p_.tok_emb.values().begin() + (token + 1) * cfg.d_model);
    if (emb_add_)
      for (int64_t i = 0; i < cfg.d_model; ++i) x[i] += (*emb_add_)[i];
    add_pos(x, pos_);
    ++pos_;
    std::vector<Real> logits(cfg.vocab);
    advance(x, &logits);
    return logits;
  }

  int64_t position() const { return pos_; }

 private:
  struct Cache {
    std::vector<Real> k, v;  // rows of d_model
  };

  void add_pos(std::vector<Real> &row, int64_t pos) {
    const Real *pe = p_.pos_emb.values().data() + pos * p_.cfg.d_model;
    for (int64_t i = 0; i < p_.cfg.d_model; ++i) row[i] += pe[i];
  }

  static void vec_linear(const std::vector<Real> &x, const Tensor<Real> &w,
                         const Tensor<Real> &b, std::vector<Real> &out) {
    const int64_t in = w.shape()[0], on = w.shape()[1];
    out.assign(b.values().begin(), b.values().end());
    blas::gemm(false, false, 1, on, in, Real(1), x.data(), w.values().data(),
               Real(1), out.data());
  }

  static void vec_layer_norm(const std::vector<Real> &x, const Tensor<Real> &g,
                             const Tensor<Real> &b, std::vector<Real> &out) {
    const int64_t d = static_cast<int64_t>(x.size());
    Real mean = 0;
    for (Real v : x) mean += v;
    mean /= Real(d);
    Real var = 0;
    for (Real v : x) var += (v - mean) * (v - mean);
    var /= Real(d);
    const Real inv = Real(1) / std::sqrt(var + Real(1e-5));
    out.resize(d);
    for (int64_t i = 0; i < d; ++i)
      out[i] = (x[i] - mean) * inv * g.values()[i] + b.values()[i];
  }

  // Runs one embedded row through all layers, appending to the caches.
  // When `logits` is non-null, also applies the output head.
  void advance(std::vector<Real> &x, std::vector<Real> *logits) {
    const auto &cfg = p_.cfg;
    const int64_t d = cfg.d_model, dk = cfg.d_head();
    const Real inv_sqrt_dk = Real(1) / std::sqrt(static_cast<Real>(dk));
    std::vector<Real> h, q, k, v, att_out(d), scores, ffn1, ffn2;
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      const auto &L = p_.layers[l];
      auto &cache = caches_[l];
      vec_layer_norm(x, L.ln1_g, L.ln1_b, h);
      vec_linear(h, L.wq, L.bq, q);
      vec_linear(h, L.wk, L.bk, k);
      vec_linear(h, L.wv, L.bv, v);
      cache.k.insert(cache.k.end(), k.begin(), k.end());
      cache.v.insert(cache.v.end(), v.begin(), v.end());
      const int64_t rows = static_cast<int64_t>(cache.k.size()) / d;
      for (int64_t hh = 0; hh < cfg.n_heads; ++hh) {
        const int64_t off = hh * dk;
        scores.resize(rows);
        Real mx = -std::numeric_limits<Real>::infinity();
        for (int64_t r = 0; r < rows; ++r) {
          Real s = 0;
          const Real *kr = cache.k.data() + r * d + off;
          for (int64_t i = 0; i < dk; ++i) s += q[off + i] * kr[i];
          s *= inv_sqrt_dk;
          scores[r] = s;
          mx = std::max(mx, s);
        }
        Real denom = 0;
        for (int64_t r = 0; r < rows; ++r) {
          scores[r] = std::exp(scores[r] - mx);
          denom += scores[r];
        }
        const Real inv_denom = Real(1) / denom;
        for (int64_t i = 0; i < dk; ++i) {
          Real acc = 0;
          for (int64_t r = 0; r < rows; ++r)
            acc += scores[r] * cache.v[r * d + off + i];
          att_out[off + i] = acc * inv_denom;
        }
      }
      vec_linear(att_out, L.wo, L.bo, q);  // reuse q as scratch
      for (int64_t i = 0; i < d; ++i) x[i] += q[i];
      vec_layer_norm(x, L.ln2_g, L.ln2_b, h);
      vec_linear(h, L.w1, L.b1, ffn1);
      for (auto &e : ffn1) {
        const Real u = Real(0.7978845608028654) *
                       (e + Real(0.044715) * e * e * e);
        e = Real(0.5) * e * (Real(1) + std::tanh(u));
      }
      vec_linear(ffn1, L.w2, L.b2, ffn2);
      for (int64_t i = 0; i < d; ++i) x[i] += ffn2[i];
    }
    if (logits) {
      vec_layer_norm(x, p_.lnf_g, p_.lnf_b, h);
      vec_linear(h, p_.head_w, p_.head_b, *logits);
    }
  }

  const LmParams<Real> &p_;
  std::vector<Cache> caches_;
  const std::vector<Real> *emb_add_ = nullptr;
  int64_t pos_ = 0;
};

namespace detail {

// PAD and BOS are never legal outputs; EOS terminates. temperature == 0 is
// exact argmax (lowest id wins ties). Nucleus filtering keeps the smallest
// prefix of the probability-sorted vocab reaching top_p.
template <typename Real>
int32_t pick_token(std::vector<Real> logits, double temperature, double top_p,
                   Rng &rng) {
  logits[Tokens::kPad] = -std::numeric_limits<Real>::infinity();
  logits[Tokens::kBos] = -std::numeric_limits<Real>::infinity();
  const int64_t vocab = static_cast<int64_t>(logits.size());
  if (temperature <= 0.0) {
    int32_t best = 0;
    for (int64_t i = 1; i < vocab; ++i)
      if (logits[i] > logits[best]) best = static_cast<int32_t>(i);
    return best;
  }
  Real mx = -std::numeric_limits<Real>::infinity();
  for (Real v : logits) mx = std::max(mx, v);
  std::vector<double> prob(vocab);
  double denom = 0;
  for (int64_t i = 0; i < vocab; ++i) {
    prob[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    denom += prob[i];
  }
  for (auto &p : prob) p /= denom;
  std::vector<int32_t> order(vocab);
  for (int64_t i = 0; i < vocab; ++i) order[i] = static_cast<int32_t>(i);
  std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
    if (prob[a] != prob[b]) return prob[a] > prob[b];
    return a < b;
  });
  double kept = 0;
  size_t cut = 0;
  while (cut < order.size() && kept < top_p) kept += prob[order[cut++]];
  const double u = rng.uniform() * kept;
  double acc = 0;
  for (size_t i = 0; i < cut; ++i) {
    acc += prob[order[i]];
    if (u < acc) return order[i];
  }
  return order[cut - 1];
}

}  // namespace detail

struct DecodeResult {
  TokenSequence tokens;  // BOS ... [EOS]
  bool hit_eos = false;
};

// Autoregressive sampling from BOS under optional conditioning. max_len caps
// the total sequence length including specials and any soft prefix.
template <typename Real>
DecodeResult sample_decode(const LmParams<Real> &p,
                           const Conditioning<Real> *cond, Rng &rng,
                           double temperature, double top_p,
                           int64_t max_len) {
  DecoderIncremental<Real> dec(p);
  dec.reset(cond);
  const int64_t budget = std::min<int64_t>(max_len, p.cfg.max_seq_len);
  DecodeResult out;
  out.tokens.ids.push_back(Tokens::kBos);
  int32_t cur = Tokens::kBos;
  while (dec.position() + 1 < budget) {
    const auto logits = dec.step(cur);
    cur = detail::pick_token(logits, temperature, top_p, rng);
    out.tokens.ids.push_back(cur);
    if (cur == Tokens::kEos) {
      out.hit_eos = true;
      break;
    }
  }
  return out;
}

template <typename Real>
DecodeResult greedy_decode(const LmParams<Real> &p,
                           const Conditioning<Real> *cond, int64_t max_len) {
  Rng unused(0);
  return sample_decode(p, cond, unused, 0.0, 1.0, max_len);
}

// ---- pretraining ----------------------------------------------------------------

struct TrainHyper {
  double lr = 1e-3;
  int64_t batch_size = 16;
  int64_t max_epochs = 10;
  double val_fraction = 0.1;
  // Each training example is placed at a random position offset in
  // [0, max_pos_offset] so a frozen decoder later tolerates the position
  // shift introduced by a soft prefix of up to that length.
  int64_t max_pos_offset = 16;
};

struct EpochLog {
  int64_t epoch = 0;
  double train_loss = 0;  // mean nats/token over the epoch
  double val_loss = 0;
};

template <typename Real>
struct PretrainResult {
  LmParams<Real> params;
  std::vector<EpochLog> log;
  double initial_val_loss = 0;
};

namespace detail {

template <typename Real>
double dataset_nll(const LmParams<Real> &p,
                   const std::vector<TokenSequence> &seqs) {
  double total = 0;
  int64_t terms = 0;
  for (const auto &s : seqs) {
    auto [nll, n] = decoder_nll_sum<Real>(p, s, nullptr);
    total += static_cast<double>(nll.item());
    terms += n;
  }
  return total / static_cast<double>(terms);
}

}  // namespace detail

// Next-token pretraining on a text corpus (one document per string). Returns
// the decoder frozen: downstream stages treat it as a fixed likelihood model.
template <typename Real>
PretrainResult<Real> pretrain_decoder(const std::vector<std::string> &corpus,
                                      const TransformerConfig &cfg,
                                      const TrainHyper &hyper, Rng &rng) {
  if (corpus.empty()) throw TrainingError("pretrain: empty corpus");
  if (hyper.max_pos_offset < 0)
    throw ConfigError("pretrain: max_pos_offset must be non-negative");
  std::vector<TokenSequence> seqs;
  seqs.reserve(corpus.size());
  for (const auto &doc : corpus)
    seqs.push_back(encode_text(doc, cfg.max_seq_len));

  std::vector<size_t> idx(seqs.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  const size_t n_val = std::max<size_t>(
      1, static_cast<size_t>(static_cast<double>(seqs.size()) *
                             hyper.val_fraction));
  if (n_val >= seqs.size())
    throw TrainingError("pretrain: corpus too small for validation split");
  std::vector<TokenSequence> val, train;
  for (size_t i = 0; i < idx.size(); ++i)
    (i < n_val ? val : train).push_back(seqs[idx[i]]);

  PretrainResult<Real> res;
  res.params = LmParams<Real>::init(cfg, rng);
  res.initial_val_loss = detail::dataset_nll(res.params, val);

  Adam<Real> opt(static_cast<Real>(hyper.lr));
  opt.add_params(res.params.trainable_params());

  std::vector<size_t> perm(train.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < hyper.max_epochs; ++epoch) {
    rng.shuffle(perm);
    double epoch_nll = 0;
    int64_t epoch_terms = 0;
    for (size_t start = 0; start < perm.size();
         start += static_cast<size_t>(hyper.batch_size)) {
      const size_t stop =
          std::min(perm.size(), start + static_cast<size_t>(hyper.batch_size));
      std::vector<Tensor<Real>> losses;
      int64_t terms = 0;
      for (size_t i = start; i < stop; ++i) {
        const auto &seq = train[perm[i]];
        const int64_t room =
            std::max<int64_t>(0, cfg.max_seq_len - seq.length());
        const int64_t span = std::min(hyper.max_pos_offset, room);
        const int64_t offset = static_cast<int64_t>(
            rng.uniform_int(static_cast<uint64_t>(span + 1)));
        auto [nll, n] =
            decoder_nll_sum<Real>(res.params, seq, nullptr, offset);
        losses.push_back(std::move(nll));
        terms += n;
      }
      Tensor<Real> total = losses[0];
      for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
      Tensor<Real> loss = scale(total, Real(1) / static_cast<Real>(terms));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw TrainingError("pretrain: non-finite loss at step " +
                            std::to_string(step));
      epoch_nll += lv * static_cast<double>(terms);
      epoch_terms += terms;
      loss.backward();
      opt.step();
      ++step;
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_nll / static_cast<double>(epoch_terms);
    log.val_loss = detail::dataset_nll(res.params, val);
    res.log.push_back(log);
  }
  res.params.freeze();
  return res;
}

}  // namespace difflm
