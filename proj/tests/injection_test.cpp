#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "difflm/injection.hpp"
#include "difflm/lm.hpp"
#include "testutil.hpp"

using namespace difflm;

namespace {

InjectorConfig small_cfg(InjectionMethod m) {
  InjectorConfig c;
  c.method = m;
  c.d_latent = 6;
  c.k = 3;
  c.d_model = 16;
  c.n_layers = 2;
  c.d_hidden = 24;
  return c;
}

TransformerConfig tiny_decoder_cfg() {
  TransformerConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 32;
  c.causal = true;
  return c;
}

TEST(Injection, OutDimPerMethod) {
  EXPECT_EQ(small_cfg(InjectionMethod::kSoftPrompt).out_dim(), 3 * 16);
  EXPECT_EQ(small_cfg(InjectionMethod::kEmbeddingAdd).out_dim(), 16);
  EXPECT_EQ(small_cfg(InjectionMethod::kKvMemory).out_dim(), 2 * 2 * 16);
}

TEST(Injection, MethodNamesRoundTrip) {
  for (auto m : {InjectionMethod::kSoftPrompt, InjectionMethod::kEmbeddingAdd,
                 InjectionMethod::kKvMemory})
    EXPECT_EQ(injection_method_from_name(injection_method_name(m)), m);
  EXPECT_THROW(injection_method_from_name("bogus"), ConfigError);
}

TEST(Injection, ConfigValidation) {
  auto c = small_cfg(InjectionMethod::kSoftPrompt);
  c.k = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_cfg(InjectionMethod::kKvMemory);
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_cfg(InjectionMethod::kEmbeddingAdd);
  c.d_latent = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Injection, ForwardShapeAndBatchRowIndependence) {
  Rng rng(11);
  auto cfg = small_cfg(InjectionMethod::kKvMemory);
  auto p = InjectorParams<double>::init(cfg, rng);
  auto zb = Tensor<double>::gaussian(rng, {4, cfg.d_latent});
  auto out = injector_forward(p, zb);
  ASSERT_EQ(out.shape(), (Shape{4, cfg.out_dim()}));
  // Row i of a batched forward equals the forward of row i alone, up to
  // summation-order noise in the matrix backend.
  for (int64_t i = 0; i < 4; ++i) {
    auto zr = slice_rows(zb, i, i + 1);
    auto one = injector_forward(p, zr);
    for (int64_t j = 0; j < cfg.out_dim(); ++j)
      EXPECT_NEAR(one.values()[size_t(j)],
                  out.values()[size_t(i * cfg.out_dim() + j)], 1e-12);
  }
  auto bad = Tensor<double>::gaussian(rng, {2, cfg.d_latent + 1});
  EXPECT_THROW(injector_forward(p, bad), ShapeError);
}

TEST(Injection, GradcheckThroughMlp) {
  Rng rng(7);
  auto cfg = small_cfg(InjectionMethod::kEmbeddingAdd);
  auto p = InjectorParams<double>::init(cfg, rng);
  auto z = testutil::random_leaf(rng, {2, cfg.d_latent}, true);
  testutil::expect_gradcheck(
      {z, p.w1, p.b1, p.w2, p.b2},
      [&](const std::vector<Tensor<double>> &xs) {
        InjectorParams<double> q = p;
        q.w1 = xs[1];
        q.b1 = xs[2];
        q.w2 = xs[3];
        q.b2 = xs[4];
        return injector_forward(q, xs[0]);
      });
}

TEST(Injection, ConditioningShapesPerMethod) {
  Rng rng(3);
  auto z = Tensor<double>::gaussian(rng, {1, 6});

  auto soft = InjectorParams<double>::init(
      small_cfg(InjectionMethod::kSoftPrompt), rng);
  auto cs = make_conditioning(soft, z);
  ASSERT_TRUE(cs.prefix.defined());
  EXPECT_EQ(cs.prefix.shape(), (Shape{3, 16}));
  EXPECT_FALSE(cs.emb_add.defined());
  EXPECT_FALSE(cs.has_kv());
  EXPECT_EQ(cs.prefix_len(), 3);

  auto emb = InjectorParams<double>::init(
      small_cfg(InjectionMethod::kEmbeddingAdd), rng);
  auto ce = make_conditioning(emb, z);
  EXPECT_FALSE(ce.prefix.defined());
  ASSERT_TRUE(ce.emb_add.defined());
  EXPECT_EQ(ce.emb_add.shape(), (Shape{1, 16}));
  EXPECT_FALSE(ce.has_kv());

  auto kv = InjectorParams<double>::init(
      small_cfg(InjectionMethod::kKvMemory), rng);
  auto ck = make_conditioning(kv, z);
  EXPECT_FALSE(ck.prefix.defined());
  EXPECT_FALSE(ck.emb_add.defined());
  ASSERT_EQ(ck.kv_mem.size(), 2u);
  for (auto &[k, v] : ck.kv_mem) {
    EXPECT_EQ(k.shape(), (Shape{1, 16}));
    EXPECT_EQ(v.shape(), (Shape{1, 16}));
  }
}

// The kv slots must be split from the flat output in (key, value) order per
// layer; perturbing one slot's source columns moves exactly that tensor.
TEST(Injection, KvSlotsFollowLayerOrder) {
  Rng rng(5);
  auto cfg = small_cfg(InjectionMethod::kKvMemory);
  auto p = InjectorParams<double>::init(cfg, rng);
  auto z = Tensor<double>::gaussian(rng, {1, cfg.d_latent});
  auto flat = injector_forward(p, z);
  auto cond = make_conditioning(p, z);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const int64_t base = l * 2 * cfg.d_model;
    for (int64_t j = 0; j < cfg.d_model; ++j) {
      EXPECT_DOUBLE_EQ(cond.kv_mem[size_t(l)].first.values()[size_t(j)],
                       flat.values()[size_t(base + j)]);
      EXPECT_DOUBLE_EQ(cond.kv_mem[size_t(l)].second.values()[size_t(j)],
                       flat.values()[size_t(base + cfg.d_model + j)]);
    }
  }
}

// Decoder logits must respond to the latent for every method.
TEST(Injection, DecoderRespondsToLatent) {
  Rng rng(21);
  auto dec = LmParams<double>::init(tiny_decoder_cfg(), rng);
  std::vector<int32_t> toks = {Tokens::kBos, 'h', 'i', Tokens::kEos};
  for (auto m : {InjectionMethod::kSoftPrompt, InjectionMethod::kEmbeddingAdd,
                 InjectionMethod::kKvMemory}) {
    auto p = InjectorParams<double>::init(small_cfg(m), rng);
    auto z0 = Tensor<double>::gaussian(rng, {1, 6});
    auto z1 = Tensor<double>::gaussian(rng, {1, 6});
    auto c0 = make_conditioning(p, z0);
    auto c1 = make_conditioning(p, z1);
    auto l0 = decoder_forward(dec, toks, &c0);
    auto l1 = decoder_forward(dec, toks, &c1);
    double diff = 0;
    for (size_t i = 0; i < l0.values().size(); ++i)
      diff = std::max(diff, std::abs(l0.values()[i] - l1.values()[i]));
    EXPECT_GT(diff, 1e-6) << injection_method_name(m);
  }
}

// Gradients from a decoder loss must reach the injector weights even when the
// decoder itself is frozen.
TEST(Injection, GradFlowsToInjectorThroughFrozenDecoder) {
  Rng rng(33);
  auto dec = LmParams<double>::init(tiny_decoder_cfg(), rng);
  dec.freeze();
  const uint64_t fp = dec.fingerprint();
  for (auto m : {InjectionMethod::kSoftPrompt, InjectionMethod::kEmbeddingAdd,
                 InjectionMethod::kKvMemory}) {
    auto p = InjectorParams<double>::init(small_cfg(m), rng);
    auto z = Tensor<double>::gaussian(rng, {1, 6});
    auto cond = make_conditioning(p, z);
    TokenSequence seq;
    seq.ids = {Tokens::kBos, 'o', 'k', Tokens::kEos};
    auto [nll, terms] = decoder_nll_sum(dec, seq, &cond);
    ASSERT_EQ(terms, 3);
    nll.backward();
    double gmax = 0;
    for (double g : p.w1.grad()) gmax = std::max(gmax, std::abs(g));
    EXPECT_GT(gmax, 0) << injection_method_name(m);
    for (double g : dec.tok_emb.grad()) EXPECT_EQ(g, 0.0);
  }
  EXPECT_EQ(dec.fingerprint(), fp);
}

// Masking the kv memory slot must reproduce the unconditioned decoder exactly
// even when the slot carries injector output.
TEST(Injection, MaskedKvMemoryMatchesUnconditioned) {
  Rng rng(9);
  auto dec = LmParams<double>::init(tiny_decoder_cfg(), rng);
  auto p = InjectorParams<double>::init(small_cfg(InjectionMethod::kKvMemory),
                                        rng);
  auto z = Tensor<double>::gaussian(rng, {1, 6});
  std::vector<int32_t> toks = {Tokens::kBos, 'a', 'b', 'c'};
  auto base = decoder_forward<double>(dec, toks, nullptr);
  auto cond = make_conditioning(p, z);
  cond.mask_memory = true;
  auto masked = decoder_forward(dec, toks, &cond);
  ASSERT_EQ(base.values().size(), masked.values().size());
  for (size_t i = 0; i < base.values().size(); ++i)
    ASSERT_EQ(base.values()[i], masked.values()[i]);
}

TEST(Injection, InitDeterministicGivenSeed) {
  auto cfg = small_cfg(InjectionMethod::kSoftPrompt);
  Rng a(123), b(123), c(124);
  EXPECT_EQ(InjectorParams<double>::init(cfg, a).fingerprint(),
            InjectorParams<double>::init(cfg, b).fingerprint());
  EXPECT_NE(InjectorParams<double>::init(cfg, a).fingerprint(),
            InjectorParams<double>::init(cfg, c).fingerprint());
}

}  // namespace
