#include "difflm/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "difflm/tensor.hpp"

using difflm::Rng;
using difflm::Tensor;

TEST(Rng, SameSeedSameSequence) {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SameSeedSameGaussians) {
  Rng a(77), b(77);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.gaussian(), b.gaussian());
}

TEST(Rng, GaussianTensorsMatchAcrossGenerators) {
  Rng a(42), b(42);
  auto ta = Tensor<double>::gaussian(a, {16, 16});
  auto tb = Tensor<double>::gaussian(b, {16, 16});
  EXPECT_EQ(ta.values(), tb.values());
}

TEST(Rng, DifferentSeedsDiffer) {
  Rng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_EQ(same, 0);
}

TEST(Rng, GaussianMoments) {
  Rng rng(9001);
  const int n = 200000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.gaussian();
    sum += x;
    sumsq += x * x;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Rng, UniformIntInRangeAndRoughlyUniform) {
  Rng rng(5);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) {
    const uint64_t v = rng.uniform_int(7);
    ASSERT_LT(v, 7u);
    ++counts[v];
  }
  for (int c : counts) EXPECT_NEAR(c, n / 7.0, 450.0);
}

TEST(Rng, UniformHalfOpen) {
  Rng rng(6);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(10);
  std::vector<int> v(257);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  rng.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(Rng, ForkStreamsAreIndependentAndStable) {
  Rng base(123);
  Rng f1 = base.fork(1);
  Rng f2 = base.fork(2);
  EXPECT_NE(f1.next_u64(), f2.next_u64());
  // fork() must not advance the parent.
  Rng fresh(123);
  EXPECT_EQ(base.next_u64(), fresh.next_u64());
  // Equal states fork to equal streams.
  Rng a(55), b(55);
  EXPECT_EQ(a.fork(3).next_u64(), b.fork(3).next_u64());
}

TEST(Rng, GaussianIsFinite) {
  Rng rng(31337);
  for (int i = 0; i < 100000; ++i) ASSERT_TRUE(std::isfinite(rng.gaussian()));
}
