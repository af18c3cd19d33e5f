#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "difflm/error.hpp"

namespace difflm {

// Seeded xoshiro256** generator. std::mt19937 + std::normal_distribution are
// not bit-identical across standard libraries, so all randomness in training,
// sampling and splitting goes through this type to keep runs reproducible on
// any platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    // splitmix64 expansion of the seed into the 256-bit state.
    uint64_t x = seed;
    for (auto &w : s_) {
      x += 0x9e3779b97f4a7c15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      w = z ^ (z >> 31);
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform double in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n). Rejection sampling keeps the mapping exact.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw DomainError("uniform_int: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller. Each draw consumes exactly two uniforms;
  // no spare is cached so the stream position is a pure function of the draw
  // count.
  double gaussian() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <typename Real>
  std::vector<Real> gaussian_vector(size_t n) {
    std::vector<Real> out(n);
    for (auto &v : out) v = static_cast<Real>(gaussian());
    return out;
  }

  template <typename T>
  void shuffle(std::vector<T> &v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream; fork(i) != fork(j) for i != j and neither
  // advances this generator's state.
  Rng fork(uint64_t stream) const {
    uint64_t mix = s_[0] ^ rotl(s_[2], 29) ^ (stream + 0x9e3779b97f4a7c15ull) * 0xda942042e4dd58b5ull;
    return Rng(mix);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
};

}  // namespace difflm
