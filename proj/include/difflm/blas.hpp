#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>

extern "C" {
void cblas_sgemm(int order, int transA, int transB, int m, int n, int k,
                 float alpha, const float *a, int lda, const float *b, int ldb,
                 float beta, float *c, int ldc);
void cblas_dgemm(int order, int transA, int transB, int m, int n, int k,
                 double alpha, const double *a, int lda, const double *b,
                 int ldb, double beta, double *c, int ldc);
void openblas_set_num_threads(int);
}

namespace difflm::blas {

inline constexpr int kRowMajor = 101;
inline constexpr int kNoTrans = 111;
inline constexpr int kTrans = 112;

// Pins the OpenBLAS pool once per process. Capped at 4: the kernels here are
// small enough that more threads only add sync overhead. DIFFLM_BLAS_THREADS
// overrides (set it to 1 for strictly serial execution).
inline int thread_count() {
  static const int n = [] {
    if (const char *env = std::getenv("DIFFLM_BLAS_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min(hw == 0 ? 1u : hw, 4u));
  }();
  return n;
}

inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha,
                 const float *a, const float *b, float beta, float *c) {
  if (m == 0 || n == 0) return;
  static const int init = (openblas_set_num_threads(thread_count()), 0);
  (void)init;
  cblas_sgemm(kRowMajor, ta ? kTrans : kNoTrans, tb ? kTrans : kNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              alpha, a, static_cast<int>(ta ? m : k), b,
              static_cast<int>(tb ? k : n), beta, c, static_cast<int>(n));
}

// The 64-bit path stays single threaded: it backs gradient checking, where
// results must not depend on the machine's core count.
inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                 double alpha, const double *a, const double *b, double beta,
                 double *c) {
  if (m == 0 || n == 0) return;
  openblas_set_num_threads(1);
  cblas_dgemm(kRowMajor, ta ? kTrans : kNoTrans, tb ? kTrans : kNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              alpha, a, static_cast<int>(ta ? m : k), b,
              static_cast<int>(tb ? k : n), beta, c, static_cast<int>(n));
  openblas_set_num_threads(thread_count());
}

}  // namespace difflm::blas
