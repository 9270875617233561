#pragma once

// Thin row-major GEMM wrapper over CBLAS (OpenBLAS). BLAS runs
// single-threaded; parallelism lives in the callers, which keeps
// results deterministic for a fixed thread count.

#include <cstdint>
#include <mutex>

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace asr {

inline void ensure_single_thread_blas() {
  static std::once_flag flag;
  std::call_once(flag, [] { openblas_set_num_threads(1); });
}

// C[m x n] = alpha * op(A) * op(B) + beta * C, all row-major.
inline void gemm_rm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                    const float* a, int lda, const float* b, int ldb, float beta,
                    float* c, int ldc) {
  ensure_single_thread_blas();
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

inline void gemm_rm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                    const double* a, int lda, const double* b, int ldb, double beta,
                    double* c, int ldc) {
  ensure_single_thread_blas();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

}  // namespace asr
