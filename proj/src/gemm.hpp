#pragma once

#include <cstddef>

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace alignclip::detail {

// BLAS must run single-threaded: artifacts promise bit-identical reductions,
// and per-sample work is parallelized above this layer instead.
void pin_blas_single_thread();

// Wrappers named by the *stored* shapes of their arguments, all row-major.

// C[m,n] = alpha * A[m,k] * B[k,n] + beta * C
inline void mm_nn(size_t m, size_t n, size_t k, const double* A, const double* B, double* C,
                  double alpha = 1.0, double beta = 0.0) {
  pin_blas_single_thread();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, A, static_cast<int>(k), B, static_cast<int>(n), beta, C,
              static_cast<int>(n));
}

// C[m,n] = alpha * A[m,k] * B[n,k]^T + beta * C
inline void mm_nt(size_t m, size_t n, size_t k, const double* A, const double* B, double* C,
                  double alpha = 1.0, double beta = 0.0) {
  pin_blas_single_thread();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, A, static_cast<int>(k), B, static_cast<int>(k), beta, C,
              static_cast<int>(n));
}

// C[m,n] = alpha * A[k,m]^T * B[k,n] + beta * C
inline void mm_tn(size_t m, size_t n, size_t k, const double* A, const double* B, double* C,
                  double alpha = 1.0, double beta = 0.0) {
  pin_blas_single_thread();
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, A, static_cast<int>(m), B, static_cast<int>(n), beta, C,
              static_cast<int>(n));
}

}  // namespace alignclip::detail
