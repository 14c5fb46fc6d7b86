#pragma once

#include <cstdint>

namespace sflab::detail {

// C[m,n] += sum_k A[m,k] * B[k,n].  Row-major, contiguous.
inline void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
                    double* C) {
  for (int64_t m = 0; m < M; ++m) {
    const double* a_row = A + m * K;
    double* c_row = C + m * N;
    for (int64_t k = 0; k < K; ++k) {
      const double a = a_row[k];
      const double* b_row = B + k * N;
      for (int64_t n = 0; n < N; ++n) c_row[n] += a * b_row[n];
    }
  }
}

// C[m,n] += sum_k A[m,k] * B[n,k]  (B used transposed).
inline void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B,
                    double* C) {
  for (int64_t m = 0; m < M; ++m) {
    const double* a_row = A + m * K;
    double* c_row = C + m * N;
    for (int64_t n = 0; n < N; ++n) {
      const double* b_row = B + n * K;
      double acc = 0.0;
      for (int64_t k = 0; k < K; ++k) acc += a_row[k] * b_row[k];
      c_row[n] += acc;
    }
  }
}

// C[m,n] += sum_k A[k,m] * B[k,n]  (A used transposed; K is the reduced extent).
inline void gemm_tn(int64_t K, int64_t M, int64_t N, const double* A, const double* B,
                    double* C) {
  for (int64_t k = 0; k < K; ++k) {
    const double* a_row = A + k * M;
    const double* b_row = B + k * N;
    for (int64_t m = 0; m < M; ++m) {
      const double a = a_row[m];
      double* c_row = C + m * N;
      for (int64_t n = 0; n < N; ++n) c_row[n] += a * b_row[n];
    }
  }
}

}  // namespace sflab::detail
