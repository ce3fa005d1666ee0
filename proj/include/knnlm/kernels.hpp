#pragma once

// Dense row-major kernels. All loops are written in axpy form so the inner
// loop is contiguous and vectorizes without reassociation flags; results
// are therefore deterministic for a given build.

#include <cmath>
#include <cstddef>
#include <vector>

namespace knnlm::kernels {

/// C[M,N] (+)= A[M,K] * B[K,N]
template <typename R>
void gemm_nn(const R* A, const R* B, R* C, std::size_t M, std::size_t K,
             std::size_t N, bool accumulate) {
  for (std::size_t i = 0; i < M; ++i) {
    R* c = C + i * N;
    if (!accumulate)
      for (std::size_t j = 0; j < N; ++j) c[j] = R(0);
    const R* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const R aik = a[k];
      const R* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

/// C[M,N] += A[K,M]^T * B[K,N]
template <typename R>
void gemm_tn_acc(const R* A, const R* B, R* C, std::size_t K, std::size_t M,
                 std::size_t N) {
  for (std::size_t k = 0; k < K; ++k) {
    const R* a = A + k * M;
    const R* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const R aki = a[i];
      R* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aki * b[j];
    }
  }
}

template <typename R>
void transpose(const R* A, R* At, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) At[j * rows + i] = A[i * cols + j];
}

/// C[M,N] (+)= A[M,K] * B[N,K]^T, using `scratch` for B^T.
template <typename R>
void gemm_nt(const R* A, const R* B, R* C, std::size_t M, std::size_t K,
             std::size_t N, bool accumulate, std::vector<R>& scratch) {
  scratch.resize(K * N);
  transpose(B, scratch.data(), N, K);
  gemm_nn(A, scratch.data(), C, M, K, N, accumulate);
}

/// Adds a bias row to each of M rows.
template <typename R>
void add_bias(R* Y, const R* bias, std::size_t M, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) Y[i * N + j] += bias[j];
}

/// db[N] += sum over rows of dY[M,N]
template <typename R>
void bias_grad(const R* dY, R* db, std::size_t M, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) db[j] += dY[i * N + j];
}

}  // namespace knnlm::kernels
