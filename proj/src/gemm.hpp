#pragma once

#include <algorithm>
#include <cstddef>

// Row-major accumulate-only matrix products used by conv2d and linear.
// Fixed summation order: results are reproducible run to run.
namespace magnifier::detail {

inline constexpr std::size_t kColTile = 256;

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
    const std::size_t j1 = std::min(n, j0 + kColTile);
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        if (av == T{0}) continue;
        const T* brow = b + p * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
    const std::size_t j1 = std::min(n, j0 + kColTile);
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      const T* acol = a + p * m;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = acol[i];
        if (av == T{0}) continue;
        T* crow = c + i * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
T dot(const T* x, const T* y, std::size_t len) {
  constexpr std::size_t kLanes = 8;
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= len; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += x[i + l] * y[i + l];
  T tail{0};
  for (; i < len; ++i) tail += x[i] * y[i];
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  return s + tail;
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, b + j * k, k);
}

}  // namespace magnifier::detail
