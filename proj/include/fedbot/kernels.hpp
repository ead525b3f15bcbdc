#pragma once

// Raw loops over contiguous row-major buffers. Callers validate shapes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>

namespace fedbot::kernels {

// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void matmul_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
                std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    const T* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
template <typename T>
void matmul_bt_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
                   std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * n;
    T* crow = c.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b.data() + p * n;
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void matmul_at_acc(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    const T* brow = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// In-place softmax of one row with max subtraction.
template <typename T>
void softmax_row(T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum{0};
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const T inv = T{1} / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

// log(sum(exp(row))) with max subtraction.
template <typename T>
T log_sum_exp(const T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum{0};
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
  return mx + std::log(sum);
}

// Index of the largest entry; ties go to the lowest index.
template <typename T>
std::size_t argmax(const T* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace fedbot::kernels
