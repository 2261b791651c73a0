#pragma once

#include <cstddef>

#include "kgcg/tensor.hpp"

// Matrix kernels. Each has a serial reference implementation and an
// OpenMP variant that splits work across rows while keeping the inner
// reduction order unchanged, so both produce bitwise-identical results.
// The undecorated entry points dispatch on problem size and the global
// parallel flag; kgcg-bench compares the two variants directly.

namespace kgcg::kernels {

bool parallel_enabled();
void set_parallel(bool on);
int thread_count();

// below this many multiply-adds the omp fork/join overhead dominates
inline constexpr size_t kParallelGrain = size_t(1) << 18;

// c(m x n) = a(m x k) * b(k x n)
template <class T>
void matmul_serial(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) ci[j] = T(0);
    const T* ai = a + i * k;
    for (size_t l = 0; l < k; ++l) {
      T ail = ai[l];
      const T* bl = b + l * n;
      for (size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

template <class T>
void matmul_omp(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    size_t i = static_cast<size_t>(ii);
    T* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) ci[j] = T(0);
    const T* ai = a + i * k;
    for (size_t l = 0; l < k; ++l) {
      T ail = ai[l];
      const T* bl = b + l * n;
      for (size_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

// c(m x n) = a(m x k) * b(n x k)^T
template <class T>
void matmul_nt_serial(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] = acc;
    }
  }
}

template <class T>
void matmul_nt_omp(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    size_t i = static_cast<size_t>(ii);
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] = acc;
    }
  }
}

// c(m x n) = a(k x m)^T * b(k x n)
template <class T>
void matmul_tn_serial(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) ci[j] = T(0);
    for (size_t l = 0; l < k; ++l) {
      T ali = a[l * m + i];
      const T* bl = b + l * n;
      for (size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
    }
  }
}

template <class T>
void matmul_tn_omp(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    size_t i = static_cast<size_t>(ii);
    T* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) ci[j] = T(0);
    for (size_t l = 0; l < k; ++l) {
      T ali = a[l * m + i];
      const T* bl = b + l * n;
      for (size_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
    }
  }
}

template <class T>
void matmul(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  if (parallel_enabled() && m * k * n >= kParallelGrain)
    matmul_omp(a, b, c, m, k, n);
  else
    matmul_serial(a, b, c, m, k, n);
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  if (parallel_enabled() && m * k * n >= kParallelGrain)
    matmul_nt_omp(a, b, c, m, k, n);
  else
    matmul_nt_serial(a, b, c, m, k, n);
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  if (parallel_enabled() && m * k * n >= kParallelGrain)
    matmul_tn_omp(a, b, c, m, k, n);
  else
    matmul_tn_serial(a, b, c, m, k, n);
}

// tensor-level conveniences (shape-checked)
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.cols == b.rows, "matmul: inner dimensions differ");
  TensorT<T> c(a.rows, b.cols);
  matmul(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
  return c;
}

template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.cols == b.cols, "matmul_nt: inner dimensions differ");
  TensorT<T> c(a.rows, b.rows);
  matmul_nt(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.rows);
  return c;
}

template <class T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
  require(a.rows == b.rows, "matmul_tn: inner dimensions differ");
  TensorT<T> c(a.cols, b.cols);
  matmul_tn(a.data.data(), b.data.data(), c.data.data(), a.cols, a.rows, b.cols);
  return c;
}

}  // namespace kgcg::kernels
