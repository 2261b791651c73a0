#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "kgcg/error.hpp"

namespace kgcg {

// Row-major 2-d tensor. Vectors are stored as 1 x n.
template <class T>
struct TensorT {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<T> data;

  TensorT() = default;
  TensorT(size_t r, size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

  T& at(size_t i, size_t j) { return data[i * cols + j]; }
  const T& at(size_t i, size_t j) const { return data[i * cols + j]; }
  T* row(size_t i) { return data.data() + i * cols; }
  const T* row(size_t i) const { return data.data() + i * cols; }
  size_t size() const { return data.size(); }

  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  bool same_shape(const TensorT& o) const { return rows == o.rows && cols == o.cols; }
};

using Tensor = TensorT<float>;

template <class T>
bool all_finite(const TensorT<T>& t) {
  for (T v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <class T>
void accumulate(TensorT<T>& dst, const TensorT<T>& src) {
  require(dst.same_shape(src), "tensor accumulate: shape mismatch");
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace kgcg
