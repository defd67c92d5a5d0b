#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fairdda/errors.hpp"

namespace fairdda {

// Dense row-major matrix. Vectors are stored as n x 1 and scalars as 1 x 1.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<T> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw ShapeError("tensor value count does not match shape");
    }
  }

  static Tensor scalar(T v) { return Tensor(1, 1, v); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }

  T& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::span<T> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  // Value of a 1 x 1 tensor.
  T item() const {
    if (values_.size() != 1) throw ShapeError("item() on a non-scalar tensor");
    return values_[0];
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(rows_, cols_);
    for (std::size_t i = 0; i < values_.size(); ++i) out[i] = static_cast<U>(values_[i]);
    return out;
  }

  bool operator==(const Tensor& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> values_;
};

inline std::string shape_string(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename T>
std::string shape_string(const Tensor<T>& t) {
  return shape_string(t.rows(), t.cols());
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{0};
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

// out += alpha * x
template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> out) {
  for (std::size_t k = 0; k < x.size(); ++k) out[k] += alpha * x[k];
}

}  // namespace fairdda
