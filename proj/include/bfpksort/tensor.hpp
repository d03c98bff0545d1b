// Copyright 2026 The bfpksort Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bfpksort/error.hpp"

namespace bfpksort {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor. A rank-0 tensor holds a single scalar.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() : data(1) {}
  explicit Tensor(Shape s) : shape(std::move(s)), data(element_count(shape)) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != element_count(shape)) {
      throw Error(ErrorKind::kShapeMismatch, "tensor data size " + std::to_string(data.size()) +
                                                 " does not match shape " + shape_string(shape));
    }
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }

  bool operator==(const Tensor&) const = default;
};

/// Row-major matrix of doubles; rows are output channels for projection weights.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorKind::kShapeMismatch, "matrix data size " + std::to_string(data_.size()) +
                                                 " does not match " + std::to_string(rows_) + "x" +
                                                 std::to_string(cols_));
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  const std::vector<double>& values() const { return data_; }

  Tensor<double> to_tensor() const { return Tensor<double>({rows_, cols_}, data_); }

  static Matrix from_tensor(const Tensor<double>& t) {
    if (t.rank() != 2) {
      throw Error(ErrorKind::kShapeMismatch, "expected a rank-2 tensor, got " + shape_string(t.shape));
    }
    return Matrix(t.shape[0], t.shape[1], t.data);
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// y = W x
inline std::vector<double> matvec(const Matrix& w, std::span<const double> x) {
  if (x.size() != w.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "matvec: vector length " + std::to_string(x.size()) +
                                               " != matrix cols " + std::to_string(w.cols()));
  }
  std::vector<double> y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double acc = 0.0;
    auto row = w.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::kShapeMismatch, "dot: lengths " + std::to_string(a.size()) + " and " +
                                               std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace bfpksort
