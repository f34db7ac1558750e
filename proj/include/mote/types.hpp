// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision value types shared across the library.
// Matrix data is row-major; Tensor3 data is lexicographic with the first
// index slowest, so slab i of a (d1, d2, d3) tensor is a contiguous
// row-major d2 x d3 matrix.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mote {

enum class errc : int {
  ok = 0,
  invalid_argument,
  dimension_mismatch,
  not_symmetric,
  not_spd,
  size_guard,
  io_failure,
  parse_failure,
  verify_failure,
};

class Error : public std::runtime_error {
 public:
  Error(errc code, std::string msg) : std::runtime_error(std::move(msg)), code_(code) {}
  errc code() const noexcept { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, errc code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

using EMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVector = Eigen::VectorXd;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, errc::invalid_argument,
            "matrix data length does not match rows*cols");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  template <typename Derived>
  static Matrix from(const Eigen::MatrixBase<Derived>& e) {
    Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    m.map() = e;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  Eigen::Map<EMatrix> map() {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }
  Eigen::Map<const EMatrix> map() const {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

  EVector col(std::size_t j) const {
    EVector v(rows_);
    for (std::size_t i = 0; i < rows_; ++i) v[static_cast<Eigen::Index>(i)] = (*this)(i, j);
    return v;
  }
  EVector row(std::size_t i) const {
    EVector v(cols_);
    for (std::size_t j = 0; j < cols_; ++j) v[static_cast<Eigen::Index>(j)] = (*this)(i, j);
    return v;
  }

  double frobenius_norm() const { return map().norm(); }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t d1, std::size_t d2, std::size_t d3)
      : dims_{d1, d2, d3}, data_(d1 * d2 * d3, 0.0) {}
  Tensor3(std::array<std::size_t, 3> dims, std::vector<double> data)
      : dims_(dims), data_(std::move(data)) {
    require(data_.size() == dims_[0] * dims_[1] * dims_[2], errc::invalid_argument,
            "tensor data length does not match d1*d2*d3");
  }

  const std::array<std::size_t, 3>& dims() const noexcept { return dims_; }
  std::size_t dim(int mode) const { return dims_[static_cast<std::size_t>(mode - 1)]; }
  std::size_t d1() const noexcept { return dims_[0]; }
  std::size_t d2() const noexcept { return dims_[1]; }
  std::size_t d3() const noexcept { return dims_[2]; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  // Slab i along the first mode, a contiguous row-major d2 x d3 view.
  Eigen::Map<EMatrix> slab(std::size_t i) {
    return {data_.data() + i * dims_[1] * dims_[2], static_cast<Eigen::Index>(dims_[1]),
            static_cast<Eigen::Index>(dims_[2])};
  }
  Eigen::Map<const EMatrix> slab(std::size_t i) const {
    return {data_.data() + i * dims_[1] * dims_[2], static_cast<Eigen::Index>(dims_[1]),
            static_cast<Eigen::Index>(dims_[2])};
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool operator==(const Tensor3& o) const { return dims_ == o.dims_ && data_ == o.data_; }

 private:
  std::array<std::size_t, 3> dims_{0, 0, 0};
  std::vector<double> data_;
};

}  // namespace mote
