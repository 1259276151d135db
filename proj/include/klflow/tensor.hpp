#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace klflow {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Dense row-major matrix of 64-bit floats. Every tensor in the library is
/// two-dimensional; scalars are 1x1 and column vectors are n x 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(1, 1, value); }
  static Tensor column(std::span<const double> values);
  static Tensor row(std::span<const double> values);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor from_eigen(const Eigen::Ref<const RowMatrix>& m);

  std::array<std::size_t, 2> shape() const { return {rows_, cols_}; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a 1x1 tensor.
  double item() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows_, cols_); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows_, cols_); }

  /// Reshape in place without preserving contents; storage capacity is reused.
  void resize(std::size_t rows, std::size_t cols);
  void fill(double value);

  /// Index of the first non-finite entry, or size() when all are finite.
  std::size_t first_non_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  // Fixed alignment keeps Eigen's vectorized reductions bit-reproducible
  // across allocations.
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

/// Pairwise (cascade) summation: fixed reduction order, O(log n) error growth.
double pairwise_sum(std::span<const double> values);

}  // namespace klflow
