#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace clipn {

using Vector = std::vector<double>;

inline constexpr double kZeroNormThreshold = 1e-12;

/// Dense row-major matrix of doubles. Used both for parameter tensors and
/// for banks of embeddings (one feature vector per row).
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(const std::vector<Vector>& rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  Vector row_vector(std::size_t r) const;
  void set_row(std::size_t r, std::span<const double> values);

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// A bank of feature vectors, one per row. Rows are expected to be unit norm
/// once produced by an encoder; see normalize_rows / check_unit_rows.
using EmbeddingMatrix = Matrix;

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

/// Throws ZeroVector when the norm is below kZeroNormThreshold.
Vector l2_normalize(std::span<const double> v);

EmbeddingMatrix normalize_rows(const Matrix& m);
bool has_unit_rows(const Matrix& m, double tol = 1e-6);

/// Entry (i, j) is <a_i, b_j>. Throws DimMismatch when column counts differ.
Matrix similarity_matrix(const Matrix& a, const Matrix& b);

/// Softmax of logits / tau with max subtraction. Throws NonPositiveTau.
Vector stable_softmax(std::span<const double> logits, double tau);

/// log(sum(exp(x))) by max factoring. Throws EmptyInput.
double logsumexp(std::span<const double> logits);

/// Numerically stable log(1 + exp(x)).
double softplus(double x);

/// Numerically stable 1 / (1 + exp(-x)).
double sigmoid(double x);

}  // namespace clipn
