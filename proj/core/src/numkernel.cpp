#include "clipn/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "clipn/error.hpp"

namespace clipn {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonPositiveTau: return "NonPositiveTau";
    case ErrorCode::NonPositiveT: return "NonPositiveT";
    case ErrorCode::NonPositiveBandwidth: return "NonPositiveBandwidth";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyClassName: return "EmptyClassName";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::BadTokenId: return "BadTokenId";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DuplicateClass: return "DuplicateClass";
    case ErrorCode::DuplicateSection: return "DuplicateSection";
    case ErrorCode::Precondition: return "Precondition";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::RejectionOverflow: return "RejectionOverflow";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::BadManifest: return "BadManifest";
  }
  return "Unknown";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::ShapeMismatch,
                "matrix data has " + std::to_string(data_.size()) + " values, expected " +
                    std::to_string(rows_ * cols_));
  }
}

Matrix Matrix::from_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "ragged rows in Matrix::from_rows");
    }
    m.set_row(r, rows[r]);
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Vector Matrix::row_vector(std::size_t r) const {
  auto view = row(r);
  return {view.begin(), view.end()};
}

void Matrix::set_row(std::size_t r, std::span<const double> values) {
  if (values.size() != cols_) throw Error(ErrorCode::DimMismatch, "set_row width mismatch");
  std::copy(values.begin(), values.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimMismatch,
                "dot of lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

Vector l2_normalize(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n >= kZeroNormThreshold)) {
    throw Error(ErrorCode::ZeroVector, "cannot normalize vector with norm " + std::to_string(n));
  }
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

EmbeddingMatrix normalize_rows(const Matrix& m) {
  EmbeddingMatrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) out.set_row(r, l2_normalize(m.row(r)));
  return out;
}

bool has_unit_rows(const Matrix& m, double tol) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (std::abs(norm2(m.row(r)) - 1.0) > tol) return false;
  }
  return true;
}

Matrix similarity_matrix(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorCode::DimMismatch, "similarity_matrix: dims " + std::to_string(a.cols()) +
                                            " vs " + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  }
  return out;
}

Vector stable_softmax(std::span<const double> logits, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::NonPositiveTau, "softmax temperature must be > 0");
  if (logits.empty()) throw Error(ErrorCode::EmptyInput, "softmax of empty vector");
  const double peak = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp((logits[k] - peak) / tau);
    total += out[k];
  }
  for (double& p : out) p /= total;
  return out;
}

double logsumexp(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorCode::EmptyInput, "logsumexp of empty vector");
  const double peak = *std::max_element(logits.begin(), logits.end());
  if (logits.size() == 1) return peak;
  double total = 0.0;
  for (double x : logits) total += std::exp(x - peak);
  return peak + std::log(total);
}

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace clipn
