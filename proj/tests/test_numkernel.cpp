#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/expect_error.hpp"
#include "clipn/numkernel.hpp"

using namespace clipn;
using testing_support::code_of;

namespace {

Matrix random_unit_rows(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<double> g;
  Matrix m(n, d);
  for (double& x : m.data()) x = g(rng);
  return normalize_rows(m);
}

}  // namespace

TEST(L2Normalize, ThreeFourFive) {
  const Vector v = l2_normalize(Vector{3.0, 4.0});
  EXPECT_NEAR(v[0], 0.6, 1e-15);
  EXPECT_NEAR(v[1], 0.8, 1e-15);
  EXPECT_NEAR(norm2(v), 1.0, 1e-12);
}

TEST(L2Normalize, UnitVectorUnchanged) { EXPECT_EQ(l2_normalize(Vector{1.0, 0.0}), (Vector{1.0, 0.0})); }

TEST(L2Normalize, ZeroVectorRejected) {
  EXPECT_EQ(code_of([] { l2_normalize(Vector{0.0, 0.0}); }), ErrorCode::ZeroVector);
  EXPECT_EQ(code_of([] { l2_normalize(Vector{1e-13, 0.0}); }), ErrorCode::ZeroVector);
}

TEST(L2Normalize, Idempotent) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int t = 0; t < 100; ++t) {
    Vector v(7);
    for (double& x : v) x = g(rng);
    const Vector a = l2_normalize(v);
    const Vector b = l2_normalize(a);
    for (std::size_t k = 0; k < v.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(SimilarityMatrix, BasicCases) {
  const Matrix e1 = Matrix::from_rows({{1.0, 0.0}});
  EXPECT_EQ(similarity_matrix(e1, e1)(0, 0), 1.0);
  EXPECT_EQ(similarity_matrix(e1, Matrix::from_rows({{0.0, 1.0}}))(0, 0), 0.0);
  EXPECT_EQ(similarity_matrix(e1, Matrix::from_rows({{-1.0, 0.0}}))(0, 0), -1.0);
}

TEST(SimilarityMatrix, DimMismatch) {
  EXPECT_EQ(code_of([] { similarity_matrix(Matrix(1, 2), Matrix(1, 3)); }), ErrorCode::DimMismatch);
}

TEST(SimilarityMatrix, UnitRowsStayInRange) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = random_unit_rows(rng, 9, 6);
    const Matrix b = random_unit_rows(rng, 4, 6);
    const Matrix sim = similarity_matrix(a, b);
    for (double s : sim.data()) {
      EXPECT_GE(s, -1.0 - 1e-9);
      EXPECT_LE(s, 1.0 + 1e-9);
    }
  }
}

TEST(StableSoftmax, Examples) {
  const Vector p = stable_softmax(Vector{0.0, 0.0}, 1.0);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  const Vector q = stable_softmax(Vector{std::log(2.0), 0.0}, 1.0);
  EXPECT_NEAR(q[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(q[1], 1.0 / 3.0, 1e-15);
  const Vector r = stable_softmax(Vector{10000.0, 10000.0}, 1.0);
  EXPECT_EQ(r[0], 0.5);
  EXPECT_EQ(r[1], 0.5);
}

TEST(StableSoftmax, NonPositiveTau) {
  EXPECT_EQ(code_of([] { stable_softmax(Vector{1.0}, 0.0); }), ErrorCode::NonPositiveTau);
  EXPECT_EQ(code_of([] { stable_softmax(Vector{1.0}, -1.0); }), ErrorCode::NonPositiveTau);
}

TEST(StableSoftmax, ShiftInvariantAndNormalized) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_real_distribution<double> shift(-1e4, 1e4);
  for (int t = 0; t < 200; ++t) {
    Vector x(6);
    for (double& v : x) v = u(rng);
    const double c = shift(rng);
    Vector y = x;
    for (double& v : y) v += c;
    const double tau = 0.05 + 2.0 * std::abs(u(rng)) / 5.0;
    const Vector a = stable_softmax(x, tau);
    const Vector b = stable_softmax(y, tau);
    double sum = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      // The shift itself is only representable to ~1e-12 at |c| = 1e4.
      EXPECT_NEAR(a[k], b[k], 1e-9);
      EXPECT_GT(a[k], 0.0);
      sum += a[k];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Logsumexp, Examples) {
  EXPECT_NEAR(logsumexp(Vector{0.0, 0.0}), std::log(2.0), 1e-15);
  for (double a : {-3.5, 0.0, 1e300, 7.25}) EXPECT_EQ(logsumexp(Vector{a}), a);
  EXPECT_NEAR(logsumexp(Vector{1000.0, 1000.0}), 1000.0 + std::log(2.0), 1e-12);
  EXPECT_EQ(code_of([] { logsumexp(Vector{}); }), ErrorCode::EmptyInput);
}

TEST(Logsumexp, ShiftAddsConstant) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_real_distribution<double> shift(-1e4, 1e4);
  for (int t = 0; t < 200; ++t) {
    Vector x(5);
    for (double& v : x) v = u(rng);
    const double c = shift(rng);
    Vector y = x;
    for (double& v : y) v += c;
    EXPECT_NEAR(logsumexp(y), logsumexp(x) + c, 1e-9);
  }
}

TEST(Scalar, SigmoidAndSoftplusStable) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(std::log(3.0)), 0.75, 1e-15);
  EXPECT_EQ(sigmoid(-1000.0), 0.0);
  EXPECT_EQ(sigmoid(1000.0), 1.0);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_EQ(softplus(1000.0), 1000.0);
  EXPECT_GT(softplus(-700.0), 0.0);
}

TEST(Matrix, RowAccess) {
  Matrix m = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m(1, 0), 3.0);
  m.set_row(0, Vector{5.0, 6.0});
  EXPECT_EQ(m.row_vector(0), (Vector{5.0, 6.0}));
  EXPECT_EQ(Matrix::identity(2), Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
  EXPECT_TRUE(has_unit_rows(Matrix::identity(3)));
  EXPECT_FALSE(has_unit_rows(m));
}
