#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "clipn/metric.hpp"
#include "support/expect_error.hpp"
#include "support/oracles.hpp"

using namespace clipn;
using testing_support::code_of;

namespace {

std::vector<double> draws(std::mt19937_64& rng, std::size_t n, double mean) {
  std::normal_distribution<double> g(mean, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

// Coarse integer scores so that ties are common.
std::vector<double> tied_draws(std::mt19937_64& rng, std::size_t n, int hi) {
  std::uniform_int_distribution<int> u(0, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.1, 0.2}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.3, 0.1, 0.3}, std::vector<double>{0.1, 0.3, 0.3}), 0.5);
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.4}, std::vector<double>{0.5, 0.1}), 0.75);
}

TEST(Auroc, EmptyInput) {
  EXPECT_EQ(code_of([] { auroc(std::vector<double>{}, std::vector<double>{1.0}); }), ErrorCode::EmptyInput);
  EXPECT_EQ(code_of([] { auroc(std::vector<double>{1.0}, std::vector<double>{}); }), ErrorCode::EmptyInput);
}

TEST(Auroc, MatchesPairwiseOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto id = t % 2 ? draws(rng, 200, 0.7) : tied_draws(rng, 200, 6);
    const auto ood = t % 2 ? draws(rng, 200, 0.0) : tied_draws(rng, 200, 5);
    EXPECT_NEAR(auroc(id, ood), oracle::auroc(id, ood), 1e-12);
  }
}

TEST(Auroc, Antisymmetric) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto a = tied_draws(rng, 30, 8);
    const auto b = tied_draws(rng, 17, 8);
    EXPECT_NEAR(auroc(a, b) + auroc(b, a), 1.0, 1e-12);
  }
}

TEST(Auroc, InvariantUnderIncreasingTransform) {
  std::mt19937_64 rng(3);
  auto id = draws(rng, 60, 0.5);
  auto ood = draws(rng, 40, 0.0);
  const double base = auroc(id, ood);
  for (double& x : id) x = std::exp(2.0 * x) + 3.0;
  for (double& x : ood) x = std::exp(2.0 * x) + 3.0;
  EXPECT_EQ(auroc(id, ood), base);
}

TEST(FprAtTpr, Examples) {
  EXPECT_EQ(fpr_at_tpr(std::vector<double>{0.9, 0.8}, std::vector<double>{0.1, 0.2}), 0.0);
  EXPECT_EQ(fpr_at_tpr(std::vector<double>{4, 3, 2, 1}, std::vector<double>{0.5, 1.5}, 0.95), 0.5);
  EXPECT_EQ(fpr_at_tpr(std::vector<double>{1}, std::vector<double>{2}, 1.0), 1.0);
}

TEST(FprAtTpr, MatchesBruteForceScanExactly) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto id = t % 2 ? draws(rng, 200, 1.0) : tied_draws(rng, 200, 9);
    const auto ood = t % 2 ? draws(rng, 200, 0.0) : tied_draws(rng, 200, 7);
    for (double target : {0.95, 0.5, 1.0, 0.01}) {
      EXPECT_EQ(fpr_at_tpr(id, ood, target), oracle::fpr_at_tpr(id, ood, target));
    }
  }
}

TEST(FprAtTpr, MonotoneInTarget) {
  std::mt19937_64 rng(5);
  const auto id = draws(rng, 100, 1.0);
  const auto ood = draws(rng, 100, 0.0);
  double prev = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double v = fpr_at_tpr(id, ood, k / 100.0);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(FprAtTpr, Errors) {
  const std::vector<double> a = {1.0};
  EXPECT_EQ(code_of([&] { fpr_at_tpr(a, std::vector<double>{}); }), ErrorCode::EmptyInput);
  EXPECT_EQ(code_of([&] { fpr_at_tpr(a, a, 0.0); }), ErrorCode::Precondition);
  EXPECT_EQ(code_of([&] { fpr_at_tpr(a, a, 1.5); }), ErrorCode::Precondition);
}

TEST(RocCurve, EndpointsAndConsistency) {
  const std::vector<double> id = {0.9, 0.4, 0.4};
  const std::vector<double> ood = {0.5, 0.1};
  const auto roc = roc_curve(id, ood);
  ASSERT_EQ(roc.size(), 4u);
  EXPECT_EQ(roc.front().threshold, 0.9);
  EXPECT_NEAR(roc.front().tpr, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(roc.front().fpr, 0.0);
  EXPECT_EQ(roc.back().tpr, 1.0);
  EXPECT_EQ(roc.back().fpr, 1.0);
  for (std::size_t k = 1; k < roc.size(); ++k) {
    EXPECT_LT(roc[k].threshold, roc[k - 1].threshold);
    EXPECT_GE(roc[k].tpr, roc[k - 1].tpr);
    EXPECT_GE(roc[k].fpr, roc[k - 1].fpr);
  }
}

TEST(Kde, KernelPeak) {
  const std::vector<double> s = {0.0};
  const std::vector<double> grid = {0.0};
  EXPECT_NEAR(kde(s, 1.0, grid).density[0], 1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-15);
}

TEST(Kde, SymmetricSamplesGiveSymmetricDensity) {
  const std::vector<double> s = {-1.5, -0.2, 0.2, 1.5};
  const auto grid = linspace(-4.0, 4.0, 81);
  const DensityCurve c = kde(s, 0.4, grid);
  for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_NEAR(c.density[k], c.density[grid.size() - 1 - k], 1e-15);
}

TEST(Kde, MatchesDirectSummation) {
  std::mt19937_64 rng(6);
  const auto s = draws(rng, 5, 0.0);
  const auto grid = linspace(-3.0, 3.0, 61);
  const DensityCurve c = kde(s, 0.35, grid);
  for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_NEAR(c.density[k], oracle::kde_at(s, 0.35, grid[k]), 1e-12);
}

TEST(Kde, NonNegativeAndIntegratesToOne) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const auto s = draws(rng, 40, 0.0);
    const double h = silverman_bandwidth(s);
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    const auto grid = linspace(*lo - 6.0 * h, *hi + 6.0 * h, 2001);
    const DensityCurve c = kde(s, h, grid);
    for (double d : c.density) EXPECT_GE(d, 0.0);
    EXPECT_NEAR(trapezoid(c.grid, c.density), 1.0, 0.02);
  }
}

TEST(Kde, Errors) {
  const std::vector<double> s = {0.0};
  const std::vector<double> grid = {0.0};
  EXPECT_EQ(code_of([&] { kde(s, 0.0, grid); }), ErrorCode::NonPositiveBandwidth);
  EXPECT_EQ(code_of([&] { kde(s, -1.0, grid); }), ErrorCode::NonPositiveBandwidth);
  EXPECT_EQ(code_of([&] { kde(std::vector<double>{}, 1.0, grid); }), ErrorCode::EmptyInput);
}

TEST(Silverman, RuleOfThumb) {
  const std::vector<double> s = {1.0, 2.0, 3.0, 4.0};
  const double sigma = std::sqrt(5.0 / 3.0);
  EXPECT_NEAR(silverman_bandwidth(s), 1.06 * sigma * std::pow(4.0, -0.2), 1e-15);
  EXPECT_EQ(silverman_bandwidth(std::vector<double>{2.0, 2.0}), 1.0);
}

TEST(Helpers, LinspaceAndTrapezoid) {
  const auto x = linspace(0.0, 1.0, 5);
  EXPECT_EQ(x, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
  EXPECT_NEAR(trapezoid(x, x), 0.5, 1e-15);
  EXPECT_EQ(code_of([] { linspace(0.0, 1.0, 1); }), ErrorCode::Precondition);
  EXPECT_EQ(code_of([&] { trapezoid(x, std::vector<double>{1.0}); }), ErrorCode::ShapeMismatch);
}
