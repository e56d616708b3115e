#include "clipn/metric.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <utility>

#include "clipn/error.hpp"

namespace clipn {

namespace {

void require_nonempty(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) {
    throw Error(ErrorCode::EmptyInput, "metrics need at least one ID and one OOD score");
  }
}

double fraction_at_or_above(std::span<const double> scores, double t) {
  std::size_t count = 0;
  for (double s : scores) count += s >= t ? 1 : 0;
  return static_cast<double>(count) / static_cast<double>(scores.size());
}

}  // namespace

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require_nonempty(id_scores, ood_scores);
  // (score, is_id) sorted ascending; tied runs share their average rank.
  std::vector<std::pair<double, bool>> all;
  all.reserve(id_scores.size() + ood_scores.size());
  for (double s : id_scores) all.emplace_back(s, true);
  for (double s : ood_scores) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  double id_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    std::size_t ids_in_run = 0;
    while (j < all.size() && all[j].first == all[i].first) {
      ids_in_run += all[j].second ? 1 : 0;
      ++j;
    }
    // ranks i+1 .. j, averaged
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    id_rank_sum += avg_rank * static_cast<double>(ids_in_run);
    i = j;
  }
  const auto n_id = static_cast<double>(id_scores.size());
  const auto n_ood = static_cast<double>(ood_scores.size());
  const double u = id_rank_sum - n_id * (n_id + 1.0) / 2.0;
  return u / (n_id * n_ood);
}

double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                  double tpr_target) {
  require_nonempty(id_scores, ood_scores);
  if (!(tpr_target > 0.0 && tpr_target <= 1.0)) {
    throw Error(ErrorCode::Precondition, "tpr_target must lie in (0, 1]");
  }
  std::vector<double> sorted(id_scores.begin(), id_scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  // The fraction of ID scores >= t only changes at ID score values, so the
  // largest qualifying t is one of them; walk down until the target holds.
  // At the last index k of a tied run exactly k + 1 ID scores are >= sorted[k].
  const auto n_id = static_cast<double>(sorted.size());
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    if (k + 1 < sorted.size() && sorted[k + 1] == sorted[k]) continue;
    if (static_cast<double>(k + 1) / n_id >= tpr_target) {
      return fraction_at_or_above(ood_scores, sorted[k]);
    }
  }
  return fraction_at_or_above(ood_scores, sorted.back());
}

std::vector<RocPoint> roc_curve(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require_nonempty(id_scores, ood_scores);
  std::vector<double> thresholds(id_scores.begin(), id_scores.end());
  thresholds.insert(thresholds.end(), ood_scores.begin(), ood_scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<double> id_sorted(id_scores.begin(), id_scores.end());
  std::vector<double> ood_sorted(ood_scores.begin(), ood_scores.end());
  std::sort(id_sorted.begin(), id_sorted.end(), std::greater<>());
  std::sort(ood_sorted.begin(), ood_sorted.end(), std::greater<>());

  std::vector<RocPoint> out;
  out.reserve(thresholds.size());
  std::size_t a = 0;
  std::size_t b = 0;
  for (double t : thresholds) {
    while (a < id_sorted.size() && id_sorted[a] >= t) ++a;
    while (b < ood_sorted.size() && ood_sorted[b] >= t) ++b;
    out.push_back({t, static_cast<double>(a) / static_cast<double>(id_sorted.size()),
                   static_cast<double>(b) / static_cast<double>(ood_sorted.size())});
  }
  return out;
}

DensityCurve kde(std::span<const double> samples, double bandwidth, std::span<const double> grid) {
  if (samples.empty()) throw Error(ErrorCode::EmptyInput, "kde needs at least one sample");
  if (!(bandwidth > 0.0)) throw Error(ErrorCode::NonPositiveBandwidth, "kde bandwidth must be > 0");
  const double norm =
      1.0 / (static_cast<double>(samples.size()) * bandwidth * std::sqrt(2.0 * std::numbers::pi));
  const double inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth);
  DensityCurve curve;
  curve.grid.assign(grid.begin(), grid.end());
  curve.density.reserve(grid.size());
  for (double x : grid) {
    double acc = 0.0;
    for (double s : samples) acc += std::exp(-(x - s) * (x - s) * inv_two_h2);
    curve.density.push_back(norm * acc);
  }
  return curve;
}

double silverman_bandwidth(std::span<const double> samples) {
  if (samples.empty()) throw Error(ErrorCode::EmptyInput, "bandwidth of empty sample");
  const auto n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= n;
  double var = 0.0;
  for (double s : samples) var += (s - mean) * (s - mean);
  const double sigma = samples.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  if (!(sigma > 0.0)) return 1.0;
  return 1.06 * sigma * std::pow(n, -0.2);
}

std::vector<double> linspace(double lo, double hi, std::size_t points) {
  if (points < 2) throw Error(ErrorCode::Precondition, "linspace needs at least 2 points");
  std::vector<double> out(points);
  const double step = (hi - lo) / static_cast<double>(points - 1);
  for (std::size_t k = 0; k < points; ++k) out[k] = lo + step * static_cast<double>(k);
  out.back() = hi;
  return out;
}

double trapezoid(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorCode::ShapeMismatch, "trapezoid needs equal lengths");
  double acc = 0.0;
  for (std::size_t k = 1; k < x.size(); ++k) acc += 0.5 * (x[k] - x[k - 1]) * (y[k] + y[k - 1]);
  return acc;
}

}  // namespace clipn
