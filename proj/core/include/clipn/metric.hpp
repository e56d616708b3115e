#pragma once

#include <span>
#include <vector>

namespace clipn {

/// Mann-Whitney estimate of P(id > ood), ties counted one half.
/// Throws EmptyInput when either side is empty.
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Fraction of OOD scores >= t, where t is the largest score value keeping
/// the fraction of ID scores >= t at or above tpr_target.
double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                  double tpr_target = 0.95);

struct RocPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
};

/// One point per distinct score value, thresholds descending.
std::vector<RocPoint> roc_curve(std::span<const double> id_scores, std::span<const double> ood_scores);

struct DensityCurve {
  std::vector<double> grid;
  std::vector<double> density;
};

/// Gaussian kernel density of `samples` evaluated on `grid`.
DensityCurve kde(std::span<const double> samples, double bandwidth, std::span<const double> grid);

/// 1.06 * sigma * n^(-1/5); falls back to 1.0 when the sample spread is zero.
double silverman_bandwidth(std::span<const double> samples);

/// `points` equally spaced values from lo to hi inclusive.
std::vector<double> linspace(double lo, double hi, std::size_t points);

double trapezoid(std::span<const double> x, std::span<const double> y);

}  // namespace clipn
