#pragma once

// Second code paths for values the library computes. Kept deliberately
// naive: direct transcriptions, exhaustive scans, no shared helpers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <set>
#include <vector>

#include "clipn/encoder.hpp"
#include "clipn/losses.hpp"

namespace oracle {

inline double p_no(double s, double s_no, double tau) {
  const double a = std::exp(s_no / tau);
  const double b = std::exp(s / tau);
  return a / (a + b);
}

// -(1/N) sum_i log(1 - p_ii) - 1/(N(N-1)) sum_{i != j} log p_ij
inline double itbo(const clipn::Matrix& s, const clipn::Matrix& s_no, double tau) {
  const std::size_t n = s.rows();
  double diag = 0.0;
  double off = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p = p_no(s(i, j), s_no(i, j), tau);
      if (i == j) {
        diag += std::log(1.0 - p);
      } else {
        off += std::log(p);
      }
    }
  }
  const double nd = static_cast<double>(n);
  return -diag / nd - off / (nd * (nd - 1.0));
}

inline double tso(const std::vector<std::vector<double>>& g, const std::vector<std::vector<double>>& g_no) {
  double acc = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double sq = 0.0;
    for (std::size_t c = 0; c < g[i].size(); ++c) sq += std::pow(g[i][c] - g_no[i][c], 2);
    acc += 2.0 - std::sqrt(sq);
  }
  return acc / static_cast<double>(g.size());
}

// Pool the listed embedding rows (prompt rows first), project, normalize.
inline std::vector<double> encode(const clipn::EncoderParams& p, const std::vector<std::size_t>& ids,
                                  bool prepend_prompts) {
  const std::size_t d_tok = p.embedding_table.cols();
  std::vector<std::vector<double>> rows;
  if (prepend_prompts) {
    for (std::size_t r = 0; r < p.no_prompt_tokens.rows(); ++r) {
      std::vector<double> v;
      for (std::size_t c = 0; c < d_tok; ++c) v.push_back(p.no_prompt_tokens(r, c));
      rows.push_back(v);
    }
  }
  for (std::size_t id : ids) {
    std::vector<double> v;
    for (std::size_t c = 0; c < d_tok; ++c) v.push_back(p.embedding_table(id, c));
    rows.push_back(v);
  }
  std::vector<double> mean(d_tok, 0.0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < d_tok; ++c) mean[c] += r[c] / static_cast<double>(rows.size());
  }
  std::vector<double> out(p.projection.cols(), 0.0);
  for (std::size_t k = 0; k < out.size(); ++k) {
    for (std::size_t c = 0; c < d_tok; ++c) out[k] += mean[c] * p.projection(c, k);
  }
  double n = 0.0;
  for (double x : out) n += x * x;
  n = std::sqrt(n);
  for (double& x : out) x /= n;
  return out;
}

inline double total_loss(const clipn::MiniBatch& b, const clipn::EncoderParams& std_p,
                         const clipn::EncoderParams& no_p) {
  const std::size_t n = b.size();
  const bool learnable = b.mode == clipn::NoTextMode::Learnable;
  std::vector<std::vector<double>> g;
  std::vector<std::vector<double>> g_no;
  for (std::size_t i = 0; i < n; ++i) {
    g.push_back(encode(std_p, b.std_tokens[i].ids, false));
    g_no.push_back(encode(no_p, b.no_tokens[i].ids, learnable));
  }
  clipn::Matrix s(n, n);
  clipn::Matrix s_no(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < b.image_features.cols(); ++c) {
        s(i, j) += b.image_features(i, c) * g[j][c];
        s_no(i, j) += b.image_features(i, c) * g_no[j][c];
      }
    }
  }
  return itbo(s, s_no, std::exp(no_p.log_tau)) + tso(g, g_no);
}

// Every (id, ood) pair, ties counted one half.
inline double auroc(const std::vector<double>& id, const std::vector<double>& ood) {
  double wins = 0.0;
  for (double a : id) {
    for (double b : ood) wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  }
  return wins / (static_cast<double>(id.size()) * static_cast<double>(ood.size()));
}

// Tries every score value as a threshold and keeps the largest that meets the target.
inline double fpr_at_tpr(const std::vector<double>& id, const std::vector<double>& ood, double target) {
  std::set<double> candidates(id.begin(), id.end());
  candidates.insert(ood.begin(), ood.end());
  auto frac = [](const std::vector<double>& v, double t) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [t](double x) { return x >= t; })) /
           static_cast<double>(v.size());
  };
  double best = -INFINITY;
  for (double t : candidates) {
    if (frac(id, t) >= target) best = std::max(best, t);
  }
  return frac(ood, best);
}

inline double kde_at(const std::vector<double>& samples, double h, double x) {
  double acc = 0.0;
  for (double s : samples) {
    acc += std::exp(-0.5 * ((x - s) / h) * ((x - s) / h)) / (h * std::sqrt(2.0 * std::numbers::pi));
  }
  return acc / static_cast<double>(samples.size());
}

inline double p_unknown(const std::vector<double>& p, const std::vector<double>& p_no) {
  double known = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) known += (1.0 - p_no[j]) * p[j];
  return 1.0 - known;
}

}  // namespace oracle
