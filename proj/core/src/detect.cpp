#include "clipn/detect.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <set>
#include <thread>

#include "clipn/error.hpp"
#include "clipn/losses.hpp"

namespace clipn {

namespace {

void check_dim(std::span<const double> f, const ClassTextBank& bank) {
  if (f.size() != bank.dim()) {
    throw Error(ErrorCode::DimMismatch, "feature dim " + std::to_string(f.size()) +
                                            " does not match bank dim " + std::to_string(bank.dim()));
  }
}

Vector class_similarities(std::span<const double> f, const EmbeddingMatrix& bank_rows) {
  Vector sims(bank_rows.rows());
  for (std::size_t k = 0; k < sims.size(); ++k) sims[k] = dot(f, bank_rows.row(k));
  return sims;
}

std::size_t first_argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

double energy_of_similarities(std::span<const double> sims, double tau, double T) {
  if (!(T > 0.0)) throw Error(ErrorCode::NonPositiveT, "energy temperature must be > 0");
  Vector scaled(sims.size());
  for (std::size_t k = 0; k < sims.size(); ++k) scaled[k] = sims[k] / (tau * T);
  return T * logsumexp(scaled);
}

EmbeddingMatrix encode_prompts(const std::vector<std::string>& prompts, const Vocabulary& vocab,
                               const EncoderParams& params, std::optional<NoTextMode> no_mode) {
  EmbeddingMatrix rows(prompts.size(), params.feature_dim());
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    const TokenSequence tokens = tokenize(prompts[k], vocab);
    const EncoderOutput out =
        no_mode ? encode_no_text(tokens, params, *no_mode) : encode_text(tokens, params);
    rows.set_row(k, out.feature);
  }
  return rows;
}

}  // namespace

void ClassTextBank::validate() const {
  if (class_names.size() < 2) throw Error(ErrorCode::Precondition, "bank needs C >= 2 classes");
  std::set<std::string> seen;
  for (const auto& name : class_names) {
    if (!seen.insert(name).second) throw Error(ErrorCode::DuplicateClass, "duplicate class " + name);
  }
  if (text.rows() != class_names.size() || no_text.rows() != class_names.size() ||
      text.cols() != no_text.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "bank feature matrices must be C x D");
  }
  if (!has_unit_rows(text) || !has_unit_rows(no_text)) {
    throw Error(ErrorCode::Precondition, "bank features must be unit norm");
  }
  if (!(tau > 0.0)) throw Error(ErrorCode::NonPositiveTau, "bank tau must be > 0");
}

std::string_view to_string(Method m) noexcept {
  switch (m) {
    case Method::Msp: return "msp";
    case Method::MaxLogit: return "maxlogit";
    case Method::Energy: return "energy";
    case Method::React: return "react";
    case Method::Odin: return "odin";
    case Method::Ctw: return "ctw";
    case Method::Atd: return "atd";
  }
  return "unknown";
}

std::vector<Method> all_methods() {
  return {Method::Msp, Method::MaxLogit, Method::Energy, Method::React,
          Method::Odin, Method::Ctw, Method::Atd};
}

Method parse_method(std::string_view name) {
  for (Method m : all_methods()) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::Precondition, "unknown method '" + std::string(name) + "'");
}

std::vector<Method> parse_methods(std::string_view list) {
  std::vector<Method> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto comma = list.find(',', start);
    const auto item = list.substr(start, comma == std::string_view::npos ? list.size() - start
                                                                        : comma - start);
    if (!item.empty()) out.push_back(parse_method(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw Error(ErrorCode::Precondition, "empty method list");
  return out;
}

Vector id_probabilities(std::span<const double> f, const ClassTextBank& bank) {
  check_dim(f, bank);
  return stable_softmax(class_similarities(f, bank.text), bank.tau);
}

Vector no_probabilities(std::span<const double> f, const ClassTextBank& bank) {
  check_dim(f, bank);
  Vector out(bank.num_classes());
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k] = p_no(f, bank.text.row(k), bank.no_text.row(k), bank.tau);
  }
  return out;
}

DetectionResult ctw_from_probabilities(std::span<const double> p, std::span<const double> p_no) {
  if (p.empty() || p.size() != p_no.size()) {
    throw Error(ErrorCode::ShapeMismatch, "CTW needs one p_no per class probability");
  }
  const std::size_t j = first_argmax(p);
  DetectionResult r{.method = Method::Ctw};
  r.idness = 1.0 - p_no[j];
  r.is_id = (1.0 - p_no[j]) >= p_no[j];
  r.per_class_probs = Vector(p.begin(), p.end());
  return r;
}

DetectionResult atd_from_probabilities(std::span<const double> p, std::span<const double> p_no,
                                       AtdCompare compare) {
  if (p.empty() || p.size() != p_no.size()) {
    throw Error(ErrorCode::ShapeMismatch, "ATD needs one p_no per class probability");
  }
  Vector extended(p.size() + 1);
  double mass = 0.0;
  double kept = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    extended[j] = (1.0 - p_no[j]) * p[j];
    mass += p[j];
    kept += extended[j];
  }
  if (!(mass > 0.0)) throw Error(ErrorCode::Precondition, "ATD needs a probability vector with positive mass");
  // Measured against the actual mass of p rather than a literal 1 so the
  // p_no extremes land exactly on 0 and 1 despite softmax rounding.
  const double unknown = (mass - kept) / mass;
  for (std::size_t j = 0; j < p.size(); ++j) extended[j] /= mass;
  extended.back() = unknown;

  const double reference = compare == AtdCompare::Original
                               ? *std::max_element(p.begin(), p.end())
                               : *std::max_element(extended.begin(), extended.end() - 1);
  DetectionResult r{.method = Method::Atd};
  r.idness = 1.0 - unknown;
  r.is_id = unknown <= reference;
  r.per_class_probs = std::move(extended);
  r.p_unknown = unknown;
  return r;
}

DetectionResult ctw(std::span<const double> f, const ClassTextBank& bank) {
  const Vector p = id_probabilities(f, bank);
  // Only the winning class's "no" probability matters.
  const std::size_t j = first_argmax(p);
  Vector p_no_vec(p.size(), 0.0);
  p_no_vec[j] = p_no(f, bank.text.row(j), bank.no_text.row(j), bank.tau);
  return ctw_from_probabilities(p, p_no_vec);
}

DetectionResult atd(std::span<const double> f, const ClassTextBank& bank, AtdCompare compare) {
  return atd_from_probabilities(id_probabilities(f, bank), no_probabilities(f, bank), compare);
}

DetectionResult msp(std::span<const double> f, const ClassTextBank& bank) {
  Vector p = id_probabilities(f, bank);
  DetectionResult r{.method = Method::Msp};
  r.idness = *std::max_element(p.begin(), p.end());
  r.per_class_probs = std::move(p);
  return r;
}

DetectionResult maxlogit(std::span<const double> f, const ClassTextBank& bank) {
  check_dim(f, bank);
  const Vector sims = class_similarities(f, bank.text);
  double best = -std::numeric_limits<double>::infinity();
  for (double s : sims) best = std::max(best, s / bank.tau);
  return {.method = Method::MaxLogit, .idness = best};
}

DetectionResult energy(std::span<const double> f, const ClassTextBank& bank, double T) {
  check_dim(f, bank);
  const Vector sims = class_similarities(f, bank.text);
  return {.method = Method::Energy, .idness = energy_of_similarities(sims, bank.tau, T)};
}

DetectionResult react(std::span<const double> f, const ClassTextBank& bank, double clamp, double T) {
  check_dim(f, bank);
  Vector clipped(f.begin(), f.end());
  bool changed = false;
  for (double& v : clipped) {
    if (v > clamp) {
      v = clamp;
      changed = true;
    }
  }
  if (changed) clipped = l2_normalize(clipped);
  const Vector sims = class_similarities(clipped, bank.text);
  return {.method = Method::React, .idness = energy_of_similarities(sims, bank.tau, T)};
}

DetectionResult odin(std::span<const double> f, const ClassTextBank& bank, double T_odin,
                     double epsilon) {
  check_dim(f, bank);
  if (!(T_odin > 0.0)) throw Error(ErrorCode::NonPositiveT, "ODIN temperature must be > 0");
  if (!(epsilon >= 0.0)) throw Error(ErrorCode::Precondition, "ODIN epsilon must be >= 0");
  const double scale = bank.tau * T_odin;

  Vector input(f.begin(), f.end());
  if (epsilon > 0.0) {
    // Logits are linear in f, so grad_f log max softmax = (g_j - sum_k q_k g_k) / scale.
    const Vector q = stable_softmax(class_similarities(f, bank.text), scale);
    const std::size_t j = first_argmax(q);
    Vector perturbed(f.begin(), f.end());
    for (std::size_t c = 0; c < perturbed.size(); ++c) {
      double grad = bank.text(j, c);
      for (std::size_t k = 0; k < q.size(); ++k) grad -= q[k] * bank.text(k, c);
      const double sign = grad > 0.0 ? 1.0 : (grad < 0.0 ? -1.0 : 0.0);
      perturbed[c] += epsilon * sign;
    }
    input = l2_normalize(perturbed);
  }
  Vector p = stable_softmax(class_similarities(input, bank.text), scale);
  DetectionResult r{.method = Method::Odin};
  r.idness = *std::max_element(p.begin(), p.end());
  r.per_class_probs = std::move(p);
  return r;
}

DetectionResult score(Method method, std::span<const double> f, const ClassTextBank& bank,
                      const DetectOptions& options) {
  switch (method) {
    case Method::Msp: return msp(f, bank);
    case Method::MaxLogit: return maxlogit(f, bank);
    case Method::Energy: return energy(f, bank, options.energy_T);
    case Method::React: return react(f, bank, options.react_clamp, options.energy_T);
    case Method::Odin: return odin(f, bank, options.odin_T, options.odin_epsilon);
    case Method::Ctw: return ctw(f, bank);
    case Method::Atd: return atd(f, bank, options.atd_compare);
  }
  throw Error(ErrorCode::Precondition, "unhandled method");
}

std::vector<DetectionResult> score_batch(const EmbeddingMatrix& features, const ClassTextBank& bank,
                                         std::span<const Method> methods,
                                         const DetectOptions& options, std::size_t threads) {
  bank.validate();
  const std::size_t n = features.rows();
  const std::size_t m = methods.size();
  std::vector<DetectionResult> out(n * m);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t k = 0; k < m; ++k) out[i * m + k] = score(methods[k], features.row(i), bank, options);
    }
  };

  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    work(0, n);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = std::min(n, t * chunk);
    const std::size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&, t, begin, end] {
      try {
        work(begin, end);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

double activation_percentile(const EmbeddingMatrix& features, double pct) {
  if (features.empty()) throw Error(ErrorCode::EmptyInput, "no activations for percentile");
  if (!(pct >= 0.0 && pct <= 100.0)) throw Error(ErrorCode::Precondition, "percentile must be in [0, 100]");
  std::vector<double> values = features.data();
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ClassTextBank build_bank(const BankSpec& spec, const Vocabulary& vocab,
                         const EncoderParams& std_params, const EncoderParams& no_params) {
  spec.standard_pool.validate();
  spec.negation_pool.validate();
  std::set<std::string> seen;
  for (const auto& name : spec.class_names) {
    if (!seen.insert(name).second) throw Error(ErrorCode::DuplicateClass, "duplicate class " + name);
  }
  if (std_params.feature_dim() != no_params.feature_dim()) {
    throw Error(ErrorCode::DimMismatch, "standard and no encoders disagree on feature dim");
  }

  ClassTextBank bank;
  bank.class_names = spec.class_names;
  bank.tau = no_params.tau();
  const std::size_t c = spec.class_names.size();
  bank.text = EmbeddingMatrix(c, std_params.feature_dim());
  bank.no_text = EmbeddingMatrix(c, no_params.feature_dim());
  for (std::size_t k = 0; k < c; ++k) {
    const auto& name = spec.class_names[k];
    const auto standard = expand_prompts(name, spec.standard_pool);
    bank.text.set_row(k, ensemble_features(encode_prompts(standard, vocab, std_params, std::nullopt)));
    const auto negated = spec.mode == NoTextMode::Handcrafted
                             ? expand_prompts(name, spec.negation_pool)
                             : standard;
    bank.no_text.set_row(k, ensemble_features(encode_prompts(negated, vocab, no_params, spec.mode)));
  }
  return bank;
}

}  // namespace clipn
