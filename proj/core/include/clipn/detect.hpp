#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clipn/encoder.hpp"
#include "clipn/numkernel.hpp"
#include "clipn/prompt.hpp"

namespace clipn {

/// Standard and "no" text features for C in-distribution classes.
struct ClassTextBank {
  std::vector<std::string> class_names;
  EmbeddingMatrix text;     // C x D
  EmbeddingMatrix no_text;  // C x D
  double tau = 0.07;

  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::size_t dim() const noexcept { return text.cols(); }
  /// Throws on C < 2, duplicate names, shape or norm violations, tau <= 0.
  void validate() const;
};

enum class Method { Msp, MaxLogit, Energy, React, Odin, Ctw, Atd };

std::string_view to_string(Method m) noexcept;
/// Throws Precondition on an unknown name.
Method parse_method(std::string_view name);
/// Comma separated list, e.g. "msp,atd".
std::vector<Method> parse_methods(std::string_view list);
std::vector<Method> all_methods();

struct DetectionResult {
  Method method = Method::Msp;
  double idness = 0.0;                  // higher means more in-distribution
  std::optional<bool> is_id = std::nullopt;  // only the threshold-free rules decide
  std::optional<Vector> per_class_probs = std::nullopt;
  std::optional<double> p_unknown = std::nullopt;
};

/// How the ATD verdict compares the unknown-class probability: against the
/// plain class probabilities or against the rescaled (1 - p_no) * p ones.
enum class AtdCompare { Original, Rescaled };

struct DetectOptions {
  double energy_T = 1.0;
  double odin_T = 1000.0;
  double odin_epsilon = 0.0014;
  double react_clamp = std::numeric_limits<double>::infinity();
  AtdCompare atd_compare = AtdCompare::Original;
};

/// Softmax over <f, g_k> / tau.
Vector id_probabilities(std::span<const double> f, const ClassTextBank& bank);

/// Threshold-free rules evaluated on precomputed class probabilities p and
/// per-class "no" probabilities p_no.
DetectionResult ctw_from_probabilities(std::span<const double> p, std::span<const double> p_no);
DetectionResult atd_from_probabilities(std::span<const double> p, std::span<const double> p_no,
                                       AtdCompare compare = AtdCompare::Original);

/// p_no of f against every class of the bank.
Vector no_probabilities(std::span<const double> f, const ClassTextBank& bank);

DetectionResult ctw(std::span<const double> f, const ClassTextBank& bank);
DetectionResult atd(std::span<const double> f, const ClassTextBank& bank,
                    AtdCompare compare = AtdCompare::Original);
DetectionResult msp(std::span<const double> f, const ClassTextBank& bank);
DetectionResult maxlogit(std::span<const double> f, const ClassTextBank& bank);
DetectionResult energy(std::span<const double> f, const ClassTextBank& bank, double T = 1.0);
DetectionResult react(std::span<const double> f, const ClassTextBank& bank, double clamp,
                      double T = 1.0);
DetectionResult odin(std::span<const double> f, const ClassTextBank& bank, double T_odin,
                     double epsilon);

DetectionResult score(Method method, std::span<const double> f, const ClassTextBank& bank,
                      const DetectOptions& options);

/// Scores every row of `features` with every method. Output is ordered
/// sample-major: all methods for row 0, then row 1, ... Work is split
/// across `threads` workers without affecting the result.
std::vector<DetectionResult> score_batch(const EmbeddingMatrix& features, const ClassTextBank& bank,
                                         std::span<const Method> methods,
                                         const DetectOptions& options, std::size_t threads = 1);

/// Linear-interpolated percentile (pct in [0, 100]) over every activation
/// of the given features; used as the ReAct clamp.
double activation_percentile(const EmbeddingMatrix& features, double pct);

struct BankSpec {
  std::vector<std::string> class_names;
  PromptPool standard_pool = default_standard_pool();
  PromptPool negation_pool = default_negation_pool();
  NoTextMode mode = NoTextMode::Learnable;
};

/// Prompt-ensembled class features. In handcrafted mode the "no" side uses
/// the negation pool; in learnable mode it prepends the learned prompt tokens
/// to every standard prompt. tau comes from no_params.
ClassTextBank build_bank(const BankSpec& spec, const Vocabulary& vocab,
                         const EncoderParams& std_params, const EncoderParams& no_params);

}  // namespace clipn
