#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "clipn/encoder.hpp"
#include "clipn/numkernel.hpp"
#include "clipn/prompt.hpp"

namespace clipn {

/// N image features paired with their captions. In learnable mode the
/// no_tokens are the caption tokens the prompt tokens get prepended to; in
/// handcrafted mode they are the tokenized negated captions.
struct MiniBatch {
  EmbeddingMatrix image_features;
  std::vector<TokenSequence> std_tokens;
  std::vector<TokenSequence> no_tokens;
  NoTextMode mode = NoTextMode::Learnable;

  std::size_t size() const noexcept { return image_features.rows(); }
  /// Throws BatchTooSmall for N < 2 and ShapeMismatch for inconsistent sizes.
  void validate() const;
};

struct LossBreakdown {
  double itbo = 0.0;
  double tso = 0.0;
  double total = 0.0;
  bool clamped = false;  // a log argument hit the 1e-300 floor
};

/// One entry per trainable tensor of the "no" encoder; frozen tensors stay empty.
struct GradientSet {
  std::optional<Matrix> embedding_table;
  std::optional<Matrix> projection;
  std::optional<Matrix> no_prompt_tokens;
  std::optional<double> log_tau;
};

inline constexpr double kLogFloor = 1e-300;

/// 0 when the i-th image and j-th "no" text are reversed matched (i == j),
/// 1 when they are matched yet unrelated. Throws IndexOutOfRange.
int matchness(std::size_t i, std::size_t j, std::size_t batch_size);

/// Binary softmax between the "no" and standard similarity, as a sigmoid of
/// (sim_no - sim_std) / tau.
double p_no_from_similarities(double sim_std, double sim_no, double tau);
double p_no(std::span<const double> f, std::span<const double> g, std::span<const double> g_no,
            double tau);

/// Image-text binary-opposite loss over N x N similarity matrices. When a
/// log argument would fall below kLogFloor the term is clamped and *clamped
/// is set.
double itbo_loss(const Matrix& sim_std, const Matrix& sim_no, double tau, bool* clamped = nullptr);

/// Text semantic-opposite loss, (1/N) sum_i (2 - |g_i - g_no_i|).
double tso_loss(const EmbeddingMatrix& text, const EmbeddingMatrix& no_text);

LossBreakdown total_loss(const MiniBatch& batch, const EncoderParams& std_params,
                         const EncoderParams& no_params);

struct LossAndGradient {
  LossBreakdown loss;
  GradientSet grad;
};

LossAndGradient loss_and_gradient(const MiniBatch& batch, const EncoderParams& std_params,
                                  const EncoderParams& no_params);

GradientSet backward(const MiniBatch& batch, const EncoderParams& std_params,
                     const EncoderParams& no_params);

/// Central-difference check of `analytic` against `loss` over the given
/// coordinates. Returns max |a - n| / max(|a|, |n|, 1e-12).
double check_gradient(std::span<double* const> coords, std::span<const double> analytic,
                      const std::function<double()>& loss, double eps);

/// Perturbs every trainable coordinate of no_params by +-eps. Throws
/// Precondition unless eps is in [1e-7, 1e-2].
double grad_check(const MiniBatch& batch, const EncoderParams& std_params,
                  const EncoderParams& no_params, double eps);

/// Visits every trainable scalar of params in a fixed order alongside the
/// matching gradient entry.
void for_each_trainable(EncoderParams& params, const GradientSet& grad,
                        const std::function<void(double& value, double gradient)>& fn);

/// Small random problem with every "no" tensor trainable, for gradient
/// checks and benchmarks.
struct TrainingFixture {
  MiniBatch batch;
  EncoderParams std_params;
  EncoderParams no_params;
};

struct FixtureShape {
  std::size_t batch = 4;
  std::size_t dim = 8;
  std::size_t vocab = 12;
  std::size_t token_dim = 6;
  std::size_t prompt_tokens = 2;
  std::size_t tokens_per_text = 3;
  NoTextMode mode = NoTextMode::Learnable;
};

TrainingFixture random_fixture(std::uint64_t seed, const FixtureShape& shape = {});

struct TrainOptions {
  double lr = 0.1;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
};

struct EpochLoss {
  std::size_t epoch = 0;
  double itbo = 0.0;
  double tso = 0.0;
  double total = 0.0;
};

struct TrainResult {
  EncoderParams params;
  std::vector<EpochLoss> trace;  // batch means per epoch, measured before each step
  std::size_t steps = 0;
  bool clamped = false;
};

inline constexpr double kDivergenceThreshold = 1e3;

/// Plain gradient descent on the trainable tensors of no_params. Batch order
/// is reshuffled every epoch from `seed`. Throws DivergenceDetected when a
/// batch loss exceeds kDivergenceThreshold or goes non-finite.
TrainResult train(const std::vector<MiniBatch>& corpus, const EncoderParams& std_params,
                  EncoderParams no_params, const TrainOptions& options);

}  // namespace clipn
