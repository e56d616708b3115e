#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>

#include "clipn/numkernel.hpp"
#include "clipn/prompt.hpp"

namespace clipn {

inline constexpr std::size_t kDefaultTokenDim = 16;
inline constexpr std::size_t kDefaultFeatureDim = 16;
inline constexpr std::size_t kDefaultVocabSize = 256;
inline constexpr std::size_t kDefaultPromptTokens = 4;
inline const double kDefaultLogTau = std::log(0.07);

struct TrainableMask {
  bool embedding_table = false;
  bool projection = false;
  bool no_prompt_tokens = false;
  bool log_tau = false;

  bool any() const noexcept { return embedding_table || projection || no_prompt_tokens || log_tau; }
  friend bool operator==(const TrainableMask&, const TrainableMask&) = default;
};

/// Parameters of one toy text encoder: mean-pooled token embeddings, one
/// linear projection, L2 normalization. The "no" encoder additionally owns
/// learnable prompt tokens that stand in for the negative keywords.
struct EncoderParams {
  Matrix embedding_table;   // V x d_tok
  Matrix projection;        // d_tok x D
  Matrix no_prompt_tokens;  // P x d_tok, may be empty for the standard encoder
  double log_tau = kDefaultLogTau;
  TrainableMask trainable;

  std::size_t vocab_size() const noexcept { return embedding_table.rows(); }
  std::size_t token_dim() const noexcept { return embedding_table.cols(); }
  std::size_t feature_dim() const noexcept { return projection.cols(); }
  std::size_t prompt_count() const noexcept { return no_prompt_tokens.rows(); }
  double tau() const noexcept { return std::exp(log_tau); }

  /// Throws ShapeMismatch / NonFinite on inconsistent tensors.
  void validate() const;

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

enum class NoTextMode { Handcrafted, Learnable };

struct EncoderOutput {
  Vector feature;     // unit norm
  Vector pooled;      // mean of the input token rows
  Vector projected;   // pooled * projection, before normalization
  std::size_t pooled_count = 0;
};

/// Frozen image branch: features arrive pre-extracted, so this only normalizes.
Vector encode_image(std::span<const double> x);

EncoderOutput encode_text(const TokenSequence& tokens, const EncoderParams& params);

/// Handcrafted mode encodes the full negated string exactly like encode_text.
/// Learnable mode prepends the prompt tokens to the given (class text) tokens
/// before pooling. Throws Precondition when learnable mode has no prompt tokens.
EncoderOutput encode_no_text(const TokenSequence& tokens, const EncoderParams& params,
                             NoTextMode mode);

/// Deep copy of the standard encoder with every tensor trainable and the
/// prompt tokens set to the mean embedding of negative_keywords.
EncoderParams init_no_encoder(const EncoderParams& standard, const TokenSequence& negative_keywords,
                              std::size_t prompt_count = kDefaultPromptTokens);

/// Seeded Gaussian parameters for fixtures and benchmarks; nothing trainable.
EncoderParams random_encoder_params(std::size_t vocab_size, std::size_t token_dim,
                                    std::size_t feature_dim, std::size_t prompt_count,
                                    std::uint64_t seed);

}  // namespace clipn
