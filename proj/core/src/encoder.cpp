#include "clipn/encoder.hpp"

#include <random>
#include <string>

#include "clipn/error.hpp"

namespace clipn {

namespace {

void require_finite(const Matrix& m, const char* name) {
  for (double v : m.data()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, std::string(name) + " has non-finite entries");
  }
}

void check_tokens(const TokenSequence& tokens, const EncoderParams& params) {
  for (TokenId id : tokens.ids) {
    if (id >= params.vocab_size()) {
      throw Error(ErrorCode::BadTokenId, "token id " + std::to_string(id) + " >= vocabulary size " +
                                             std::to_string(params.vocab_size()));
    }
  }
}

EncoderOutput encode_pooled(const Matrix* prefix, const TokenSequence& tokens,
                            const EncoderParams& params) {
  check_tokens(tokens, params);
  const std::size_t d_tok = params.token_dim();
  const std::size_t n_prefix = prefix ? prefix->rows() : 0;
  const std::size_t count = n_prefix + tokens.ids.size();
  if (count == 0) throw Error(ErrorCode::EmptyText, "nothing to encode");

  EncoderOutput out;
  out.pooled_count = count;
  out.pooled.assign(d_tok, 0.0);
  for (std::size_t p = 0; p < n_prefix; ++p) {
    const auto row = prefix->row(p);
    for (std::size_t c = 0; c < d_tok; ++c) out.pooled[c] += row[c];
  }
  for (TokenId id : tokens.ids) {
    const auto row = params.embedding_table.row(id);
    for (std::size_t c = 0; c < d_tok; ++c) out.pooled[c] += row[c];
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (double& v : out.pooled) v *= inv;

  const std::size_t dim = params.feature_dim();
  out.projected.assign(dim, 0.0);
  for (std::size_t k = 0; k < d_tok; ++k) {
    const double h = out.pooled[k];
    const auto w = params.projection.row(k);
    for (std::size_t c = 0; c < dim; ++c) out.projected[c] += h * w[c];
  }
  out.feature = l2_normalize(out.projected);
  return out;
}

}  // namespace

void EncoderParams::validate() const {
  if (embedding_table.rows() == 0 || embedding_table.cols() == 0) {
    throw Error(ErrorCode::ShapeMismatch, "empty embedding table");
  }
  if (projection.rows() != embedding_table.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "projection rows must equal token dim");
  }
  if (projection.cols() < 2) throw Error(ErrorCode::ShapeMismatch, "feature dim must be >= 2");
  if (!no_prompt_tokens.empty() && no_prompt_tokens.cols() != embedding_table.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "prompt tokens must match token dim");
  }
  require_finite(embedding_table, "embedding_table");
  require_finite(projection, "projection");
  require_finite(no_prompt_tokens, "no_prompt_tokens");
  if (!std::isfinite(log_tau)) throw Error(ErrorCode::NonFinite, "log_tau is not finite");
}

Vector encode_image(std::span<const double> x) { return l2_normalize(x); }

EncoderOutput encode_text(const TokenSequence& tokens, const EncoderParams& params) {
  return encode_pooled(nullptr, tokens, params);
}

EncoderOutput encode_no_text(const TokenSequence& tokens, const EncoderParams& params,
                             NoTextMode mode) {
  if (mode == NoTextMode::Handcrafted) return encode_pooled(nullptr, tokens, params);
  if (params.prompt_count() == 0) {
    throw Error(ErrorCode::Precondition, "learnable mode requires at least one prompt token");
  }
  return encode_pooled(&params.no_prompt_tokens, tokens, params);
}

EncoderParams init_no_encoder(const EncoderParams& standard, const TokenSequence& negative_keywords,
                              std::size_t prompt_count) {
  standard.validate();
  check_tokens(negative_keywords, standard);
  if (negative_keywords.ids.empty()) {
    throw Error(ErrorCode::Precondition, "no negative keywords to initialize prompt tokens");
  }
  if (prompt_count == 0) throw Error(ErrorCode::Precondition, "prompt_count must be >= 1");

  EncoderParams no = standard;
  const std::size_t d_tok = standard.token_dim();
  Vector mean(d_tok, 0.0);
  for (TokenId id : negative_keywords.ids) {
    const auto row = standard.embedding_table.row(id);
    for (std::size_t c = 0; c < d_tok; ++c) mean[c] += row[c];
  }
  for (double& v : mean) v /= static_cast<double>(negative_keywords.ids.size());

  no.no_prompt_tokens = Matrix(prompt_count, d_tok);
  for (std::size_t p = 0; p < prompt_count; ++p) no.no_prompt_tokens.set_row(p, mean);
  no.trainable = {.embedding_table = true, .projection = true, .no_prompt_tokens = true, .log_tau = true};
  return no;
}

EncoderParams random_encoder_params(std::size_t vocab_size, std::size_t token_dim,
                                    std::size_t feature_dim, std::size_t prompt_count,
                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double emb_scale = 1.0 / std::sqrt(static_cast<double>(token_dim));
  EncoderParams params;
  params.embedding_table = Matrix(vocab_size, token_dim);
  for (double& v : params.embedding_table.data()) v = emb_scale * gauss(rng);
  params.projection = Matrix(token_dim, feature_dim);
  for (double& v : params.projection.data()) v = emb_scale * gauss(rng);
  params.no_prompt_tokens = Matrix(prompt_count, token_dim);
  for (double& v : params.no_prompt_tokens.data()) v = emb_scale * gauss(rng);
  params.log_tau = kDefaultLogTau;
  return params;
}

}  // namespace clipn
