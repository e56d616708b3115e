#include "clipn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "clipn/error.hpp"

namespace clipn {

namespace {

const double kLogCap = -std::log(kLogFloor);

// -log(x) with x floored at kLogFloor, where x is given implicitly through
// -log(x) = softplus(arg).
double neg_log_clamped(double arg, bool& clamped) {
  const double v = softplus(arg);
  if (v > kLogCap) {
    clamped = true;
    return kLogCap;
  }
  return v;
}

void check_square(const Matrix& sim_std, const Matrix& sim_no) {
  if (sim_std.rows() != sim_std.cols() || sim_std.rows() != sim_no.rows() ||
      sim_std.cols() != sim_no.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "ITBO needs two N x N similarity matrices");
  }
  if (sim_std.rows() < 2) throw Error(ErrorCode::BatchTooSmall, "ITBO needs N >= 2");
  for (std::size_t k = 0; k < sim_std.size(); ++k) {
    if (!std::isfinite(sim_std.data()[k]) || !std::isfinite(sim_no.data()[k])) {
      throw Error(ErrorCode::NonFinite, "non-finite similarity");
    }
  }
}

struct Forward {
  std::vector<EncoderOutput> text;
  std::vector<EncoderOutput> no_text;
  EmbeddingMatrix g;
  EmbeddingMatrix g_no;
  Matrix sim_std;
  Matrix sim_no;
  double tau = 1.0;
  LossBreakdown loss;
};

Forward forward(const MiniBatch& batch, const EncoderParams& std_params,
                const EncoderParams& no_params) {
  batch.validate();
  const std::size_t n = batch.size();
  const std::size_t dim = batch.image_features.cols();
  if (std_params.feature_dim() != dim || no_params.feature_dim() != dim) {
    throw Error(ErrorCode::DimMismatch, "encoder feature dim does not match image features");
  }
  Forward fw;
  fw.g = EmbeddingMatrix(n, dim);
  fw.g_no = EmbeddingMatrix(n, dim);
  fw.text.reserve(n);
  fw.no_text.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    fw.text.push_back(encode_text(batch.std_tokens[i], std_params));
    fw.no_text.push_back(encode_no_text(batch.no_tokens[i], no_params, batch.mode));
    fw.g.set_row(i, fw.text.back().feature);
    fw.g_no.set_row(i, fw.no_text.back().feature);
  }
  fw.sim_std = similarity_matrix(batch.image_features, fw.g);
  fw.sim_no = similarity_matrix(batch.image_features, fw.g_no);
  fw.tau = no_params.tau();
  fw.loss.itbo = itbo_loss(fw.sim_std, fw.sim_no, fw.tau, &fw.loss.clamped);
  fw.loss.tso = tso_loss(fw.g, fw.g_no);
  fw.loss.total = fw.loss.itbo + fw.loss.tso;
  return fw;
}

void add_scaled(std::span<double> dst, std::span<const double> src, double scale) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
}

}  // namespace

void MiniBatch::validate() const {
  const std::size_t n = size();
  if (n < 2) throw Error(ErrorCode::BatchTooSmall, "mini-batch needs N >= 2, got " + std::to_string(n));
  if (std_tokens.size() != n || no_tokens.size() != n) {
    throw Error(ErrorCode::ShapeMismatch, "token lists must have one entry per image");
  }
  if (!has_unit_rows(image_features, 1e-6)) {
    throw Error(ErrorCode::Precondition, "image features must be unit norm");
  }
}

int matchness(std::size_t i, std::size_t j, std::size_t batch_size) {
  if (i >= batch_size || j >= batch_size) {
    throw Error(ErrorCode::IndexOutOfRange, "matchness index (" + std::to_string(i) + ", " +
                                                std::to_string(j) + ") outside batch of " +
                                                std::to_string(batch_size));
  }
  return i == j ? 0 : 1;
}

double p_no_from_similarities(double sim_std, double sim_no, double tau) {
  if (!(tau > 0.0)) throw Error(ErrorCode::NonPositiveTau, "tau must be > 0");
  return sigmoid((sim_no - sim_std) / tau);
}

double p_no(std::span<const double> f, std::span<const double> g, std::span<const double> g_no,
            double tau) {
  return p_no_from_similarities(dot(f, g), dot(f, g_no), tau);
}

double itbo_loss(const Matrix& sim_std, const Matrix& sim_no, double tau, bool* clamped) {
  if (!(tau > 0.0)) throw Error(ErrorCode::NonPositiveTau, "tau must be > 0");
  check_square(sim_std, sim_no);
  const std::size_t n = sim_std.rows();
  bool hit_floor = false;
  double reversed = 0.0;
  double unrelated = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double z = (sim_no(i, j) - sim_std(i, j)) / tau;
      if (matchness(i, j, n) == 0) {
        // -log(1 - sigmoid(z)) = softplus(z)
        reversed += neg_log_clamped(z, hit_floor);
      } else {
        // -log(sigmoid(z)) = softplus(-z)
        unrelated += neg_log_clamped(-z, hit_floor);
      }
    }
  }
  if (clamped) *clamped = *clamped || hit_floor;
  const auto nd = static_cast<double>(n);
  return reversed / nd + unrelated / (nd * (nd - 1.0));
}

double tso_loss(const EmbeddingMatrix& text, const EmbeddingMatrix& no_text) {
  if (text.rows() != no_text.rows() || text.cols() != no_text.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "TSO needs matching text banks");
  }
  if (text.rows() == 0) throw Error(ErrorCode::EmptyInput, "TSO of empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < text.rows(); ++i) {
    const auto g = text.row(i);
    const auto h = no_text.row(i);
    double sq = 0.0;
    for (std::size_t c = 0; c < g.size(); ++c) sq += (g[c] - h[c]) * (g[c] - h[c]);
    acc += 2.0 - std::sqrt(sq);
  }
  return acc / static_cast<double>(text.rows());
}

LossBreakdown total_loss(const MiniBatch& batch, const EncoderParams& std_params,
                         const EncoderParams& no_params) {
  return forward(batch, std_params, no_params).loss;
}

LossAndGradient loss_and_gradient(const MiniBatch& batch, const EncoderParams& std_params,
                                  const EncoderParams& no_params) {
  const Forward fw = forward(batch, std_params, no_params);
  const std::size_t n = batch.size();
  const std::size_t dim = batch.image_features.cols();
  const std::size_t d_tok = no_params.token_dim();
  const auto nd = static_cast<double>(n);
  const double tau = fw.tau;
  const double cap = kLogCap;

  // dL/dz for every (image, "no" text) pair; clamped terms are constant.
  Matrix dz(n, n);
  double dlog_tau = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double z = (fw.sim_no(i, j) - fw.sim_std(i, j)) / tau;
      const double p = sigmoid(z);
      double d = 0.0;
      if (matchness(i, j, n) == 0) {
        if (softplus(z) <= cap) d = p / nd;
      } else {
        if (softplus(-z) <= cap) d = (p - 1.0) / (nd * (nd - 1.0));
      }
      dz(i, j) = d;
      dlog_tau -= d * z;
    }
  }

  LossAndGradient out;
  out.loss = fw.loss;
  GradientSet& grad = out.grad;
  const TrainableMask& mask = no_params.trainable;
  if (mask.embedding_table) grad.embedding_table = Matrix(no_params.vocab_size(), d_tok);
  if (mask.projection) grad.projection = Matrix(d_tok, dim);
  if (mask.no_prompt_tokens) grad.no_prompt_tokens = Matrix(no_params.prompt_count(), d_tok);
  if (mask.log_tau) grad.log_tau = dlog_tau;

  Vector dg(dim);
  Vector du(dim);
  Vector dh(d_tok);
  for (std::size_t j = 0; j < n; ++j) {
    std::fill(dg.begin(), dg.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      add_scaled(dg, batch.image_features.row(i), dz(i, j) / tau);
    }
    // TSO: d(-|g - h|)/dh = -(h - g) / |h - g|
    const auto g = fw.g.row(j);
    const auto h = fw.g_no.row(j);
    double dist_sq = 0.0;
    for (std::size_t c = 0; c < dim; ++c) dist_sq += (h[c] - g[c]) * (h[c] - g[c]);
    const double dist = std::sqrt(dist_sq);
    if (dist > kZeroNormThreshold) {
      for (std::size_t c = 0; c < dim; ++c) dg[c] -= (h[c] - g[c]) / (nd * dist);
    }

    // Through the L2 normalization: du = (I - h h^T) dg / |u|.
    const EncoderOutput& enc = fw.no_text[j];
    const double unorm = norm2(enc.projected);
    const double radial = dot(h, dg);
    for (std::size_t c = 0; c < dim; ++c) du[c] = (dg[c] - h[c] * radial) / unorm;

    if (grad.projection) {
      for (std::size_t k = 0; k < d_tok; ++k) add_scaled(grad.projection->row(k), du, enc.pooled[k]);
    }
    for (std::size_t k = 0; k < d_tok; ++k) dh[k] = dot(no_params.projection.row(k), du);

    const double share = 1.0 / static_cast<double>(enc.pooled_count);
    if (grad.no_prompt_tokens && batch.mode == NoTextMode::Learnable) {
      for (std::size_t p = 0; p < no_params.prompt_count(); ++p) {
        add_scaled(grad.no_prompt_tokens->row(p), dh, share);
      }
    }
    if (grad.embedding_table) {
      for (TokenId id : batch.no_tokens[j].ids) add_scaled(grad.embedding_table->row(id), dh, share);
    }
  }
  return out;
}

GradientSet backward(const MiniBatch& batch, const EncoderParams& std_params,
                     const EncoderParams& no_params) {
  return loss_and_gradient(batch, std_params, no_params).grad;
}

void for_each_trainable(EncoderParams& params, const GradientSet& grad,
                        const std::function<void(double&, double)>& fn) {
  auto visit = [&](Matrix& tensor, const std::optional<Matrix>& g) {
    if (!g) return;
    if (g->rows() != tensor.rows() || g->cols() != tensor.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "gradient shape does not match parameter");
    }
    for (std::size_t k = 0; k < tensor.size(); ++k) fn(tensor.data()[k], g->data()[k]);
  };
  visit(params.embedding_table, grad.embedding_table);
  visit(params.projection, grad.projection);
  visit(params.no_prompt_tokens, grad.no_prompt_tokens);
  if (grad.log_tau) fn(params.log_tau, *grad.log_tau);
}

double check_gradient(std::span<double* const> coords, std::span<const double> analytic,
                      const std::function<double()>& loss, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-2)) {
    throw Error(ErrorCode::Precondition, "finite-difference eps must lie in [1e-7, 1e-2]");
  }
  if (coords.size() != analytic.size()) {
    throw Error(ErrorCode::ShapeMismatch, "one analytic gradient entry per coordinate required");
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    double& x = *coords[k];
    const double saved = x;
    x = saved + eps;
    const double up = loss();
    x = saved - eps;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

double grad_check(const MiniBatch& batch, const EncoderParams& std_params,
                  const EncoderParams& no_params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-2)) {
    throw Error(ErrorCode::Precondition, "finite-difference eps must lie in [1e-7, 1e-2]");
  }
  EncoderParams probe = no_params;
  const GradientSet grad = backward(batch, std_params, probe);
  std::vector<double*> coords;
  std::vector<double> analytic;
  for_each_trainable(probe, grad, [&](double& value, double g) {
    coords.push_back(&value);
    analytic.push_back(g);
  });
  return check_gradient(coords, analytic,
                        [&] { return total_loss(batch, std_params, probe).total; }, eps);
}

TrainingFixture random_fixture(std::uint64_t seed, const FixtureShape& shape) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<TokenId> token(0, shape.vocab - 1);

  TrainingFixture fx;
  fx.std_params = random_encoder_params(shape.vocab, shape.token_dim, shape.dim, 0, rng());
  fx.no_params = random_encoder_params(shape.vocab, shape.token_dim, shape.dim, shape.prompt_tokens, rng());
  fx.no_params.trainable = {.embedding_table = true, .projection = true, .no_prompt_tokens = true, .log_tau = true};
  // A moderate temperature keeps the sigmoids away from saturation.
  fx.no_params.log_tau = std::log(0.5);

  fx.batch.mode = shape.mode;
  fx.batch.image_features = EmbeddingMatrix(shape.batch, shape.dim);
  for (std::size_t i = 0; i < shape.batch; ++i) {
    Vector v(shape.dim);
    for (double& x : v) x = gauss(rng);
    fx.batch.image_features.set_row(i, l2_normalize(v));
  }
  for (std::size_t i = 0; i < shape.batch; ++i) {
    TokenSequence s;
    TokenSequence t;
    for (std::size_t k = 0; k < shape.tokens_per_text; ++k) {
      s.ids.push_back(token(rng));
      t.ids.push_back(token(rng));
    }
    fx.batch.std_tokens.push_back(std::move(s));
    fx.batch.no_tokens.push_back(std::move(t));
  }
  return fx;
}

TrainResult train(const std::vector<MiniBatch>& corpus, const EncoderParams& std_params,
                  EncoderParams no_params, const TrainOptions& options) {
  if (!(options.lr >= 0.0) || !std::isfinite(options.lr)) {
    throw Error(ErrorCode::Precondition, "learning rate must be finite and >= 0");
  }
  if (options.epochs == 0) throw Error(ErrorCode::Precondition, "epochs must be >= 1");
  if (corpus.empty()) throw Error(ErrorCode::EmptyInput, "training corpus is empty");
  no_params.validate();

  TrainResult result;
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLoss mean{.epoch = epoch};
    for (std::size_t b : order) {
      const LossAndGradient lg = loss_and_gradient(corpus[b], std_params, no_params);
      if (!std::isfinite(lg.loss.total) || lg.loss.total > kDivergenceThreshold) {
        throw Error(ErrorCode::DivergenceDetected,
                    "total loss " + std::to_string(lg.loss.total) + " at epoch " + std::to_string(epoch));
      }
      result.clamped = result.clamped || lg.loss.clamped;
      mean.itbo += lg.loss.itbo;
      mean.tso += lg.loss.tso;
      mean.total += lg.loss.total;
      for_each_trainable(no_params, lg.grad,
                         [&](double& value, double g) { value -= options.lr * g; });
      ++result.steps;
    }
    const auto nb = static_cast<double>(corpus.size());
    mean.itbo /= nb;
    mean.tso /= nb;
    mean.total /= nb;
    result.trace.push_back(mean);
  }
  result.params = std::move(no_params);
  return result;
}

}  // namespace clipn
