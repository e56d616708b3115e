#include "clipn/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>

#include "clipn/error.hpp"

namespace clipn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --- little-endian byte helpers ---------------------------------------------

template <typename UInt>
void put_le(std::string& out, UInt v) {
  for (std::size_t b = 0; b < sizeof(UInt); ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename UInt>
  UInt get(const char* what) {
    need(sizeof(UInt), what);
    UInt v = 0;
    for (std::size_t b = 0; b < sizeof(UInt); ++b) {
      v |= static_cast<UInt>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    }
    pos_ += sizeof(UInt);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw Error(ErrorCode::Truncated, std::string("file ends inside ") + what + " (need " +
                                            std::to_string(n) + " bytes, have " +
                                            std::to_string(remaining()) + ")");
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw Error(ErrorCode::IoError, "read failed for " + path.string());
  return std::move(buf).str();
}

void write_file_locked(const fs::path& path, std::string_view bytes) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::IoError, "cannot open " + path.string() + ": " + std::strerror(errno));
  auto fail = [&](const char* step) {
    const std::string msg = std::string(step) + " failed for " + path.string() + ": " + std::strerror(errno);
    ::close(fd);
    throw Error(ErrorCode::IoError, msg);
  };
  if (::flock(fd, LOCK_EX) != 0) fail("flock");
  if (::ftruncate(fd, 0) != 0) fail("ftruncate");
  std::size_t written = 0;
  while (written < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + written, bytes.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail("write");
    }
    written += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) fail("fsync");
  ::flock(fd, LOCK_UN);
  ::close(fd);
}

// --- synthetic data helpers ---------------------------------------------------

const std::vector<std::string>& base_class_names() {
  static const std::vector<std::string> names = {
      "cow",   "cat",   "fish",  "dog",   "bird",  "horse", "frog",   "ship",
      "truck", "deer",  "plane", "car",   "apple", "bear",  "tiger",  "whale",
  };
  return names;
}

std::string class_name_at(std::size_t k) {
  const auto& names = base_class_names();
  return k < names.size() ? names[k] : "class" + std::to_string(k);
}

Vector gaussian_vector(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector v(dim);
  for (double& x : v) x = gauss(rng);
  return v;
}

LabeledEmbeddings draw_samples(const EmbeddingMatrix& directions, std::size_t n_per_class,
                               double spread, std::mt19937_64& rng) {
  LabeledEmbeddings out;
  const std::size_t dim = directions.cols();
  out.features = EmbeddingMatrix(directions.rows() * n_per_class, dim);
  out.labels.reserve(out.features.rows());
  std::size_t r = 0;
  for (std::size_t c = 0; c < directions.rows(); ++c) {
    for (std::size_t s = 0; s < n_per_class; ++s, ++r) {
      const Vector noise = gaussian_vector(rng, dim);
      Vector x(dim);
      for (std::size_t k = 0; k < dim; ++k) x[k] = directions(c, k) + spread * noise[k];
      out.features.set_row(r, l2_normalize(x));
      out.labels.push_back(c);
    }
  }
  return out;
}

json pool_to_json(const PromptPool& pool) { return pool.templates; }

PromptPool pool_from_json(const json& j, Polarity polarity) {
  PromptPool pool{j.get<std::vector<std::string>>(), polarity};
  pool.validate();
  return pool;
}

}  // namespace

// --- embedding file -----------------------------------------------------------

std::string encode_embeddings(std::span<const NamedMatrix> sections) {
  if (sections.empty()) throw Error(ErrorCode::EmptyInput, "no sections to write");
  std::set<std::string> names;
  for (const auto& s : sections) {
    if (s.name.empty()) throw Error(ErrorCode::DuplicateSection, "section name is empty");
    if (s.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw Error(ErrorCode::Precondition, "section name too long: " + s.name);
    }
    if (!names.insert(s.name).second) throw Error(ErrorCode::DuplicateSection, "duplicate section " + s.name);
  }

  std::string out(kFileMagic.begin(), kFileMagic.end());
  put_le<std::uint32_t>(out, kFileVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.name.size()));
    out += s.name;
    put_le<std::uint64_t>(out, s.matrix.rows());
    put_le<std::uint64_t>(out, s.matrix.cols());
    out.push_back(static_cast<char>(kElementF64));
    for (double v : s.matrix.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<NamedMatrix> decode_embeddings(std::string_view bytes) {
  Reader in(bytes);
  const auto magic = in.take(kFileMagic.size(), "magic");
  if (!std::equal(magic.begin(), magic.end(), kFileMagic.begin())) {
    throw Error(ErrorCode::BadMagic, "not a CLPN embedding file");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kFileVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "file version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>("section count");
  std::vector<NamedMatrix> sections;
  std::set<std::string> names;
  for (std::uint32_t s = 0; s < count; ++s) {
    const auto name_len = in.get<std::uint16_t>("section name length");
    std::string name(in.take(name_len, "section name"));
    const auto rows = in.get<std::uint64_t>("row count");
    const auto dim = in.get<std::uint64_t>("dim");
    const auto type = in.get<std::uint8_t>("element type");
    if (type != kElementF64) {
      throw Error(ErrorCode::UnsupportedVersion, "element type " + std::to_string(type) + " in section " + name);
    }
    if (dim != 0 && rows > in.remaining() / 8 / dim) {
      throw Error(ErrorCode::Truncated, "payload of section " + name + " is shorter than rows x dim");
    }
    if (!names.insert(name).second) throw Error(ErrorCode::DuplicateSection, "duplicate section " + name);
    std::vector<double> data(rows * dim);
    for (double& v : data) v = std::bit_cast<double>(in.get<std::uint64_t>("payload"));
    sections.push_back({std::move(name), Matrix(rows, dim, std::move(data))});
  }
  if (in.remaining() != 0) {
    throw Error(ErrorCode::IoError, std::to_string(in.remaining()) + " trailing bytes after last section");
  }
  return sections;
}

void write_embeddings(std::span<const NamedMatrix> sections, const fs::path& path) {
  write_file_locked(path, encode_embeddings(sections));
}

std::vector<NamedMatrix> read_embeddings(const fs::path& path) {
  return decode_embeddings(read_file(path));
}

const Matrix& find_section(const std::vector<NamedMatrix>& sections, std::string_view name) {
  for (const auto& s : sections) {
    if (s.name == name) return s.matrix;
  }
  throw Error(ErrorCode::Precondition, "missing section '" + std::string(name) + "'");
}

// --- checkpoints --------------------------------------------------------------

std::vector<NamedMatrix> checkpoint_sections(const Checkpoint& ckpt) {
  const EncoderParams& p = ckpt.params;
  const TrainableMask& m = p.trainable;
  std::vector<NamedMatrix> out = {
      {"embedding_table", p.embedding_table},
      {"projection", p.projection},
  };
  if (p.prompt_count() > 0) out.push_back({"no_prompt_tokens", p.no_prompt_tokens});
  out.push_back({"log_tau", Matrix(1, 1, {p.log_tau})});
  out.push_back({"trainable", Matrix(1, 4,
                                     {m.embedding_table ? 1.0 : 0.0, m.projection ? 1.0 : 0.0,
                                      m.no_prompt_tokens ? 1.0 : 0.0, m.log_tau ? 1.0 : 0.0})});
  out.push_back({"mode", Matrix(1, 1, {ckpt.mode == NoTextMode::Learnable ? 1.0 : 0.0})});
  return out;
}

Checkpoint checkpoint_from_sections(const std::vector<NamedMatrix>& sections) {
  Checkpoint ckpt;
  EncoderParams& p = ckpt.params;
  p.embedding_table = find_section(sections, "embedding_table");
  p.projection = find_section(sections, "projection");
  const bool has_prompts = std::any_of(sections.begin(), sections.end(),
                                       [](const NamedMatrix& s) { return s.name == "no_prompt_tokens"; });
  p.no_prompt_tokens = has_prompts ? find_section(sections, "no_prompt_tokens")
                                    : Matrix(0, p.embedding_table.cols());
  const Matrix& log_tau = find_section(sections, "log_tau");
  const Matrix& mask = find_section(sections, "trainable");
  const Matrix& mode = find_section(sections, "mode");
  if (log_tau.size() != 1 || mask.size() != 4 || mode.size() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "malformed checkpoint metadata sections");
  }
  p.log_tau = log_tau.data()[0];
  p.trainable = {mask.data()[0] != 0.0, mask.data()[1] != 0.0, mask.data()[2] != 0.0, mask.data()[3] != 0.0};
  ckpt.mode = mode.data()[0] != 0.0 ? NoTextMode::Learnable : NoTextMode::Handcrafted;
  p.validate();
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  write_embeddings(checkpoint_sections(ckpt), path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  return checkpoint_from_sections(read_embeddings(path));
}

void save_labeled(const LabeledEmbeddings& data, const fs::path& path) {
  if (data.labels.size() != data.features.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "one label per feature row required");
  }
  Matrix labels(data.labels.size(), 1);
  for (std::size_t i = 0; i < data.labels.size(); ++i) labels(i, 0) = static_cast<double>(data.labels[i]);
  const std::vector<NamedMatrix> sections = {{"features", data.features}, {"labels", std::move(labels)}};
  write_embeddings(sections, path);
}

LabeledEmbeddings load_labeled(const fs::path& path) {
  const auto sections = read_embeddings(path);
  LabeledEmbeddings out;
  out.features = find_section(sections, "features");
  const Matrix& labels = find_section(sections, "labels");
  if (labels.rows() != out.features.rows() || labels.cols() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "labels section must be N x 1 in " + path.string());
  }
  for (double v : labels.data()) {
    if (!(v >= 0.0) || v != std::floor(v)) throw Error(ErrorCode::Precondition, "labels must be non-negative integers");
    out.labels.push_back(static_cast<std::size_t>(v));
  }
  if (!has_unit_rows(out.features)) {
    throw Error(ErrorCode::Precondition, "feature rows in " + path.string() + " are not unit norm");
  }
  return out;
}

// --- manifest -----------------------------------------------------------------

fs::path Manifest::resolve(const fs::path& p) const {
  if (p.empty() || p.is_absolute()) return p;
  return base_dir / p;
}

PromptPool Manifest::effective_standard_pool() const {
  return standard_pool.value_or(default_standard_pool());
}

PromptPool Manifest::effective_negation_pool() const {
  return negation_pool.value_or(default_negation_pool());
}

Vocabulary Manifest::vocab() const { return Vocabulary(vocabulary); }

std::string manifest_to_json(const Manifest& m) {
  json j;
  j["version"] = 1;
  j["id_class_names"] = m.id_class_names;
  j["ood_label"] = m.ood_label;
  j["embeddings"] = {{"train", m.train.generic_string()},
                     {"id_test", m.id_test.generic_string()},
                     {"ood_test", m.ood_test.generic_string()}};
  j["encoder"] = m.encoder.generic_string();
  if (m.no_encoder) j["no_encoder"] = m.no_encoder->generic_string();
  if (m.standard_pool || m.negation_pool) {
    json pools = json::object();
    if (m.standard_pool) pools["standard"] = pool_to_json(*m.standard_pool);
    if (m.negation_pool) pools["negation"] = pool_to_json(*m.negation_pool);
    j["prompt_pools"] = pools;
  }
  j["vocabulary"] = m.vocabulary;
  j["tau"] = m.tau ? json(*m.tau) : json(nullptr);
  j["seed"] = m.seed;
  return j.dump(2) + "\n";
}

Manifest manifest_from_json(std::string_view text) {
  Manifest m;
  try {
    const json j = json::parse(text);
    if (j.value("version", 1) != 1) throw Error(ErrorCode::BadManifest, "unsupported manifest version");
    m.id_class_names = j.at("id_class_names").get<std::vector<std::string>>();
    m.ood_label = j.value("ood_label", std::string{});
    const json& emb = j.at("embeddings");
    m.train = emb.value("train", std::string{});
    m.id_test = emb.value("id_test", std::string{});
    m.ood_test = emb.value("ood_test", std::string{});
    m.encoder = j.at("encoder").get<std::string>();
    if (j.contains("no_encoder") && !j["no_encoder"].is_null()) {
      m.no_encoder = fs::path(j["no_encoder"].get<std::string>());
    }
    if (j.contains("prompt_pools")) {
      const json& pools = j["prompt_pools"];
      if (pools.contains("standard")) m.standard_pool = pool_from_json(pools["standard"], Polarity::Standard);
      if (pools.contains("negation")) m.negation_pool = pool_from_json(pools["negation"], Polarity::Negation);
    }
    m.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    if (j.contains("tau") && !j["tau"].is_null()) m.tau = j["tau"].get<double>();
    m.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadManifest, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::BadManifest) throw;
    throw Error(ErrorCode::BadManifest, e.what());
  }
  if (m.id_class_names.size() < 2) throw Error(ErrorCode::BadManifest, "manifest needs >= 2 class names");
  if (m.tau && !(*m.tau > 0.0)) throw Error(ErrorCode::BadManifest, "tau override must be > 0");
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  write_file_locked(path, manifest_to_json(m));
}

Manifest load_manifest(const fs::path& path) {
  Manifest m = manifest_from_json(read_file(path));
  m.base_dir = path.parent_path();
  std::vector<fs::path> referenced = {m.encoder};
  for (const auto* p : {&m.train, &m.id_test, &m.ood_test}) {
    if (!p->empty()) referenced.push_back(*p);
  }
  if (m.no_encoder) referenced.push_back(*m.no_encoder);
  for (const auto& p : referenced) {
    if (!fs::exists(m.resolve(p))) {
      throw Error(ErrorCode::BadManifest, "referenced path does not exist: " + m.resolve(p).string());
    }
  }
  return m;
}

// --- synthetic benchmark ------------------------------------------------------

void SynthConfig::validate() const {
  if (c_id < 2) throw Error(ErrorCode::Precondition, "synth needs c_id >= 2");
  if (c_ood < 1) throw Error(ErrorCode::Precondition, "synth needs c_ood >= 1");
  if (n_per_class < 2) throw Error(ErrorCode::Precondition, "synth needs n_per_class >= 2");
  if (dim < 2) throw Error(ErrorCode::Precondition, "synth needs dim >= 2");
  if (!(intra_spread >= 0.0) || !std::isfinite(intra_spread)) {
    throw Error(ErrorCode::Precondition, "intra_spread must be finite and >= 0");
  }
}

Vocabulary build_vocabulary(const std::vector<std::string>& class_names,
                            const PromptPool& standard_pool, const PromptPool& negation_pool) {
  Vocabulary vocab;
  for (const auto* pool : {&standard_pool, &negation_pool}) {
    for (const auto& t : pool->templates) {
      for (const auto& w : normalize_words(t)) vocab.add(w);
    }
  }
  for (const auto& w : default_negative_keywords()) vocab.add(w);
  for (const auto& name : class_names) {
    for (const auto& w : normalize_words(name)) vocab.add(w);
  }
  return vocab;
}

TokenSequence negative_keyword_tokens(const Vocabulary& vocab) {
  TokenSequence seq;
  for (const auto& w : default_negative_keywords()) {
    if (vocab.contains(w)) seq.ids.push_back(vocab.lookup(w));
  }
  return seq;
}

std::vector<MiniBatch> make_batches(const LabeledEmbeddings& train,
                                    const std::vector<std::string>& class_names,
                                    const Vocabulary& vocab, const PromptPool& standard_pool,
                                    const PromptPool& negation_pool, NoTextMode mode,
                                    std::uint64_t seed) {
  standard_pool.validate();
  negation_pool.validate();
  if (train.labels.size() != train.features.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "one label per training row required");
  }
  std::vector<std::vector<std::size_t>> by_class(class_names.size());
  for (std::size_t i = 0; i < train.labels.size(); ++i) {
    if (train.labels[i] >= class_names.size()) {
      throw Error(ErrorCode::IndexOutOfRange, "training label " + std::to_string(train.labels[i]) +
                                                  " has no class name");
    }
    by_class[train.labels[i]].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::size_t rounds = 0;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    rounds = std::max(rounds, members.size());
  }

  std::uniform_int_distribution<std::size_t> pick_std(0, standard_pool.templates.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_neg(0, negation_pool.templates.size() - 1);
  std::vector<MiniBatch> batches;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::vector<std::size_t> rows;
    for (const auto& members : by_class) {
      if (r < members.size()) rows.push_back(members[r]);
    }
    if (rows.size() < 2) continue;
    MiniBatch batch;
    batch.mode = mode;
    batch.image_features = EmbeddingMatrix(rows.size(), train.features.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      batch.image_features.set_row(k, train.features.row(rows[k]));
      const std::string& name = class_names[train.labels[rows[k]]];
      const auto captions = expand_prompts(name, standard_pool);
      const TokenSequence caption = tokenize(captions[pick_std(rng)], vocab);
      batch.std_tokens.push_back(caption);
      if (mode == NoTextMode::Learnable) {
        batch.no_tokens.push_back(caption);
      } else {
        const auto negated = expand_prompts(name, negation_pool);
        batch.no_tokens.push_back(tokenize(negated[pick_neg(rng)], vocab));
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

SynthData synth_generate(const SynthConfig& cfg, NoTextMode mode) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const std::size_t total = cfg.c_id + cfg.c_ood;

  // Class directions on the sphere with pairwise cosine capped.
  std::vector<Vector> directions;
  std::size_t rejections = 0;
  while (directions.size() < total) {
    Vector candidate;
    try {
      candidate = l2_normalize(gaussian_vector(rng, cfg.dim));
    } catch (const Error&) {
      ++rejections;
      continue;
    }
    const bool separated = std::all_of(directions.begin(), directions.end(), [&](const Vector& d) {
      return dot(d, candidate) <= kMaxInterClassCosine;
    });
    if (separated) {
      directions.push_back(std::move(candidate));
    } else if (++rejections > kMaxRejections) {
      throw Error(ErrorCode::RejectionOverflow,
                  "could not place " + std::to_string(total) + " classes in dimension " +
                      std::to_string(cfg.dim) + " with cosine <= 0.8");
    }
  }

  SynthData data;
  for (std::size_t k = 0; k < total; ++k) {
    (k < cfg.c_id ? data.id_class_names : data.ood_class_names).push_back(class_name_at(k));
  }
  data.id_directions = Matrix::from_rows({directions.begin(), directions.begin() + static_cast<std::ptrdiff_t>(cfg.c_id)});
  data.ood_directions = Matrix::from_rows({directions.begin() + static_cast<std::ptrdiff_t>(cfg.c_id), directions.end()});

  data.train = draw_samples(data.id_directions, cfg.n_per_class, cfg.intra_spread, rng);
  data.id_test = draw_samples(data.id_directions, cfg.n_per_class, cfg.intra_spread, rng);
  data.ood_test = draw_samples(data.ood_directions, cfg.n_per_class, cfg.intra_spread, rng);

  // Frozen "pretrained" text encoder: each class word embeds onto its
  // direction, every other word gets a short random vector.
  std::vector<std::string> all_names = data.id_class_names;
  all_names.insert(all_names.end(), data.ood_class_names.begin(), data.ood_class_names.end());
  const PromptPool standard = default_standard_pool();
  const PromptPool negation = default_negation_pool();
  data.vocab = build_vocabulary(all_names, standard, negation);

  constexpr double kFillerNorm = 0.1;
  EncoderParams& enc = data.text_encoder;
  enc.embedding_table = Matrix(data.vocab.size(), cfg.dim);
  const double filler_scale = kFillerNorm / std::sqrt(static_cast<double>(cfg.dim));
  for (std::size_t id = 0; id < data.vocab.size(); ++id) {
    const Vector noise = gaussian_vector(rng, cfg.dim);
    for (std::size_t c = 0; c < cfg.dim; ++c) enc.embedding_table(id, c) = filler_scale * noise[c];
  }
  for (std::size_t k = 0; k < total; ++k) {
    enc.embedding_table.set_row(data.vocab.lookup(all_names[k]), directions[k]);
  }
  enc.projection = Matrix::identity(cfg.dim);
  enc.log_tau = kDefaultLogTau;

  data.train_batches = make_batches(data.train, data.id_class_names, data.vocab, standard, negation,
                                    mode, rng());
  return data;
}

}  // namespace clipn
