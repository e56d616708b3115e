#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "clipn/store.hpp"
#include "support/expect_error.hpp"
#include "support/temp_dir.hpp"

using namespace clipn;
using testing_support::code_of;
using testing_support::slurp;
using testing_support::spit;
using testing_support::TempDir;

namespace {

Matrix random_matrix(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(1, 12);
  std::uniform_int_distribution<std::uint64_t> bits;
  Matrix m(dim(rng), dim(rng));
  for (double& x : m.data()) {
    // Any finite bit pattern, so subnormals and signed zeros are covered.
    do {
      x = std::bit_cast<double>(bits(rng));
    } while (!std::isfinite(x));
  }
  return m;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

std::string one_section_bytes() {
  const std::vector<NamedMatrix> s = {{"x", Matrix::from_rows({{0.6, 0.8}})}};
  return encode_embeddings(s);
}

double cosine(std::span<const double> a, std::span<const double> b) { return dot(a, b); }

}  // namespace

TEST(EmbeddingFile, ByteLayout) {
  const std::string b = one_section_bytes();
  // magic 4 + version 4 + count 4 + name_len 2 + name 1 + rows 8 + dim 8 + type 1 + payload 16
  ASSERT_EQ(b.size(), 48u);
  EXPECT_EQ(b.substr(0, 4), "CLPN");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 1);
  EXPECT_EQ(b[12], 1);
  EXPECT_EQ(b[14], 'x');
  EXPECT_EQ(b[15], 1);  // rows
  EXPECT_EQ(b[23], 2);  // dim
  EXPECT_EQ(b[31], 1);  // f64
  double v = 0.0;
  std::memcpy(&v, b.data() + 32, 8);
  EXPECT_EQ(v, 0.6);
}

TEST(EmbeddingFile, SingleSectionRoundTrip) {
  TempDir dir;
  const std::vector<NamedMatrix> s = {{"features", Matrix::from_rows({{0.6, 0.8}})}};
  write_embeddings(s, dir / "a.clpn");
  EXPECT_EQ(read_embeddings(dir / "a.clpn"), s);
}

TEST(EmbeddingFile, SectionsKeepOrderAndNames) {
  TempDir dir;
  const std::vector<NamedMatrix> s = {{"zeta", Matrix(2, 3, 1.5)}, {"alpha", Matrix(1, 1, -2.0)}};
  write_embeddings(s, dir / "b.clpn");
  const auto back = read_embeddings(dir / "b.clpn");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "zeta");
  EXPECT_EQ(back[1].name, "alpha");
  EXPECT_EQ(back, s);
  EXPECT_EQ(find_section(back, "alpha"), s[1].matrix);
  EXPECT_EQ(code_of([&] { find_section(back, "beta"); }), ErrorCode::Precondition);
}

TEST(EmbeddingFile, WriteRejectsBadSectionLists) {
  TempDir dir;
  EXPECT_EQ(code_of([&] { write_embeddings({}, dir / "c.clpn"); }), ErrorCode::EmptyInput);
  const std::vector<NamedMatrix> dup = {{"a", Matrix(1, 1)}, {"a", Matrix(1, 1)}};
  EXPECT_EQ(code_of([&] { write_embeddings(dup, dir / "c.clpn"); }), ErrorCode::DuplicateSection);
  const std::vector<NamedMatrix> unnamed = {{"", Matrix(1, 1)}};
  EXPECT_EQ(code_of([&] { write_embeddings(unnamed, dir / "c.clpn"); }), ErrorCode::DuplicateSection);
  EXPECT_EQ(code_of([&] { write_embeddings(dup, dir / "missing" / "c.clpn"); }), ErrorCode::DuplicateSection);
  const std::vector<NamedMatrix> ok = {{"a", Matrix(1, 1)}};
  EXPECT_EQ(code_of([&] { write_embeddings(ok, dir / "missing" / "c.clpn"); }), ErrorCode::IoError);
}

TEST(EmbeddingFile, RandomMatricesRoundTripBitExact) {
  TempDir dir;
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    const std::vector<NamedMatrix> s = {{"m", random_matrix(rng)}, {"n", random_matrix(rng)}};
    const auto path = dir / ("r" + std::to_string(t) + ".clpn");
    write_embeddings(s, path);
    const auto back = read_embeddings(path);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_TRUE(bitwise_equal(back[0].matrix, s[0].matrix));
    EXPECT_TRUE(bitwise_equal(back[1].matrix, s[1].matrix));
  }
}

TEST(EmbeddingFile, CorruptMagic) {
  std::string b = one_section_bytes();
  b[0] = 'X';
  EXPECT_EQ(code_of([&] { decode_embeddings(b); }), ErrorCode::BadMagic);
}

TEST(EmbeddingFile, VersionTwo) {
  std::string b = one_section_bytes();
  b[4] = 2;
  EXPECT_EQ(code_of([&] { decode_embeddings(b); }), ErrorCode::UnsupportedVersion);
}

TEST(EmbeddingFile, PayloadOneByteShort) {
  std::string b = one_section_bytes();
  b.pop_back();
  EXPECT_EQ(code_of([&] { decode_embeddings(b); }), ErrorCode::Truncated);
}

TEST(EmbeddingFile, TruncatedAnywhere) {
  const std::string b = one_section_bytes();
  for (std::size_t n = 4; n < b.size(); ++n) {
    EXPECT_EQ(code_of([&] { decode_embeddings(std::string_view(b).substr(0, n)); }), ErrorCode::Truncated) << n;
  }
  // Too short to even hold the magic.
  EXPECT_EQ(code_of([&] { decode_embeddings("CL"); }), ErrorCode::Truncated);
}

TEST(EmbeddingFile, OnDiskCorruptionSurfacesFromRead) {
  TempDir dir;
  const std::vector<NamedMatrix> s = {{"x", Matrix(3, 3, 0.5)}};
  write_embeddings(s, dir / "ok.clpn");
  std::string b = slurp(dir / "ok.clpn");
  spit(dir / "short.clpn", b.substr(0, b.size() - 1));
  EXPECT_EQ(code_of([&] { read_embeddings(dir / "short.clpn"); }), ErrorCode::Truncated);
  b[1] = '?';
  spit(dir / "magic.clpn", b);
  EXPECT_EQ(code_of([&] { read_embeddings(dir / "magic.clpn"); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([&] { read_embeddings(dir / "absent.clpn"); }), ErrorCode::IoError);
}

TEST(EmbeddingFile, OtherMalformations) {
  std::string b = one_section_bytes();
  std::string wrong_type = b;
  wrong_type[31] = 2;
  EXPECT_EQ(code_of([&] { decode_embeddings(wrong_type); }), ErrorCode::UnsupportedVersion);
  EXPECT_EQ(code_of([&] { decode_embeddings(b + "z"); }), ErrorCode::IoError);
}

TEST(Checkpoint, RoundTripBothModes) {
  TempDir dir;
  for (std::size_t p : {0, 3}) {
    for (NoTextMode mode : {NoTextMode::Learnable, NoTextMode::Handcrafted}) {
      Checkpoint c{random_encoder_params(9, 4, 5, p, 3), mode};
      c.params.log_tau = -1.25;
      c.params.trainable = {.embedding_table = true, .projection = false, .no_prompt_tokens = p > 0, .log_tau = true};
      save_checkpoint(c, dir / "ck.clpn");
      const Checkpoint back = load_checkpoint(dir / "ck.clpn");
      EXPECT_EQ(back.params, c.params);
      EXPECT_EQ(back.mode, mode);
    }
  }
}

TEST(Checkpoint, MissingTensorIsReported) {
  Checkpoint c{random_encoder_params(9, 4, 5, 2, 3), NoTextMode::Learnable};
  auto sections = checkpoint_sections(c);
  sections.erase(sections.begin() + 1);
  EXPECT_ANY_THROW(checkpoint_from_sections(sections));
}

TEST(Labeled, RoundTrip) {
  TempDir dir;
  LabeledEmbeddings d{normalize_rows(Matrix::from_rows({{1, 2}, {3, -1}, {0, 1}})), {2, 0, 7}};
  save_labeled(d, dir / "l.clpn");
  const LabeledEmbeddings back = load_labeled(dir / "l.clpn");
  EXPECT_EQ(back.features, d.features);
  EXPECT_EQ(back.labels, d.labels);
}

TEST(Manifest, JsonRoundTrip) {
  Manifest m;
  m.id_class_names = {"cow", "cat"};
  m.ood_label = "ood";
  m.train = "train.clpn";
  m.id_test = "sub/id.clpn";
  m.ood_test = "/abs/ood.clpn";
  m.encoder = "enc.clpn";
  m.no_encoder = "no.clpn";
  m.standard_pool = PromptPool{{"a {}"}, Polarity::Standard};
  m.negation_pool = PromptPool{{"no {}"}, Polarity::Negation};
  m.vocabulary = {"a", "no", "cow", "cat"};
  m.tau = 0.5;
  m.seed = 99;
  const Manifest back = manifest_from_json(manifest_to_json(m));
  EXPECT_EQ(back.id_class_names, m.id_class_names);
  EXPECT_EQ(back.ood_label, m.ood_label);
  EXPECT_EQ(back.id_test, m.id_test);
  EXPECT_EQ(back.ood_test, m.ood_test);
  EXPECT_EQ(back.no_encoder, m.no_encoder);
  EXPECT_EQ(back.standard_pool->templates, m.standard_pool->templates);
  EXPECT_EQ(back.negation_pool->templates, m.negation_pool->templates);
  EXPECT_EQ(back.vocabulary, m.vocabulary);
  EXPECT_EQ(back.tau, m.tau);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(m));
}

TEST(Manifest, DefaultsWhenOptionalKeysAbsent) {
  const Manifest m = manifest_from_json(
      R"({"id_class_names": ["a", "b"], "embeddings": {"train": "t"}, "encoder": "e", "vocabulary": ["a"]})");
  EXPECT_FALSE(m.tau.has_value());
  EXPECT_FALSE(m.no_encoder.has_value());
  EXPECT_EQ(m.effective_negation_pool().templates, default_negation_pool().templates);
  EXPECT_EQ(m.vocab().lookup("a"), 1u);
}

TEST(Manifest, SchemaViolations) {
  EXPECT_EQ(code_of([] { manifest_from_json("{not json"); }), ErrorCode::BadManifest);
  EXPECT_EQ(code_of([] { manifest_from_json(R"({"id_class_names": ["a", "b"]})"); }), ErrorCode::BadManifest);
  EXPECT_EQ(code_of([] {
              manifest_from_json(R"({"id_class_names": ["a"], "embeddings": {}, "encoder": "e", "vocabulary": []})");
            }),
            ErrorCode::BadManifest);
  EXPECT_EQ(code_of([] {
              manifest_from_json(
                  R"({"id_class_names": ["a", "b"], "embeddings": {}, "encoder": "e", "vocabulary": [], "tau": -1})");
            }),
            ErrorCode::BadManifest);
  EXPECT_EQ(code_of([] {
              manifest_from_json(
                  R"({"id_class_names": ["a", "b"], "embeddings": {}, "encoder": "e", "vocabulary": [],
                      "prompt_pools": {"standard": ["no placeholder"]}})");
            }),
            ErrorCode::BadManifest);
}

TEST(Manifest, PathsResolveAgainstManifestDirAndMustExist) {
  TempDir dir;
  std::filesystem::create_directories(dir / "data");
  spit(dir / "data" / "enc.clpn", "x");
  Manifest m;
  m.id_class_names = {"a", "b"};
  m.encoder = "enc.clpn";
  m.vocabulary = {"a", "b"};
  save_manifest(m, dir / "data" / "manifest.json");
  const Manifest back = load_manifest(dir / "data" / "manifest.json");
  EXPECT_EQ(back.resolve(back.encoder), dir / "data" / "enc.clpn");
  EXPECT_EQ(back.resolve("/x/y"), std::filesystem::path("/x/y"));

  m.train = "missing.clpn";
  save_manifest(m, dir / "data" / "manifest.json");
  EXPECT_EQ(code_of([&] { load_manifest(dir / "data" / "manifest.json"); }), ErrorCode::BadManifest);
}

TEST(Synth, SameSeedBitwiseIdentical) {
  const SynthData a = synth_generate({});
  const SynthData b = synth_generate({});
  EXPECT_EQ(a.id_directions, b.id_directions);
  EXPECT_EQ(a.train.features, b.train.features);
  EXPECT_EQ(a.ood_test.features, b.ood_test.features);
  EXPECT_EQ(a.text_encoder, b.text_encoder);
  ASSERT_EQ(a.train_batches.size(), b.train_batches.size());
  for (std::size_t k = 0; k < a.train_batches.size(); ++k) {
    EXPECT_EQ(a.train_batches[k].image_features, b.train_batches[k].image_features);
    EXPECT_EQ(a.train_batches[k].std_tokens, b.train_batches[k].std_tokens);
  }
}

TEST(Synth, DistinctSeedsDistinctDirections) {
  EXPECT_NE(synth_generate({.seed = 1}).id_directions, synth_generate({.seed = 2}).id_directions);
}

TEST(Synth, NoiselessLimit) {
  const SynthData d = synth_generate({.intra_spread = 0.0});
  for (std::size_t i = 0; i < d.id_test.features.rows(); ++i) {
    EXPECT_EQ(d.id_test.features.row_vector(i), d.id_directions.row_vector(d.id_test.labels[i]));
  }
  for (std::size_t i = 0; i < d.ood_test.features.rows(); ++i) {
    EXPECT_EQ(d.ood_test.features.row_vector(i), d.ood_directions.row_vector(d.ood_test.labels[i]));
  }
}

TEST(Synth, IntraClassTighterThanInterClass) {
  const SynthData d = synth_generate({.c_id = 4, .c_ood = 2, .dim = 16, .n_per_class = 50, .intra_spread = 0.15, .seed = 42});
  const Matrix& f = d.id_test.features;
  double intra = 0.0;
  double inter = 0.0;
  std::size_t n_intra = 0;
  std::size_t n_inter = 0;
  for (std::size_t i = 0; i < f.rows(); ++i) {
    for (std::size_t j = i + 1; j < f.rows(); ++j) {
      const double c = cosine(f.row(i), f.row(j));
      if (d.id_test.labels[i] == d.id_test.labels[j]) {
        intra += c;
        ++n_intra;
      } else {
        inter += c;
        ++n_inter;
      }
    }
  }
  EXPECT_GT(intra / static_cast<double>(n_intra), inter / static_cast<double>(n_inter));
}

TEST(Synth, ShapesNormsAndSeparation) {
  const SynthConfig cfg{.c_id = 4, .c_ood = 2, .dim = 16, .n_per_class = 50};
  const SynthData d = synth_generate(cfg);
  EXPECT_EQ(d.id_class_names.size(), 4u);
  EXPECT_EQ(d.ood_class_names.size(), 2u);
  EXPECT_EQ(d.train.features.rows(), 200u);
  EXPECT_EQ(d.id_test.features.rows(), 200u);
  EXPECT_EQ(d.ood_test.features.rows(), 100u);
  for (const Matrix* m : {&d.train.features, &d.id_test.features, &d.ood_test.features}) {
    for (std::size_t i = 0; i < m->rows(); ++i) EXPECT_NEAR(norm2(m->row(i)), 1.0, 1e-9);
  }
  std::vector<Vector> rows;
  for (std::size_t i = 0; i < d.id_directions.rows(); ++i) rows.push_back(d.id_directions.row_vector(i));
  for (std::size_t i = 0; i < d.ood_directions.rows(); ++i) rows.push_back(d.ood_directions.row_vector(i));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) EXPECT_LE(cosine(rows[i], rows[j]), kMaxInterClassCosine);
  }
}

TEST(Synth, OodClassesNeverCaptioned) {
  const SynthData d = synth_generate({});
  for (const auto& name : d.ood_class_names) {
    const TokenId id = d.vocab.lookup(name);
    ASSERT_NE(id, 0u);
    for (const MiniBatch& b : d.train_batches) {
      for (const auto* seqs : {&b.std_tokens, &b.no_tokens}) {
        for (const TokenSequence& t : *seqs) EXPECT_EQ(std::count(t.ids.begin(), t.ids.end(), id), 0);
      }
    }
  }
}

TEST(Synth, BatchesHoldOneSamplePerClass) {
  const SynthData d = synth_generate({.c_id = 3, .n_per_class = 5});
  ASSERT_EQ(d.train_batches.size(), 5u);
  for (const MiniBatch& b : d.train_batches) {
    EXPECT_EQ(b.size(), 3u);
    EXPECT_NO_THROW(b.validate());
  }
}

TEST(Synth, TooManyClassesForDimension) {
  EXPECT_EQ(code_of([] { synth_generate({.c_id = 8, .c_ood = 4, .dim = 2, .n_per_class = 2}); }),
            ErrorCode::RejectionOverflow);
}

TEST(Synth, ConfigValidation) {
  EXPECT_EQ(code_of([] { synth_generate({.c_id = 1}); }), ErrorCode::Precondition);
  EXPECT_EQ(code_of([] { synth_generate({.c_ood = 0}); }), ErrorCode::Precondition);
  EXPECT_EQ(code_of([] { synth_generate({.n_per_class = 1}); }), ErrorCode::Precondition);
  EXPECT_EQ(code_of([] { synth_generate({.intra_spread = -0.1}); }), ErrorCode::Precondition);
}
