#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clipn/encoder.hpp"
#include "clipn/losses.hpp"
#include "clipn/numkernel.hpp"
#include "clipn/prompt.hpp"

namespace clipn {

// ---------------------------------------------------------------------------
// Embedding file (".clpn"), little-endian:
//
//   "CLPN"            4 bytes
//   version           u32 (= 1)
//   section_count     u32
//   per section:
//     name_len        u16, then name_len bytes of name
//     rows            u64
//     dim             u64
//     element_type    u8  (1 = f64)
//     payload         rows * dim * 8 bytes, row-major
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kFileMagic = {'C', 'L', 'P', 'N'};
inline constexpr std::uint32_t kFileVersion = 1;
inline constexpr std::uint8_t kElementF64 = 1;

struct NamedMatrix {
  std::string name;
  Matrix matrix;
  friend bool operator==(const NamedMatrix&, const NamedMatrix&) = default;
};

/// Serializes sections to the byte layout above. Throws EmptyInput for an
/// empty list and DuplicateSection for repeated or empty names.
std::string encode_embeddings(std::span<const NamedMatrix> sections);
/// Throws BadMagic, UnsupportedVersion, Truncated or DuplicateSection.
std::vector<NamedMatrix> decode_embeddings(std::string_view bytes);

/// Writes under an exclusive advisory lock and fsyncs before returning.
void write_embeddings(std::span<const NamedMatrix> sections, const std::filesystem::path& path);
std::vector<NamedMatrix> read_embeddings(const std::filesystem::path& path);

/// Throws Precondition when the section is missing.
const Matrix& find_section(const std::vector<NamedMatrix>& sections, std::string_view name);

// Encoder checkpoints reuse the embedding file with one section per tensor.
struct Checkpoint {
  EncoderParams params;
  NoTextMode mode = NoTextMode::Learnable;
};

std::vector<NamedMatrix> checkpoint_sections(const Checkpoint& ckpt);
Checkpoint checkpoint_from_sections(const std::vector<NamedMatrix>& sections);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Images with integer class labels, stored as the "features" and "labels"
/// sections of an embedding file.
struct LabeledEmbeddings {
  EmbeddingMatrix features;
  std::vector<std::size_t> labels;
};

void save_labeled(const LabeledEmbeddings& data, const std::filesystem::path& path);
LabeledEmbeddings load_labeled(const std::filesystem::path& path);

/// Run configuration document. Relative paths resolve against the
/// directory holding the manifest file.
struct Manifest {
  std::vector<std::string> id_class_names;
  std::string ood_label;
  std::filesystem::path train;
  std::filesystem::path id_test;
  std::filesystem::path ood_test;
  std::filesystem::path encoder;
  std::optional<std::filesystem::path> no_encoder;
  std::optional<PromptPool> standard_pool;
  std::optional<PromptPool> negation_pool;
  std::vector<std::string> vocabulary;
  std::optional<double> tau;
  std::uint64_t seed = 0;

  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  PromptPool effective_standard_pool() const;
  PromptPool effective_negation_pool() const;
  Vocabulary vocab() const;
};

std::string manifest_to_json(const Manifest& m);
/// Throws BadManifest on schema violations; base_dir is left empty.
Manifest manifest_from_json(std::string_view text);
void save_manifest(const Manifest& m, const std::filesystem::path& path);
/// Also verifies that every referenced path exists (BadManifest otherwise).
Manifest load_manifest(const std::filesystem::path& path);

struct SynthConfig {
  std::size_t c_id = 4;
  std::size_t c_ood = 2;
  std::size_t dim = 16;
  std::size_t n_per_class = 50;
  double intra_spread = 0.15;
  std::uint64_t seed = 42;

  /// Throws Precondition on c_id < 2, c_ood < 1, n_per_class < 2, dim < 2
  /// or a negative spread.
  void validate() const;
};

inline constexpr double kMaxInterClassCosine = 0.8;
inline constexpr std::size_t kMaxRejections = 10000;

/// Synthetic stand-in for a pretrained image/text model plus ID and OOD data.
struct SynthData {
  std::vector<std::string> id_class_names;
  std::vector<std::string> ood_class_names;
  EmbeddingMatrix id_directions;
  EmbeddingMatrix ood_directions;
  LabeledEmbeddings train;
  LabeledEmbeddings id_test;
  LabeledEmbeddings ood_test;  // labels index ood_class_names
  Vocabulary vocab;
  EncoderParams text_encoder;  // frozen, class tokens embed onto their directions
  std::vector<MiniBatch> train_batches;
};

/// Fully deterministic given cfg.seed. Throws RejectionOverflow when the
/// class directions cannot be separated in the requested dimension.
SynthData synth_generate(const SynthConfig& cfg, NoTextMode mode = NoTextMode::Learnable);

/// One sample per class per batch, so off-diagonal pairs are always
/// unrelated. Captions are drawn from the standard pool; handcrafted mode
/// pairs each with a negated caption drawn from the negation pool.
std::vector<MiniBatch> make_batches(const LabeledEmbeddings& train,
                                    const std::vector<std::string>& class_names,
                                    const Vocabulary& vocab, const PromptPool& standard_pool,
                                    const PromptPool& negation_pool, NoTextMode mode,
                                    std::uint64_t seed);

/// Words of both pools plus the class names, in first-seen order.
Vocabulary build_vocabulary(const std::vector<std::string>& class_names,
                            const PromptPool& standard_pool, const PromptPool& negation_pool);

/// Token ids of the default negative keywords present in vocab.
TokenSequence negative_keyword_tokens(const Vocabulary& vocab);

}  // namespace clipn
