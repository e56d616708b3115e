#include "clipn/prompt.hpp"

#include <cctype>

#include "clipn/error.hpp"

namespace clipn {

namespace {

constexpr std::string_view kPlaceholder = "{}";

std::size_t count_placeholders(std::string_view s) {
  std::size_t n = 0;
  for (auto pos = s.find(kPlaceholder); pos != std::string_view::npos;
       pos = s.find(kPlaceholder, pos + kPlaceholder.size())) {
    ++n;
  }
  return n;
}

}  // namespace

void PromptPool::validate() const {
  if (templates.empty()) throw Error(ErrorCode::Precondition, "prompt pool is empty");
  for (const auto& t : templates) {
    if (count_placeholders(t) != 1) {
      throw Error(ErrorCode::Precondition, "template needs exactly one {} placeholder: " + t);
    }
  }
}

PromptPool default_standard_pool() {
  return {{
              "a photo of a {}",
              "a blurry photo of a {}",
              "a photo of the {}",
              "a good photo of a {}",
              "a close-up photo of a {}",
              "a bright photo of a {}",
              "a cropped photo of the {}",
              "a photo of my {}",
              "a low resolution photo of a {}",
              "a rendering of a {}",
          },
          Polarity::Standard};
}

PromptPool default_negation_pool() {
  return {{
              "a photo without {}",
              "a photo not appearing {}",
              "a photo not containing {}",
              "a blurry photo without {}",
              "a photo with no {}",
              "a photo that does not show {}",
              "a good photo without the {}",
              "a close-up photo not containing a {}",
              "a photo lacking the {}",
              "a rendering without a {}",
          },
          Polarity::Negation};
}

std::vector<std::string> default_negative_keywords() {
  return {"without", "not", "no", "lacking"};
}

Vocabulary::Vocabulary() { add(kUnknown); }

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  for (const auto& w : words) add(w);
}

TokenId Vocabulary::add(std::string_view word) {
  if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
  const TokenId id = words_.size();
  words_.emplace_back(word);
  index_.emplace(words_.back(), id);
  return id;
}

TokenId Vocabulary::lookup(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? 0 : it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return index_.contains(std::string(word));
}

std::vector<std::string> Vocabulary::words() const {
  return {words_.begin() + 1, words_.end()};
}

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::vector<std::string> expand_prompts(std::string_view class_name, const PromptPool& pool) {
  if (class_name.empty()) throw Error(ErrorCode::EmptyClassName, "class name is empty");
  pool.validate();
  std::vector<std::string> out;
  out.reserve(pool.templates.size());
  for (const auto& t : pool.templates) {
    std::string s = t;
    s.replace(s.find(kPlaceholder), kPlaceholder.size(), class_name);
    out.push_back(std::move(s));
  }
  return out;
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  const auto words = normalize_words(text);
  if (words.empty()) throw Error(ErrorCode::EmptyText, "no tokens in \"" + std::string(text) + "\"");
  TokenSequence seq;
  seq.ids.reserve(words.size());
  for (const auto& w : words) seq.ids.push_back(vocab.lookup(w));
  return seq;
}

Vector ensemble_features(const EmbeddingMatrix& features) {
  if (features.rows() == 0) throw Error(ErrorCode::EmptyInput, "no prompt features to ensemble");
  if (features.rows() == 1) return features.row_vector(0);
  Vector sum(features.cols(), 0.0);
  for (std::size_t r = 0; r < features.rows(); ++r) {
    const auto row = features.row(r);
    for (std::size_t c = 0; c < sum.size(); ++c) sum[c] += row[c];
  }
  return l2_normalize(sum);
}

}  // namespace clipn
