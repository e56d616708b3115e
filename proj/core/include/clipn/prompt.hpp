#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "clipn/numkernel.hpp"

namespace clipn {

enum class Polarity { Standard, Negation };

/// Templated prompts, each with exactly one "{}" placeholder for the class name.
struct PromptPool {
  std::vector<std::string> templates;
  Polarity polarity = Polarity::Standard;

  /// Throws Precondition if the pool is empty or a template does not carry
  /// exactly one placeholder.
  void validate() const;
};

PromptPool default_standard_pool();
PromptPool default_negation_pool();

/// Words that carry the negative meaning in the handcrafted "no" prompts.
/// Their mean embedding seeds the learnable prompt tokens.
std::vector<std::string> default_negative_keywords();

using TokenId = std::size_t;

struct TokenSequence {
  std::vector<TokenId> ids;
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Word-level vocabulary. Index 0 is always the unknown token.
class Vocabulary {
 public:
  static constexpr std::string_view kUnknown = "<unk>";

  Vocabulary();
  /// Words are assigned indices 1..n in order; duplicates and the unknown
  /// token itself are skipped.
  explicit Vocabulary(const std::vector<std::string>& words);

  /// Appends the word if new and returns its index.
  TokenId add(std::string_view word);
  TokenId lookup(std::string_view word) const;
  bool contains(std::string_view word) const;

  std::size_t size() const noexcept { return words_.size(); }
  const std::string& word(TokenId id) const { return words_.at(id); }
  /// All words except the unknown token, in index order.
  std::vector<std::string> words() const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Lowercases, strips non-alphanumeric characters and splits on whitespace.
std::vector<std::string> normalize_words(std::string_view text);

std::vector<std::string> expand_prompts(std::string_view class_name, const PromptPool& pool);

/// Throws EmptyText when no word survives normalization.
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);

/// Sum of the rows, renormalized to unit length.
Vector ensemble_features(const EmbeddingMatrix& features);

}  // namespace clipn
