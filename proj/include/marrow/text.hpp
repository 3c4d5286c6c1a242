#pragma once

// Tokenizer, vocabulary and MaxP segmentation.
//
// Text is lowercased and split into maximal runs of word bytes (ASCII
// alphanumerics and any byte >= 0x80, so UTF-8 sequences stay whole);
// every other non-space byte is a single-character token.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "marrow/error.hpp"

namespace marrow {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr std::size_t kReservedTokens = 3;

struct TokenSequence {
  std::vector<TokenId> ids;
  bool truncated = false;

  std::size_t size() const noexcept { return ids.size(); }
  bool empty() const noexcept { return ids.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

namespace detail {

inline bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace detail

/// Splits text into lowercase word and punctuation tokens.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (detail::is_word_byte(c)) {
      std::size_t j = i;
      std::string word;
      while (j < text.size() && detail::is_word_byte(static_cast<unsigned char>(text[j]))) {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[j]))));
        ++j;
      }
      out.push_back(std::move(word));
      i = j;
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return out;
}

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<unk>", "</s>"} { reindex(); }

  /// Builds from an explicit id-ordered token list; the first three entries
  /// must be the reserved tokens.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < kReservedTokens || tokens_[0] != "<pad>" || tokens_[1] != "<unk>" || tokens_[2] != "</s>") {
      throw DataError("vocabulary must start with <pad>, <unk>, </s>");
    }
    reindex();
    if (index_.size() != tokens_.size()) throw DataError("vocabulary contains duplicate tokens");
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnkId : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  nlohmann::json to_json() const { return nlohmann::json{{"tokens", tokens_}}; }
  static Vocabulary from_json(const nlohmann::json& j) {
    return Vocabulary(j.at("tokens").get<std::vector<std::string>>());
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Keeps the (cap − 3 − |required|) most frequent tokens of the corpus, ties
/// broken by first occurrence. `required` tokens take the ids right after the
/// reserved ones regardless of frequency.
template <typename Range>
Vocabulary build_vocab(const Range& corpus, std::size_t cap, const std::vector<std::string>& required = {}) {
  if (cap <= kReservedTokens + required.size()) {
    throw ContractError("vocabulary cap " + std::to_string(cap) + " leaves no room for corpus tokens");
  }
  struct Entry {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Entry> counts;
  std::vector<std::string> order;
  bool any_document = false;
  for (const auto& text : corpus) {
    any_document = true;
    for (auto& word : split_words(text)) {
      auto [it, inserted] = counts.try_emplace(word, Entry{0, order.size()});
      if (inserted) order.push_back(word);
      ++it->second.count;
    }
  }
  if (!any_document || order.empty()) throw DataError("cannot build a vocabulary from an empty corpus");

  std::vector<std::string> tokens = {"<pad>", "<unk>", "</s>"};
  for (const auto& r : required) {
    if (std::find(tokens.begin(), tokens.end(), r) == tokens.end()) tokens.push_back(r);
  }
  std::vector<const std::string*> ranked;
  for (const auto& w : order) {
    if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) ranked.push_back(&w);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [&](const std::string* a, const std::string* b) {
    return counts.at(*a).count > counts.at(*b).count;
  });
  const std::size_t room = cap - tokens.size();
  for (std::size_t i = 0; i < ranked.size() && i < room; ++i) tokens.push_back(*ranked[i]);
  return Vocabulary(std::move(tokens));
}

/// Keeps the first `max_len` tokens; out-of-vocabulary words map to <unk>.
inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 1) throw ContractError("tokenize: max_len must be at least 1");
  TokenSequence seq;
  for (const auto& word : split_words(text)) {
    if (seq.ids.size() == max_len) {
      seq.truncated = true;
      break;
    }
    seq.ids.push_back(vocab.id(word));
  }
  return seq;
}

/// One window per start offset 0, stride, 2·stride, ... below the document
/// length; trailing windows may be shorter. A document that fits in a single
/// window (including an empty one) is returned whole as one segment.
inline std::vector<TokenSequence> segment_maxp(const TokenSequence& doc, std::size_t window, std::size_t stride) {
  if (stride < 1 || window < 1) throw ContractError("segment_maxp: window and stride must be positive");
  if (stride > window) {
    throw ContractError("segment_maxp: stride " + std::to_string(stride) + " exceeds window " +
                        std::to_string(window) + " and would skip tokens");
  }
  std::vector<TokenSequence> segments;
  const std::size_t n = doc.ids.size();
  if (n <= window) return {doc};
  for (std::size_t start = 0; start < n; start += stride) {
    const std::size_t end = std::min(n, start + window);
    TokenSequence seg;
    seg.ids.assign(doc.ids.begin() + static_cast<std::ptrdiff_t>(start),
                   doc.ids.begin() + static_cast<std::ptrdiff_t>(end));
    seg.truncated = doc.truncated;
    segments.push_back(std::move(seg));
  }
  return segments;
}

}  // namespace marrow
