#pragma once

#include "inv2a/common.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace inv2a {

// Case-preserving word-level tokenizer. Text splits on whitespace, and each
// ASCII punctuation character becomes its own token. Decoding attaches
// closing punctuation to the preceding word, so decode/encode round-trips
// any id sequence without special tokens.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;
  static constexpr TokenId kSep = 4;
  static constexpr int kNumSpecial = 5;

  Tokenizer();
  // Specials are placed first; duplicates of them in words are skipped.
  explicit Tokenizer(const std::vector<std::string>& words);

  static Tokenizer build(std::span<const std::string> texts);
  static std::vector<std::string> split(std::string_view text);

  TokenIds encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::optional<TokenId> find(const std::string& w) const;
  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }

  nlohmann::json to_json() const { return words_; }
  static Tokenizer from_json(const nlohmann::json& j);

  bool operator==(const Tokenizer& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace inv2a
