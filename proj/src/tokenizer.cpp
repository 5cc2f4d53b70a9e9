#include "inv2a/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace inv2a {

namespace {

const std::vector<std::string>& special_words() {
  static const std::vector<std::string> kWords{"<pad>", "<unk>", "<bos>", "<eos>", "<sep>"};
  return kWords;
}

bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) && c != '\'' && c != '<' && c != '>'; }

bool attaches_left(const std::string& w) {
  return w == "." || w == "," || w == ":" || w == ";" || w == "!" || w == "?";
}

}  // namespace

Tokenizer::Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
  for (const auto& s : special_words()) {
    index_.emplace(s, static_cast<TokenId>(words_.size()));
    words_.push_back(s);
  }
  for (const auto& w : words) {
    if (index_.count(w)) continue;
    index_.emplace(w, static_cast<TokenId>(words_.size()));
    words_.push_back(w);
  }
}

Tokenizer Tokenizer::build(std::span<const std::string> texts) {
  std::set<std::string> seen;
  for (const auto& t : texts) {
    for (auto& w : split(t)) seen.insert(std::move(w));
  }
  return Tokenizer(std::vector<std::string>(seen.begin(), seen.end()));
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (c == '<') {
      // Special token spellings like "<unk>" stay whole.
      const auto close = text.find('>', i);
      if (close != std::string_view::npos && close - i <= 6) {
        flush();
        out.emplace_back(text.substr(i, close - i + 1));
        i = close;
      } else {
        flush();
        out.emplace_back(1, c);
      }
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

TokenIds Tokenizer::encode(std::string_view text) const {
  TokenIds ids;
  for (const auto& w : split(text)) {
    auto it = index_.find(w);
    ids.push_back(it == index_.end() ? kUnk : it->second);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kPad || id == kBos || id == kEos || id == kSep) continue;
    if (id < 0 || id >= size()) throw DimensionError("decode: token id out of range");
    const std::string& w = words_[static_cast<std::size_t>(id)];
    if (!out.empty() && !attaches_left(w)) out.push_back(' ');
    out += w;
  }
  return out;
}

std::optional<TokenId> Tokenizer::find(const std::string& w) const {
  auto it = index_.find(w);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  auto words = j.get<std::vector<std::string>>();
  const auto& sp = special_words();
  if (words.size() < sp.size() || !std::equal(sp.begin(), sp.end(), words.begin())) {
    throw FormatError("tokenizer vocabulary must start with the special tokens");
  }
  return Tokenizer(std::vector<std::string>(words.begin() + static_cast<long>(sp.size()), words.end()));
}

}  // namespace inv2a
