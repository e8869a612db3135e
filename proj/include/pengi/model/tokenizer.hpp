#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pengi/core/error.hpp"
#include "pengi/core/ops.hpp"

namespace pengi::model {

/// Word-level tokenizer over a closed vocabulary.
///
/// Text is split on single spaces; the punctuation marks , . ? ! : ; become
/// tokens of their own and re-attach to the preceding word when decoding. For
/// text in that canonical form decode(encode(s)) == s. Unknown words map to
/// UNK; characters outside printable ASCII are rejected.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kNumSpecial = 4;

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

  /// Vocabulary from the words of `texts`, sorted for determinism.
  static Tokenizer build(std::span<const std::string> texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto& w : split(t)) words.insert(std::move(w));
    return Tokenizer(std::vector<std::string>(words.begin(), words.end()));
  }

  /// Inverse of serialize(): one token per line, specials first.
  static Tokenizer deserialize(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t nl = text.find('\n', pos);
      const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
      lines.emplace_back(text.substr(pos, end - pos));
      if (nl == std::string_view::npos) break;
      pos = nl + 1;
    }
    if (lines.size() < kNumSpecial || lines[0] != "<pad>" || lines[1] != "<bos>" || lines[2] != "<eos>" ||
        lines[3] != "<unk>") {
      throw DataError("malformed vocabulary record");
    }
    return Tokenizer(std::vector<std::string>(lines.begin() + kNumSpecial, lines.end()));
  }

  std::string serialize() const {
    std::string out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (i) out.push_back('\n');
      out += tokens_[i];
    }
    return out;
  }

  std::size_t size() const noexcept { return tokens_.size(); }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw TokenizerError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  std::optional<TokenId> find(std::string_view word) const {
    if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
    return std::nullopt;
  }

  static bool is_special(TokenId id) noexcept { return id < kNumSpecial; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : split(text)) ids.push_back(find(w).value_or(kUnk));
    return ids;
  }

  /// PAD, BOS and EOS are dropped; decoding stops at the first EOS.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id == kEos) break;
      if (id == kPad || id == kBos) continue;
      const std::string& w = token(id);
      if (!out.empty() && !is_punct_token(w)) out.push_back(' ');
      out += w;
    }
    return out;
  }

  static std::vector<std::string> split(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (c < 0x20 || c > 0x7e) {
        throw TokenizerError("unencodable character (code " + std::to_string(int(c)) + ") in \"" + std::string(text) +
                             "\"");
      }
      if (ch == ' ') {
        if (!cur.empty()) words.push_back(std::move(cur));
        cur.clear();
      } else if (is_punct(ch)) {
        if (!cur.empty()) words.push_back(std::move(cur));
        cur.clear();
        words.emplace_back(1, ch);
      } else {
        cur.push_back(ch);
      }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
  }

 private:
  explicit Tokenizer(std::vector<std::string> words) {
    tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (auto& w : words) {
      if (std::find(tokens_.begin(), tokens_.end(), w) == tokens_.end()) tokens_.push_back(std::move(w));
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  static bool is_punct(char c) { return c == ',' || c == '.' || c == '?' || c == '!' || c == ':' || c == ';'; }
  static bool is_punct_token(const std::string& w) { return w.size() == 1 && is_punct(w[0]); }

  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> index_;
};

}  // namespace pengi::model
