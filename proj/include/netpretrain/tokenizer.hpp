// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "netpretrain/autodiff/tensor.hpp"

namespace netpretrain {

using TokenId = std::int32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kCls = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kMask = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kCount = 5;
inline constexpr std::string_view kNames[] = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
}  // namespace special

/// Lowercases ASCII and splits on whitespace; ASCII punctuation characters
/// become single-character tokens. Bytes >= 0x80 are kept inside words so
/// UTF-8 sequences are never split.
inline std::vector<std::string> normalize_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

inline std::string normalize(std::string_view text) {
  std::string joined;
  for (const auto& tok : normalize_tokens(text)) {
    if (!joined.empty()) joined.push_back(' ');
    joined += tok;
  }
  return joined;
}

/// Token <-> id mapping. Ids 0-4 are the reserved specials.
class Vocab {
 public:
  Vocab() {
    for (auto name : special::kNames) push(std::string(name));
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? special::kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw Error("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool is_special(TokenId id) { return id >= 0 && id < special::kCount; }

  /// One token per line, line number = id.
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read vocabulary file " + path);
    Vocab v;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line_no < special::kCount) {
        if (line != special::kNames[line_no]) {
          throw Error(path + ":" + std::to_string(line_no + 1) + ": expected reserved token " +
                      std::string(special::kNames[line_no]));
        }
      } else {
        if (line.empty() || v.contains(line)) {
          throw Error(path + ":" + std::to_string(line_no + 1) + ": empty or duplicate token");
        }
        v.push(line);
      }
      ++line_no;
    }
    if (line_no < special::kCount) throw Error(path + ": missing reserved tokens");
    return v;
  }

  void push(std::string token) {
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Counts normalized tokens, keeps those with count >= min_count, orders by
/// (count desc, token asc) and truncates to max_size non-reserved entries.
template <class Range>
Vocab build_vocab(const Range& corpus, std::size_t min_count, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  std::size_t docs = 0;
  for (const auto& text : corpus) {
    ++docs;
    for (auto& tok : normalize_tokens(text)) ++counts[tok];
  }
  if (docs == 0) throw Error("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : counts) {
    bool reserved = std::find(std::begin(special::kNames), std::end(special::kNames), tok) != std::end(special::kNames);
    if (n >= min_count && !reserved) ranked.emplace_back(tok, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_size) ranked.resize(max_size);
  Vocab vocab;
  for (auto& [tok, n] : ranked) vocab.push(tok);
  return vocab;
}

/// Fixed-length id sequence: [CLS] + tokens, right-padded with [PAD].
struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> attention;

  std::size_t length() const {
    return static_cast<std::size_t>(std::count(attention.begin(), attention.end(), std::uint8_t{1}));
  }
};

inline TokenSequence encode(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 2) throw Error("encode: max_len must be at least 2");
  TokenSequence seq;
  seq.ids.assign(max_len, special::kPad);
  seq.attention.assign(max_len, 0);
  seq.ids[0] = special::kCls;
  seq.attention[0] = 1;
  std::size_t pos = 1;
  for (const auto& tok : normalize_tokens(text)) {
    if (pos == max_len) break;
    seq.ids[pos] = vocab.id(tok);
    seq.attention[pos] = 1;
    ++pos;
  }
  return seq;
}

inline std::string decode(const TokenSequence& seq, const Vocab& vocab) {
  std::string out;
  for (TokenId id : seq.ids) {
    const auto& tok = vocab.token(id);
    if (Vocab::is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

}  // namespace netpretrain
