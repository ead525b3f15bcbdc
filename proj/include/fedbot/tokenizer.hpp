#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fedbot/error.hpp"

namespace fedbot {

// Reserved token ids.
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kStart = 1;
inline constexpr std::int32_t kEnd = 2;
inline constexpr std::int32_t kUnk = 3;
inline constexpr std::int32_t kNumSpecials = 4;

inline constexpr std::string_view kContinuation = "##";
inline constexpr std::string_view kUrlToken = "<url>";
inline constexpr std::string_view kUserToken = "<user>";
inline constexpr std::string_view kUnkText = "<unk>";

namespace detail {

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }
inline bool is_ascii_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

inline bool starts_with_ci(std::string_view s, std::size_t pos, std::string_view prefix) {
  if (s.size() - pos < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i)
    if (std::tolower(static_cast<unsigned char>(s[pos + i])) != prefix[i]) return false;
  return true;
}

// Byte length of the UTF-8 sequence introduced by `lead`; stray continuation
// bytes count as single characters.
inline std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

inline std::vector<std::string> split_chars(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size();) {
    const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    out.emplace_back(word.substr(i, n));
    i += n;
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

}  // namespace detail

/// Lowercases ASCII, replaces URLs with "<url>" and @-mentions with
/// "<user>", isolates ASCII punctuation as separate words and collapses
/// whitespace. Idempotent: the placeholders survive a second pass.
inline std::string normalize(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (detail::is_space(c)) {
      flush();
      ++i;
      continue;
    }
    bool placeholder = false;
    for (auto p : {kUrlToken, kUserToken, kUnkText}) {
      if (detail::starts_with_ci(text, i, p)) {
        flush();
        words.emplace_back(p);
        i += p.size();
        placeholder = true;
        break;
      }
    }
    if (placeholder) continue;
    if (current.empty() && (detail::starts_with_ci(text, i, "http://") ||
                            detail::starts_with_ci(text, i, "https://") ||
                            detail::starts_with_ci(text, i, "www."))) {
      words.emplace_back(kUrlToken);
      while (i < text.size() && !detail::is_space(text[i])) ++i;
      continue;
    }
    if (c == '@' && i + 1 < text.size() && detail::is_word_char(text[i + 1])) {
      flush();
      words.emplace_back(kUserToken);
      ++i;
      while (i < text.size() && detail::is_word_char(text[i])) ++i;
      continue;
    }
    if (detail::is_ascii_punct(c)) {
      flush();
      words.emplace_back(1, c);
      ++i;
      continue;
    }
    current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    ++i;
  }
  flush();
  std::string out;
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (w) out.push_back(' ');
    out += words[w];
  }
  return out;
}

/// Token <-> id bijection. Ids 0-3 are the specials; every other token is a
/// word-initial piece or a "##"-prefixed continuation piece.
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // `pieces` are appended after the specials; duplicates are ignored.
  explicit Vocabulary(const std::vector<std::string>& pieces) {
    for (auto s : {"[PAD]", "[START]", "[END]", "[UNK]"}) append(s);
    for (const auto& p : pieces) {
      if (p.empty() || p == kContinuation) throw ContractError("invalid vocabulary piece '" + p + "'");
      if (!contains(p)) append(p);
    }
  }

  std::size_t size() const noexcept { return id_to_token_.size(); }
  bool contains(const std::string& token) const { return token_to_id_.contains(token); }

  std::int32_t id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                       std::to_string(id_to_token_.size()));
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const noexcept { return id_to_token_; }

  // One token per line; the line number is the id.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary file " + path);
    for (const auto& t : id_to_token_) out << t << '\n';
    if (!out) throw IoError("failed writing vocabulary file " + path);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocabulary file " + path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    const Vocabulary defaults;
    if (lines.size() < static_cast<std::size_t>(kNumSpecials))
      throw FormatError("vocabulary file " + path + " is missing the special tokens");
    for (std::int32_t i = 0; i < kNumSpecials; ++i)
      if (lines[static_cast<std::size_t>(i)] != defaults.token(i))
        throw FormatError("vocabulary file " + path + ": line " + std::to_string(i) + " must be " +
                          defaults.token(i));
    std::vector<std::string> pieces(lines.begin() + kNumSpecials, lines.end());
    Vocabulary v(pieces);
    if (v.size() != lines.size()) throw FormatError("vocabulary file " + path + " has duplicate tokens");
    return v;
  }

  bool operator==(const Vocabulary& other) const { return id_to_token_ == other.id_to_token_; }

 private:
  void append(const std::string& t) {
    token_to_id_.emplace(t, static_cast<std::int32_t>(id_to_token_.size()));
    id_to_token_.push_back(t);
  }

  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::vector<std::string> id_to_token_;
};

/// Learns a piece vocabulary by repeatedly merging the most frequent
/// adjacent symbol pair (ties: lexicographically smallest pair). The
/// character alphabet of the corpus, in both word-initial and continuation
/// form, is always included.
inline Vocabulary train_vocab(const std::vector<std::string>& corpus, std::size_t vocab_size,
                              std::size_t min_freq = 2) {
  if (vocab_size <= 260) throw ContractError("vocab_size must exceed 260, got " + std::to_string(vocab_size));
  std::map<std::string, std::uint64_t> word_counts;
  for (const auto& line : corpus)
    for (auto& w : detail::split_words(normalize(line))) ++word_counts[w];
  if (word_counts.empty()) throw ContractError("cannot train a vocabulary on an empty corpus");

  struct Word {
    std::vector<std::string> symbols;
    std::uint64_t count;
  };
  std::vector<Word> words;
  std::set<std::string> alphabet;
  for (const auto& [w, count] : word_counts) {
    Word word{{}, count};
    for (const auto& ch : detail::split_chars(w)) {
      alphabet.insert(ch);
      alphabet.insert(std::string(kContinuation) + ch);
      word.symbols.push_back(word.symbols.empty() ? ch : std::string(kContinuation) + ch);
    }
    words.push_back(std::move(word));
  }
  std::vector<std::string> pieces(alphabet.begin(), alphabet.end());
  std::set<std::string> known(alphabet.begin(), alphabet.end());

  while (known.size() + kNumSpecials < vocab_size) {
    std::map<std::pair<std::string, std::string>, std::uint64_t> pairs;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pairs[{w.symbols[i], w.symbols[i + 1]}] += w.count;
    const std::pair<std::string, std::string>* best = nullptr;
    std::uint64_t best_count = 0;
    for (const auto& [p, c] : pairs)
      if (c > best_count) {
        best = &p;
        best_count = c;
      }
    if (best == nullptr || best_count < std::max<std::size_t>(min_freq, 1)) break;
    const auto [left, right] = *best;
    const std::string merged = left + right.substr(kContinuation.size());
    for (auto& w : words) {
      std::vector<std::string> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(w.symbols[i]);
        }
      }
      w.symbols = std::move(next);
    }
    if (known.insert(merged).second) pieces.push_back(merged);
  }
  return Vocabulary(pieces);
}

struct TokenSequence {
  std::vector<std::int32_t> ids;
  // Number of non-PAD ids.
  std::size_t true_length = 0;

  bool operator==(const TokenSequence&) const = default;
};

/// Greedy longest-match-first segmentation of one normalized word. A
/// character with no matching piece becomes UNK.
inline std::vector<std::int32_t> segment_word(const Vocabulary& vocab, std::string_view word) {
  const auto chars = detail::split_chars(word);
  std::vector<std::int32_t> out;
  std::size_t start = 0;
  while (start < chars.size()) {
    std::int32_t found = -1;
    std::size_t end = chars.size();
    for (; end > start; --end) {
      std::string piece = start == 0 ? std::string() : std::string(kContinuation);
      for (std::size_t i = start; i < end; ++i) piece += chars[i];
      if (vocab.contains(piece)) {
        found = vocab.id(piece);
        break;
      }
    }
    if (found < 0) {
      out.push_back(kUnk);
      ++start;
    } else {
      out.push_back(found);
      start = end;
    }
  }
  return out;
}

/// START, pieces, END, then PAD up to max_len. When the pieces do not fit in
/// max_len - 2 the sequence is cut at max_len ids and carries no END.
inline TokenSequence encode(const Vocabulary& vocab, std::string_view text, std::size_t max_len) {
  if (max_len < 2) throw ContractError("max_len must be at least 2");
  std::vector<std::int32_t> pieces;
  for (const auto& w : detail::split_words(normalize(text))) {
    auto ids = segment_word(vocab, w);
    pieces.insert(pieces.end(), ids.begin(), ids.end());
  }
  TokenSequence seq;
  seq.ids.reserve(max_len);
  seq.ids.push_back(kStart);
  if (pieces.size() <= max_len - 2) {
    seq.ids.insert(seq.ids.end(), pieces.begin(), pieces.end());
    seq.ids.push_back(kEnd);
  } else {
    seq.ids.insert(seq.ids.end(), pieces.begin(), pieces.begin() + static_cast<std::ptrdiff_t>(max_len - 1));
  }
  seq.true_length = seq.ids.size();
  seq.ids.resize(max_len, kPad);
  return seq;
}

/// Joins pieces with spaces, fusing "##" continuations onto their
/// predecessor. PAD/START/END are dropped; UNK renders as "<unk>".
inline std::string decode(const Vocabulary& vocab, std::span<const std::int32_t> ids) {
  std::string out;
  for (auto id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == kPad || id == kStart || id == kEnd) continue;
    if (id == kUnk) {
      if (!out.empty()) out.push_back(' ');
      out += kUnkText;
      continue;
    }
    if (tok.starts_with(kContinuation)) {
      out += tok.substr(kContinuation.size());
    } else {
      if (!out.empty()) out.push_back(' ');
      out += tok;
    }
  }
  return out;
}

}  // namespace fedbot
