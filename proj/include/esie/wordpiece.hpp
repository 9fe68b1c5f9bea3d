#pragma once

// Greedy longest-match-first wordpiece tokenization and the word -> sub-token
// alignment that keeps one slot label per word.

#include <cstddef>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "esie/errors.hpp"

namespace esie {

inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kSepToken = "[SEP]";

/// Words longer than this many characters become [UNK] without matching.
inline constexpr std::size_t kMaxWordChars = 100;
inline constexpr std::size_t kDefaultMaxSeqLen = 128;

class WordpieceVocab {
 public:
  WordpieceVocab() = default;

  /// Token id = position in `tokens`. All four special tokens must be present.
  explicit WordpieceVocab(std::vector<std::string> tokens, std::string continuation_prefix = "##")
      : tokens_(std::move(tokens)), prefix_(std::move(continuation_prefix)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw DataError("vocab: empty token at line " + std::to_string(i + 1));
      auto [it, inserted] = ids_.emplace(tokens_[i], static_cast<int>(i));
      if (!inserted) {
        throw DataError("vocab: duplicate token '" + tokens_[i] + "' at line " + std::to_string(i + 1));
      }
    }
    pad_ = require_special(kPadToken);
    unk_ = require_special(kUnkToken);
    cls_ = require_special(kClsToken);
    sep_ = require_special(kSepToken);
  }

  /// One token per line, id = zero-based line number (public BERT layout).
  static WordpieceVocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocab file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
    return WordpieceVocab(std::move(tokens));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& prefix() const { return prefix_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool contains(std::string_view tok) const { return ids_.find(std::string(tok)) != ids_.end(); }
  int id(std::string_view tok) const {
    auto it = ids_.find(std::string(tok));
    return it == ids_.end() ? unk_ : it->second;
  }

  int pad_id() const { return pad_; }
  int unk_id() const { return unk_; }
  int cls_id() const { return cls_; }
  int sep_id() const { return sep_; }

 private:
  int require_special(std::string_view tok) const {
    auto it = ids_.find(std::string(tok));
    if (it == ids_.end()) throw DataError("vocab is missing special token " + std::string(tok));
    return it->second;
  }

  std::vector<std::string> tokens_;
  std::string prefix_ = "##";
  std::unordered_map<std::string, int> ids_;
  int pad_ = 0, unk_ = 0, cls_ = 0, sep_ = 0;
};

namespace detail {

/// Byte offsets of UTF-8 code point starts, plus the end offset.
inline std::vector<std::size_t> char_boundaries(std::string_view s) {
  std::vector<std::size_t> b;
  for (std::size_t i = 0; i < s.size(); ++i)
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) b.push_back(i);
  b.push_back(s.size());
  return b;
}

}  // namespace detail

/// Splits one lowercased word into vocab pieces, longest prefix first.
/// Any unmatched position turns the whole word into [UNK].
inline std::vector<std::string> tokenize_word(std::string_view word, const WordpieceVocab& vocab) {
  const auto bounds = detail::char_boundaries(word);
  const std::size_t nchars = bounds.size() - 1;
  if (nchars == 0 || nchars > kMaxWordChars) return {std::string(kUnkToken)};

  std::vector<std::string> pieces;
  std::size_t start = 0;  // index into bounds
  while (start < nchars) {
    std::size_t end = nchars;
    std::string match;
    for (; end > start; --end) {
      std::string cand(word.substr(bounds[start], bounds[end] - bounds[start]));
      if (start > 0) cand.insert(0, vocab.prefix());
      if (vocab.contains(cand)) {
        match = std::move(cand);
        break;
      }
    }
    if (match.empty()) return {std::string(kUnkToken)};
    pieces.push_back(std::move(match));
    start = end;
  }
  return pieces;
}

/// Half-open sub-token span [begin, end) of one word.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t width() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

using AlignmentMap = std::vector<Span>;

struct TokenizedUtterance {
  std::vector<std::string> words;
  std::vector<std::string> pieces;  // including [CLS] and [SEP]
  std::vector<int> ids;
  AlignmentMap alignment;

  std::size_t word_count() const { return words.size(); }
  bool is_complex(std::size_t w) const { return alignment[w].width() > 1; }
};

/// Raised when an utterance does not fit the encoder window.
class SequenceTooLong : public DataError {
 public:
  SequenceTooLong(const std::string& utterance, std::size_t needed, std::size_t max_len)
      : DataError("utterance needs " + std::to_string(needed) + " sub-tokens (max_seq_len " +
                  std::to_string(max_len) + "): " + utterance) {}
};

inline TokenizedUtterance tokenize_utterance(const std::vector<std::string>& words, const WordpieceVocab& vocab,
                                             std::size_t max_seq_len = kDefaultMaxSeqLen) {
  if (words.empty()) throw DataError("cannot tokenize an empty utterance");
  TokenizedUtterance out;
  out.words = words;
  out.pieces.emplace_back(kClsToken);
  for (const auto& w : words) {
    auto pieces = tokenize_word(w, vocab);
    const std::size_t begin = out.pieces.size();
    for (auto& p : pieces) out.pieces.push_back(std::move(p));
    out.alignment.push_back({begin, out.pieces.size()});
  }
  out.pieces.emplace_back(kSepToken);
  if (out.pieces.size() > max_seq_len) {
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    throw SequenceTooLong(text, out.pieces.size(), max_seq_len);
  }
  out.ids.reserve(out.pieces.size());
  for (const auto& p : out.pieces) out.ids.push_back(vocab.id(p));
  return out;
}

/// Joins pieces back into a word by stripping continuation prefixes.
inline std::string detokenize(const std::vector<std::string>& pieces, std::string_view prefix = "##") {
  std::string word;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    std::string_view p = pieces[i];
    if (i > 0 && p.substr(0, prefix.size()) == prefix) p.remove_prefix(prefix.size());
    word += p;
  }
  return word;
}

/// Pieces of word `w` in a tokenized utterance.
inline std::vector<std::string> word_pieces(const TokenizedUtterance& u, std::size_t w) {
  const Span s = u.alignment.at(w);
  return {u.pieces.begin() + static_cast<std::ptrdiff_t>(s.begin),
          u.pieces.begin() + static_cast<std::ptrdiff_t>(s.end)};
}

struct SubwordStats {
  std::size_t words = 0;               // word occurrences
  std::size_t multi_piece_words = 0;   // occurrences with span width > 1
  std::size_t distinct_multi_piece_words = 0;
  std::size_t distinct_subwords = 0;   // distinct pieces produced by splitting complex words
  double multi_piece_fraction() const {
    return words ? static_cast<double>(multi_piece_words) / static_cast<double>(words) : 0.0;
  }
};

/// Sub-word statistics over already lowercased, whitespace-split utterances.
inline SubwordStats corpus_subword_stats(const std::vector<std::vector<std::string>>& utterances,
                                         const WordpieceVocab& vocab) {
  if (utterances.empty()) throw DataError("corpus_subword_stats: empty dataset");
  SubwordStats stats;
  std::set<std::string> complex_words, subwords;
  std::unordered_map<std::string, std::vector<std::string>> cache;
  for (const auto& words : utterances) {
    for (const auto& w : words) {
      auto it = cache.find(w);
      if (it == cache.end()) it = cache.emplace(w, tokenize_word(w, vocab)).first;
      ++stats.words;
      if (it->second.size() > 1) {
        ++stats.multi_piece_words;
        complex_words.insert(w);
        subwords.insert(it->second.begin(), it->second.end());
      }
    }
  }
  stats.distinct_multi_piece_words = complex_words.size();
  stats.distinct_subwords = subwords.size();
  return stats;
}

}  // namespace esie
