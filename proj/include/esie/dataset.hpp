#pragma once

// ATIS/SNIPS-style splits (parallel seq.in / seq.out / label files), label
// catalogs and padded batches.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "esie/errors.hpp"
#include "esie/numerics.hpp"
#include "esie/wordpiece.hpp"

namespace esie {

struct LabeledUtterance {
  std::vector<std::string> words;
  std::vector<std::string> slots;  // IOB tags, one per word
  std::string intent;

  bool operator==(const LabeledUtterance&) const = default;
};

using Split = std::vector<LabeledUtterance>;

inline bool is_iob_tag(const std::string& tag) {
  static const std::regex pattern("O|[BI]-.+");
  return std::regex_match(tag, pattern);
}

inline std::vector<std::string> split_whitespace(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(std::move(tok));
  return out;
}

inline std::string to_lower_ascii(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

}  // namespace detail

/// Reads `<dir>/<split>/{seq.in,seq.out,label}`; line i of each file is utterance i.
/// Words are lowercased; tags and intents are kept verbatim.
inline Split load_split(const std::filesystem::path& dir, const std::string& split_name) {
  const auto base = dir / split_name;
  const auto in_path = base / "seq.in", out_path = base / "seq.out", label_path = base / "label";
  const auto words = detail::read_lines(in_path);
  const auto tags = detail::read_lines(out_path);
  const auto intents = detail::read_lines(label_path);
  if (words.size() != tags.size() || words.size() != intents.size()) {
    throw DataError("line-count mismatch in " + base.string() + ": seq.in=" + std::to_string(words.size()) +
                    " seq.out=" + std::to_string(tags.size()) + " label=" + std::to_string(intents.size()));
  }
  Split out;
  out.reserve(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    LabeledUtterance u;
    for (auto& w : split_whitespace(words[i])) u.words.push_back(to_lower_ascii(std::move(w)));
    u.slots = split_whitespace(tags[i]);
    auto intent = split_whitespace(intents[i]);
    const std::string where = base.string() + " line " + std::to_string(i + 1);
    if (u.words.empty()) throw DataError("empty utterance at " + where);
    if (u.words.size() != u.slots.size()) {
      throw DataError("word/tag count mismatch at " + where + ": " + std::to_string(u.words.size()) +
                      " words, " + std::to_string(u.slots.size()) + " tags");
    }
    for (const auto& t : u.slots)
      if (!is_iob_tag(t)) throw DataError("malformed slot tag '" + t + "' at " + where);
    if (intent.size() != 1) throw DataError("expected exactly one intent at " + where);
    u.intent = std::move(intent.front());
    out.push_back(std::move(u));
  }
  return out;
}

/// Gold label unseen in training; never predicted, always scored as an error.
inline constexpr int kUnknownLabel = -1;

class LabelCatalog {
 public:
  LabelCatalog() = default;
  LabelCatalog(std::vector<std::string> slot_tags, std::vector<std::string> intents)
      : slot_tags_(std::move(slot_tags)), intents_(std::move(intents)) {
    for (std::size_t i = 0; i < slot_tags_.size(); ++i) slot_ids_.emplace(slot_tags_[i], static_cast<int>(i));
    for (std::size_t i = 0; i < intents_.size(); ++i) intent_ids_.emplace(intents_[i], static_cast<int>(i));
  }

  std::size_t slot_count() const { return slot_tags_.size(); }
  std::size_t intent_count() const { return intents_.size(); }
  const std::vector<std::string>& slot_tags() const { return slot_tags_; }
  const std::vector<std::string>& intents() const { return intents_; }
  const std::string& slot_tag(int id) const { return slot_tags_.at(static_cast<std::size_t>(id)); }
  const std::string& intent(int id) const { return intents_.at(static_cast<std::size_t>(id)); }

  /// kUnknownLabel for labels absent from the training split.
  int slot_id(const std::string& tag) const {
    auto it = slot_ids_.find(tag);
    return it == slot_ids_.end() ? kUnknownLabel : it->second;
  }
  int intent_id(const std::string& intent) const {
    auto it = intent_ids_.find(intent);
    return it == intent_ids_.end() ? kUnknownLabel : it->second;
  }

 private:
  std::vector<std::string> slot_tags_, intents_;
  std::unordered_map<std::string, int> slot_ids_, intent_ids_;
};

/// Ids by first appearance in the training split; "O" is always slot id 0.
inline LabelCatalog build_catalog(const Split& train) {
  if (train.empty()) throw DataError("build_catalog: training split is empty");
  std::vector<std::string> slots{"O"}, intents;
  auto add = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto& u : train) {
    for (const auto& t : u.slots) add(slots, t);
    add(intents, u.intent);
  }
  return LabelCatalog(std::move(slots), std::move(intents));
}

struct Batch {
  std::size_t size = 0;     // B
  std::size_t seq_len = 0;  // L, longest sub-token sequence in the batch
  std::size_t max_words = 0;
  std::vector<int> token_ids;  // B×L, [PAD]-filled
  Mask mask;                   // B×L, 1 where token_ids != [PAD]
  std::vector<TokenizedUtterance> utterances;
  std::vector<int> slot_ids;  // B×W_max, kIgnoreIndex padding
  std::vector<int> intent_ids;
  std::vector<std::size_t> source_index;  // position in the split
  std::size_t unknown_slots = 0;            // gold tags unseen in training
  std::size_t unknown_intents = 0;

  std::span<const int> ids_row(std::size_t b) const {
    return std::span<const int>(token_ids).subspan(b * seq_len, seq_len);
  }
  std::span<const std::uint8_t> mask_row(std::size_t b) const {
    return std::span<const std::uint8_t>(mask).subspan(b * seq_len, seq_len);
  }
  std::span<const int> slots_row(std::size_t b) const {
    return std::span<const int>(slot_ids).subspan(b * max_words, max_words);
  }
  const AlignmentMap& alignment(std::size_t b) const { return utterances[b].alignment; }
};

/// Assembles one batch from already tokenized utterances.
inline Batch make_batch(std::vector<TokenizedUtterance> toks, const std::vector<const LabeledUtterance*>& labels,
                        std::vector<std::size_t> source_index, const WordpieceVocab& vocab,
                        const LabelCatalog& catalog) {
  Batch b;
  b.size = toks.size();
  for (const auto& t : toks) {
    b.seq_len = std::max(b.seq_len, t.ids.size());
    b.max_words = std::max(b.max_words, t.word_count());
  }
  b.token_ids.assign(b.size * b.seq_len, vocab.pad_id());
  b.mask.assign(b.size * b.seq_len, 0);
  b.slot_ids.assign(b.size * b.max_words, kIgnoreIndex);
  b.intent_ids.resize(b.size);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& t = toks[i];
    for (std::size_t j = 0; j < t.ids.size(); ++j) {
      b.token_ids[i * b.seq_len + j] = t.ids[j];
      b.mask[i * b.seq_len + j] = 1;
    }
    if (labels[i]) {
      for (std::size_t w = 0; w < labels[i]->slots.size(); ++w) {
        const int id = catalog.slot_id(labels[i]->slots[w]);
        b.unknown_slots += id == kUnknownLabel;
        b.slot_ids[i * b.max_words + w] = id;
      }
      b.intent_ids[i] = catalog.intent_id(labels[i]->intent);
      b.unknown_intents += b.intent_ids[i] == kUnknownLabel;
    } else {
      b.intent_ids[i] = kUnknownLabel;
    }
  }
  b.utterances = std::move(toks);
  b.source_index = std::move(source_index);
  return b;
}

/// Unlabeled single-utterance batch for inference.
inline Batch make_inference_batch(const std::vector<std::string>& words, const WordpieceVocab& vocab,
                                  const LabelCatalog& catalog, std::size_t max_seq_len = kDefaultMaxSeqLen) {
  std::vector<TokenizedUtterance> toks{tokenize_utterance(words, vocab, max_seq_len)};
  Batch b = make_batch(std::move(toks), {nullptr}, {0}, vocab, catalog);
  std::fill(b.slot_ids.begin(), b.slot_ids.end(), kUnknownLabel);
  return b;
}

struct BatchPlan {
  std::vector<Batch> batches;
  std::size_t skipped_too_long = 0;
  std::size_t unknown_slots = 0;
  std::size_t unknown_intents = 0;
  std::vector<std::string> warnings;
};

/// Tokenizes, optionally shuffles (seeded), and chunks a split into batches.
/// `shuffle_seed` == nullopt keeps file order. The final partial batch is kept.
inline BatchPlan batch_iter(const Split& data, const WordpieceVocab& vocab, const LabelCatalog& catalog,
                            std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
                            std::size_t max_seq_len = kDefaultMaxSeqLen) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  BatchPlan plan;
  std::vector<TokenizedUtterance> toks;
  std::vector<const LabeledUtterance*> labels;
  std::vector<std::size_t> index;
  auto flush = [&] {
    if (toks.empty()) return;
    plan.batches.push_back(make_batch(std::move(toks), labels, std::move(index), vocab, catalog));
    plan.unknown_slots += plan.batches.back().unknown_slots;
    plan.unknown_intents += plan.batches.back().unknown_intents;
    toks.clear();
    labels.clear();
    index.clear();
  };
  for (std::size_t i : order) {
    try {
      toks.push_back(tokenize_utterance(data[i].words, vocab, max_seq_len));
    } catch (const SequenceTooLong& e) {
      ++plan.skipped_too_long;
      plan.warnings.emplace_back(std::string("skipped utterance ") + std::to_string(i) + ": " + e.what());
      continue;
    }
    labels.push_back(&data[i]);
    index.push_back(i);
    if (toks.size() == batch_size) flush();
  }
  flush();
  return plan;
}

}  // namespace esie
