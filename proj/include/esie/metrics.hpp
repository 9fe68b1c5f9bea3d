#pragma once

// Intent accuracy, conlleval-style chunk F1 and sentence-level accuracy.

#include <cstddef>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "esie/errors.hpp"

namespace esie {

struct Chunk {
  std::string type;
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  auto operator<=>(const Chunk&) const = default;
};

namespace detail {

/// Splits an IOB tag into prefix ('O', 'B' or 'I') and type.
inline std::pair<char, std::string> parse_tag(const std::string& tag) {
  if (tag == "O") return {'O', ""};
  if (tag.size() >= 3 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') return {tag[0], tag.substr(2)};
  throw DataError("malformed IOB tag '" + tag + "'");
}

}  // namespace detail

/// Entity chunks of an IOB sequence. B-x opens a chunk; I-x continues a
/// chunk of type x and otherwise opens one (lenient conlleval rule).
inline std::set<Chunk> extract_chunks(const std::vector<std::string>& tags) {
  std::set<Chunk> chunks;
  bool open = false;
  Chunk cur;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto [prefix, type] = detail::parse_tag(tags[i]);
    const bool continues = open && prefix == 'I' && type == cur.type;
    if (continues) continue;
    if (open) {
      cur.end = i;
      chunks.insert(cur);
      open = false;
    }
    if (prefix != 'O') {
      cur = {type, i, i};
      open = true;
    }
  }
  if (open) {
    cur.end = tags.size();
    chunks.insert(cur);
  }
  return chunks;
}

struct ChunkCounts {
  std::size_t true_pos = 0, false_pos = 0, false_neg = 0;
};

struct PRF {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

/// P, R, F1 from pooled counts. With neither gold nor predicted chunks all
/// three are 1; otherwise a ratio with a zero denominator is 0 (conlleval).
inline PRF prf_from_counts(const ChunkCounts& c) {
  const std::size_t found = c.true_pos + c.false_pos;
  const std::size_t gold = c.true_pos + c.false_neg;
  PRF r;
  if (found == 0 && gold == 0) return {1.0, 1.0, 1.0};
  r.precision = found ? static_cast<double>(c.true_pos) / static_cast<double>(found) : 0.0;
  r.recall = gold ? static_cast<double>(c.true_pos) / static_cast<double>(gold) : 0.0;
  r.f1 = (r.precision + r.recall) > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

inline ChunkCounts chunk_counts(const std::vector<std::vector<std::string>>& gold,
                                const std::vector<std::vector<std::string>>& pred) {
  if (gold.size() != pred.size()) {
    throw DataError("slot_f1: " + std::to_string(gold.size()) + " gold vs " + std::to_string(pred.size()) +
                    " predicted utterances");
  }
  ChunkCounts c;
  for (std::size_t u = 0; u < gold.size(); ++u) {
    if (gold[u].size() != pred[u].size()) {
      throw DataError("slot_f1: length mismatch at utterance " + std::to_string(u) + " (" +
                      std::to_string(gold[u].size()) + " gold tags, " + std::to_string(pred[u].size()) +
                      " predicted)");
    }
    const auto g = extract_chunks(gold[u]);
    const auto p = extract_chunks(pred[u]);
    for (const auto& ch : p) (g.count(ch) ? c.true_pos : c.false_pos) += 1;
    for (const auto& ch : g) c.false_neg += p.count(ch) ? 0 : 1;
  }
  return c;
}

/// Micro-averaged chunk precision/recall/F1 over a split.
inline PRF slot_f1(const std::vector<std::vector<std::string>>& gold, const std::vector<std::vector<std::string>>& pred) {
  return prf_from_counts(chunk_counts(gold, pred));
}

struct UtteranceLabels {
  std::string intent;
  std::vector<std::string> slots;
};

/// Fraction of utterances whose intent and every slot tag are correct.
inline double overall_accuracy(const std::vector<UtteranceLabels>& gold, const std::vector<UtteranceLabels>& pred) {
  if (gold.size() != pred.size()) throw DataError("overall_accuracy: split sizes differ");
  if (gold.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].slots.size() != pred[i].slots.size()) {
      throw DataError("overall_accuracy: length mismatch at utterance " + std::to_string(i));
    }
    correct += gold[i].intent == pred[i].intent && gold[i].slots == pred[i].slots;
  }
  return static_cast<double>(correct) / static_cast<double>(gold.size());
}

struct EvalReport {
  double intent_acc = 0.0;
  double slot_precision = 0.0, slot_recall = 0.0, slot_f1 = 0.0;
  double overall_acc = 0.0;
  ChunkCounts counts;
  std::size_t n_utterances = 0;
};

inline EvalReport evaluate_labels(const std::vector<UtteranceLabels>& gold, const std::vector<UtteranceLabels>& pred) {
  if (gold.size() != pred.size()) throw DataError("evaluate: split sizes differ");
  EvalReport r;
  r.n_utterances = gold.size();
  std::vector<std::vector<std::string>> gs, ps;
  std::size_t intent_ok = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    intent_ok += gold[i].intent == pred[i].intent;
    gs.push_back(gold[i].slots);
    ps.push_back(pred[i].slots);
  }
  r.counts = chunk_counts(gs, ps);
  const PRF prf = prf_from_counts(r.counts);
  r.slot_precision = prf.precision;
  r.slot_recall = prf.recall;
  r.slot_f1 = prf.f1;
  r.intent_acc = gold.empty() ? 0.0 : static_cast<double>(intent_ok) / static_cast<double>(gold.size());
  r.overall_acc = overall_accuracy(gold, pred);
  return r;
}

}  // namespace esie
