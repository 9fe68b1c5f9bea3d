#pragma once

// Sub-words attention adapter (SAA): pools the sub-token states of a complex
// word into one vector, queried by the word's first sub-token.
//
// Intent attention adapter (IAA): scores word representations against the
// [CLS] state and pools them into a global intent feature.

#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "esie/errors.hpp"
#include "esie/numerics.hpp"
#include "esie/wordpiece.hpp"

namespace esie {

/// Which vectors the IAA pools once its weights are known.
enum class IntentSum {
  word_reps,              // h for simple words, s for complex words
  first_subtoken_hidden,  // h of each word's first sub-token
};

struct SaaParams {
  Tensor w_query, w_key, w_value;  // [d×d], shared by every complex word

  void collect(ParamList& out) const {
    out.push_back({"saa.w_query", w_query});
    out.push_back({"saa.w_key", w_key});
    out.push_back({"saa.w_value", w_value});
  }
};

struct IaaParams {
  Tensor w_intent;  // [d×d]

  void collect(ParamList& out) const { out.push_back({"iaa.w_intent", w_intent}); }
};

struct SpanPooling {
  Tensor pooled;   // [1×d]
  Tensor weights;  // [1×width]
};

/// Attention pooling of one span of hidden states [width×d]:
/// q = σ(W_q h_first), k_j = σ(W_k h_j), v_j = σ(W_v h_j),
/// α = softmax_j(q·k_j), pooled = Σ_j α_j v_j. No score scaling.
inline SpanPooling saa_pool_span(const Tensor& span_hidden, const SaaParams& p, Activation act) {
  if (span_hidden.rows() == 0) throw DataError("sub-words attention over an empty span");
  const Tensor q = activate(linear(row(span_hidden, 0), p.w_query), act);
  const Tensor k = activate(linear(span_hidden, p.w_key), act);
  const Tensor v = activate(linear(span_hidden, p.w_value), act);
  Tensor alpha = softmax(linear(q, k));  // q·kᵀ, [1×width]
  return {matmul(alpha, v), alpha};
}

struct SaaOutput {
  Tensor word_reps;                          // [W×d], one row per word
  std::vector<std::vector<double>> weights;  // per word; {1.0} for single-piece words
  std::vector<bool> complex;
  std::size_t size() const { return complex.size(); }
};

namespace detail {

inline void check_alignment(const AlignmentMap& alignment, std::size_t seq_len) {
  if (alignment.empty()) throw DataError("alignment has no words");
  std::size_t prev_end = 1;  // position 0 is [CLS]
  for (std::size_t w = 0; w < alignment.size(); ++w) {
    const Span s = alignment[w];
    if (s.width() == 0 || s.begin >= s.end) throw DataError("empty sub-token span for word " + std::to_string(w));
    if (s.begin != prev_end || s.end > seq_len) {
      throw DataError("invalid sub-token span [" + std::to_string(s.begin) + "," + std::to_string(s.end) +
                      ") for word " + std::to_string(w));
    }
    prev_end = s.end;
  }
}

}  // namespace detail

/// One representation per word: h of the only sub-token for simple words,
/// the SAA pooled vector for complex ones. `hidden` is [L×d] for one utterance.
inline SaaOutput saa_forward(const Tensor& hidden, const AlignmentMap& alignment, const SaaParams& p,
                             Activation act) {
  detail::check_alignment(alignment, hidden.rows());
  SaaOutput out;
  bool any_complex = false;
  for (const auto& s : alignment) any_complex |= s.width() > 1;

  Tensor q_all, k_all, v_all;
  if (any_complex) {
    q_all = activate(linear(hidden, p.w_query), act);
    k_all = activate(linear(hidden, p.w_key), act);
    v_all = activate(linear(hidden, p.w_value), act);
  }
  std::vector<Tensor> reps;
  reps.reserve(alignment.size());
  for (const auto& s : alignment) {
    if (s.width() == 1) {
      reps.push_back(row(hidden, s.begin));
      out.weights.push_back({1.0});
      out.complex.push_back(false);
      continue;
    }
    const Tensor alpha = softmax(linear(row(q_all, s.begin), rows(k_all, s.begin, s.end)));
    reps.push_back(matmul(alpha, rows(v_all, s.begin, s.end)));
    out.weights.emplace_back(alpha.data().begin(), alpha.data().end());
    out.complex.push_back(true);
  }
  out.word_reps = concat_rows(reps);
  return out;
}

/// First sub-token state of every word; the representation used without SAA.
inline SaaOutput first_subtoken_reps(const Tensor& hidden, const AlignmentMap& alignment) {
  detail::check_alignment(alignment, hidden.rows());
  SaaOutput out;
  std::vector<Tensor> reps;
  for (const auto& s : alignment) {
    reps.push_back(row(hidden, s.begin));
    std::vector<double> w(s.width(), 0.0);
    w[0] = 1.0;
    out.weights.push_back(std::move(w));
    out.complex.push_back(s.width() > 1);
  }
  out.word_reps = concat_rows(reps);
  return out;
}

struct IaaOutput {
  Tensor h_intent;  // [1×d]
  Tensor weights;   // [1×W]
};

/// score_w = h_cls · σ(W_int rep_w); α = softmax(score / √d); h_intent = Σ_w α_w x_w
/// where x_w is rep_w or the word's first sub-token state, per `sum`.
inline IaaOutput iaa_forward(const Tensor& hidden, const SaaOutput& saa, const AlignmentMap& alignment,
                             const IaaParams& p, Activation act, IntentSum sum = IntentSum::word_reps) {
  if (saa.size() == 0 || alignment.empty()) throw DataError("intent attention over an empty utterance");
  if (saa.size() != alignment.size()) {
    throw DataError("intent attention: " + std::to_string(saa.size()) + " word representations for " +
                    std::to_string(alignment.size()) + " words");
  }
  const double d = static_cast<double>(hidden.cols());
  const Tensor h_cls = row(hidden, 0);
  const Tensor projected = activate(linear(saa.word_reps, p.w_intent), act);  // [W×d]
  const Tensor scores = scale(linear(h_cls, projected), 1.0 / std::sqrt(d));   // [1×W]
  Tensor alpha = softmax(scores);
  Tensor pooled_from = saa.word_reps;
  if (sum == IntentSum::first_subtoken_hidden) {
    std::vector<Tensor> firsts;
    for (const auto& s : alignment) firsts.push_back(row(hidden, s.begin));
    pooled_from = concat_rows(firsts);
  }
  return {matmul(alpha, pooled_from), alpha};
}

struct WordAttention {
  std::string word;
  std::vector<std::pair<std::string, double>> pieces;
};

/// Per-word (piece, weight) table for visualizing the SAA.
inline std::vector<WordAttention> export_attention(const SaaOutput& saa, const TokenizedUtterance& utt) {
  if (saa.size() != utt.word_count()) {
    throw DataError("attention export: " + std::to_string(saa.size()) + " weight rows for " +
                    std::to_string(utt.word_count()) + " words");
  }
  std::vector<WordAttention> out;
  for (std::size_t w = 0; w < utt.word_count(); ++w) {
    const auto pieces = word_pieces(utt, w);
    WordAttention wa{utt.words[w], {}};
    for (std::size_t j = 0; j < pieces.size(); ++j) {
      wa.pieces.emplace_back(pieces[j], j < saa.weights[w].size() ? saa.weights[w][j] : 0.0);
    }
    out.push_back(std::move(wa));
  }
  return out;
}

/// `word<TAB>piece:weight piece:weight ...`, six decimals, one line per word.
inline std::string format_attention_tsv(const std::vector<WordAttention>& rows) {
  std::string out;
  char buf[64];
  for (const auto& r : rows) {
    out += r.word;
    out += '\t';
    for (std::size_t j = 0; j < r.pieces.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.6f", r.pieces[j].second);
      if (j) out += ' ';
      out += r.pieces[j].first + ":" + buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace esie
