#pragma once

// Joint intent/slot model: encoder -> SAA -> IAA -> two softmax decoders,
// trained on L_joint = β·L_intent + (1-β)·L_slot.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "esie/adapters.hpp"
#include "esie/dataset.hpp"
#include "esie/encoder.hpp"
#include "esie/numerics.hpp"

namespace esie {

struct AblationConfig {
  bool use_saa = true;
  bool use_iaa = true;
  bool feed_intent_to_slot = true;
  bool slot_only = false;
  double beta = 0.7;

  /// Intent loss weight actually applied; slot-only training drops it.
  double effective_beta() const { return slot_only ? 0.0 : beta; }
  bool feeds_intent() const { return feed_intent_to_slot && !slot_only; }

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must be in [0,1], got " + std::to_string(beta));
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  Activation activation = Activation::tanh;
  IntentSum iaa_sum = IntentSum::word_reps;
  std::size_t n_intents = 0;
  std::size_t n_slots = 0;
};

struct DecoderParams {
  Tensor w_intent, b_intent;  // [n_intents×d], [n_intents]
  Tensor w_slot, b_slot;      // [n_slots×d], [n_slots]

  void collect(ParamList& out) const {
    out.push_back({"decoder.w_intent", w_intent});
    out.push_back({"decoder.b_intent", b_intent});
    out.push_back({"decoder.w_slot", w_slot});
    out.push_back({"decoder.b_slot", b_slot});
  }
};

struct ModelParams {
  EncoderParams encoder;
  SaaParams saa;
  IaaParams iaa;
  DecoderParams decoder;
};

class JointModel {
 public:
  JointModel() = default;

  static JointModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.encoder.validate();
    if (cfg.n_intents == 0 || cfg.n_slots == 0) throw ConfigError("model needs at least one intent and one slot tag");
    std::mt19937_64 rng(seed);
    JointModel m;
    m.config_ = cfg;
    const std::size_t d = cfg.encoder.d_model;
    m.params_.encoder = init_encoder(cfg.encoder, rng);
    m.params_.saa = {detail::init_weight(d, d, rng), detail::init_weight(d, d, rng), detail::init_weight(d, d, rng)};
    m.params_.iaa = {detail::init_weight(d, d, rng)};
    m.params_.decoder = {detail::init_weight(cfg.n_intents, d, rng), detail::init_bias(cfg.n_intents),
                         detail::init_weight(cfg.n_slots, d, rng), detail::init_bias(cfg.n_slots)};
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }

  /// Every trainable tensor with a stable name, in a fixed order.
  ParamList parameters() const {
    ParamList out;
    params_.encoder.collect(out);
    params_.saa.collect(out);
    params_.iaa.collect(out);
    params_.decoder.collect(out);
    return out;
  }

  /// Deep copy; the copy shares no storage with this model.
  JointModel clone() const {
    JointModel m = *this;
    m.rebind([](const Tensor& t) { return t.clone(t.requires_grad()); });
    return m;
  }

 private:
  template <class F>
  void rebind(F&& f) {
    auto& e = params_.encoder;
    e.token_embedding = f(e.token_embedding);
    e.position_embedding = f(e.position_embedding);
    e.emb_ln_gain = f(e.emb_ln_gain);
    e.emb_ln_bias = f(e.emb_ln_bias);
    for (auto& l : e.layers) {
      for (Tensor* t : {&l.w_query, &l.b_query, &l.w_key, &l.b_key, &l.w_value, &l.b_value, &l.w_out, &l.b_out,
                        &l.attn_ln_gain, &l.attn_ln_bias, &l.w_ff1, &l.b_ff1, &l.w_ff2, &l.b_ff2, &l.ff_ln_gain,
                        &l.ff_ln_bias})
        *t = f(*t);
    }
    for (Tensor* t : {&params_.saa.w_query, &params_.saa.w_key, &params_.saa.w_value, &params_.iaa.w_intent,
                      &params_.decoder.w_intent, &params_.decoder.b_intent, &params_.decoder.w_slot,
                      &params_.decoder.b_slot})
      *t = f(*t);
  }

  ModelConfig config_;
  ModelParams params_;
};

inline std::size_t count_parameters(const ParamList& params) { return count_elements(params); }

/// Closed-form count for a full joint model.
inline std::size_t joint_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.encoder.d_model;
  return encoder_parameter_count(c.encoder) + 4 * d * d + (c.n_intents * d + c.n_intents) +
         (c.n_slots * d + c.n_slots);
}

struct UtteranceOutput {
  Tensor intent_logits;  // [1×n_intents]
  Tensor slot_logits;    // [W×n_slots]
  SaaOutput saa;
  std::optional<IaaOutput> iaa;
};

struct LossReport {
  Tensor joint;  // differentiable scalar
  double intent = 0.0;
  double slot = 0.0;
  double joint_value = 0.0;
  double beta = 0.0;
};

struct ForwardResult {
  std::vector<UtteranceOutput> utterances;
  LossReport loss;
};

/// Runs the joint model over a batch. Dropout (and `rng`) is used only when `train`.
inline ForwardResult forward(const Batch& batch, const JointModel& model, const AblationConfig& ablation, bool train,
                             std::mt19937_64* rng) {
  ablation.validate();
  const auto& cfg = model.config();
  const auto& p = model.params();
  if (p.decoder.w_intent.rows() != cfg.n_intents || p.decoder.w_slot.rows() != cfg.n_slots) {
    throw ConfigError("decoder widths do not match the label catalog");
  }
  const double drop = cfg.encoder.dropout_p;
  const EncoderOutput enc = encode(batch, p.encoder, cfg.encoder, train, rng);

  ForwardResult result;
  std::vector<Tensor> intent_rows, slot_rows;
  std::vector<int> slot_targets;
  for (std::size_t b = 0; b < batch.size; ++b) {
    const Tensor& h = enc.hidden[b];
    const auto& align = batch.alignment(b);
    const Tensor h_cls = row(h, 0);

    UtteranceOutput u;
    u.saa = ablation.use_saa ? saa_forward(h, align, p.saa, cfg.activation) : first_subtoken_reps(h, align);
    const Tensor reps = dropout(u.saa.word_reps, drop, train, rng);

    Tensor intent_feature = h_cls;
    Tensor intent_input = h_cls;
    if (ablation.use_iaa) {
      u.iaa = iaa_forward(h, u.saa, align, p.iaa, cfg.activation, cfg.iaa_sum);
      intent_feature = dropout(u.iaa->h_intent, drop, train, rng);
      intent_input = add(intent_feature, h_cls);
    }
    u.intent_logits = linear(intent_input, p.decoder.w_intent, p.decoder.b_intent);
    const Tensor slot_input = ablation.feeds_intent() ? add_row(reps, intent_feature) : reps;
    u.slot_logits = linear(slot_input, p.decoder.w_slot, p.decoder.b_slot);

    intent_rows.push_back(u.intent_logits);
    slot_rows.push_back(u.slot_logits);
    const auto targets = batch.slots_row(b);
    slot_targets.insert(slot_targets.end(), targets.begin(), targets.begin() + static_cast<std::ptrdiff_t>(align.size()));
    result.utterances.push_back(std::move(u));
  }

  auto check_width = [](std::span<const int> ids, std::size_t n, const char* what) {
    for (int id : ids)
      if (id >= static_cast<int>(n)) {
        throw ConfigError(std::string(what) + " label id " + std::to_string(id) + " outside decoder width " +
                          std::to_string(n));
      }
  };
  check_width(batch.intent_ids, cfg.n_intents, "intent");
  check_width(slot_targets, cfg.n_slots, "slot");
  const Tensor l_intent = cross_entropy(concat_rows(intent_rows), batch.intent_ids);
  const Tensor l_slot = cross_entropy(concat_rows(slot_rows), slot_targets);
  const double beta = ablation.effective_beta();
  auto& loss = result.loss;
  loss.beta = beta;
  loss.intent = l_intent.item();
  loss.slot = l_slot.item();
  loss.joint = add(scale(l_intent, beta), scale(l_slot, 1.0 - beta));
  loss.joint_value = loss.joint.item();
  return result;
}

/// Finite-difference check of the joint loss against every parameter.
/// Runs in eval mode so dropout cannot make the loss non-deterministic.
inline GradCheckReport joint_grad_check(const Batch& batch, const JointModel& model, const AblationConfig& ablation,
                                        const GradCheckOptions& opts = {}) {
  return grad_check([&] { return forward(batch, model, ablation, false, nullptr).loss.joint; }, model.parameters(),
                    opts);
}

struct JointPrediction {
  std::string intent;
  std::vector<double> intent_probs;
  std::vector<std::string> slots;
  std::vector<std::vector<double>> slot_probs;
  std::vector<WordAttention> attention;
  TokenizedUtterance tokens;
};

namespace detail {

inline std::vector<double> row_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= total;
  return p;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

}  // namespace detail

/// Argmax decoding of one utterance's outputs.
inline JointPrediction decode(const UtteranceOutput& out, const TokenizedUtterance& utt, const LabelCatalog& catalog) {
  JointPrediction pred;
  const auto il = out.intent_logits.data();
  pred.intent_probs = detail::row_softmax(il);
  pred.intent = catalog.intent(static_cast<int>(detail::argmax(il)));
  const std::size_t n = out.slot_logits.cols();
  for (std::size_t w = 0; w < out.slot_logits.rows(); ++w) {
    const auto sl = out.slot_logits.data().subspan(w * n, n);
    pred.slots.push_back(catalog.slot_tag(static_cast<int>(detail::argmax(sl))));
    pred.slot_probs.push_back(detail::row_softmax(sl));
  }
  pred.attention = export_attention(out.saa, utt);
  pred.tokens = utt;
  return pred;
}

inline JointPrediction predict(const std::vector<std::string>& words, const JointModel& model,
                               const WordpieceVocab& vocab, const LabelCatalog& catalog,
                               const AblationConfig& ablation = {}) {
  if (words.empty()) throw DataError("cannot predict on an empty utterance");
  std::vector<std::string> lowered;
  for (const auto& w : words) lowered.push_back(to_lower_ascii(w));
  NoGradScope no_grad;
  const Batch batch = make_inference_batch(lowered, vocab, catalog, model.config().encoder.max_seq_len);
  const auto result = forward(batch, model, ablation, false, nullptr);
  return decode(result.utterances.front(), batch.utterances.front(), catalog);
}

inline JointPrediction predict(const std::string& text, const JointModel& model, const WordpieceVocab& vocab,
                               const LabelCatalog& catalog, const AblationConfig& ablation = {}) {
  return predict(split_whitespace(text), model, vocab, catalog, ablation);
}

}  // namespace esie
