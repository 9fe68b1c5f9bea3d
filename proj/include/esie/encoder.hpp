#pragma once

// Small BERT-shaped transformer encoder trained from scratch: token plus
// learned position embeddings, then post-LN blocks of masked multi-head
// self-attention and a GELU feed-forward network.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "esie/dataset.hpp"
#include "esie/errors.hpp"
#include "esie/numerics.hpp"

namespace esie {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  double dropout_p = 0.1;
  std::size_t max_seq_len = kDefaultMaxSeqLen;
  std::size_t vocab_size = 0;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout must be in [0,1)");
    if (max_seq_len < 2) throw ConfigError("max_seq_len must leave room for [CLS] and [SEP]");
  }
  std::size_t head_dim() const { return d_model / n_heads; }
};

/// Desk-sized defaults with the base model's proportions and dropout rate.
inline EncoderConfig default_toy_config() { return EncoderConfig{}; }

inline constexpr double kInitStd = 0.02;
inline constexpr double kLayerNormEps = 1e-12;

struct EncoderLayerParams {
  Tensor w_query, b_query, w_key, b_key, w_value, b_value, w_out, b_out;
  Tensor attn_ln_gain, attn_ln_bias;
  Tensor w_ff1, b_ff1, w_ff2, b_ff2;
  Tensor ff_ln_gain, ff_ln_bias;
};

struct EncoderParams {
  Tensor token_embedding;     // [V×d]
  Tensor position_embedding;  // [max_seq_len×d]
  Tensor emb_ln_gain, emb_ln_bias;
  std::vector<EncoderLayerParams> layers;

  void collect(ParamList& out, const std::string& prefix = "encoder.") const {
    out.push_back({prefix + "token_embedding", token_embedding});
    out.push_back({prefix + "position_embedding", position_embedding});
    out.push_back({prefix + "emb_ln.gain", emb_ln_gain});
    out.push_back({prefix + "emb_ln.bias", emb_ln_bias});
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = prefix + "layer" + std::to_string(i) + ".";
      out.push_back({p + "attn.w_query", l.w_query});
      out.push_back({p + "attn.b_query", l.b_query});
      out.push_back({p + "attn.w_key", l.w_key});
      out.push_back({p + "attn.b_key", l.b_key});
      out.push_back({p + "attn.w_value", l.w_value});
      out.push_back({p + "attn.b_value", l.b_value});
      out.push_back({p + "attn.w_out", l.w_out});
      out.push_back({p + "attn.b_out", l.b_out});
      out.push_back({p + "attn_ln.gain", l.attn_ln_gain});
      out.push_back({p + "attn_ln.bias", l.attn_ln_bias});
      out.push_back({p + "ff.w1", l.w_ff1});
      out.push_back({p + "ff.b1", l.b_ff1});
      out.push_back({p + "ff.w2", l.w_ff2});
      out.push_back({p + "ff.b2", l.b_ff2});
      out.push_back({p + "ff_ln.gain", l.ff_ln_gain});
      out.push_back({p + "ff_ln.bias", l.ff_ln_bias});
    }
  }
};

namespace detail {

inline Tensor init_weight(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  return Tensor::randn({rows, cols}, kInitStd, rng, true);
}
inline Tensor init_bias(std::size_t n) { return Tensor::zeros({n}, true); }
inline Tensor init_gain(std::size_t n) { return Tensor::from({n}, std::vector<double>(n, 1.0), true); }

}  // namespace detail

/// Weights ~ N(0, 0.02), biases zero, layer-norm gains one.
inline EncoderParams init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.vocab_size == 0) throw ConfigError("encoder vocab_size is zero");
  using detail::init_bias;
  using detail::init_gain;
  using detail::init_weight;
  const std::size_t d = cfg.d_model;
  EncoderParams p;
  p.token_embedding = init_weight(cfg.vocab_size, d, rng);
  p.position_embedding = init_weight(cfg.max_seq_len, d, rng);
  p.emb_ln_gain = init_gain(d);
  p.emb_ln_bias = init_bias(d);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    EncoderLayerParams l;
    l.w_query = init_weight(d, d, rng);
    l.b_query = init_bias(d);
    l.w_key = init_weight(d, d, rng);
    l.b_key = init_bias(d);
    l.w_value = init_weight(d, d, rng);
    l.b_value = init_bias(d);
    l.w_out = init_weight(d, d, rng);
    l.b_out = init_bias(d);
    l.attn_ln_gain = init_gain(d);
    l.attn_ln_bias = init_bias(d);
    l.w_ff1 = init_weight(cfg.d_ff, d, rng);
    l.b_ff1 = init_bias(cfg.d_ff);
    l.w_ff2 = init_weight(d, cfg.d_ff, rng);
    l.b_ff2 = init_bias(d);
    l.ff_ln_gain = init_gain(d);
    l.ff_ln_bias = init_bias(d);
    p.layers.push_back(std::move(l));
  }
  return p;
}

/// Closed-form parameter count of an encoder.
inline std::size_t encoder_parameter_count(const EncoderConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 4 * (d * d + d) + 2 * d + (c.d_ff * d + c.d_ff) + (d * c.d_ff + d) + 2 * d;
  return c.vocab_size * d + c.max_seq_len * d + 2 * d + c.n_layers * per_layer;
}

struct EncoderOutput {
  /// Hidden states per batch row, each [L×d_model]. Padded rows are computed
  /// but never attended to by real positions.
  std::vector<Tensor> hidden;
  Mask mask;  // B×L
  std::size_t seq_len = 0;
  /// attention[b][layer][head], each [L×L]; filled only when requested.
  std::vector<std::vector<std::vector<Tensor>>> attention;
};

/// Encodes one padded row of token ids.
inline Tensor encode_row(std::span<const int> ids, std::span<const std::uint8_t> keep, const EncoderParams& p,
                         const EncoderConfig& cfg, bool train, std::mt19937_64* rng,
                         std::vector<std::vector<Tensor>>* attention = nullptr) {
  const std::size_t len = ids.size();
  if (len > cfg.max_seq_len) {
    throw DataError("sequence of " + std::to_string(len) + " sub-tokens exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len));
  }
  const Mask key_mask(keep.begin(), keep.end());
  Tensor x = add(embedding_lookup(p.token_embedding, ids), rows(p.position_embedding, 0, len));
  x = dropout(layernorm(x, p.emb_ln_gain, p.emb_ln_bias, kLayerNormEps), cfg.dropout_p, train, rng);

  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  for (const auto& l : p.layers) {
    const Tensor q = linear(x, l.w_query, l.b_query);
    const Tensor k = linear(x, l.w_key, l.b_key);
    const Tensor v = linear(x, l.w_value, l.b_value);
    std::vector<Tensor> heads;
    std::vector<Tensor> head_probs;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const Tensor qh = cols(q, h * hd, (h + 1) * hd);
      const Tensor kh = cols(k, h * hd, (h + 1) * hd);
      const Tensor vh = cols(v, h * hd, (h + 1) * hd);
      const Tensor scores = scale(linear(qh, kh), inv_sqrt_hd);  // qh·khᵀ
      Tensor probs = softmax(scores, -1, key_mask);
      if (attention) head_probs.push_back(probs);
      probs = dropout(probs, cfg.dropout_p, train, rng);
      heads.push_back(matmul(probs, vh));
    }
    if (attention) attention->push_back(std::move(head_probs));
    Tensor attn = linear(concat_cols(heads), l.w_out, l.b_out);
    attn = dropout(attn, cfg.dropout_p, train, rng);
    x = layernorm(add(x, attn), l.attn_ln_gain, l.attn_ln_bias, kLayerNormEps);

    Tensor ff = linear(gelu(linear(x, l.w_ff1, l.b_ff1)), l.w_ff2, l.b_ff2);
    ff = dropout(ff, cfg.dropout_p, train, rng);
    x = layernorm(add(x, ff), l.ff_ln_gain, l.ff_ln_bias, kLayerNormEps);
  }
  return x;
}

inline EncoderOutput encode(const Batch& batch, const EncoderParams& p, const EncoderConfig& cfg, bool train,
                            std::mt19937_64* rng, bool keep_attention = false) {
  EncoderOutput out;
  out.mask = batch.mask;
  out.seq_len = batch.seq_len;
  for (std::size_t b = 0; b < batch.size; ++b) {
    const auto ids = batch.ids_row(b);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (ids[j] < 0 || static_cast<std::size_t>(ids[j]) >= cfg.vocab_size) {
        throw DataError("token id " + std::to_string(ids[j]) + " at row " + std::to_string(b) + " position " +
                        std::to_string(j) + " outside vocab of " + std::to_string(cfg.vocab_size));
      }
    }
    std::vector<std::vector<Tensor>> attn;
    out.hidden.push_back(encode_row(ids, batch.mask_row(b), p, cfg, train, rng, keep_attention ? &attn : nullptr));
    if (keep_attention) out.attention.push_back(std::move(attn));
  }
  return out;
}

}  // namespace esie
