#pragma once

// AdamW training loop, evaluation, epoch sweeps, ablation runs, config files
// and binary checkpoints.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "esie/dataset.hpp"
#include "esie/errors.hpp"
#include "esie/metrics.hpp"
#include "esie/model.hpp"
#include "esie/numerics.hpp"

namespace esie {

enum class LrSchedule { constant, linear };

struct TrainConfig {
  EncoderConfig encoder = default_toy_config();
  Activation activation = Activation::tanh;
  IntentSum iaa_sum = IntentSum::word_reps;
  AblationConfig ablation;

  double lr = 5e-5;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  std::uint64_t seed = 42;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  LrSchedule lr_schedule = LrSchedule::constant;

  /// Batch size used for full-scale GPU training; kept for reference, not a default.
  static constexpr std::size_t kFullScaleBatchSize = 256;

  void validate() const {
    encoder.validate();
    ablation.validate();
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
  }

  ModelConfig model_config(std::size_t vocab_size, const LabelCatalog& catalog) const {
    ModelConfig mc;
    mc.encoder = encoder;
    mc.encoder.vocab_size = vocab_size;
    mc.activation = activation;
    mc.iaa_sum = iaa_sum;
    mc.n_intents = catalog.intent_count();
    mc.n_slots = catalog.slot_count();
    return mc;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "' expects true/false, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Applies one `key = value` setting. Unknown keys are errors.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "d_model") c.encoder.d_model = parse_uint(key, value);
  else if (key == "n_layers") c.encoder.n_layers = parse_uint(key, value);
  else if (key == "n_heads") c.encoder.n_heads = parse_uint(key, value);
  else if (key == "d_ff") c.encoder.d_ff = parse_uint(key, value);
  else if (key == "dropout") c.encoder.dropout_p = parse_double(key, value);
  else if (key == "max_seq_len") c.encoder.max_seq_len = parse_uint(key, value);
  else if (key == "lr") c.lr = parse_double(key, value);
  else if (key == "batch_size") c.batch_size = parse_uint(key, value);
  else if (key == "epochs") c.epochs = parse_uint(key, value);
  else if (key == "beta") c.ablation.beta = parse_double(key, value);
  else if (key == "seed") c.seed = parse_uint(key, value);
  else if (key == "weight_decay") c.weight_decay = parse_double(key, value);
  else if (key == "clip_norm") c.clip_norm = parse_double(key, value);
  else if (key == "use_saa") c.ablation.use_saa = parse_bool(key, value);
  else if (key == "use_iaa") c.ablation.use_iaa = parse_bool(key, value);
  else if (key == "feed_intent_to_slot") c.ablation.feed_intent_to_slot = parse_bool(key, value);
  else if (key == "slot_only") c.ablation.slot_only = parse_bool(key, value);
  else if (key == "activation") {
    if (value == "tanh") c.activation = Activation::tanh;
    else if (value == "gelu") c.activation = Activation::gelu;
    else throw ConfigError("activation must be tanh or gelu, got '" + value + "'");
  } else if (key == "iaa_sum") {
    if (value == "word_reps") c.iaa_sum = IntentSum::word_reps;
    else if (value == "first_subtoken_hidden") c.iaa_sum = IntentSum::first_subtoken_hidden;
    else throw ConfigError("iaa_sum must be word_reps or first_subtoken_hidden, got '" + value + "'");
  } else if (key == "lr_schedule") {
    if (value == "constant") c.lr_schedule = LrSchedule::constant;
    else if (value == "linear") c.lr_schedule = LrSchedule::linear;
    else throw ConfigError("lr_schedule must be constant or linear, got '" + value + "'");
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

/// Parses `key = value` lines; `#` starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    try {
      apply_setting(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string config_to_text(const TrainConfig& c) {
  using detail::format_double;
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "d_model = " << c.encoder.d_model << '\n'
     << "n_layers = " << c.encoder.n_layers << '\n'
     << "n_heads = " << c.encoder.n_heads << '\n'
     << "d_ff = " << c.encoder.d_ff << '\n'
     << "dropout = " << format_double(c.encoder.dropout_p) << '\n'
     << "max_seq_len = " << c.encoder.max_seq_len << '\n'
     << "lr = " << format_double(c.lr) << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "epochs = " << c.epochs << '\n'
     << "beta = " << format_double(c.ablation.beta) << '\n'
     << "seed = " << c.seed << '\n'
     << "weight_decay = " << format_double(c.weight_decay) << '\n'
     << "clip_norm = " << format_double(c.clip_norm) << '\n'
     << "activation = " << (c.activation == Activation::gelu ? "gelu" : "tanh") << '\n'
     << "use_saa = " << b(c.ablation.use_saa) << '\n'
     << "use_iaa = " << b(c.ablation.use_iaa) << '\n'
     << "feed_intent_to_slot = " << b(c.ablation.feed_intent_to_slot) << '\n'
     << "slot_only = " << b(c.ablation.slot_only) << '\n'
     << "iaa_sum = " << (c.iaa_sum == IntentSum::word_reps ? "word_reps" : "first_subtoken_hidden") << '\n'
     << "lr_schedule = " << (c.lr_schedule == LrSchedule::linear ? "linear" : "constant") << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay:
/// θ ← θ - lr·(m̂ / (√v̂ + eps) + wd·θ).
class AdamW {
 public:
  AdamW(ParamList params, double beta1, double beta2, double eps, double weight_decay)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  /// Parameters without a gradient are treated as having a zero gradient.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto theta = params_[i].tensor.mutable_data();
      const auto g = params_[i].tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        const double gj = g.empty() ? 0.0 : g[j];
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        theta[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * theta[j]);
      }
    }
  }

  std::size_t steps() const { return t_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  double beta1_, beta2_, eps_, wd_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(const ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      for (auto& g : p.tensor.node().grad) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  EvalReport report;
  std::vector<UtteranceLabels> gold, predicted;
  std::size_t skipped_too_long = 0;
};

/// Batched argmax inference over a split. Utterances that do not fit the
/// encoder window are scored as wrong (empty intent, all-O slots).
inline Evaluation evaluate(const JointModel& model, const Split& data, const WordpieceVocab& vocab,
                           const LabelCatalog& catalog, const AblationConfig& ablation, std::size_t batch_size = 32) {
  NoGradScope no_grad;
  Evaluation ev;
  ev.gold.reserve(data.size());
  ev.predicted.assign(data.size(), {});
  for (const auto& u : data) ev.gold.push_back({u.intent, u.slots});
  for (std::size_t i = 0; i < data.size(); ++i) ev.predicted[i] = {"", std::vector<std::string>(data[i].words.size(), "O")};

  const auto plan = batch_iter(data, vocab, catalog, batch_size, std::nullopt, model.config().encoder.max_seq_len);
  ev.skipped_too_long = plan.skipped_too_long;
  for (const auto& batch : plan.batches) {
    const auto out = forward(batch, model, ablation, false, nullptr);
    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto pred = decode(out.utterances[b], batch.utterances[b], catalog);
      ev.predicted[batch.source_index[b]] = {pred.intent, pred.slots};
    }
  }
  ev.report = evaluate_labels(ev.gold, ev.predicted);
  return ev;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  EvalReport dev;
};

struct TrainResult {
  JointModel final_model;
  JointModel best_model;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
  std::size_t steps = 0;
  std::string rng_state;
  std::size_t skipped_too_long = 0;
};

struct TrainHooks {
  /// Called after every epoch's dev evaluation; returning false stops training.
  std::function<bool(const EpochRecord&, const JointModel&)> on_epoch;
  /// Called for every optimization step with the batch's loss report.
  std::function<void(std::size_t step, const LossReport&)> on_step;
};

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 rng_from_string(const std::string& s) {
  std::istringstream is(s);
  std::mt19937_64 rng;
  is >> rng;
  if (!is) throw DataError("corrupt random generator state");
  return rng;
}

/// Trains from a fresh initialization seeded by `config.seed`.
/// Keeps the parameters with the best dev overall accuracy (earliest on ties).
inline TrainResult train(const Split& train_split, const Split& dev_split, const WordpieceVocab& vocab,
                         const LabelCatalog& catalog, const TrainConfig& config, const TrainHooks& hooks = {}) {
  config.validate();
  if (train_split.empty()) throw DataError("training split is empty");
  JointModel model = JointModel::init(config.model_config(vocab.size(), catalog), config.seed);
  const ParamList params = model.parameters();
  AdamW opt(params, config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
  std::mt19937_64 dropout_rng(config.seed ^ 0x9E3779B97F4A7C15ull);

  TrainResult result;
  std::optional<double> best_acc;
  std::size_t batches_per_epoch = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto plan = batch_iter(train_split, vocab, catalog, config.batch_size, config.seed + epoch,
                                 config.encoder.max_seq_len);
    if (epoch == 1) {
      result.skipped_too_long = plan.skipped_too_long;
      batches_per_epoch = plan.batches.size();
    }
    const std::size_t total_steps = batches_per_epoch * config.epochs;
    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < plan.batches.size(); ++bi) {
      Tape tape;
      TapeScope scope(tape);
      const auto out = forward(plan.batches[bi], model, config.ablation, true, &dropout_rng);
      if (!std::isfinite(out.loss.joint_value)) {
        throw NumericError("non-finite loss at step " + std::to_string(opt.steps() + 1) + " (epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(bi) + ")");
      }
      tape.backward(out.loss.joint);
      tape.clear();
      clip_grad_norm(params, config.clip_norm);
      double lr = config.lr;
      if (config.lr_schedule == LrSchedule::linear && total_steps > 0) {
        lr *= 1.0 - static_cast<double>(opt.steps()) / static_cast<double>(total_steps);
      }
      opt.step(lr);
      zero_grads(params);
      loss_sum += out.loss.joint_value;
      if (hooks.on_step) hooks.on_step(opt.steps(), out.loss);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = plan.batches.empty() ? 0.0 : loss_sum / static_cast<double>(plan.batches.size());
    if (!dev_split.empty()) rec.dev = evaluate(model, dev_split, vocab, catalog, config.ablation).report;
    if (!best_acc || rec.dev.overall_acc > *best_acc) {
      best_acc = rec.dev.overall_acc;
      result.best_model = model.clone();
      result.best_epoch = epoch;
    }
    result.history.push_back(rec);
    if (hooks.on_epoch && !hooks.on_epoch(rec, model)) break;
  }
  result.final_model = std::move(model);
  result.steps = opt.steps();
  result.rng_state = rng_to_string(dropout_rng);
  return result;
}

// ---------------------------------------------------------------------------
// Sweeps and ablations

/// Runs `tasks` on up to `jobs` threads; each task owns its state.
inline void run_parallel(std::vector<std::function<void()>> tasks, std::size_t jobs) {
  jobs = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  if (jobs == 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < tasks.size();) {
        try {
          tasks[i]();
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

struct SplitSet {
  Split train, dev, test;
};

struct SweepRow {
  std::size_t epochs = 0;
  EvalReport test;
  std::size_t best_epoch = 0;
};

/// One full training run per entry, all from the same seed; scores the
/// best-on-dev parameters on the test split.
inline std::vector<SweepRow> epoch_sweep(const SplitSet& data, const WordpieceVocab& vocab, const LabelCatalog& catalog,
                                         const TrainConfig& config, const std::vector<std::size_t>& epochs_list,
                                         std::size_t jobs = 1) {
  if (epochs_list.empty()) throw ConfigError("epoch sweep needs at least one epoch count");
  std::vector<SweepRow> rows(epochs_list.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t i = 0; i < epochs_list.size(); ++i) {
    tasks.emplace_back([&, i] {
      TrainConfig c = config;
      c.epochs = epochs_list[i];
      const auto r = train(data.train, data.dev, vocab, catalog, c);
      rows[i] = {epochs_list[i], evaluate(r.best_model, data.test, vocab, catalog, c.ablation).report, r.best_epoch};
    });
  }
  run_parallel(std::move(tasks), jobs);
  return rows;
}

struct AblationRow {
  std::string name;
  AblationConfig ablation;
  EvalReport test;
  bool has_intent_metrics = true;
};

/// The standard variants on top of `base`: full, w/o IAA, w/o SAA,
/// w/o intent feature, and optionally slot-only.
inline std::vector<std::pair<std::string, AblationConfig>> ablation_variants(const AblationConfig& base,
                                                                              bool include_slot_only) {
  std::vector<std::pair<std::string, AblationConfig>> v;
  AblationConfig full = base;
  full.use_saa = full.use_iaa = full.feed_intent_to_slot = true;
  full.slot_only = false;
  v.emplace_back("full", full);
  AblationConfig a = full;
  a.use_iaa = false;
  v.emplace_back("w/o IAA", a);
  a = full;
  a.use_saa = false;
  v.emplace_back("w/o SAA", a);
  a = full;
  a.feed_intent_to_slot = false;
  v.emplace_back("w/o intent feature", a);
  if (include_slot_only) {
    a = full;
    a.slot_only = true;
    v.emplace_back("slot only", a);
  }
  return v;
}

inline std::vector<AblationRow> run_ablations(const SplitSet& data, const WordpieceVocab& vocab,
                                              const LabelCatalog& catalog, const TrainConfig& config,
                                              bool include_slot_only = true, std::size_t jobs = 1) {
  const auto variants = ablation_variants(config.ablation, include_slot_only);
  std::vector<AblationRow> rows(variants.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    tasks.emplace_back([&, i] {
      TrainConfig c = config;
      c.ablation = variants[i].second;
      const auto r = train(data.train, data.dev, vocab, catalog, c);
      rows[i] = {variants[i].first, c.ablation, evaluate(r.best_model, data.test, vocab, catalog, c.ablation).report,
                 !c.ablation.slot_only};
    });
  }
  run_parallel(std::move(tasks), jobs);
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   "ESIECKPT" u32 version
//   str config_text, u64 step, str rng_state
//   u64 n + str × n   vocab tokens
//   u64 n + str × n   slot tags
//   u64 n + str × n   intents
//   u64 n_params, then per parameter: str name, u32 rank, u64 dims[rank], f64 values[]
//   u64 FNV-1a hash of every preceding byte
// where str = u64 byte length + bytes.

inline constexpr char kCheckpointMagic[8] = {'E', 'S', 'I', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  std::vector<std::string> vocab_tokens;
  LabelCatalog catalog;
  ParamList params;
  std::uint64_t step = 0;
  std::string rng_state;

  static Checkpoint from_model(const JointModel& model, const TrainConfig& config, const WordpieceVocab& vocab,
                               const LabelCatalog& catalog, std::uint64_t step = 0, std::string rng_state = {}) {
    return {config, vocab.tokens(), catalog, model.parameters(), step, std::move(rng_state)};
  }

  WordpieceVocab vocab() const { return WordpieceVocab(vocab_tokens); }

  /// Rebuilds the model and copies every stored tensor into it.
  JointModel model() const {
    JointModel m = JointModel::init(config.model_config(vocab_tokens.size(), catalog), config.seed);
    const ParamList target = m.parameters();
    if (target.size() != params.size()) {
      throw DataError("checkpoint holds " + std::to_string(params.size()) + " tensors, model expects " +
                      std::to_string(target.size()));
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (target[i].name != params[i].name || target[i].tensor.shape() != params[i].tensor.shape()) {
        throw DataError("checkpoint tensor '" + params[i].name + "' " + shape_str(params[i].tensor.shape()) +
                        " does not match model tensor '" + target[i].name + "' " +
                        shape_str(target[i].tensor.shape()));
      }
      std::copy(params[i].tensor.data().begin(), params[i].tensor.data().end(), target[i].tensor.mutable_data().begin());
    }
    return m;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::string& bytes() const { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw DataError("checkpoint is truncated or corrupt");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(config_to_text(ck.config));
  w.u64(ck.step);
  w.str(ck.rng_state);
  auto strings = [&](const std::vector<std::string>& v) {
    w.u64(v.size());
    for (const auto& s : v) w.str(s);
  };
  strings(ck.vocab_tokens);
  strings(ck.catalog.slot_tags());
  strings(ck.catalog.intents());
  w.u64(ck.params.size());
  for (const auto& p : ck.params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.u64(d);
    for (double v : p.tensor.data()) w.f64(v);
  }
  std::string out = w.bytes();
  const std::uint64_t h = detail::fnv1a(out);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((h >> (8 * i)) & 0xFF));
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw DataError("not a checkpoint file (bad magic)");
  }
  detail::ByteReader r(bytes);
  r.raw(sizeof kCheckpointMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("incompatible checkpoint format version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  detail::ByteReader tail(bytes.substr(bytes.size() - 8));
  if (detail::fnv1a(body) != tail.u64()) throw DataError("checkpoint integrity check failed (truncated or corrupt)");

  detail::ByteReader in(body);
  in.raw(sizeof kCheckpointMagic + 4);
  Checkpoint ck;
  ck.config = parse_config(in.str());
  ck.step = in.u64();
  ck.rng_state = in.str();
  auto strings = [&] {
    const std::uint64_t n = in.u64();
    if (n > in.remaining() / 8) throw DataError("checkpoint string table length is corrupt");
    std::vector<std::string> v;
    for (std::uint64_t i = 0; i < n; ++i) v.push_back(in.str());
    return v;
  };
  ck.vocab_tokens = strings();
  auto slots = strings();
  auto intents = strings();
  ck.catalog = LabelCatalog(std::move(slots), std::move(intents));
  const std::uint64_t n_params = in.u64();
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = in.str();
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw DataError("checkpoint tensor '" + name + "' has corrupt rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.u64();
    const std::size_t n = shape_size(shape);
    if (n > in.remaining() / 8) throw DataError("checkpoint tensor '" + name + "' payload is truncated");
    std::vector<double> values(n);
    for (auto& v : values) v = in.f64();
    ck.params.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values), true)});
  }
  if (in.remaining() != 0) throw DataError("checkpoint has trailing bytes");
  return ck;
}

/// Writes to a sibling temp file, then renames into place.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace esie
