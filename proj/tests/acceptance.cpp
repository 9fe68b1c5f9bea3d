// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "esie/esie.hpp"
#include "test_util.hpp"

using namespace esie;
using testing::fixture_vocab;
using testing::kDataDir;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& why) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << why << "]";
    }
  }
};

/// Toy model at the configuration used throughout: d=64, 2 layers, 4 heads.
TrainConfig toy_config(std::uint64_t seed) {
  TrainConfig c;
  c.encoder = default_toy_config();
  c.lr = 1e-3;
  c.batch_size = 16;
  c.seed = seed;
  return c;
}

SplitSet synthetic_splits() {
  SplitSet s;
  for (auto [name, split] : {std::pair{"train", &s.train}, {"dev", &s.dev}, {"test", &s.test}})
    *split = load_split(kDataDir + "/synthetic", name);
  return s;
}

// 1. Gradient correctness under every ablation combination.
Outcome gradient_correctness() {
  Outcome o;
  const Split train = load_split(kDataDir + "/atis_mini", "train");
  const Split pair(train.begin(), train.begin() + 2);
  const auto catalog = build_catalog(pair);
  const auto batch = batch_iter(pair, fixture_vocab(), catalog, 2, std::nullopt).batches.at(0);
  bool complex_word = false;
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t w = 0; w < batch.utterances[b].word_count(); ++w) complex_word |= batch.utterances[b].is_complex(w);
  o.require(batch.size == 2 && complex_word, "batch must hold 2 utterances with a multi-piece word");

  ModelConfig mc;
  mc.encoder = default_toy_config();
  mc.encoder.vocab_size = fixture_vocab().size();
  mc.n_intents = catalog.intent_count();
  mc.n_slots = catalog.slot_count();
  const auto model = JointModel::init(mc, 1);

  GradCheckOptions opts;
  opts.eps = 1e-4;
  opts.max_coords_per_param = 256;
  double worst_err = 0.0, worst_time = 0.0;
  std::size_t coords = 0;
  for (int m = 0; m < 8; ++m) {
    AblationConfig a;
    a.use_saa = m & 1;
    a.use_iaa = m & 2;
    a.feed_intent_to_slot = m & 4;
    const auto t0 = Clock::now();
    const auto report = joint_grad_check(batch, model, a, opts);
    worst_time = std::max(worst_time, seconds_since(t0));
    worst_err = std::max(worst_err, report.max_rel_err());
    if (m == 0) for (const auto& e : report.entries) coords += e.checked;
  }
  o.detail << "max rel err " << worst_err << " over 8 configurations, " << coords
           << " coordinates each, slowest " << worst_time << " s";
  o.require(worst_err <= 1e-3, "relative error above 1e-3");
  o.require(worst_time < 60.0, "a configuration took 60 s or more");
  return o;
}

// 2. Vectorized adapters against explicit loops.
Outcome adapter_oracles() {
  Outcome o;
  std::mt19937_64 rng(2024);
  double saa_err = 0.0, iaa_err = 0.0, norm_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 8;
    const bool gelu = trial % 2 == 1;
    const auto act = gelu ? Activation::gelu : Activation::tanh;
    SaaParams saa{testing::random_matrix(d, d, rng, -1, 1), testing::random_matrix(d, d, rng, -1, 1),
                  testing::random_matrix(d, d, rng, -1, 1)};
    IaaParams iaa{testing::random_matrix(d, d, rng, -1, 1)};
    const auto align = testing::random_alignment(1 + trial % 6, 4, rng);
    const auto hidden = testing::random_matrix(align.back().end + 1, d, rng);
    const auto hm = testing::to_mat(hidden);

    const auto s = saa_forward(hidden, align, saa, act);
    std::vector<oracle::Vec> alphas;
    const auto reps = oracle::saa_words(hm, testing::to_pairs(align), testing::to_mat(saa.w_query),
                                        testing::to_mat(saa.w_key), testing::to_mat(saa.w_value), gelu, &alphas);
    for (std::size_t w = 0; w < align.size(); ++w) {
      for (std::size_t c = 0; c < d; ++c) saa_err = std::max(saa_err, std::abs(s.word_reps.at(w, c) - reps[w][c]));
      double total = 0.0;
      for (std::size_t j = 0; j < alphas[w].size(); ++j) {
        saa_err = std::max(saa_err, std::abs(s.weights[w][j] - alphas[w][j]));
        total += s.weights[w][j];
      }
      norm_err = std::max(norm_err, std::abs(total - 1.0));
    }

    const auto i = iaa_forward(hidden, s, align, iaa, act);
    const auto expect = oracle::iaa(hm[0], reps, reps, testing::to_mat(iaa.w_intent), gelu);
    double total = 0.0;
    for (std::size_t c = 0; c < d; ++c) iaa_err = std::max(iaa_err, std::abs(i.h_intent.data()[c] - expect.h_intent[c]));
    for (std::size_t w = 0; w < align.size(); ++w) {
      iaa_err = std::max(iaa_err, std::abs(i.weights.data()[w] - expect.alpha[w]));
      total += i.weights.data()[w];
    }
    norm_err = std::max(norm_err, std::abs(total - 1.0));
  }
  o.detail << "100 instances, d=8, widths 1-4: SAA max abs err " << saa_err << ", IAA " << iaa_err
           << ", weight-sum err " << norm_err;
  o.require(saa_err <= 1e-12 && iaa_err <= 1e-12, "abs error above 1e-12");
  o.require(norm_err <= 1e-12, "attention weights do not sum to 1");
  return o;
}

// 3. Reference tokenizations and alignment coverage.
Outcome tokenizer_fidelity() {
  Outcome o;
  const auto& v = fixture_vocab();
  using P = std::vector<std::string>;
  o.require(tokenize_word("playing", v) == P{"play", "##ing"}, "playing");
  o.require(tokenize_word("lossless", v) == P{"loss", "##less"}, "lossless");
  o.require(tokenize_word("thirtieth", v) == P{"th", "##ir", "##tie", "##th"}, "thirtieth");
  std::size_t utterances = 0, violations = 0;
  for (const char* corpus : {"synthetic", "simple", "atis_mini"}) {
    for (const char* split : {"train", "dev", "test"}) {
      for (const auto& u : load_split(kDataDir + "/" + corpus, split)) {
        const auto t = tokenize_utterance(u.words, v);
        std::size_t covered = 0, next = 1;
        bool ok = t.alignment.size() == u.words.size();
        for (const auto& s : t.alignment) {
          ok &= s.begin == next && s.width() >= 1;
          next = s.end;
          covered += s.width();
        }
        ok &= covered == t.ids.size() - 2 && t.ids.front() == v.cls_id() && t.ids.back() == v.sep_id();
        violations += !ok;
        ++utterances;
      }
    }
  }
  o.detail << "3 reference splits reproduced; coverage checked on " << utterances << " utterances, " << violations
           << " violations";
  o.require(violations == 0, "alignment coverage violated");
  return o;
}

// 4. One predicted label per word on every bundled split.
Outcome length_law() {
  Outcome o;
  std::size_t utterances = 0, violations = 0;
  for (const char* corpus : {"synthetic", "simple", "atis_mini"}) {
    const auto train = load_split(kDataDir + "/" + corpus, "train");
    const auto catalog = build_catalog(train);
    auto cfg = toy_config(1);
    const auto model = JointModel::init(cfg.model_config(fixture_vocab().size(), catalog), 1);
    for (const char* split : {"train", "dev", "test"}) {
      const auto data = load_split(kDataDir + "/" + corpus, split);
      for (int m = 0; m < 16; ++m) {
        AblationConfig a;
        a.use_saa = m & 1;
        a.use_iaa = m & 2;
        a.feed_intent_to_slot = m & 4;
        a.slot_only = m & 8;
        const auto ev = evaluate(model, data, fixture_vocab(), catalog, a);
        for (std::size_t i = 0; i < data.size(); ++i) {
          const bool ok = ev.predicted[i].slots.size() == data[i].words.size() &&
                          data[i].slots.size() == data[i].words.size();
          violations += !ok;
          ++utterances;
        }
      }
    }
  }
  o.detail << utterances << " utterance predictions across all splits and ablations, " << violations
           << " violations";
  o.require(violations == 0, "label count differs from word count");
  return o;
}

// 5. Overfit the synthetic training set.
Outcome overfit() {
  Outcome o;
  const auto data = synthetic_splits();
  const auto catalog = build_catalog(data.train);
  std::vector<std::vector<std::string>> words;
  std::set<std::string> types;
  for (const auto& u : data.train) {
    words.push_back(u.words);
    for (const auto& t : u.slots)
      if (t != "O") types.insert(t.substr(2));
  }
  const double multi = corpus_subword_stats(words, fixture_vocab()).multi_piece_fraction();
  o.detail << "corpus: " << data.train.size() << " utterances, " << catalog.intent_count() << " intents, "
           << types.size() << " slot types, " << 100.0 * multi << "% multi-piece words;";
  o.require(data.train.size() == 64 && catalog.intent_count() == 4 && types.size() == 6 && multi >= 0.30,
            "corpus does not match the required shape");

  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TrainConfig cfg = toy_config(seed);
    cfg.epochs = 300;
    std::optional<std::size_t> reached;
    EvalReport last;
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& rec, const JointModel& m) {
      last = evaluate(m, data.train, fixture_vocab(), catalog, cfg.ablation).report;
      if (last.intent_acc == 1.0 && last.slot_f1 >= 0.99) {
        reached = rec.epoch;
        return false;
      }
      return true;
    };
    const auto t0 = Clock::now();
    train(data.train, {}, fixture_vocab(), catalog, cfg, hooks);
    const double secs = seconds_since(t0);
    o.detail << " seed " << seed << ": ";
    if (reached) o.detail << "epoch " << *reached << ", " << secs << " s;";
    else o.detail << "not reached (intent " << last.intent_acc << ", F1 " << last.slot_f1 << ");";
    o.require(reached.has_value(), "seed " + std::to_string(seed) + " did not fit the training set");
    o.require(secs < 300.0, "seed " + std::to_string(seed) + " took 5 min or more");
  }
  return o;
}

// 6. Held-out ablation direction averaged over three seeds.
Outcome ablation_direction() {
  Outcome o;
  const auto data = synthetic_splits();
  const auto catalog = build_catalog(data.train);
  std::map<std::string, EvalReport> sum;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TrainConfig cfg = toy_config(seed);
    cfg.epochs = 40;
    for (const auto& [name, ab] : ablation_variants(cfg.ablation, false)) {
      if (name != "full" && name != "w/o SAA" && name != "w/o IAA") continue;
      TrainConfig c = cfg;
      c.ablation = ab;
      const auto r = train(data.train, data.dev, fixture_vocab(), catalog, c);
      const auto rep = evaluate(r.best_model, data.test, fixture_vocab(), catalog, ab).report;
      sum[name].slot_f1 += rep.slot_f1 / 3.0;
      sum[name].overall_acc += rep.overall_acc / 3.0;
    }
  }
  const double saa_gap = sum["full"].slot_f1 - sum["w/o SAA"].slot_f1;
  const double iaa_gap = sum["full"].overall_acc - sum["w/o IAA"].overall_acc;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "mean slot F1 full %.4f vs w/o SAA %.4f (gap %+.2f pts); mean overall acc full %.4f vs w/o IAA %.4f "
                "(gap %+.2f pts)",
                sum["full"].slot_f1, sum["w/o SAA"].slot_f1, 100 * saa_gap, sum["full"].overall_acc,
                sum["w/o IAA"].overall_acc, 100 * iaa_gap);
  o.detail << buf;
  o.require(saa_gap >= -0.01, "w/o SAA beats full by more than 1 point");
  o.require(iaa_gap >= -0.01, "w/o IAA beats full by more than 1 point");
  return o;
}

// 7. L_joint = β·L_i + (1-β)·L_s on every training batch.
Outcome loss_identity() {
  Outcome o;
  const auto data = synthetic_splits();
  const auto catalog = build_catalog(data.train);
  double worst = 0.0;
  std::size_t batches = 0;
  bool edges_exact = true;
  for (double beta : {0.0, 0.7, 1.0}) {
    TrainConfig cfg = toy_config(1);
    cfg.epochs = 2;
    cfg.ablation.beta = beta;
    TrainHooks hooks;
    hooks.on_step = [&](std::size_t, const LossReport& l) {
      ++batches;
      worst = std::max(worst, std::abs(l.joint_value - (l.beta * l.intent + (1 - l.beta) * l.slot)));
      if (beta == 1.0) edges_exact &= l.joint_value == l.intent;
      if (beta == 0.0) edges_exact &= l.joint_value == l.slot;
    };
    train(data.train, {}, fixture_vocab(), catalog, cfg, hooks);
  }
  o.detail << batches << " training batches at beta 0, 0.7, 1: max deviation " << worst
           << (edges_exact ? ", edge cases exact" : ", edge cases inexact");
  o.require(worst <= 1e-12, "identity off by more than 1e-12");
  o.require(edges_exact, "beta=0 or beta=1 not exact");
  return o;
}

// 8. Chunk F1 against an independent conlleval port.
Outcome metrics_oracle() {
  Outcome o;
  std::mt19937_64 rng(8);
  const std::vector<std::string> alphabet = {"O", "B-a", "I-a", "B-b", "I-b", "B-c", "I-c"};
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1), len(1, 15);
  std::size_t disagreements = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::string> gold, pred;
    const std::size_t n = len(rng);
    for (std::size_t j = 0; j < n; ++j) {
      gold.push_back(alphabet[pick(rng)]);
      pred.push_back(alphabet[pick(rng)]);
    }
    std::set<oracle::ChunkTuple> mine;
    for (const auto& c : extract_chunks(gold)) mine.emplace(c.type, c.begin, c.end);
    disagreements += mine != oracle::chunks(gold);
    disagreements += std::abs(slot_f1({gold}, {pred}).f1 - oracle::f1({gold}, {pred})) > 1e-15;
  }
  const auto hand = slot_f1({{"B-x", "I-x", "O"}}, {{"B-x", "O", "O"}});
  const auto counts = chunk_counts({{"B-x", "I-x", "O"}}, {{"B-x", "O", "O"}});
  o.detail << "1000 random sequences, " << disagreements << " disagreements; hand example F1 " << hand.f1
           << " (TP " << counts.true_pos << ", FP " << counts.false_pos << ", FN " << counts.false_neg << ")";
  o.require(disagreements == 0, "chunker or F1 disagrees with the reference");
  o.require(hand.f1 == 0.0 && counts.true_pos == 0 && counts.false_pos == 1 && counts.false_neg == 1,
            "hand example");
  return o;
}

// 9. Reproducibility and checkpoint round trip.
Outcome determinism_and_checkpoint() {
  Outcome o;
  const auto data = synthetic_splits();
  const auto catalog = build_catalog(data.train);
  TrainConfig cfg = toy_config(7);
  cfg.epochs = 15;
  const auto a = train(data.train, data.dev, fixture_vocab(), catalog, cfg);
  const auto b = train(data.train, data.dev, fixture_vocab(), catalog, cfg);
  const auto ra = evaluate(a.best_model, data.test, fixture_vocab(), catalog, cfg.ablation).report;
  const auto rb = evaluate(b.best_model, data.test, fixture_vocab(), catalog, cfg.ablation).report;
  bool same = ra.intent_acc == rb.intent_acc && ra.slot_f1 == rb.slot_f1 && ra.overall_acc == rb.overall_acc;
  for (std::size_t e = 0; e < a.history.size(); ++e) same &= a.history[e].train_loss == b.history[e].train_loss;

  const auto path = std::filesystem::temp_directory_path() / "esie_acceptance.ckpt";
  save_checkpoint(Checkpoint::from_model(a.final_model, cfg, fixture_vocab(), catalog, a.steps, a.rng_state), path);
  const auto ck = load_checkpoint(path);
  std::filesystem::remove(path);
  const auto loaded = ck.model();
  std::size_t compared = 0, differing = 0;
  for (const auto& batch : batch_iter(data.test, ck.vocab(), ck.catalog, 32, std::nullopt).batches) {
    const auto x = forward(batch, a.final_model, cfg.ablation, false, nullptr);
    const auto y = forward(batch, loaded, cfg.ablation, false, nullptr);
    differing += x.loss.joint_value != y.loss.joint_value;
    for (std::size_t i = 0; i < batch.size; ++i) {
      for (const auto* pair : {&x.utterances[i].intent_logits, &x.utterances[i].slot_logits}) {
        const auto& other = pair == &x.utterances[i].intent_logits ? y.utterances[i].intent_logits
                                                                   : y.utterances[i].slot_logits;
        for (std::size_t j = 0; j < pair->size(); ++j, ++compared) differing += pair->data()[j] != other.data()[j];
      }
    }
  }
  o.detail << "two runs " << (same ? "identical" : "differ") << " (test F1 " << ra.slot_f1 << "); " << compared
           << " logits after save/load, " << differing << " differ; rng state "
           << (ck.rng_state == a.rng_state ? "restored" : "lost");
  o.require(same, "identical config and seed gave different results");
  o.require(differing == 0, "forward pass changed after checkpoint round trip");
  o.require(ck.rng_state == a.rng_state && ck.step == a.steps, "training state not restored");
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"adapter oracle equivalence", adapter_oracles},
      {"tokenizer fidelity", tokenizer_fidelity},
      {"length law", length_law},
      {"overfit sanity", overfit},
      {"ablation direction", ablation_direction},
      {"loss identity", loss_identity},
      {"metrics oracle", metrics_oracle},
      {"determinism and checkpoint round trip", determinism_and_checkpoint},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "threw: " << e.what();
    }
    failures += !o.pass;
    std::printf("criterion %zu %s: %s (%.1f s) %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                seconds_since(t0), o.detail.str().c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
