// esie: command-line front end for training, evaluating and inspecting the
// joint intent/slot model.
//
// Exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "esie/esie.hpp"

namespace fs = std::filesystem;
using namespace esie;

namespace {

const std::vector<std::string> kSubcommands = {"tokenize", "train",    "eval",  "predict",
                                               "gradcheck", "ablate", "sweep", "weights"};

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string closest_subcommand(const std::string& word) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& s : kSubcommands) {
    const std::size_t d = edit_distance(word, s);
    if (d < best_d) best = s, best_d = d;
  }
  return best;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.2f%%", 100.0 * v);
  return buf;
}

struct Common {
  std::string config, data, split = "test", vocab, checkpoint, out, text;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

TrainConfig resolve_config(const Common& c) {
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

SplitSet load_splits(const std::string& dir) {
  SplitSet s;
  s.train = load_split(dir, "train");
  if (fs::exists(fs::path(dir) / "dev")) s.dev = load_split(dir, "dev");
  else std::cerr << "warning: " << dir << "/dev not found; best-epoch selection uses the last epoch\n";
  if (fs::exists(fs::path(dir) / "test")) s.test = load_split(dir, "test");
  return s;
}

void report_plan_warnings(const Split& data, const WordpieceVocab& vocab, const LabelCatalog& catalog,
                          std::size_t max_seq_len, const std::string& what) {
  const auto plan = batch_iter(data, vocab, catalog, 64, std::nullopt, max_seq_len);
  for (const auto& w : plan.warnings) std::cerr << "warning: " << what << ": " << w << "\n";
  if (plan.unknown_slots || plan.unknown_intents) {
    std::cerr << "warning: " << what << ": " << plan.unknown_slots << " slot tags and " << plan.unknown_intents
              << " intents unseen in training (scored as errors)\n";
  }
}

// --- tokenize ----------------------------------------------------------------

int cmd_tokenize(const Common& c) {
  const auto vocab = WordpieceVocab::load(c.vocab);
  std::vector<std::string> words;
  for (auto& w : split_whitespace(c.text)) words.push_back(to_lower_ascii(w));
  const auto t = tokenize_utterance(words, vocab);
  for (std::size_t w = 0; w < t.word_count(); ++w) {
    std::cout << t.words[w] << " →";
    for (const auto& p : word_pieces(t, w)) std::cout << ' ' << p;
    std::cout << "  [" << t.alignment[w].begin << ',' << t.alignment[w].end << ")\n";
  }
  return 0;
}

// --- train -------------------------------------------------------------------

int cmd_train(const Common& c) {
  const TrainConfig cfg = resolve_config(c);
  const auto vocab = WordpieceVocab::load(c.vocab);
  const auto data = load_splits(c.data);
  const auto catalog = build_catalog(data.train);
  report_plan_warnings(data.train, vocab, catalog, cfg.encoder.max_seq_len, "train");
  if (!data.dev.empty()) report_plan_warnings(data.dev, vocab, catalog, cfg.encoder.max_seq_len, "dev");

  fs::create_directories(c.out);
  std::ofstream history(fs::path(c.out) / "history.tsv");
  const std::string header = "epoch\ttrain_loss\tdev_intent_acc\tdev_slot_f1\tdev_overall_acc";
  history << header << '\n';
  std::cout << header << '\n';

  const auto start = std::chrono::steady_clock::now();
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r, const JointModel&) {
    std::ostringstream line;
    line << r.epoch << '\t' << fmt(r.train_loss) << '\t' << fmt(r.dev.intent_acc) << '\t' << fmt(r.dev.slot_f1)
         << '\t' << fmt(r.dev.overall_acc);
    history << line.str() << '\n' << std::flush;
    std::cout << line.str() << std::endl;
    return true;
  };
  const auto result = train(data.train, data.dev, vocab, catalog, cfg, hooks);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  save_checkpoint(Checkpoint::from_model(result.best_model, cfg, vocab, catalog, result.steps, result.rng_state),
                  fs::path(c.out) / "best.ckpt");
  save_checkpoint(Checkpoint::from_model(result.final_model, cfg, vocab, catalog, result.steps, result.rng_state),
                  fs::path(c.out) / "last.ckpt");
  std::cerr << "trained " << result.history.size() << " epochs (" << result.steps << " steps) in " << secs
            << " s; best dev epoch " << result.best_epoch << "; checkpoints in " << c.out << "\n";
  return 0;
}

// --- eval --------------------------------------------------------------------

int cmd_eval(const Common& c) {
  const auto ck = load_checkpoint(c.checkpoint);
  const auto vocab = ck.vocab();
  const auto model = ck.model();
  const auto split = load_split(c.data, c.split);
  report_plan_warnings(split, vocab, ck.catalog, ck.config.encoder.max_seq_len, c.split);
  const auto ev = evaluate(model, split, vocab, ck.catalog, ck.config.ablation);
  const auto& r = ev.report;
  std::cout << fmt(r.intent_acc) << '\t' << fmt(r.slot_precision) << '\t' << fmt(r.slot_recall) << '\t'
            << fmt(r.slot_f1) << '\t' << fmt(r.overall_acc) << '\n';
  std::cout << "\nsplit            " << c.data << '/' << c.split << " (" << r.n_utterances << " utterances)\n"
            << "intent accuracy  " << pct(r.intent_acc) << '\n'
            << "slot precision   " << pct(r.slot_precision) << '\n'
            << "slot recall      " << pct(r.slot_recall) << '\n'
            << "slot F1          " << pct(r.slot_f1) << '\n'
            << "overall accuracy " << pct(r.overall_acc) << '\n'
            << "chunks           tp=" << r.counts.true_pos << " fp=" << r.counts.false_pos
            << " fn=" << r.counts.false_neg << '\n';
  if (ev.skipped_too_long) std::cout << "too long         " << ev.skipped_too_long << " (scored as wrong)\n";
  return 0;
}

// --- predict / weights -------------------------------------------------------

int cmd_predict(const Common& c) {
  const auto ck = load_checkpoint(c.checkpoint);
  const auto p = predict(c.text, ck.model(), ck.vocab(), ck.catalog, ck.config.ablation);
  std::cout << "intent\t" << p.intent << '\n';
  for (std::size_t w = 0; w < p.slots.size(); ++w) std::cout << p.tokens.words[w] << '\t' << p.slots[w] << '\n';
  return 0;
}

int cmd_weights(const Common& c) {
  const auto ck = load_checkpoint(c.checkpoint);
  const auto model = ck.model();
  const auto vocab = ck.vocab();
  if (!c.text.empty()) {
    std::cout << format_attention_tsv(predict(c.text, model, vocab, ck.catalog, ck.config.ablation).attention);
    return 0;
  }
  const auto split = load_split(c.data, c.split);
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (i) std::cout << '\n';
    std::cout << format_attention_tsv(predict(split[i].words, model, vocab, ck.catalog, ck.config.ablation).attention);
  }
  return 0;
}

// --- gradcheck ---------------------------------------------------------------

// Built-in two-utterance fixture; both utterances contain multi-piece words.
const std::vector<std::string> kFixtureVocab = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "my",   "phone", "is",
                                                "play",  "##ing", "loss",  "##less", "music", "flight", "on",
                                                "june",  "th",    "##ir",  "##tie", "##th"};
const Split kFixtureSplit = {
    {{"my", "phone", "is", "playing", "lossless", "music"},
     {"O", "O", "O", "B-MusicPlay", "B-MusicType", "I-MusicType"},
     "PlayMusic"},
    {{"flight", "on", "june", "thirtieth"}, {"O", "O", "B-month", "B-day"}, "atis_flight"},
};

std::string param_group(const std::string& name) {
  if (name.rfind("encoder.layer", 0) == 0) return name.substr(0, name.find('.', 8));
  if (name.rfind("encoder.", 0) == 0) return "encoder.embeddings";
  return name.substr(0, name.find('.'));
}

int cmd_gradcheck(const Common& c, bool all_ablations, std::size_t coords) {
  TrainConfig cfg = resolve_config(c);
  WordpieceVocab vocab;
  Split split;
  if (c.data.empty()) {
    vocab = WordpieceVocab(kFixtureVocab);
    split = kFixtureSplit;
  } else {
    vocab = WordpieceVocab::load(c.vocab);
    const auto train = load_split(c.data, c.split);
    // First utterance with a multi-piece word, plus its successor.
    for (std::size_t i = 0; i < train.size() && split.empty(); ++i) {
      const auto t = tokenize_utterance(train[i].words, vocab, cfg.encoder.max_seq_len);
      for (std::size_t w = 0; w < t.word_count(); ++w)
        if (t.is_complex(w)) {
          split = {train[i], train[(i + 1) % train.size()]};
          break;
        }
    }
    if (split.empty()) throw DataError("no utterance in " + c.data + "/" + c.split + " has a multi-piece word");
  }
  const auto catalog = build_catalog(split);
  const auto batch = batch_iter(split, vocab, catalog, 2, std::nullopt, cfg.encoder.max_seq_len).batches.at(0);
  const auto model = JointModel::init(cfg.model_config(vocab.size(), catalog), cfg.seed);

  std::vector<AblationConfig> configs;
  if (all_ablations) {
    for (int m = 0; m < 8; ++m) {
      AblationConfig a = cfg.ablation;
      a.use_saa = m & 1;
      a.use_iaa = m & 2;
      a.feed_intent_to_slot = m & 4;
      configs.push_back(a);
    }
  } else {
    configs.push_back(cfg.ablation);
  }
  GradCheckOptions opts;
  opts.max_coords_per_param = coords;
  opts.seed = cfg.seed;

  constexpr double kTolerance = 1e-3;
  double worst = 0.0;
  std::cout << "ablation\tgroup\tmax_rel_err\tcoords\n";
  for (const auto& a : configs) {
    const std::string tag = std::string("saa=") + (a.use_saa ? "1" : "0") + ",iaa=" + (a.use_iaa ? "1" : "0") +
                            ",feed=" + (a.feed_intent_to_slot ? "1" : "0");
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = joint_grad_check(batch, model, a, opts);
    std::map<std::string, std::pair<double, std::size_t>> groups;
    std::vector<std::string> order;
    for (const auto& e : report.entries) {
      const auto g = param_group(e.name);
      if (!groups.count(g)) order.push_back(g);
      auto& [err, n] = groups[g];
      err = std::max(err, e.max_rel_err);
      n += e.checked;
    }
    for (const auto& g : order) {
      std::cout << tag << '\t' << g << '\t' << groups[g].first << '\t' << groups[g].second << '\n';
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << tag << ": max rel err " << report.max_rel_err() << " in " << secs << " s\n";
    worst = std::max(worst, report.max_rel_err());
  }
  std::cout << "max_rel_err\t" << worst << '\t' << (worst <= kTolerance ? "PASS" : "FAIL") << '\n';
  return worst <= kTolerance ? 0 : 3;
}

// --- ablate / sweep ----------------------------------------------------------

int cmd_ablate(const Common& c, bool slot_only_row) {
  const TrainConfig cfg = resolve_config(c);
  const auto vocab = WordpieceVocab::load(c.vocab);
  const auto data = load_splits(c.data);
  if (data.test.empty()) throw DataError(c.data + "/test is missing or empty");
  const auto catalog = build_catalog(data.train);
  const auto rows = run_ablations(data, vocab, catalog, cfg, slot_only_row, c.jobs);
  std::cout << "variant\tintent_acc\tslot_f1\toverall_acc\n";
  for (const auto& r : rows) {
    std::cout << r.name << '\t' << (r.has_intent_metrics ? fmt(r.test.intent_acc) : "-") << '\t'
              << fmt(r.test.slot_f1) << '\t' << (r.has_intent_metrics ? fmt(r.test.overall_acc) : "-") << '\n';
  }
  return 0;
}

int cmd_sweep(const Common& c, const std::vector<std::size_t>& epochs) {
  const TrainConfig cfg = resolve_config(c);
  const auto vocab = WordpieceVocab::load(c.vocab);
  const auto data = load_splits(c.data);
  if (data.test.empty()) throw DataError(c.data + "/test is missing or empty");
  const auto catalog = build_catalog(data.train);
  const auto rows = epoch_sweep(data, vocab, catalog, cfg, epochs, c.jobs);
  std::cout << "epochs\tintent_acc\tslot_f1\toverall_acc\tbest_epoch\n";
  for (const auto& r : rows) {
    std::cout << r.epochs << '\t' << fmt(r.test.intent_acc) << '\t' << fmt(r.test.slot_f1) << '\t'
              << fmt(r.test.overall_acc) << '\t' << r.best_epoch << '\n';
  }
  return 0;
}

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::usage: return 1;
    case ErrorKind::data: return 2;
    case ErrorKind::numeric: return 3;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1 && argv[1][0] != '-' &&
      std::find(kSubcommands.begin(), kSubcommands.end(), argv[1]) == kSubcommands.end()) {
    std::cerr << "error: unknown subcommand '" << argv[1] << "'; did you mean '" << closest_subcommand(argv[1])
              << "'?\nRun with --help for the list of subcommands.\n";
    return 1;
  }

  CLI::App app{"Joint intent detection and slot filling with sub-word and intent attention adapters"};
  app.require_subcommand(1);
  Common c;

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", c.config, "Training config file (key = value lines)")->check(CLI::ExistingFile);
    s->add_option("--seed", c.seed, "Override the config seed");
  };
  auto add_data = [&](CLI::App* s, bool required) {
    auto* o = s->add_option("--data", c.data, "Corpus directory holding train/dev/test splits");
    if (required) o->required();
    o->check(CLI::ExistingDirectory);
  };
  auto add_vocab = [&](CLI::App* s, bool required) {
    auto* o = s->add_option("--vocab", c.vocab, "Wordpiece vocab file, one token per line")->check(CLI::ExistingFile);
    if (required) o->required();
  };
  auto add_checkpoint = [&](CLI::App* s) {
    s->add_option("--checkpoint", c.checkpoint, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
  };

  auto* tok = app.add_subcommand("tokenize", "Show the wordpiece split and span of each word");
  add_vocab(tok, true);
  tok->add_option("--text", c.text, "Utterance to tokenize")->required();

  auto* tr = app.add_subcommand("train", "Train a model; writes best.ckpt, last.ckpt and history.tsv");
  add_config(tr);
  add_data(tr, true);
  add_vocab(tr, true);
  tr->add_option("--out", c.out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on one split");
  add_checkpoint(ev);
  add_data(ev, true);
  ev->add_option("--split", c.split, "Split name")->capture_default_str();

  auto* pr = app.add_subcommand("predict", "Predict intent and per-word slots for one utterance");
  add_checkpoint(pr);
  pr->add_option("--text", c.text, "Utterance")->required();

  bool all_ablations = false;
  std::size_t coords = 24;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients of the joint loss");
  add_config(gc);
  add_data(gc, false);
  add_vocab(gc, false);
  gc->add_option("--split", c.split, "Split to draw the 2-utterance batch from")->capture_default_str();
  gc->add_flag("--all-ablations", all_ablations, "Check all 8 combinations of use_saa, use_iaa, feed_intent_to_slot");
  gc->add_option("--coords", coords, "Coordinates sampled per tensor (0 = all)")->capture_default_str();

  bool no_slot_only = false;
  auto* ab = app.add_subcommand("ablate", "Train each ablation variant and score it on the test split");
  add_config(ab);
  add_data(ab, true);
  add_vocab(ab, true);
  ab->add_option("--jobs", c.jobs, "Parallel training runs")->capture_default_str()->check(CLI::PositiveNumber);
  ab->add_flag("--no-slot-only", no_slot_only, "Skip the slot-only row");

  std::vector<std::size_t> epochs = {10, 30, 40, 60, 80};
  auto* sw = app.add_subcommand("sweep", "One training run per epoch budget, scored on the test split");
  add_config(sw);
  add_data(sw, true);
  add_vocab(sw, true);
  sw->add_option("--epochs", epochs, "Epoch budgets")->capture_default_str()->delimiter(',');
  sw->add_option("--jobs", c.jobs, "Parallel training runs")->capture_default_str()->check(CLI::PositiveNumber);

  auto* wt = app.add_subcommand("weights", "Dump sub-word attention weights as TSV");
  add_checkpoint(wt);
  auto* wt_text = wt->add_option("--text", c.text, "Utterance");
  auto* wt_data = wt->add_option("--data", c.data, "Corpus directory (dumps a whole split)");
  wt->add_option("--split", c.split, "Split name")->capture_default_str();
  wt_text->excludes(wt_data);
  wt->callback([&] {
    if (c.text.empty() && c.data.empty()) throw CLI::ValidationError("weights needs --text or --data");
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*tok) return cmd_tokenize(c);
    if (*tr) return cmd_train(c);
    if (*ev) return cmd_eval(c);
    if (*pr) return cmd_predict(c);
    if (*gc) return cmd_gradcheck(c, all_ablations, coords);
    if (*ab) return cmd_ablate(c, !no_slot_only);
    if (*sw) return cmd_sweep(c, epochs);
    if (*wt) return cmd_weights(c);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
