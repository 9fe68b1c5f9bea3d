#include <gtest/gtest.h>

#include <random>

#include "esie/metrics.hpp"
#include "oracles.hpp"

namespace esie {
namespace {

using Tags = std::vector<std::string>;

TEST(Chunks, BasicSpans) {
  const auto c = extract_chunks({"B-x", "I-x", "O", "B-y", "B-y", "I-y"});
  const std::set<Chunk> expect = {{"x", 0, 2}, {"y", 3, 4}, {"y", 4, 6}};
  EXPECT_EQ(c, expect);
}

TEST(Chunks, LenientIAfterOAndTypeSwitch) {
  EXPECT_EQ(extract_chunks({"O", "I-x", "I-x"}), (std::set<Chunk>{{"x", 1, 3}}));
  EXPECT_EQ(extract_chunks({"B-x", "I-y"}), (std::set<Chunk>{{"x", 0, 1}, {"y", 1, 2}}));
  EXPECT_TRUE(extract_chunks({"O", "O"}).empty());
  EXPECT_THROW(extract_chunks({"X-x"}), DataError);
}

TEST(SlotF1, HandWorkedExamples) {
  // Gold chunk x[0,2) vs predicted x[0,1): boundary mismatch, no credit.
  EXPECT_EQ(slot_f1({{"B-x", "I-x", "O"}}, {{"B-x", "O", "O"}}).f1, 0.0);
  EXPECT_EQ(slot_f1({{"B-x", "I-x", "O"}}, {{"B-x", "I-x", "O"}}).f1, 1.0);
  // Two gold chunks, one found, one spurious: P = R = 1/2.
  const auto r = slot_f1({{"B-a", "O", "B-b"}}, {{"B-a", "B-c", "O"}});
  EXPECT_DOUBLE_EQ(r.precision, 0.5);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
  EXPECT_DOUBLE_EQ(r.f1, 0.5);
}

TEST(SlotF1, ZeroDenominatorConvention) {
  EXPECT_EQ(slot_f1({{"O", "O"}}, {{"O", "O"}}).f1, 1.0);
  EXPECT_EQ(slot_f1({{"O"}}, {{"B-x"}}).f1, 0.0);
  EXPECT_EQ(slot_f1({{"B-x"}}, {{"O"}}).f1, 0.0);
  EXPECT_EQ(slot_f1({}, {}).f1, 1.0);
}

TEST(SlotF1, LengthMismatchNamesUtterance) {
  try {
    slot_f1({{"O"}, {"O", "O"}}, {{"O"}, {"O"}});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("utterance 1"), std::string::npos);
  }
}

TEST(SlotF1, AgreesWithConllevalPortOnRandomSequences) {
  std::mt19937_64 rng(17);
  const std::vector<std::string> alphabet = {"O", "B-a", "I-a", "B-b", "I-b", "B-c", "I-c"};
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1), len(1, 12);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Tags> gold(1 + trial % 4), pred(gold.size());
    for (std::size_t u = 0; u < gold.size(); ++u) {
      const std::size_t n = len(rng);
      for (std::size_t i = 0; i < n; ++i) {
        gold[u].push_back(alphabet[pick(rng)]);
        pred[u].push_back(alphabet[pick(rng)]);
      }
      std::set<oracle::ChunkTuple> mine;
      for (const auto& c : extract_chunks(gold[u])) mine.emplace(c.type, c.begin, c.end);
      ASSERT_EQ(mine, oracle::chunks(gold[u]));
    }
    EXPECT_NEAR(slot_f1(gold, pred).f1, oracle::f1(gold, pred), 1e-15);
  }
}

TEST(OverallAccuracy, RequiresIntentAndEverySlot) {
  const std::vector<UtteranceLabels> gold = {{"a", {"O", "B-x"}}, {"b", {"O"}}, {"a", {"B-y"}}};
  const std::vector<UtteranceLabels> pred = {{"a", {"O", "B-x"}}, {"a", {"O"}}, {"a", {"O"}}};
  EXPECT_DOUBLE_EQ(overall_accuracy(gold, pred), 1.0 / 3.0);
  const auto r = evaluate_labels(gold, pred);
  EXPECT_DOUBLE_EQ(r.intent_acc, 2.0 / 3.0);
  EXPECT_EQ(r.counts.true_pos, 1u);
  EXPECT_EQ(r.counts.false_neg, 1u);
  EXPECT_EQ(r.n_utterances, 3u);
}

TEST(OverallAccuracy, NeverExceedsComponentScores) {
  std::mt19937_64 rng(23);
  const std::vector<std::string> tags = {"O", "B-a", "I-a"};
  std::uniform_int_distribution<int> coin(0, 1), t(0, 2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<UtteranceLabels> gold, pred;
    for (int i = 0; i < 5; ++i) {
      UtteranceLabels g{coin(rng) ? "p" : "q", {}}, p{coin(rng) ? "p" : "q", {}};
      for (int j = 0; j < 3; ++j) {
        g.slots.push_back(tags[t(rng)]);
        p.slots.push_back(coin(rng) ? g.slots.back() : tags[t(rng)]);
      }
      gold.push_back(g);
      pred.push_back(p);
    }
    const auto r = evaluate_labels(gold, pred);
    EXPECT_LE(r.overall_acc, r.intent_acc);
  }
}

TEST(IntentAccuracy, ConstantPredictorScoresMajorityShare) {
  std::vector<UtteranceLabels> gold, pred;
  for (int i = 0; i < 10; ++i) {
    gold.push_back({i < 6 ? "flight" : (i < 9 ? "fare" : "meal"), {"O"}});
    pred.push_back({"flight", {"O"}});
  }
  EXPECT_DOUBLE_EQ(evaluate_labels(gold, pred).intent_acc, 0.6);
}

}  // namespace
}  // namespace esie
