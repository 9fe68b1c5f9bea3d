#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "esie/numerics.hpp"
#include "test_util.hpp"

namespace esie {
namespace {

using testing::random_matrix;

/// Max relative error of every coordinate of `params` for a scalar function.
double check_all(const std::function<Tensor()>& f, const ParamList& params) {
  return grad_check(f, params).max_rel_err();
}

TEST(Matmul, IdentityAndHandComputed) {
  const auto id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const auto col = Tensor::matrix(2, 1, {3, 4});
  const auto r = matmul(id, col);
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_EQ(r.at(0, 0), 3.0);
  EXPECT_EQ(r.at(1, 0), 4.0);
  EXPECT_EQ(matmul(Tensor::matrix(1, 2, {1, 2}), col).item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const auto a = Tensor::zeros({2, 3});
  const auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto a = random_matrix(4, 3, rng);
  const auto b = random_matrix(3, 5, rng);
  EXPECT_LE(check_all([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}}), 1e-6);
}

TEST(Softmax, SymmetryAndSingleton) {
  const auto s = softmax(Tensor::matrix(1, 2, {0, 0}));
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.data()[1], 0.5);
  EXPECT_EQ(softmax(Tensor::matrix(1, 1, {-37.5})).item(), 1.0);
}

TEST(Softmax, MatchesExtendedPrecisionFormula) {
  const auto s = softmax(Tensor::matrix(1, 3, {1, 2, 3}));
  const auto expect = oracle::softmax({1, 2, 3});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s.data()[i], expect[i], 1e-12);
}

TEST(Softmax, SumsToOneForArbitraryFiniteInput) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-300.0, 300.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 17;
    std::vector<double> x(n);
    for (auto& v : x) v = u(rng);
    const auto s = softmax(Tensor::matrix(1, n, x));
    double total = 0.0;
    for (double v : s.data()) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, MaskedPositionsGetZeroAndAllMaskedIsDegenerate) {
  const auto x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const auto s = softmax(x, -1, Mask{1, 0, 1});
  EXPECT_EQ(s.at(0, 1), 0.0);
  EXPECT_NEAR(s.at(1, 0) + s.at(1, 2), 1.0, 1e-12);
  EXPECT_THROW(softmax(x, -1, Mask{0, 0, 0}), NumericError);
}

TEST(Softmax, ColumnAxisAndGradient) {
  std::mt19937_64 rng(3);
  const auto x = random_matrix(3, 4, rng);
  const auto s = softmax(x, 0);
  for (std::size_t j = 0; j < 4; ++j) {
    double total = 0.0;
    for (std::size_t i = 0; i < 3; ++i) total += s.at(i, j);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  const auto w = random_matrix(3, 4, rng, -2, 2, false);
  EXPECT_LE(check_all([&] { return sum(mul(softmax(x, 0), w)); }, {{"x", x}}), 1e-6);
  EXPECT_LE(check_all([&] { return sum(mul(softmax(x, -1, Mask{1, 1, 0, 1}), w)); }, {{"x", x}}), 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLn2) {
  const int t[] = {0};
  EXPECT_NEAR(cross_entropy(Tensor::matrix(1, 2, {0, 0}), t).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, IgnoreIndexAndRangeError) {
  const auto logits = Tensor::matrix(2, 2, {0, 0, 5, -5});
  const int only_first[] = {0, kIgnoreIndex};
  EXPECT_NEAR(cross_entropy(logits, only_first).item(), std::log(2.0), 1e-15);
  const int none[] = {kIgnoreIndex, kIgnoreIndex};
  EXPECT_EQ(cross_entropy(logits, none).item(), 0.0);
  const int bad[] = {0, 2};
  EXPECT_THROW(cross_entropy(logits, bad), DataError);
}

TEST(CrossEntropy, Gradient) {
  std::mt19937_64 rng(8);
  const auto x = random_matrix(4, 5, rng);
  const int t[] = {1, kIgnoreIndex, 4, 0};
  EXPECT_LE(check_all([&] { return cross_entropy(x, t); }, {{"x", x}}), 1e-6);
}

TEST(Dropout, IdentityWhenPZeroOrEval) {
  std::mt19937_64 rng(1);
  const auto x = random_matrix(3, 3, rng);
  const auto y0 = dropout(x, 0.0, true, &rng);
  const auto y1 = dropout(x, 0.5, false, nullptr);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(y0.data()[i], x.data()[i]);
    EXPECT_EQ(y1.data()[i], x.data()[i]);
  }
  EXPECT_THROW(dropout(x, 1.0, true, &rng), ConfigError);
}

TEST(Dropout, ScalesKeptUnits) {
  std::mt19937_64 rng(1);
  const auto x = Tensor::from({1000}, std::vector<double>(1000, 1.0));
  const auto y = dropout(x, 0.25, true, &rng);
  for (double v : y.data()) EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
}

TEST(LayerNorm, GradientOnRandomVector) {
  std::mt19937_64 rng(21);
  const auto x = random_matrix(1, 8, rng);
  const auto g = random_matrix(1, 8, rng);
  const auto b = random_matrix(1, 8, rng);
  const auto w = random_matrix(1, 8, rng, -2, 2, false);
  const auto gain = Tensor::from({8}, std::vector<double>(g.data().begin(), g.data().end()), true);
  const auto bias = Tensor::from({8}, std::vector<double>(b.data().begin(), b.data().end()), true);
  const auto f2 = [&] { return sum(mul(layernorm(x, gain, bias, 1e-12), w)); };
  EXPECT_LE(check_all(f2, {{"x", x}, {"gain", gain}, {"bias", bias}}), 1e-6);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  std::mt19937_64 rng(2);
  const auto x = random_matrix(3, 16, rng);
  const auto y = layernorm(x, Tensor::from({16}, std::vector<double>(16, 1.0)), Tensor::zeros({16}));
  for (std::size_t i = 0; i < 3; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(i, j);
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-9);
  }
}

// Every differentiable op against central differences on inputs in [-2, 2].
TEST(Autodiff, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(99);
  const auto a = random_matrix(3, 4, rng);
  const auto b = random_matrix(3, 4, rng);
  const auto w = random_matrix(5, 4, rng);
  const auto bias = Tensor::from({5}, {0.1, -0.2, 0.3, 0.0, 0.5}, true);
  const auto row_bias = Tensor::from({4}, {0.3, -0.1, 0.2, 0.7}, true);
  const auto table = random_matrix(6, 4, rng);
  const auto weights = random_matrix(3, 4, rng, -2, 2, false);
  const int ids[] = {2, 0, 2};

  struct Case {
    const char* name;
    std::function<Tensor()> f;
    ParamList params;
  };
  const std::vector<Case> cases = {
      {"add", [&] { return sum(mul(add(a, b), weights)); }, {{"a", a}, {"b", b}}},
      {"add_row", [&] { return sum(mul(add_row(a, row_bias), weights)); }, {{"a", a}, {"r", row_bias}}},
      {"mul", [&] { return sum(mul(a, b)); }, {{"a", a}, {"b", b}}},
      {"scale", [&] { return sum(mul(scale(a, -1.7), weights)); }, {{"a", a}}},
      {"tanh", [&] { return sum(mul(tanh(a), weights)); }, {{"a", a}}},
      {"gelu", [&] { return sum(mul(gelu(a), weights)); }, {{"a", a}}},
      {"linear", [&] { return sum(tanh(linear(a, w, bias))); }, {{"a", a}, {"w", w}, {"bias", bias}}},
      {"transpose", [&] { return sum(matmul(transpose(a), b)); }, {{"a", a}, {"b", b}}},
      {"embedding", [&] { return sum(mul(embedding_lookup(table, ids), weights)); }, {{"table", table}}},
      {"rows", [&] { return sum(tanh(rows(a, 1, 3))); }, {{"a", a}}},
      {"cols", [&] { return sum(tanh(cols(a, 1, 3))); }, {{"a", a}}},
      {"concat_rows", [&] { return sum(tanh(concat_rows({a, b}))); }, {{"a", a}, {"b", b}}},
      {"concat_cols", [&] { return sum(tanh(concat_cols({a, b}))); }, {{"a", a}, {"b", b}}},
  };
  for (const auto& c : cases) EXPECT_LE(check_all(c.f, c.params), 1e-6) << c.name;
}

TEST(GradCheck, QuadraticAndConstant) {
  const auto theta = Tensor::from({1}, {3.0}, true);
  const auto report = grad_check([&] { return sum(mul(theta, theta)); }, {{"theta", theta}});
  EXPECT_NEAR(report.entries[0].analytic_at_worst, 6.0, 1e-12);
  EXPECT_NEAR(report.entries[0].numeric_at_worst, 6.0, 1e-8);

  const auto p = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  const auto zero = Tensor::from({3}, {0.0, 0.0, 0.0});
  const auto flat = grad_check([&] { return sum(mul(p, zero)); }, {{"p", p}});
  EXPECT_NEAR(flat.entries[0].analytic_at_worst, 0.0, 1e-10);
  EXPECT_NEAR(flat.entries[0].numeric_at_worst, 0.0, 1e-10);
}

TEST(GradCheck, NonFiniteLossNamesParameter) {
  const auto p = Tensor::from({1}, {1.0}, true);
  const auto f = [&] {
    // log-like blow-up once the parameter leaves its base point.
    const double v = p.data()[0];
    return v == 1.0 ? sum(p) : Tensor::scalar(std::numeric_limits<double>::infinity());
  };
  try {
    grad_check(f, {{"blowup", p}});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("blowup"), std::string::npos);
  }
}

TEST(Tape, ReplaysInExactReverseOrder) {
  Tape tape;
  std::vector<int> visited;
  for (int i = 0; i < 5; ++i) tape.record([&visited, i] { visited.push_back(i); });
  const auto loss = Tensor::scalar(1.0, true);
  tape.backward(loss);
  EXPECT_EQ(visited, (std::vector<int>{4, 3, 2, 1, 0}));
  tape.clear();
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, NothingRecordedWithoutTapeOrGradients) {
  std::mt19937_64 rng(4);
  const auto a = random_matrix(2, 2, rng);
  Tape tape;
  {
    TapeScope scope(tape);
    matmul(a.detach(), a.detach());
    EXPECT_EQ(tape.size(), 0u);
    matmul(a, a);
    EXPECT_EQ(tape.size(), 1u);
    NoGradScope off;
    matmul(a, a);
    EXPECT_EQ(tape.size(), 1u);
  }
  EXPECT_EQ(active_tape(), nullptr);
}

TEST(Tape, ReachableParametersGetGradients) {
  std::mt19937_64 rng(6);
  const auto a = random_matrix(2, 3, rng);
  const auto b = random_matrix(3, 2, rng);
  const auto unused = random_matrix(2, 2, rng);
  Tape tape;
  TapeScope scope(tape);
  const auto loss = sum(matmul(a, b));
  tape.backward(loss);
  EXPECT_TRUE(a.has_grad());
  EXPECT_TRUE(b.has_grad());
  EXPECT_FALSE(unused.has_grad());
  EXPECT_EQ(a.grad().size(), a.size());
}

TEST(Determinism, IdenticalSeedsGiveBitwiseIdenticalOutputs) {
  auto run = [] {
    std::mt19937_64 rng(1234);
    const auto x = Tensor::randn({4, 8}, 1.0, rng);
    const auto w = Tensor::randn({8, 8}, 1.0, rng);
    return dropout(gelu(linear(x, w)), 0.3, true, &rng);
  };
  const auto y1 = run(), y2 = run();
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_EQ(y1.data()[i], y2.data()[i]);
}

}  // namespace
}  // namespace esie
