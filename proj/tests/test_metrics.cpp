#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <numeric>
#include <random>

#include "metrics_oracle.hpp"
#include "mlzsl/metrics.hpp"

namespace metrics = mlzsl::metrics;
using mlzsl::Tensor;
using mlzsl::testing::brute_mean_ap;
using mlzsl::testing::brute_topk;
using mlzsl::testing::random_table;

TEST(AveragePrecision, SinglePositiveRankedFirst) {
  EXPECT_EQ(metrics::average_precision(std::vector<double>{0.9, 0.3, 0.1}, std::vector<int>{1, 0, 0}), 1.0);
}

TEST(AveragePrecision, HandWorkedExample) {
  const auto ap = metrics::average_precision(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 0, 1});
  ASSERT_TRUE(ap);
  EXPECT_NEAR(*ap, 5.0 / 6.0, 1e-15);
}

TEST(AveragePrecision, TiesBreakByLowerIndex) {
  EXPECT_EQ(metrics::average_precision(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(metrics::average_precision(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
}

TEST(AveragePrecision, NoPositivesIsSkipped) {
  EXPECT_FALSE(metrics::average_precision(std::vector<double>{0.5, 0.2}, std::vector<int>{0, 0}).has_value());
}

TEST(AveragePrecision, InvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(9);
    std::vector<int> y(9);
    for (std::size_t i = 0; i < 9; ++i) s[i] = u(rng), y[i] = rng() % 2;
    y[0] = 1;
    const double base = *metrics::average_precision(s, y);
    std::vector<double> e(9), a(9);
    for (std::size_t i = 0; i < 9; ++i) e[i] = std::exp(s[i]), a[i] = 3.0 * s[i] - 7.0;
    EXPECT_EQ(*metrics::average_precision(e, y), base);
    EXPECT_EQ(*metrics::average_precision(a, y), base);
  }
}

TEST(MeanAp, SingletonAndArithmeticMean) {
  metrics::EvalTable one{Tensor::matrix({{0.9}, {0.8}, {0.1}}), {{0}, {}, {0}}};
  EXPECT_NEAR(metrics::mean_ap(one), 5.0 / 6.0, 1e-15);
  // label 0: AP 1.0; label 1: positive ranked second -> 0.5; label 2: no positive, skipped
  metrics::EvalTable two{Tensor::matrix({{0.9, 0.8, 0.1}, {0.1, 0.2, 0.3}}), {{0}, {1}}};
  EXPECT_DOUBLE_EQ(metrics::mean_ap(two), 0.75);
}

TEST(MeanAp, NoEvaluableLabelIsAnError) {
  metrics::EvalTable t{Tensor::matrix({{0.9, 0.8}}), {{}}};
  EXPECT_THROW(metrics::mean_ap(t), mlzsl::ConfigError);
}

TEST(MeanAp, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = random_table(1 + rng() % 10, 1 + rng() % 8, rng);
    EXPECT_NEAR(metrics::mean_ap(t), brute_mean_ap(t), 1e-12);
  }
  const auto t64 = random_table(6, 4, rng);
  EXPECT_NEAR(metrics::mean_ap(t64), brute_mean_ap(t64), 1e-12);
}

TEST(TopK, PerfectScores) {
  metrics::EvalTable t{Tensor::matrix({{0.9, 0.8, 0.1, 0.0}, {0.1, 0.2, 0.7, 0.9}}), {{0, 1}, {2, 3}}};
  const auto prf = metrics::topk_prf(t, 2);
  EXPECT_EQ(prf.precision, 1.0);
  EXPECT_EQ(prf.recall, 1.0);
  EXPECT_EQ(prf.f1, 1.0);
}

TEST(TopK, ClosedFormSingleImage) {
  metrics::EvalTable t{Tensor::matrix({{0.9, 0.5, 0.4, 0.1, 0.0}}), {{0}}};
  const auto prf = metrics::topk_prf(t, 3);
  EXPECT_DOUBLE_EQ(prf.precision, 1.0 / 3.0);
  EXPECT_EQ(prf.recall, 1.0);
  EXPECT_DOUBLE_EQ(prf.f1, 0.5);
}

TEST(TopK, RejectsKOutOfRange) {
  metrics::EvalTable t{Tensor::matrix({{0.9, 0.5}}), {{0}}};
  EXPECT_THROW(metrics::topk_prf(t, 3), mlzsl::ConfigError);
  EXPECT_THROW(metrics::topk_prf(t, 0), mlzsl::ConfigError);
}

TEST(TopK, MatchesBruteForceOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t K = 1 + rng() % 8;
    const auto t = random_table(1 + rng() % 10, K, rng);
    const std::size_t k = 1 + rng() % K;
    const auto got = metrics::topk_prf(t, k);
    const auto want = brute_topk(t, k);
    EXPECT_NEAR(got.precision, want.precision, 1e-12);
    EXPECT_NEAR(got.recall, want.recall, 1e-12);
    EXPECT_NEAR(got.f1, want.f1, 1e-12);
  }
}

TEST(TopK, PropertiesOnRandomTables) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t K = 2 + rng() % 7;
    const auto t = random_table(2 + rng() % 9, K, rng);
    const auto prf = metrics::topk_prf(t, 1 + rng() % K);
    EXPECT_GE(prf.f1, 0.0);
    EXPECT_LE(prf.f1, 1.0);
    EXPECT_EQ(prf.f1 == 0.0, prf.precision == 0.0);
    if (prf.f1 > 0) {
      EXPECT_NEAR(prf.f1, 2 * prf.precision * prf.recall / (prf.precision + prf.recall), 1e-15);
    }
    EXPECT_EQ(metrics::topk_prf(t, K).recall, 1.0);
    // image order does not matter
    metrics::EvalTable reordered{Tensor(t.scores.shape()), {}};
    std::vector<std::size_t> order(t.images());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i) {
      std::copy(t.scores.row(order[i]).begin(), t.scores.row(order[i]).end(), reordered.scores.row(i).begin());
      reordered.truths.push_back(t.truths[order[i]]);
    }
    const auto a = metrics::topk_prf(t, 1), b = metrics::topk_prf(reordered, 1);
    EXPECT_EQ(a.precision, b.precision);
    EXPECT_EQ(a.recall, b.recall);
  }
}

TEST(TopK, PublishedTripleSatisfiesHarmonicMean) {
  // GZSL K=3 triple reported with P = 23.6 and R = 10.4; F1 is printed as 14.4.
  EXPECT_NEAR(metrics::f1_score(23.6, 10.4), 14.4, 0.05);
}

TEST(MakeTable, ReindexesIntoUniverse) {
  const mlzsl::data::Split split{{{0.0}, {5, 7}}, {{0.0}, {6}}};
  const std::vector<mlzsl::data::ClassId> universe{5, 6, 7};
  const auto t = metrics::make_table(Tensor(2, 3, 0.5), split, universe);
  EXPECT_EQ(t.truths[0], (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(t.truths[1], (std::vector<std::size_t>{1}));
  const mlzsl::data::Split outside{{{0.0}, {2}}};
  EXPECT_THROW(metrics::make_table(Tensor(1, 3, 0.5), outside, universe), mlzsl::ShapeError);
}

TEST(ShuffledScores, PreservesTruthsAndScoreMultiset) {
  std::mt19937_64 rng(5);
  const auto t = random_table(8, 5, rng);
  const auto s = metrics::shuffled_scores(t, 3);
  EXPECT_EQ(s.truths, t.truths);
  auto a = std::vector<double>(t.scores.data().begin(), t.scores.data().end());
  auto b = std::vector<double>(s.scores.data().begin(), s.scores.data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}
