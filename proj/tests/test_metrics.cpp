#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "relctr/metrics.hpp"
#include "relctr/rng.hpp"

namespace m = relctr::metrics;

namespace {

TEST(Auc, PerfectSeparation) {
  EXPECT_DOUBLE_EQ(m::auc({0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(m::auc({0.1, 0.2, 0.9, 0.8}, {1, 1, 0, 0}), 0.0);
}

TEST(Auc, TieConvention) {
  EXPECT_DOUBLE_EQ(m::auc({0.3, 0.3}, {1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(m::auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}), 0.5);
}

TEST(Auc, SingleClassUndefined) {
  EXPECT_THROW(m::auc({0.1, 0.2}, {1, 1}), relctr::UndefinedMetricError);
  EXPECT_THROW(m::auc({0.1, 0.2}, {0, 0}), relctr::UndefinedMetricError);
}

TEST(Auc, RejectsNonBinaryLabels) {
  EXPECT_THROW(m::auc({0.1, 0.2}, {1, 2}), relctr::InputError);
}

TEST(Auc, EqualsBruteForceExactly) {
  relctr::RngStream rng(101, "auc-fuzz");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 50 + rng.uniform_index(951);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grid forces plenty of exact ties.
      scores[i] = static_cast<double>(rng.uniform_index(25)) / 24.0;
      labels[i] = rng.bernoulli(0.3) ? 1 : 0;
    }
    const auto want = testutil::brute_auc(scores, labels);
    if (!want) {
      EXPECT_THROW(m::auc(scores, labels), relctr::UndefinedMetricError);
      continue;
    }
    EXPECT_EQ(m::auc(scores, labels), *want) << "trial " << trial;
  }
}

TEST(Gauc, SingleUserEqualsAuc) {
  const std::vector<double> s{0.9, 0.1, 0.5, 0.7};
  const std::vector<int> l{1, 0, 0, 1};
  const std::vector<long long> u{7, 7, 7, 7};
  EXPECT_DOUBLE_EQ(m::gauc(s, l, u), m::auc(s, l));
}

TEST(Gauc, ImpressionWeightedMean) {
  // User 1: AUC 1.0; user 2: AUC 0.5 (tie). Weights 10 and 30.
  const std::vector<double> s{0.9, 0.1, 0.4, 0.4};
  const std::vector<int> l{1, 0, 1, 0};
  const std::vector<long long> u{1, 1, 2, 2};
  const std::map<long long, double> w{{1, 10.0}, {2, 30.0}};
  EXPECT_DOUBLE_EQ(m::gauc(s, l, u, &w), 0.625);
}

TEST(Gauc, SingleClassUsersExcluded) {
  // User 5 has only positives: it must not dilute the average.
  const std::vector<double> s{0.9, 0.1, 0.8, 0.7};
  const std::vector<int> l{1, 0, 1, 1};
  const std::vector<long long> u{1, 1, 5, 5};
  EXPECT_DOUBLE_EQ(m::gauc(s, l, u), 1.0);
}

TEST(Gauc, AllSingleClassUndefined) {
  EXPECT_THROW(m::gauc({0.9, 0.1}, {1, 1}, {1, 2}),
               relctr::UndefinedMetricError);
}

TEST(Gauc, EqualsBruteForceOnSyntheticUsers) {
  relctr::RngStream rng(102, "gauc-fuzz");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<long long> users;
    for (long long u = 0; u < 50; ++u) {
      const std::size_t k = 2 + rng.uniform_index(20);
      for (std::size_t i = 0; i < k; ++i) {
        scores.push_back(static_cast<double>(rng.uniform_index(12)) / 11.0);
        labels.push_back(rng.bernoulli(0.35) ? 1 : 0);
        users.push_back(u);
      }
    }
    const auto want = testutil::brute_gauc(users, scores, labels);
    ASSERT_TRUE(want.has_value());
    EXPECT_EQ(m::gauc(scores, labels, users), *want) << "trial " << trial;
  }
}

TEST(RelaImpr, PaperStyleValues) {
  EXPECT_NEAR(m::relaimpr(0.7674, 0.7532), 5.61, 0.01);
  EXPECT_NEAR(m::relaimpr(0.6795, 0.7532), -29.10, 0.01);
}

TEST(RelaImpr, ZeroAtBaseline) {
  EXPECT_DOUBLE_EQ(m::relaimpr(0.7532, 0.7532), 0.0);
}

TEST(RelaImpr, UndefinedAtRandomBaseline) {
  EXPECT_THROW(m::relaimpr(0.7, 0.5), relctr::UndefinedMetricError);
  EXPECT_THROW(m::relaimpr(0.7, 0.42), relctr::UndefinedMetricError);
}

TEST(Pcoc, IdealWhenPredictionsMatchLabels) {
  EXPECT_DOUBLE_EQ(m::pcoc({1.0, 0.0, 1.0, 0.0}, {1, 0, 1, 0}), 1.0);
}

TEST(Pcoc, RatioArithmetic) {
  const std::vector<double> p(10, 0.2);
  std::vector<int> y(10, 0);
  y[0] = 1;  // empirical ctr 0.1
  EXPECT_DOUBLE_EQ(m::pcoc(p, y), 2.0);
}

TEST(Pcoc, MatchesTwoPassOracle) {
  relctr::RngStream rng(103, "pcoc");
  std::vector<double> p(10000);
  std::vector<int> y(10000);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform(0.01, 0.99);
    y[i] = rng.bernoulli(0.3) ? 1 : 0;
  }
  long double ps = 0.0L, ys = 0.0L;
  for (double v : p) ps += v;
  for (int v : y) ys += v;
  EXPECT_NEAR(m::pcoc(p, y), static_cast<double>(ps / ys), 1e-10);
}

TEST(Pcoc, NoClicksUndefined) {
  EXPECT_THROW(m::pcoc({0.2, 0.3}, {0, 0}), relctr::UndefinedMetricError);
}

TEST(IrrRate, AllCleanAndAllBad) {
  const std::vector<int> clean(10, 4);
  const std::vector<int> bad(10, 1);
  EXPECT_DOUBLE_EQ(m::irrelevant_rate_at_10({clean, clean}), 0.0);
  EXPECT_DOUBLE_EQ(m::irrelevant_rate_at_10({bad, bad}), 1.0);
  EXPECT_DOUBLE_EQ(m::irrelevant_rate_at_10({clean, bad}), 0.5);
}

TEST(IrrRate, OnlyTopTenCounts) {
  std::vector<int> list(20, 4);
  for (std::size_t i = 10; i < 20; ++i) list[i] = 1;  // junk below the fold
  EXPECT_DOUBLE_EQ(m::irrelevant_rate_at_10({list}), 0.0);
}

TEST(IrrRate, ShortListWarnsAndUsesLength) {
  std::ostringstream warn;
  const std::vector<int> short_list{1, 4, 4, 4};  // 1 of 4 irrelevant
  EXPECT_DOUBLE_EQ(m::irrelevant_rate_at_10({short_list}, &warn), 0.25);
  EXPECT_NE(warn.str().find("shorter than 10"), std::string::npos);
}

TEST(IrrRate, MixedSetEqualsBruteForce) {
  relctr::RngStream rng(104, "irr");
  std::vector<std::vector<int>> lists;
  double want = 0.0;
  for (int q = 0; q < 100; ++q) {
    std::vector<int> list(30);
    for (auto& r : list) r = 1 + static_cast<int>(rng.uniform_index(4));
    int bad = 0;
    for (int i = 0; i < 10; ++i)
      if (list[i] == 1) ++bad;
    want += bad / 10.0;
    lists.push_back(std::move(list));
  }
  want /= 100.0;
  EXPECT_NEAR(m::irrelevant_rate_at_10(lists), want, 1e-12);
}

}  // namespace
