#include <gtest/gtest.h>

#include "detox/error.hpp"
#include "detox/metrics.hpp"
#include "detox/util.hpp"
#include "support.hpp"

namespace detox {
namespace {

GroupConfusion counts(Confusion g0, Confusion g1) { return GroupConfusion{{g0, g1}}; }

// (tp, fp, tn, fn)
Confusion cf(std::int64_t tp, std::int64_t fp, std::int64_t tn, std::int64_t fn) {
  return Confusion{tp, fp, tn, fn};
}

TEST(ConfusionByGroup, DirectCount) {
  const std::vector<int> y = {1, 0}, yhat = {1, 0}, a = {0, 1};
  const auto c = confusion_by_group(y, yhat, a);
  EXPECT_EQ(c.group[0], cf(1, 0, 0, 0));
  EXPECT_EQ(c.group[1], cf(0, 0, 1, 0));
}

TEST(ConfusionByGroup, SingleGroupIsEmptyGroup) {
  const std::vector<int> y = {1, 0}, yhat = {1, 1}, a = {0, 0};
  try {
    confusion_by_group(y, yhat, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyGroup);
  }
}

TEST(ConfusionByGroup, RejectsNonBinaryAndLengthMismatch) {
  const std::vector<int> y = {2, 0}, yhat = {1, 0}, a = {0, 1};
  EXPECT_THROW(confusion_by_group(y, yhat, a), Error);
  const std::vector<int> short_a = {0};
  EXPECT_THROW(confusion_by_group(yhat, yhat, short_a), Error);
}

TEST(ConfusionByGroup, MatchesIndependentCounter) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.index(60);
    std::vector<int> y(n), yhat(n), a(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.index(2));
      yhat[i] = static_cast<int>(rng.index(2));
      a[i] = i < 2 ? static_cast<int>(i) : static_cast<int>(rng.index(2));
    }
    std::int64_t expected[2][4] = {};
    for (std::size_t i = 0; i < n; ++i) expected[a[i]][2 * (1 - y[i]) + (1 - yhat[i])] += 1;
    const auto c = confusion_by_group(y, yhat, a);
    for (int g = 0; g < 2; ++g) {
      EXPECT_EQ(c.group[g].tp, expected[g][0]);
      EXPECT_EQ(c.group[g].fn, expected[g][1]);
      EXPECT_EQ(c.group[g].fp, expected[g][2]);
      EXPECT_EQ(c.group[g].tn, expected[g][3]);
    }
  }
}

TEST(DemographicParity, PositiveRateGap) {
  // 6/10 vs 4/10 predicted positive.
  EXPECT_NEAR(demographic_parity_diff(counts(cf(3, 3, 2, 2), cf(2, 2, 3, 3))), 0.2, 1e-15);
  EXPECT_EQ(demographic_parity_diff(counts(cf(1, 2, 3, 4), cf(1, 2, 3, 4))), 0.0);
  EXPECT_EQ(demographic_parity_diff(counts(cf(3, 1, 4, 2), cf(2, 2, 5, 1))), 0.0);
}

TEST(EqualizedOdds, MaxOfGaps) {
  // TPR 8/10 vs 6/10, FPR 1/10 vs 1/10.
  const auto c = counts(cf(8, 1, 9, 2), cf(6, 1, 9, 4));
  EXPECT_NEAR(equalized_odds_diff(c), 0.2, 1e-15);
  EXPECT_NEAR(equalized_odds_diff(c, EoAggregation::kMean), 0.1, 1e-15);
  EXPECT_EQ(equalized_odds_diff(counts(cf(1, 2, 3, 4), cf(1, 2, 3, 4))), 0.0);
}

TEST(EqualizedOdds, MissingPositivesAreFlagged) {
  // Group 1 has no actual positives: TPR_1 := 0.
  const auto c = counts(cf(3, 1, 3, 1), cf(0, 2, 2, 0));
  FlagSet flags;
  const double v = equalized_odds_diff(c, EoAggregation::kMax, &flags);
  EXPECT_NEAR(v, std::max(0.75, std::abs(0.25 - 0.5)), 1e-15);
  EXPECT_EQ(flags.count(DegenerateFlag{1, "tpr"}), 1u);
  EXPECT_EQ(flags.size(), 1u);
}

TEST(AccuracyParity, AccuracyGap) {
  EXPECT_NEAR(accuracy_parity_diff(counts(cf(2, 1, 6, 1), cf(1, 2, 5, 2))), 0.2, 1e-15);
  EXPECT_EQ(accuracy_parity_diff(counts(cf(1, 1, 1, 1), cf(2, 2, 2, 2))), 0.0);
}

TEST(Performance, Formulas) {
  const auto p = performance_metrics(counts(cf(2, 1, 6, 1), cf(0, 0, 0, 0)));
  EXPECT_NEAR(p.f1, 2.0 / 3.0, 1e-15);
  // TPR 9/10, TNR 4/10.
  const auto q = performance_metrics(counts(cf(9, 6, 4, 1), Confusion{}));
  EXPECT_NEAR(q.gmean, 0.6, 1e-15);
  EXPECT_NEAR(q.balanced_accuracy, 0.65, 1e-15);
}

TEST(Performance, AllNegativeWithoutPositivesIsFlagged) {
  FlagSet flags;
  const auto p = performance_metrics(counts(cf(0, 0, 5, 0), cf(0, 0, 3, 0)), &flags);
  EXPECT_EQ(p.f1, 0.0);
  EXPECT_EQ(flags.count(DegenerateFlag{DegenerateFlag::kPooled, "f1"}), 1u);
}

TEST(FullReport, PerfectBalancedPredictions) {
  const std::vector<int> y = {1, 0, 1, 0}, a = {0, 0, 1, 1};
  const auto r = full_report(y, y, a);
  EXPECT_EQ(r.at(Metric::kF1), 1.0);
  EXPECT_EQ(r.at(Metric::kGMean), 1.0);
  EXPECT_EQ(r.at(Metric::kBalancedAccuracy), 1.0);
  EXPECT_EQ(r.at(Metric::kDemographicParityDiff), 0.0);
  EXPECT_EQ(r.at(Metric::kEqualizedOddsDiff), 0.0);
  EXPECT_EQ(r.at(Metric::kAccuracyParityDiff), 0.0);
  EXPECT_TRUE(r.degenerate_flags.empty());
}

struct Instance {
  std::vector<int> y, yhat, a;
};

Instance random_instance(Rng& rng, std::size_t n) {
  Instance s{std::vector<int>(n), std::vector<int>(n), std::vector<int>(n)};
  const double py = rng.uniform(), ph = rng.uniform();
  for (std::size_t i = 0; i < n; ++i) {
    s.y[i] = rng.uniform() < py;
    s.yhat[i] = rng.uniform() < ph;
    s.a[i] = i < 2 ? static_cast<int>(i) : static_cast<int>(rng.index(2));
  }
  return s;
}

TEST(FullReport, MatchesRationalOracle) {
  Rng rng(2);
  for (int t = 0; t < 500; ++t) {
    const auto s = random_instance(rng, 2 + rng.index(150));
    const auto o = testing::oracle_metrics(s.y, s.yhat, s.a);
    for (EoAggregation agg : {EoAggregation::kMax, EoAggregation::kMean}) {
      const auto r = full_report(s.y, s.yhat, s.a, agg);
      for (Metric m : {Metric::kF1, Metric::kGMean, Metric::kBalancedAccuracy,
                       Metric::kDemographicParityDiff, Metric::kEqualizedOddsDiff,
                       Metric::kAccuracyParityDiff}) {
        EXPECT_NEAR(r.at(m), testing::oracle_value(m, o, agg), 1e-12) << metric_name(m);
      }
    }
  }
}

TEST(FullReport, ExhaustiveSmallInputsMatchOracle) {
  for (std::size_t n = 2; n <= 5; ++n) {
    for (std::uint64_t bits = 0; bits < (std::uint64_t{1} << (3 * n)); ++bits) {
      Instance s{std::vector<int>(n), std::vector<int>(n), std::vector<int>(n)};
      for (std::size_t i = 0; i < n; ++i) {
        s.y[i] = (bits >> (3 * i)) & 1;
        s.yhat[i] = (bits >> (3 * i + 1)) & 1;
        s.a[i] = (bits >> (3 * i + 2)) & 1;
      }
      const auto zeros = std::count(s.a.begin(), s.a.end(), 0);
      if (zeros == 0 || zeros == static_cast<long>(n)) continue;
      const auto o = testing::oracle_metrics(s.y, s.yhat, s.a);
      const auto r = full_report(s.y, s.yhat, s.a);
      ASSERT_NEAR(r.at(Metric::kF1), o.f1, 1e-12);
      ASSERT_NEAR(r.at(Metric::kGMean), o.gmean, 1e-12);
      ASSERT_NEAR(r.at(Metric::kBalancedAccuracy), o.balanced_accuracy, 1e-12);
      ASSERT_NEAR(r.at(Metric::kDemographicParityDiff), o.dp, 1e-12);
      ASSERT_NEAR(r.at(Metric::kEqualizedOddsDiff), o.eo_max, 1e-12);
      ASSERT_NEAR(r.at(Metric::kAccuracyParityDiff), o.ap, 1e-12);
    }
  }
}

TEST(FairnessProperties, GroupRelabelSymmetryAndBounds) {
  Rng rng(3);
  for (int t = 0; t < 300; ++t) {
    auto s = random_instance(rng, 2 + rng.index(80));
    const auto r = full_report(s.y, s.yhat, s.a);
    for (int& g : s.a) g = 1 - g;
    const auto swapped = full_report(s.y, s.yhat, s.a);
    EXPECT_EQ(r.values, swapped.values);
    for (const auto& [name, v] : r.values) {
      EXPECT_GE(v, 0.0) << name;
      EXPECT_LE(v, 1.0) << name;
    }
  }
}

TEST(FairnessProperties, PredictionFlipPreservesDemographicParity) {
  Rng rng(4);
  for (int t = 0; t < 300; ++t) {
    auto s = random_instance(rng, 2 + rng.index(80));
    const auto before = demographic_parity_diff(confusion_by_group(s.y, s.yhat, s.a));
    for (int& p : s.yhat) p = 1 - p;
    const auto after = demographic_parity_diff(confusion_by_group(s.y, s.yhat, s.a));
    EXPECT_NEAR(before, after, 1e-15);
  }
}

TEST(FairnessReport, JsonRoundTrip) {
  // No actual positives: TPR and F1 are flagged.
  const std::vector<int> y = {0, 0, 0, 0}, yhat = {0, 1, 0, 0}, a = {0, 1, 0, 1};
  const auto r = full_report(y, yhat, a);
  EXPECT_FALSE(r.degenerate_flags.empty());
  const auto j = r.to_json();
  EXPECT_TRUE(j.contains("degenerate_flags"));
  EXPECT_TRUE(j.contains("equalized_odds_diff"));
  EXPECT_EQ(FairnessReport::from_json(nlohmann::json::parse(j.dump())), r);
}

TEST(MetricNames, ParseAndReject) {
  EXPECT_EQ(parse_metric("f1"), Metric::kF1);
  EXPECT_EQ(parse_metric("equalized_odds_diff"), Metric::kEqualizedOddsDiff);
  try {
    parse_metric("accuracy");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownMetric);
  }
  EXPECT_TRUE(is_fairness_metric(Metric::kAccuracyParityDiff));
  EXPECT_FALSE(is_fairness_metric(Metric::kGMean));
}

TEST(Binarize, StrictThreshold) {
  const std::vector<double> s = {0.5, 0.50001, 0.2};
  EXPECT_EQ(binarize(s), (std::vector<int>{0, 1, 0}));
}

}  // namespace
}  // namespace detox
