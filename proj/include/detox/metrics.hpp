#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace detox {

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const noexcept { return tp + fp + tn + fn; }
  std::int64_t positives() const noexcept { return tp + fn; }
  std::int64_t negatives() const noexcept { return tn + fp; }
  std::int64_t predicted_positive() const noexcept { return tp + fp; }

  Confusion& operator+=(const Confusion& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

// Confusion counts per protected group a in {0, 1}.
struct GroupConfusion {
  std::array<Confusion, 2> group;

  Confusion pooled() const noexcept {
    Confusion c = group[0];
    c += group[1];
    return c;
  }
  friend bool operator==(const GroupConfusion&, const GroupConfusion&) = default;
};

// A rate whose denominator was zero and was therefore reported as 0.
struct DegenerateFlag {
  static constexpr int kPooled = -1;
  int group = kPooled;
  std::string rate;

  friend auto operator<=>(const DegenerateFlag&, const DegenerateFlag&) = default;
};

using FlagSet = std::set<DegenerateFlag>;

enum class Metric {
  kF1,
  kGMean,
  kBalancedAccuracy,
  kDemographicParityDiff,
  kEqualizedOddsDiff,
  kAccuracyParityDiff,
};

std::string_view metric_name(Metric metric);
// Throws UnknownMetric.
Metric parse_metric(std::string_view name);
bool is_fairness_metric(Metric metric);

enum class EoAggregation { kMax, kMean };

EoAggregation parse_eo_aggregation(std::string_view name);
std::string_view eo_aggregation_name(EoAggregation agg);

// Throws EmptyGroup when either group has no samples.
GroupConfusion confusion_by_group(std::span<const int> y, std::span<const int> yhat,
                                  std::span<const int> a);

double demographic_parity_diff(const GroupConfusion& c, FlagSet* flags = nullptr);
double equalized_odds_diff(const GroupConfusion& c, EoAggregation agg = EoAggregation::kMax,
                           FlagSet* flags = nullptr);
double accuracy_parity_diff(const GroupConfusion& c, FlagSet* flags = nullptr);

struct PerformanceMetrics {
  double f1 = 0.0;
  double gmean = 0.0;
  double balanced_accuracy = 0.0;
};

// Computed on pooled (group-summed) counts.
PerformanceMetrics performance_metrics(const GroupConfusion& c, FlagSet* flags = nullptr);

double metric_value(Metric metric, const GroupConfusion& c,
                    EoAggregation agg = EoAggregation::kMax, FlagSet* flags = nullptr);

struct FairnessReport {
  std::map<std::string, double> values;
  FlagSet degenerate_flags;

  double at(Metric metric) const;
  nlohmann::json to_json() const;
  static FairnessReport from_json(const nlohmann::json& j);
  friend bool operator==(const FairnessReport&, const FairnessReport&) = default;
};

FairnessReport full_report(std::span<const int> y, std::span<const int> yhat,
                           std::span<const int> a, EoAggregation agg = EoAggregation::kMax);
FairnessReport report_from_confusion(const GroupConfusion& c,
                                     EoAggregation agg = EoAggregation::kMax);

// Decision rule shared by every evaluation: positive iff score > threshold.
std::vector<int> binarize(std::span<const double> scores, double threshold = 0.5);

}  // namespace detox
