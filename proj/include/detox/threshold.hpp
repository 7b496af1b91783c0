#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "detox/metrics.hpp"
#include "json.hpp"

namespace detox {

struct ThresholdPair {
  double t0 = 0.5;  // threshold for a = 0
  double t1 = 0.5;  // threshold for a = 1
  double objective = 0.0;
  double criterion_value = 0.0;
  bool constraint_satisfied = false;
  double epsilon = 0.0;

  nlohmann::json to_json() const;
  static ThresholdPair from_json(const nlohmann::json& j);
};

struct ThresholdSearchOptions {
  EoAggregation eo_aggregation = EoAggregation::kMax;
  // Above this many samples each group's grid is cut to `quantiles` points.
  std::size_t subsample_above = 100000;
  std::size_t quantiles = 512;
};

// Metric values closer than this are treated as tied.
inline constexpr double kMetricTolerance = 1e-12;

// 0, 1 and every midpoint between consecutive distinct scores, ascending.
std::vector<double> candidate_thresholds(std::span<const double> scores);

// Maximises `perf` subject to `criterion <= epsilon` over the product of
// the two groups' candidate grids. When nothing is feasible, returns the
// pair with the smallest criterion instead (constraint_satisfied = false).
// Ties break towards lower criterion / higher perf, then smaller |t0 - t1|,
// then smaller t0.
ThresholdPair optimize_thresholds(std::span<const double> scores, std::span<const int> y,
                                  std::span<const int> a, Metric criterion, double epsilon,
                                  Metric perf, const ThresholdSearchOptions& options = {});

// 1 iff score > threshold of the sample's group.
std::vector<int> apply_thresholds(std::span<const double> scores, std::span<const int> a,
                                  const ThresholdPair& t);

}  // namespace detox
