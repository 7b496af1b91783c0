#include "detox/threshold.hpp"

#include <algorithm>
#include <cmath>

#include "detox/error.hpp"

namespace detox {
namespace {

struct Candidate {
  double t0 = 0.0;
  double t1 = 0.0;
  double perf = 0.0;
  double crit = 0.0;
};

// Strictly better under the feasible-case order.
bool better_feasible(const Candidate& c, const Candidate& best) {
  if (c.perf > best.perf + kMetricTolerance) return true;
  if (c.perf < best.perf - kMetricTolerance) return false;
  if (c.crit < best.crit - kMetricTolerance) return true;
  if (c.crit > best.crit + kMetricTolerance) return false;
  const double gap = std::abs(c.t0 - c.t1), best_gap = std::abs(best.t0 - best.t1);
  if (gap != best_gap) return gap < best_gap;
  return c.t0 < best.t0;
}

bool better_fallback(const Candidate& c, const Candidate& best) {
  if (c.crit < best.crit - kMetricTolerance) return true;
  if (c.crit > best.crit + kMetricTolerance) return false;
  if (c.perf > best.perf + kMetricTolerance) return true;
  if (c.perf < best.perf - kMetricTolerance) return false;
  const double gap = std::abs(c.t0 - c.t1), best_gap = std::abs(best.t0 - best.t1);
  if (gap != best_gap) return gap < best_gap;
  return c.t0 < best.t0;
}

// Confusion counts of one group at each candidate threshold.
std::vector<Confusion> sweep_group(std::vector<std::pair<double, int>> scored,
                                   const std::vector<double>& thresholds) {
  std::sort(scored.begin(), scored.end());
  std::int64_t pos = 0, neg = 0;
  for (const auto& [s, y] : scored) (y == 1 ? pos : neg) += 1;
  std::vector<Confusion> out;
  out.reserve(thresholds.size());
  std::size_t below = 0;  // samples with score <= threshold
  std::int64_t pos_below = 0, neg_below = 0;
  for (double t : thresholds) {
    while (below < scored.size() && scored[below].first <= t) {
      (scored[below].second == 1 ? pos_below : neg_below) += 1;
      ++below;
    }
    out.push_back(Confusion{pos - pos_below, neg - neg_below, neg_below, pos_below});
  }
  return out;
}

std::vector<double> subsample(const std::vector<double>& grid, std::size_t quantiles) {
  if (grid.size() <= quantiles + 2) return grid;
  std::vector<double> out{grid.front()};
  for (std::size_t q = 1; q <= quantiles; ++q) {
    const std::size_t idx = q * (grid.size() - 1) / (quantiles + 1);
    out.push_back(grid[idx]);
  }
  out.push_back(grid.back());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

nlohmann::json ThresholdPair::to_json() const {
  return {{"t0", t0},
          {"t1", t1},
          {"objective", objective},
          {"criterion_value", criterion_value},
          {"constraint_satisfied", constraint_satisfied},
          {"epsilon", epsilon}};
}

ThresholdPair ThresholdPair::from_json(const nlohmann::json& j) {
  ThresholdPair t;
  t.t0 = j.at("t0");
  t.t1 = j.at("t1");
  t.objective = j.at("objective");
  t.criterion_value = j.at("criterion_value");
  t.constraint_satisfied = j.at("constraint_satisfied");
  t.epsilon = j.at("epsilon");
  return t;
}

std::vector<double> candidate_thresholds(std::span<const double> scores) {
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<double> out{0.0, 1.0};
  for (std::size_t i = 1; i < sorted.size(); ++i) out.push_back(0.5 * (sorted[i - 1] + sorted[i]));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ThresholdPair optimize_thresholds(std::span<const double> scores, std::span<const int> y,
                                  std::span<const int> a, Metric criterion, double epsilon,
                                  Metric perf, const ThresholdSearchOptions& options) {
  if (scores.size() != y.size() || scores.size() != a.size()) {
    fail(ErrorCode::kDimensionMismatch, "scores, labels and groups differ in length");
  }
  if (!is_fairness_metric(criterion)) {
    fail(ErrorCode::kUnknownMetric,
         std::string(metric_name(criterion)) + " is not a fairness criterion");
  }
  if (is_fairness_metric(perf)) {
    fail(ErrorCode::kUnknownMetric, std::string(metric_name(perf)) + " is not a performance metric");
  }
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) fail(ErrorCode::kInvalidArgument, "epsilon must lie in [0, 1]");

  std::vector<std::pair<double, int>> by_group[2];
  std::vector<double> group_scores[2];
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) {
      fail(ErrorCode::kInvalidArgument, "scores must lie in [0, 1]");
    }
    if ((a[i] & ~1) || (y[i] & ~1)) fail(ErrorCode::kBadLabel, "labels and groups must be binary");
    by_group[a[i]].emplace_back(scores[i], y[i]);
    group_scores[a[i]].push_back(scores[i]);
  }
  for (int g = 0; g < 2; ++g) {
    if (by_group[g].empty()) {
      fail(ErrorCode::kEmptyGroup, "protected group " + std::to_string(g) + " has no samples");
    }
  }

  std::vector<double> grid[2];
  std::vector<Confusion> counts[2];
  for (int g = 0; g < 2; ++g) {
    grid[g] = candidate_thresholds(group_scores[g]);
    if (scores.size() > options.subsample_above) grid[g] = subsample(grid[g], options.quantiles);
    counts[g] = sweep_group(by_group[g], grid[g]);
  }

  bool have_feasible = false;
  Candidate best_feasible, best_fallback;
  bool first = true;
  for (std::size_t i = 0; i < grid[0].size(); ++i) {
    for (std::size_t j = 0; j < grid[1].size(); ++j) {
      const GroupConfusion c{{counts[0][i], counts[1][j]}};
      const Candidate cand{grid[0][i], grid[1][j],
                           metric_value(perf, c, options.eo_aggregation),
                           metric_value(criterion, c, options.eo_aggregation)};
      if (cand.crit <= epsilon + kMetricTolerance &&
          (!have_feasible || better_feasible(cand, best_feasible))) {
        best_feasible = cand;
        have_feasible = true;
      }
      if (first || better_fallback(cand, best_fallback)) best_fallback = cand;
      first = false;
    }
  }
  const Candidate& chosen = have_feasible ? best_feasible : best_fallback;
  return ThresholdPair{chosen.t0, chosen.t1, chosen.perf, chosen.crit, have_feasible, epsilon};
}

std::vector<int> apply_thresholds(std::span<const double> scores, std::span<const int> a,
                                  const ThresholdPair& t) {
  if (scores.size() != a.size()) fail(ErrorCode::kDimensionMismatch, "scores and groups differ in length");
  std::vector<int> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = scores[i] > (a[i] == 1 ? t.t1 : t.t0) ? 1 : 0;
  }
  return out;
}

}  // namespace detox
