#include "detox/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "detox/error.hpp"

namespace detox {
namespace {

constexpr Metric kAllMetrics[] = {Metric::kF1,
                                  Metric::kGMean,
                                  Metric::kBalancedAccuracy,
                                  Metric::kDemographicParityDiff,
                                  Metric::kEqualizedOddsDiff,
                                  Metric::kAccuracyParityDiff};

// num/den, or 0 with a flag when den == 0.
double rate(std::int64_t num, std::int64_t den, int group, const char* name, FlagSet* flags) {
  if (den == 0) {
    if (flags != nullptr) flags->insert(DegenerateFlag{group, name});
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

void require_groups(const GroupConfusion& c) {
  for (int g = 0; g < 2; ++g) {
    if (c.group[g].total() == 0) {
      fail(ErrorCode::kEmptyGroup, "protected group " + std::to_string(g) + " has no samples");
    }
  }
}

std::string group_label(int group) {
  return group == DegenerateFlag::kPooled ? "pooled" : std::to_string(group);
}

}  // namespace

std::string_view metric_name(Metric metric) {
  switch (metric) {
    case Metric::kF1: return "f1";
    case Metric::kGMean: return "gmean";
    case Metric::kBalancedAccuracy: return "balanced_accuracy";
    case Metric::kDemographicParityDiff: return "demographic_parity_diff";
    case Metric::kEqualizedOddsDiff: return "equalized_odds_diff";
    case Metric::kAccuracyParityDiff: return "accuracy_parity_diff";
  }
  return "f1";
}

Metric parse_metric(std::string_view name) {
  for (Metric m : kAllMetrics) {
    if (metric_name(m) == name) return m;
  }
  fail(ErrorCode::kUnknownMetric, "unknown metric '" + std::string(name) + "'");
}

bool is_fairness_metric(Metric metric) {
  return metric == Metric::kDemographicParityDiff || metric == Metric::kEqualizedOddsDiff ||
         metric == Metric::kAccuracyParityDiff;
}

EoAggregation parse_eo_aggregation(std::string_view name) {
  if (name == "max") return EoAggregation::kMax;
  if (name == "mean") return EoAggregation::kMean;
  fail(ErrorCode::kConfigError, "equalized odds aggregation must be max or mean");
}

std::string_view eo_aggregation_name(EoAggregation agg) {
  return agg == EoAggregation::kMax ? "max" : "mean";
}

GroupConfusion confusion_by_group(std::span<const int> y, std::span<const int> yhat,
                                  std::span<const int> a) {
  if (y.size() != yhat.size() || y.size() != a.size()) {
    fail(ErrorCode::kDimensionMismatch, "labels, predictions and groups differ in length");
  }
  if (y.empty()) fail(ErrorCode::kEmptyGroup, "no samples");
  GroupConfusion c;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if ((y[i] | yhat[i] | a[i]) & ~1) {
      fail(ErrorCode::kBadLabel, "sample " + std::to_string(i) + " is not binary");
    }
    Confusion& g = c.group[a[i]];
    if (y[i] == 1) {
      (yhat[i] == 1 ? g.tp : g.fn) += 1;
    } else {
      (yhat[i] == 1 ? g.fp : g.tn) += 1;
    }
  }
  require_groups(c);
  return c;
}

double demographic_parity_diff(const GroupConfusion& c, FlagSet* flags) {
  require_groups(c);
  const double p0 = rate(c.group[0].predicted_positive(), c.group[0].total(), 0, "positive_rate", flags);
  const double p1 = rate(c.group[1].predicted_positive(), c.group[1].total(), 1, "positive_rate", flags);
  return std::abs(p0 - p1);
}

double equalized_odds_diff(const GroupConfusion& c, EoAggregation agg, FlagSet* flags) {
  require_groups(c);
  double tpr[2], fpr[2];
  for (int g = 0; g < 2; ++g) {
    tpr[g] = rate(c.group[g].tp, c.group[g].positives(), g, "tpr", flags);
    fpr[g] = rate(c.group[g].fp, c.group[g].negatives(), g, "fpr", flags);
  }
  const double tpr_gap = std::abs(tpr[0] - tpr[1]);
  const double fpr_gap = std::abs(fpr[0] - fpr[1]);
  return agg == EoAggregation::kMax ? std::max(tpr_gap, fpr_gap) : 0.5 * (tpr_gap + fpr_gap);
}

double accuracy_parity_diff(const GroupConfusion& c, FlagSet* flags) {
  require_groups(c);
  double acc[2];
  for (int g = 0; g < 2; ++g) {
    acc[g] = rate(c.group[g].tp + c.group[g].tn, c.group[g].total(), g, "accuracy", flags);
  }
  return std::abs(acc[0] - acc[1]);
}

PerformanceMetrics performance_metrics(const GroupConfusion& c, FlagSet* flags) {
  const Confusion p = c.pooled();
  const int pooled = DegenerateFlag::kPooled;
  PerformanceMetrics m;
  m.f1 = rate(2 * p.tp, 2 * p.tp + p.fp + p.fn, pooled, "f1", flags);
  const double tpr = rate(p.tp, p.positives(), pooled, "tpr", flags);
  const double tnr = rate(p.tn, p.negatives(), pooled, "tnr", flags);
  m.gmean = std::sqrt(tpr * tnr);
  m.balanced_accuracy = 0.5 * (tpr + tnr);
  return m;
}

double metric_value(Metric metric, const GroupConfusion& c, EoAggregation agg, FlagSet* flags) {
  switch (metric) {
    case Metric::kF1: return performance_metrics(c, flags).f1;
    case Metric::kGMean: return performance_metrics(c, flags).gmean;
    case Metric::kBalancedAccuracy: return performance_metrics(c, flags).balanced_accuracy;
    case Metric::kDemographicParityDiff: return demographic_parity_diff(c, flags);
    case Metric::kEqualizedOddsDiff: return equalized_odds_diff(c, agg, flags);
    case Metric::kAccuracyParityDiff: return accuracy_parity_diff(c, flags);
  }
  return 0.0;
}

double FairnessReport::at(Metric metric) const {
  const auto it = values.find(std::string(metric_name(metric)));
  if (it == values.end()) {
    fail(ErrorCode::kUnknownMetric, "report lacks '" + std::string(metric_name(metric)) + "'");
  }
  return it->second;
}

nlohmann::json FairnessReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, value] : values) j[name] = value;
  j["degenerate_flags"] = nlohmann::json::array();
  for (const auto& f : degenerate_flags) {
    j["degenerate_flags"].push_back({{"group", group_label(f.group)}, {"rate", f.rate}});
  }
  return j;
}

FairnessReport FairnessReport::from_json(const nlohmann::json& j) {
  FairnessReport r;
  for (const auto& [key, value] : j.items()) {
    if (key == "degenerate_flags") {
      for (const auto& f : value) {
        const std::string g = f.at("group");
        r.degenerate_flags.insert(
            DegenerateFlag{g == "pooled" ? DegenerateFlag::kPooled : std::stoi(g), f.at("rate")});
      }
    } else {
      r.values[key] = value.get<double>();
    }
  }
  return r;
}

FairnessReport report_from_confusion(const GroupConfusion& c, EoAggregation agg) {
  FairnessReport r;
  const auto perf = performance_metrics(c, &r.degenerate_flags);
  r.values["f1"] = perf.f1;
  r.values["gmean"] = perf.gmean;
  r.values["balanced_accuracy"] = perf.balanced_accuracy;
  r.values["demographic_parity_diff"] = demographic_parity_diff(c, &r.degenerate_flags);
  r.values["equalized_odds_diff"] = equalized_odds_diff(c, agg, &r.degenerate_flags);
  r.values["accuracy_parity_diff"] = accuracy_parity_diff(c, &r.degenerate_flags);
  return r;
}

FairnessReport full_report(std::span<const int> y, std::span<const int> yhat,
                           std::span<const int> a, EoAggregation agg) {
  return report_from_confusion(confusion_by_group(y, yhat, a), agg);
}

std::vector<int> binarize(std::span<const double> scores, double threshold) {
  std::vector<int> out(scores.size());
  std::transform(scores.begin(), scores.end(), out.begin(),
                 [threshold](double s) { return s > threshold ? 1 : 0; });
  return out;
}

}  // namespace detox
