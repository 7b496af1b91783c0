#pragma once

#include <stdlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "detox/metrics.hpp"
#include "detox/model.hpp"
#include "detox/tensor.hpp"
#include "detox/types.hpp"

namespace detox::testing {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string templ = (std::filesystem::temp_directory_path() / "detox_test_XXXXXX").string();
    if (mkdtemp(templ.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = templ;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Exact rational in lowest terms with a positive denominator.
struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Fraction() = default;
  Fraction(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }

  double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }

  friend Fraction operator-(Fraction a, Fraction b) {
    return Fraction(a.num * b.den - b.num * a.den, a.den * b.den);
  }
  friend Fraction operator+(Fraction a, Fraction b) {
    return Fraction(a.num * b.den + b.num * a.den, a.den * b.den);
  }
  friend Fraction operator*(Fraction a, Fraction b) {
    return Fraction(a.num * b.num, a.den * b.den);
  }
  friend bool operator<(Fraction a, Fraction b) { return a.num * b.den < b.num * a.den; }
  friend bool operator==(Fraction a, Fraction b) { return a.num == b.num && a.den == b.den; }
};

inline Fraction frac_abs(Fraction f) { return Fraction(f.num < 0 ? -f.num : f.num, f.den); }
inline Fraction frac_max(Fraction a, Fraction b) { return a < b ? b : a; }
// Zero-denominator rates are 0.
inline Fraction ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? Fraction() : Fraction(num, den);
}

// Metrics recomputed straight from the samples, without the confusion
// struct, in integer-ratio arithmetic.
struct OracleMetrics {
  double f1 = 0, gmean = 0, balanced_accuracy = 0;
  double dp = 0, eo_max = 0, eo_mean = 0, ap = 0;
};

inline OracleMetrics oracle_metrics(std::span<const int> y, std::span<const int> yhat,
                                    std::span<const int> a) {
  std::int64_t n[2] = {0, 0}, pred_pos[2] = {0, 0}, correct[2] = {0, 0};
  std::int64_t pos[2] = {0, 0}, neg[2] = {0, 0}, tp[2] = {0, 0}, fp[2] = {0, 0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    const int g = a[i];
    ++n[g];
    pred_pos[g] += yhat[i];
    correct[g] += y[i] == yhat[i];
    pos[g] += y[i];
    neg[g] += 1 - y[i];
    tp[g] += y[i] & yhat[i];
    fp[g] += (1 - y[i]) & yhat[i];
  }
  OracleMetrics m;
  const std::int64_t TP = tp[0] + tp[1], FP = fp[0] + fp[1];
  const std::int64_t P = pos[0] + pos[1], N = neg[0] + neg[1];
  const std::int64_t FN = P - TP, TN = N - FP;
  m.f1 = ratio(2 * TP, 2 * TP + FP + FN).to_double();
  const Fraction tpr = ratio(TP, P), tnr = ratio(TN, N);
  m.gmean = std::sqrt((tpr * tnr).to_double());
  m.balanced_accuracy = (Fraction(1, 2) * (tpr + tnr)).to_double();
  m.dp = frac_abs(ratio(pred_pos[0], n[0]) - ratio(pred_pos[1], n[1])).to_double();
  const Fraction tpr_gap = frac_abs(ratio(tp[0], pos[0]) - ratio(tp[1], pos[1]));
  const Fraction fpr_gap = frac_abs(ratio(fp[0], neg[0]) - ratio(fp[1], neg[1]));
  m.eo_max = frac_max(tpr_gap, fpr_gap).to_double();
  m.eo_mean = (Fraction(1, 2) * (tpr_gap + fpr_gap)).to_double();
  m.ap = frac_abs(ratio(correct[0], n[0]) - ratio(correct[1], n[1])).to_double();
  return m;
}

inline double oracle_value(Metric m, const OracleMetrics& o,
                           EoAggregation agg = EoAggregation::kMax) {
  switch (m) {
    case Metric::kF1: return o.f1;
    case Metric::kGMean: return o.gmean;
    case Metric::kBalancedAccuracy: return o.balanced_accuracy;
    case Metric::kDemographicParityDiff: return o.dp;
    case Metric::kEqualizedOddsDiff: return agg == EoAggregation::kMax ? o.eo_max : o.eo_mean;
    case Metric::kAccuracyParityDiff: return o.ap;
  }
  return 0.0;
}

struct BruteThresholds {
  double objective = 0.0;
  double criterion = 0.0;
  bool feasible = false;
};

// Exhaustive search over every pair drawn from each group's grid of 0, 1 and
// the midpoints between consecutive distinct scores.
inline BruteThresholds brute_force_thresholds(std::span<const double> scores,
                                              std::span<const int> y, std::span<const int> a,
                                              Metric criterion, double epsilon, Metric perf) {
  constexpr double tol = 1e-12;
  std::vector<double> grid[2];
  for (int g = 0; g < 2; ++g) {
    std::vector<double> s;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (a[i] == g) s.push_back(scores[i]);
    }
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    grid[g] = {0.0, 1.0};
    for (std::size_t i = 1; i < s.size(); ++i) grid[g].push_back((s[i - 1] + s[i]) / 2.0);
  }
  BruteThresholds feasible{-1.0, 2.0, true}, fallback{-1.0, 2.0, false};
  bool any_feasible = false;
  std::vector<int> yhat(scores.size());
  for (double t0 : grid[0]) {
    for (double t1 : grid[1]) {
      for (std::size_t i = 0; i < scores.size(); ++i) {
        yhat[i] = scores[i] > (a[i] == 0 ? t0 : t1) ? 1 : 0;
      }
      const auto o = oracle_metrics(y, yhat, a);
      const double p = oracle_value(perf, o), c = oracle_value(criterion, o);
      if (c <= epsilon + tol) {
        any_feasible = true;
        if (p > feasible.objective + tol ||
            (std::abs(p - feasible.objective) <= tol && c < feasible.criterion - tol)) {
          feasible.objective = p;
          feasible.criterion = c;
        }
      }
      if (c < fallback.criterion - tol ||
          (std::abs(c - fallback.criterion) <= tol && p > fallback.objective + tol)) {
        fallback.objective = p;
        fallback.criterion = c;
      }
    }
  }
  return any_feasible ? feasible : fallback;
}

// Tensor helpers.
inline Tensor make_tensor(std::vector<std::size_t> shape, std::vector<double> values) {
  return Tensor(std::move(shape), std::move(values));
}

inline LabeledBatch make_batch(Tensor images, std::vector<int> y, std::vector<int> a) {
  LabeledBatch b{std::move(images), std::move(y), std::move(a)};
  return b;
}

// Linear layer with given weights (row-major out x in) and bias.
inline Linear linear(std::size_t in, std::size_t out, std::vector<double> w,
                     std::vector<double> b) {
  return Linear{in, out, Tensor({out, in}, std::move(w)), Tensor({out}, std::move(b))};
}

}  // namespace detox::testing
