// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "detox/attribution.hpp"
#include "detox/data.hpp"
#include "detox/debias.hpp"
#include "detox/erasure.hpp"
#include "detox/error.hpp"
#include "detox/finetune.hpp"
#include "detox/metrics.hpp"
#include "detox/model.hpp"
#include "detox/threshold.hpp"
#include "detox/util.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace detox;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Hashes of every vanilla model seen, checked at the end (criterion 9).
std::vector<std::pair<std::string, std::string>> g_vanilla_hashes;

// ---- 1: metric oracle ------------------------------------------------------

Outcome metric_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t checked = 0, mismatches = 0, empty_group_ok = 0;
  constexpr double tol = 1e-12;
  const auto check = [&](const std::vector<int>& y, const std::vector<int>& yhat,
                         const std::vector<int>& a) {
    const bool both = std::count(a.begin(), a.end(), 0) > 0 && std::count(a.begin(), a.end(), 1) > 0;
    if (!both) {
      try {
        full_report(y, yhat, a);
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kEmptyGroup) ++empty_group_ok;
      }
      return;
    }
    const auto o = testing::oracle_metrics(y, yhat, a);
    for (EoAggregation agg : {EoAggregation::kMax, EoAggregation::kMean}) {
      const auto r = full_report(y, yhat, a, agg);
      for (Metric m : {Metric::kF1, Metric::kGMean, Metric::kBalancedAccuracy,
                       Metric::kDemographicParityDiff, Metric::kEqualizedOddsDiff,
                       Metric::kAccuracyParityDiff}) {
        if (std::abs(r.at(m) - testing::oracle_value(m, o, agg)) > tol) ++mismatches;
      }
    }
    ++checked;
  };

  // Every (y, yhat, a) assignment for n <= 7.
  std::size_t exhaustive_total = 0;
  for (std::size_t n = 1; n <= 7; ++n) {
    const std::uint64_t combos = std::uint64_t{1} << (3 * n);
    for (std::uint64_t bits = 0; bits < combos; ++bits) {
      std::vector<int> y(n), yhat(n), a(n);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = (bits >> (3 * i)) & 1;
        yhat[i] = (bits >> (3 * i + 1)) & 1;
        a[i] = (bits >> (3 * i + 2)) & 1;
      }
      check(y, yhat, a);
      ++exhaustive_total;
    }
  }
  // n = 6..12: seeded (y, a) templates, every prediction vector on each.
  Rng rng(derive_seed(0, "oracle-templates"));
  for (std::size_t n = 6; n <= 12; ++n) {
    for (int t = 0; t < 24; ++t) {
      std::vector<int> y(n), a(n);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(rng.index(2));
        a[i] = static_cast<int>(rng.index(2));
      }
      for (std::uint64_t bits = 0; bits < (std::uint64_t{1} << n); ++bits) {
        std::vector<int> yhat(n);
        for (std::size_t i = 0; i < n; ++i) yhat[i] = (bits >> i) & 1;
        check(y, yhat, a);
      }
    }
  }
  // 1000 random instances with n <= 200.
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.index(199);
    std::vector<int> y(n), yhat(n), a(n);
    const double py = rng.uniform(), pa = rng.uniform(), ph = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.uniform() < py;
      yhat[i] = rng.uniform() < ph;
      a[i] = rng.uniform() < pa;
    }
    check(y, yhat, a);
  }
  const double secs = seconds_since(t0);
  Outcome out;
  out.pass = mismatches == 0 && checked > 0 && secs < 30.0;
  out.detail = std::to_string(checked) + " instances (" + std::to_string(exhaustive_total) +
               " exhaustive assignments), " + std::to_string(mismatches) + " mismatches, " +
               std::to_string(empty_group_ok) + " single-group inputs rejected, " +
               fmt("%.1f s", secs);
  return out;
}

// ---- 2-4: erasure on planted Gaussian activations --------------------------

struct PlantedSet {
  Eigen::MatrixXd x;
  std::vector<int> a;
};

PlantedSet planted_set() {
  const Eigen::Index n = 2000, d = 16;
  Rng rng(derive_seed(0, "planted"));
  Eigen::VectorXd u(d);
  for (Eigen::Index j = 0; j < d; ++j) u(j) = rng.normal();
  u.normalize();
  // Anisotropic background so whitening matters.
  Eigen::VectorXd scales(d);
  for (Eigen::Index j = 0; j < d; ++j) scales(j) = 0.5 + 1.5 * rng.uniform();
  PlantedSet s{Eigen::MatrixXd(n, d), std::vector<int>(static_cast<std::size_t>(n))};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int a = static_cast<int>(rng.index(2));
    s.a[static_cast<std::size_t>(i)] = a;
    for (Eigen::Index j = 0; j < d; ++j) s.x(i, j) = scales(j) * rng.normal();
    s.x.row(i) += (a == 1 ? 2.5 : -2.5) * u.transpose();
  }
  return s;
}

Outcome leace_guardedness(const PlantedSet& s) {
  const auto t0 = std::chrono::steady_clock::now();
  const ActivationMatrix x{s.x, LayerId{"planted", 16}};
  const double before = probe_accuracy(s.x, s.a, 1);
  const AffineEraser e = fit_leace(x, s.a);
  const ActivationMatrix erased = apply_eraser(x, e);
  const double after = probe_accuracy(erased.values, s.a, 1);
  const double cov_before = cross_covariance(s.x, s.a).cwiseAbs().maxCoeff();
  const double cov_after = cross_covariance(erased.values, s.a).cwiseAbs().maxCoeff();
  const double rel = cov_after / cov_before;
  const double secs = seconds_since(t0);
  Outcome out;
  out.pass = before >= 0.95 && after <= 0.55 && rel <= 1e-8 && secs < 10.0;
  out.detail = "probe " + fmt("%.4f", before) + " -> " + fmt("%.4f", after) +
               ", max |cov| relative " + fmt("%.2e", rel) + ", " + fmt("%.2f s", secs);
  return out;
}

Outcome leace_vs_pclarc(const PlantedSet& s) {
  const ActivationMatrix x{s.x, LayerId{"planted", 16}};
  const double leace = mean_squared_displacement(s.x, fit_leace(x, s.a));
  const double pclarc = mean_squared_displacement(s.x, make_pclarc(fit_cav(x, s.a)));
  Outcome out;
  out.pass = leace <= pclarc + 1e-9;
  out.detail = "LEACE " + fmt("%.6f", leace) + " vs P-ClArC " + fmt("%.6f", pclarc);
  return out;
}

Outcome pclarc_exactness(const PlantedSet& s) {
  const ActivationMatrix x{s.x, LayerId{"planted", 16}};
  const ConceptVector cav = fit_cav(x, s.a);
  const AffineEraser e = make_pclarc(cav);
  Rng rng(derive_seed(0, "pclarc-vectors"));
  Eigen::MatrixXd v(1000, 16);
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    for (Eigen::Index j = 0; j < v.cols(); ++j) v(i, j) = 5.0 * rng.normal();
  }
  const ActivationMatrix once = apply_eraser({v, x.layer}, e);
  const ActivationMatrix twice = apply_eraser(once, e);
  const Eigen::VectorXd coord = once.values * cav.direction;
  const double target = cav.direction.dot(cav.mu_free);
  const double spread = (coord.array() - target).abs().maxCoeff();
  const double idem = (twice.values - once.values).cwiseAbs().maxCoeff();
  Outcome out;
  out.pass = spread <= 1e-9 && idem <= 1e-9;
  out.detail = "max |v.x - v.mu_free| " + fmt("%.2e", spread) + ", idempotence " +
               fmt("%.2e", idem);
  return out;
}

// ---- 5: threshold optimiser vs brute force --------------------------------

Outcome threshold_brute_force() {
  Rng rng(derive_seed(0, "threshold-instances"));
  std::size_t runs = 0, mismatches = 0, monotone_violations = 0;
  const Metric criteria[] = {Metric::kDemographicParityDiff, Metric::kEqualizedOddsDiff};
  const Metric perfs[] = {Metric::kF1, Metric::kBalancedAccuracy};
  const double epsilons[] = {0.0, 0.05, 0.2, 1.0};
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t n0 = 1 + rng.index(50), n1 = 1 + rng.index(50);
    std::vector<double> scores;
    std::vector<int> y, a;
    const std::size_t levels = 5 + rng.index(40);  // ties are common
    for (std::size_t g = 0; g < 2; ++g) {
      for (std::size_t i = 0; i < (g == 0 ? n0 : n1); ++i) {
        const int label = static_cast<int>(rng.index(2));
        double s = static_cast<double>(rng.index(levels + 1)) / static_cast<double>(levels);
        s = std::clamp(0.7 * s + (label == 1 ? 0.3 : 0.0) * rng.uniform(), 0.0, 1.0);
        scores.push_back(s);
        y.push_back(label);
        a.push_back(static_cast<int>(g));
      }
    }
    const Metric perf = perfs[inst % 2];
    for (Metric crit : criteria) {
      double last = -1.0;
      for (double eps : epsilons) {
        const ThresholdPair t = optimize_thresholds(scores, y, a, crit, eps, perf);
        const auto brute = testing::brute_force_thresholds(scores, y, a, crit, eps, perf);
        const auto o = testing::oracle_metrics(y, apply_thresholds(scores, a, t), a);
        // Exact up to the rounding of the rate arithmetic.
        const bool same = std::abs(t.objective - brute.objective) <= 1e-12 &&
                          std::abs(t.criterion_value - brute.criterion) <= 1e-12 &&
                          t.constraint_satisfied == brute.feasible &&
                          std::abs(testing::oracle_value(perf, o) - t.objective) <= 1e-12;
        if (!same) ++mismatches;
        if (t.objective < last - 1e-12) ++monotone_violations;
        last = t.objective;
        ++runs;
      }
    }
  }
  Outcome out;
  out.pass = mismatches == 0 && monotone_violations == 0;
  out.detail = std::to_string(runs) + " searches, " + std::to_string(mismatches) +
               " differ from brute force, " + std::to_string(monotone_violations) +
               " epsilon-monotonicity violations";
  return out;
}

// ---- 6: saliency gradient check ------------------------------------------

double score_of(const Model& m, const Tensor& image, int target) {
  Tensor batch = image;
  auto shape = image.shape();
  shape.insert(shape.begin(), 1);
  batch.reshape(shape);
  const double s = m.predict_scores(batch)[0];
  return target == 1 ? s : 1.0 - s;
}

Outcome saliency_gradient_check() {
  std::string detail;
  bool pass = true;
  for (const char* arch : {"smooth_cnn:3x8x8", "mlp:3x8x8:h12"}) {
    const Model model = make_model(arch, 3);
    Rng rng(derive_seed(0, std::string("saliency-") + arch));
    Tensor image({3, 8, 8});
    for (double& v : image.values()) v = rng.uniform();
    const int target = 1;
    const Tensor g = input_gradient(model, image, target);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      const std::size_t idx = rng.index(image.size());
      Tensor plus = image, minus = image;
      plus[idx] += 1e-3;
      minus[idx] -= 1e-3;
      const double fd = (score_of(model, plus, target) - score_of(model, minus, target)) / 2e-3;
      const double rel = std::abs(g[idx] - fd) / std::max({std::abs(g[idx]), std::abs(fd), 1e-12});
      worst = std::max(worst, rel);
    }
    // The heatmap is the normalised channel-max of |gradient|.
    const Heatmap h = gradient_saliency(model, image, target);
    Eigen::MatrixXd expected(8, 8);
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        double m = 0.0;
        for (std::size_t c = 0; c < 3; ++c) m = std::max(m, std::abs(g[(c * 8 + y) * 8 + x]));
        expected(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) = m;
      }
    }
    expected /= expected.maxCoeff();
    const double map_err = (h.values - expected).cwiseAbs().maxCoeff();
    pass = pass && worst <= 1e-3 && map_err <= 1e-12;
    detail += std::string(detail.empty() ? "" : "; ") + arch + " max rel err " +
              fmt("%.2e", worst);
  }
  return {pass, detail};
}

// ---- 7-9: end-to-end ------------------------------------------------------

struct E2eSettings {
  fs::path work;
  std::size_t epochs = 30;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct Trained {
  Model model;
  double train_seconds = 0.0;
};

// Synthetic data with deterministic fit/eval tags.
DatasetManifest prepare_data(const E2eSettings& s) {
  const fs::path dir = s.work / "data";
  const DatasetManifest raw = make_synthetic_biased({4000, 0.9, 32, s.seed}, dir);
  std::vector<int> y, a;
  for (const auto& e : raw.entries) {
    y.push_back(e.y);
    a.push_back(e.a);
  }
  const auto split = validation_split(y, a, 0.2, derive_seed(s.seed, "split"));
  DatasetManifest tagged = raw;
  for (auto i : split.train) tagged.entries[i].split = Split::kFit;
  for (auto i : split.validation) tagged.entries[i].split = Split::kEval;
  save_manifest(tagged, dir / "manifest_split.csv");
  return load_manifest(dir / "manifest_split.csv");
}

Trained train_vanilla(const DatasetManifest& data, const E2eSettings& s) {
  const auto t0 = std::chrono::steady_clock::now();
  Model model = make_model("small_cnn:3x32x32", derive_seed(s.seed, "init"));
  const LabeledBatch fit = load_all(data.subset(Split::kFit), model.input_shape());
  train_classifier(model, fit, {s.epochs, s.lr, 64, derive_seed(s.seed, "vanilla")});
  return {std::move(model), seconds_since(t0)};
}

DebiasConfig full_config(const fs::path& out, std::uint64_t seed) {
  DebiasConfig c;
  c.methods = {"leace", "pclarc", "aclarc", "savani", "random_perturb", "threshold_opt"};
  c.output_dir = out;
  c.seed = seed;
  return c;
}

struct E2eRun {
  DebiasRun run;
  std::vector<fs::path> report_files;
};

E2eRun run_debias(const Model& model, const DatasetManifest& data, const DebiasConfig& c) {
  E2eRun r;
  r.run = debias(model, data, c);
  r.report_files = write_report(r.run.rows(), c.output_dir, c.fairness_criterion, r.run.extra_points);
  return r;
}

Outcome end_to_end(const E2eSettings& s, const Trained& vanilla,
                   const E2eRun& r, double debias_seconds) {
  std::ostringstream d;
  bool pass = true;
  const Model& m = vanilla.model;
  const auto params = m.parameter_count();
  if (params >= 100000 || vanilla.train_seconds >= 300.0) pass = false;
  d << "small_cnn " << params << " params, trained " << s.epochs << " epochs in "
    << fmt("%.0f s", vanilla.train_seconds);

  const FairnessReport& before = r.run.vanilla.report_after;
  const double dp = before.at(Metric::kDemographicParityDiff);
  const Metric crit = Metric::kEqualizedOddsDiff;
  const double v_crit = before.at(crit), v_f1 = before.at(Metric::kF1);
  if (dp < 0.2) pass = false;
  d << "; vanilla dp " << fmt("%.3f", dp) << " eo " << fmt("%.3f", v_crit) << " f1 "
    << fmt("%.3f", v_f1);

  std::string best_repr;
  double best_reduction = 0.0;
  for (const auto& res : r.run.results) {
    if (res.failed()) {
      pass = false;
      d << "; " << res.method << " FAILED (" << res.error << ")";
      continue;
    }
    const double c = res.report_after.at(crit), f1 = res.report_after.at(Metric::kF1);
    const bool ok_crit = c <= v_crit + 1e-12, ok_f1 = std::abs(f1 - v_f1) <= 0.15;
    pass = pass && ok_crit && ok_f1;
    d << "; " << res.method << " eo " << fmt("%.3f", c) << (ok_crit ? "" : " (above vanilla)")
      << " f1 " << fmt("%.3f", f1) << (ok_f1 ? "" : " (f1 drop > 0.15)");
    if (res.method != "threshold_opt" && v_crit > 0.0) {
      const double red = 1.0 - c / v_crit;
      if (red > best_reduction) {
        best_reduction = red;
        best_repr = res.method;
      }
    }
  }
  if (best_reduction < 0.5) pass = false;
  d << "; best representation-level reduction " << fmt("%.0f%%", 100.0 * best_reduction) << " ("
    << best_repr << ")";

  for (const char* f : {"report.json", "report.csv", "tradeoff.png", "saliency_grid.png"}) {
    if (!fs::exists(s.work / "run1" / f)) {
      pass = false;
      d << "; missing " << f;
    }
  }
  const double total = vanilla.train_seconds + debias_seconds;
  if (total >= 900.0) pass = false;
  d << "; total " << fmt("%.0f s", total);
  return {pass, d.str()};
}

std::string strip_wall_time(nlohmann::json j) {
  for (auto& r : j.at("results")) r.erase("wall_time");
  return j.dump();
}

Outcome reproducibility(const E2eSettings& s, const DatasetManifest& data, const Trained& first,
                        const fs::path& first_out) {
  const Trained second = train_vanilla(data, s);
  g_vanilla_hashes.emplace_back("second training run", second.model.weight_hash());
  const fs::path out = s.work / "run2";
  const E2eRun r = run_debias(second.model, data, full_config(out, s.seed));
  std::ostringstream d;
  bool pass = true;
  const bool same_weights = first.model.weight_hash() == second.model.weight_hash();
  pass = pass && same_weights;
  d << "vanilla weights " << (same_weights ? "identical" : "DIFFER");
  const auto j1 = nlohmann::json::parse(read_text_file(first_out / "report.json"));
  const auto j2 = nlohmann::json::parse(read_text_file(out / "report.json"));
  const bool same_report = strip_wall_time(j1) == strip_wall_time(j2);
  pass = pass && same_report;
  d << ", report.json " << (same_report ? "identical" : "DIFFERS") << " excluding wall_time";
  for (const char* m : {"leace", "pclarc"}) {
    const fs::path rel = fs::path(m) / "eraser.json";
    const bool same = fs::exists(first_out / rel) &&
                      read_text_file(first_out / rel) == read_text_file(out / rel);
    pass = pass && same;
    d << ", " << rel.generic_string() << (same ? " identical" : " DIFFERS");
  }
  return {pass, d.str()};
}

Outcome fail_isolation(const E2eSettings& s, const DatasetManifest& data, const Model& vanilla,
                       const std::string& initial_hash) {
  register_method("injected_failure", [](const MethodContext&) -> MethodOutcome {
    throw Error(ErrorCode::kNumericalFailure, "injected failure");
  });
  DebiasConfig with = full_config(s.work / "run_fail", s.seed);
  with.methods = {"leace", "injected_failure", "pclarc", "threshold_opt"};
  DebiasConfig without = full_config(s.work / "run_nofail", s.seed);
  without.methods = {"leace", "pclarc", "threshold_opt"};
  const DebiasRun a = debias(vanilla, data, with);
  const DebiasRun b = debias(vanilla, data, without);
  g_vanilla_hashes.emplace_back("after fail-isolation runs", vanilla.weight_hash());

  std::ostringstream d;
  bool pass = a.results.size() == 4 && b.results.size() == 3;
  if (pass) {
    const auto& failed = a.results[1];
    const bool tagged = failed.failed() && failed.error.find("injected failure") != std::string::npos;
    pass = pass && tagged;
    d << "injected method status=" << failed.status;
    const std::size_t map[] = {0, 2, 3};
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& x = a.results[map[i]];
      const auto& y = b.results[i];
      const bool same = x.method == y.method && x.status == y.status &&
                        x.report_before == y.report_before && x.report_after == y.report_after;
      pass = pass && same;
      d << ", " << x.method << (same ? " unchanged" : " CHANGED");
    }
  }
  bool hashes_ok = true;
  for (const auto& [where, h] : g_vanilla_hashes) {
    if (h != initial_hash) {
      hashes_ok = false;
      d << ", vanilla hash changed " << where;
    }
  }
  pass = pass && hashes_ok;
  d << ", vanilla hash " << (hashes_ok ? "unchanged" : "CHANGED") << " across "
    << g_vanilla_hashes.size() << " checkpoints";
  return {pass, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  E2eSettings settings;
  std::string work;
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--epochs", settings.epochs, "Vanilla training epochs");
  app.add_option("--work", work, "Keep end-to-end outputs in this directory");
  app.add_option("--seed", settings.seed, "Seed for the end-to-end criteria");
  CLI11_PARSE(app, argc, argv);

  std::optional<testing::TempDir> temp;
  if (work.empty()) {
    temp.emplace();
    settings.work = temp->path();
  } else {
    settings.work = work;
    fs::create_directories(settings.work);
  }
  const auto wanted = [&](int k) {
    return only.empty() || std::find(only.begin(), only.end(), k) != only.end();
  };

  int failures = 0;
  const auto report = [&](int k, const char* name, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << k << "] " << name << ": " << o.detail
              << std::endl;
  };

  report(1, "metric oracle equivalence", metric_oracle);
  if (wanted(2) || wanted(3) || wanted(4)) {
    const PlantedSet planted = planted_set();
    report(2, "LEACE guardedness", [&] { return leace_guardedness(planted); });
    report(3, "LEACE displacement <= P-ClArC", [&] { return leace_vs_pclarc(planted); });
    report(4, "P-ClArC exactness", [&] { return pclarc_exactness(planted); });
  }
  report(5, "threshold optimiser = brute force", threshold_brute_force);
  report(6, "saliency gradient check", saliency_gradient_check);

  if (wanted(7) || wanted(8) || wanted(9)) {
    std::optional<DatasetManifest> data;
    std::optional<Trained> vanilla;
    std::optional<E2eRun> first;
    std::string initial_hash;
    double debias_seconds = 0.0;
    std::string setup_error;
    try {
      data = prepare_data(settings);
      vanilla = train_vanilla(*data, settings);
      initial_hash = vanilla->model.weight_hash();
      const auto t0 = std::chrono::steady_clock::now();
      first = run_debias(vanilla->model, *data, full_config(settings.work / "run1", settings.seed));
      debias_seconds = seconds_since(t0);
      g_vanilla_hashes.emplace_back("after the full run", vanilla->model.weight_hash());
      g_vanilla_hashes.emplace_back("recorded by debias",
                                    first->run.vanilla.details.at("weight_hash").get<std::string>());
    } catch (const std::exception& e) {
      setup_error = e.what();
    }
    const auto guarded = [&](const std::function<Outcome()>& fn) -> std::function<Outcome()> {
      return [&, fn] {
        if (!setup_error.empty()) return Outcome{false, "end-to-end setup failed: " + setup_error};
        return fn();
      };
    };
    report(7, "end-to-end desk-scale workflow", guarded([&] {
             return end_to_end(settings, *vanilla, *first, debias_seconds);
           }));
    report(8, "reproducibility", guarded([&] {
             return reproducibility(settings, *data, *vanilla, settings.work / "run1");
           }));
    report(9, "fail isolation and vanilla immutability", guarded([&] {
             return fail_isolation(settings, *data, vanilla->model, initial_hash);
           }));
  }
  return failures == 0 ? 0 : 1;
}
