#include "detox/debias.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <utility>

#include "detox/error.hpp"
#include "detox/util.hpp"

namespace detox {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Runs `parse` and turns any failure into a ConfigError naming `field`.
template <typename F>
auto config_field(const std::string& field, F&& parse) {
  try {
    return parse();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfigError) throw;
    fail(ErrorCode::kConfigError, field + ": " + e.what());
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfigError, field + ": " + e.what());
  }
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::kConfigError, where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) fail(ErrorCode::kConfigError, "unknown key '" + key + "' in " + where);
  }
}

std::vector<std::pair<std::string, MethodFn>>& method_registry();

Surrogate default_surrogate(const DebiasConfig& c) {
  if (c.surrogate) return *c.surrogate;
  return c.fairness_criterion == Metric::kDemographicParityDiff ? Surrogate::kSoftDp
                                                                : Surrogate::kSoftEo;
}

FinetuneBudget budget_from(const DebiasConfig& c, std::uint64_t seed) {
  FinetuneBudget b;
  b.max_epochs = c.max_epochs;
  b.lr = c.lr;
  b.early_stop_patience = c.early_stop_patience;
  b.seed = seed;
  b.batch_size = c.batch_size;
  b.criterion = c.fairness_criterion;
  b.eo_aggregation = c.eo_aggregation;
  return b;
}

std::string rel(const MethodContext& ctx, const std::string& file) {
  return (fs::relative(ctx.method_dir, ctx.out_dir) / file).generic_string();
}

json epoch_logs(const std::vector<EpochLog>& log) {
  json out = json::array();
  for (const auto& e : log) out.push_back(epoch_log_json(e));
  return out;
}

std::size_t selected_epoch(const std::vector<EpochLog>& log) {
  for (const auto& e : log) {
    if (e.selected) return e.epoch;
  }
  return 0;
}

MethodOutcome eraser_outcome(const MethodContext& ctx, const AffineEraser& eraser) {
  MethodOutcome out;
  out.model = ctx.vanilla.install_eraser(eraser);
  save_eraser(eraser, ctx.method_dir / "eraser.json");
  save_model(*out.model, ctx.method_dir / "model.dtx");
  out.model_ref = rel(ctx, "eraser.json");
  out.artifacts = {rel(ctx, "eraser.json"), rel(ctx, "model.dtx")};
  const auto& acts = ctx.fit_activations();
  out.details = {{"layer", eraser.layer.name},
                 {"dim", eraser.layer.dim},
                 {"mean_squared_displacement",
                  mean_squared_displacement(acts.activations.values, eraser)}};
  return out;
}

MethodOutcome run_leace(const MethodContext& ctx) {
  const auto& data = ctx.concept_data();
  return eraser_outcome(ctx, fit_leace(data.x, data.a));
}

MethodOutcome run_pclarc(const MethodContext& ctx) {
  const auto& data = ctx.concept_data();
  const ConceptVector cav = fit_cav(data.x, data.a, ctx.config.cav_method);
  return eraser_outcome(ctx, make_pclarc(cav));
}

MethodOutcome finetuned_outcome(const MethodContext& ctx, FinetuneResult result) {
  MethodOutcome out;
  save_model(result.model, ctx.method_dir / "model.dtx");
  out.model_ref = rel(ctx, "model.dtx");
  out.artifacts = {rel(ctx, "model.dtx")};
  out.details = {{"selected_epoch", selected_epoch(result.log)}, {"epochs", epoch_logs(result.log)}};
  out.model = std::move(result.model);
  return out;
}

MethodOutcome run_aclarc(const MethodContext& ctx) {
  const auto& data = ctx.concept_data();
  LossSpec spec;
  spec.kind = LossKind::kAclarcAug;
  spec.lambda = ctx.config.lambda;
  spec.scope = ctx.config.trainable_scope;
  spec.cav = fit_cav(data.x, data.a, ctx.config.cav_method);
  spec.alpha_lo = ctx.config.alpha_lo;
  spec.alpha_hi = ctx.config.alpha_hi;
  MethodOutcome out = finetuned_outcome(
      ctx, aclarc_finetune(ctx.vanilla, ctx.fit, spec, budget_from(ctx.config, ctx.seed)));
  const double alpha = std::max(std::abs(spec.alpha_lo), std::abs(spec.alpha_hi));
  out.details["sensitivity_alpha"] = alpha;
  out.details["sensitivity_before"] = concept_sensitivity(ctx.vanilla, ctx.eval, *spec.cav, alpha);
  out.details["sensitivity_after"] = concept_sensitivity(*out.model, ctx.eval, *spec.cav, alpha);
  return out;
}

MethodOutcome run_savani(const MethodContext& ctx) {
  LossSpec spec;
  spec.kind = LossKind::kSavaniJoint;
  spec.lambda = ctx.config.lambda;
  spec.scope = ctx.config.trainable_scope;
  spec.surrogate = default_surrogate(ctx.config);
  MethodOutcome out = finetuned_outcome(
      ctx, savani_finetune(ctx.vanilla, ctx.fit, spec, budget_from(ctx.config, ctx.seed)));
  out.details["surrogate"] = surrogate_name(spec.surrogate);
  return out;
}

MethodOutcome run_random_perturb(const MethodContext& ctx) {
  PerturbOptions opt;
  opt.trials = ctx.config.trials;
  opt.sigma = ctx.config.sigma;
  opt.criterion = ctx.config.fairness_criterion;
  opt.eo_aggregation = ctx.config.eo_aggregation;
  opt.seed = ctx.seed;
  opt.scope = ctx.config.trainable_scope;
  PerturbResult r = random_perturb_search(ctx.vanilla, ctx.fit, opt);
  MethodOutcome out;
  save_model(r.model, ctx.method_dir / "model.dtx");
  out.model_ref = rel(ctx, "model.dtx");
  out.artifacts = {rel(ctx, "model.dtx")};
  out.details = {{"chosen_trial", r.chosen_trial},
                 {"validation_criterion", r.criterion},
                 {"validation_balanced_accuracy", r.balanced_accuracy},
                 {"original_validation_criterion", r.original_criterion},
                 {"original_validation_balanced_accuracy", r.original_balanced_accuracy}};
  out.model = std::move(r.model);
  return out;
}

MethodOutcome run_threshold_opt(const MethodContext& ctx) {
  const auto& c = ctx.config;
  const auto fit_scores = ctx.vanilla.predict_scores(ctx.fit);
  const auto eval_scores = ctx.vanilla.predict_scores(ctx.eval);
  ThresholdSearchOptions opt;
  opt.eo_aggregation = c.eo_aggregation;
  MethodOutcome out;
  out.thresholds = optimize_thresholds(fit_scores, ctx.fit.y, ctx.fit.a, c.fairness_criterion,
                                       c.epsilon, c.perf_metric, opt);
  write_text_file(ctx.method_dir / "thresholds.json", out.thresholds->to_json().dump(2) + "\n");
  out.model_ref = rel(ctx, "thresholds.json");
  out.artifacts = {rel(ctx, "thresholds.json")};
  json sweep = json::array();
  for (double eps : c.epsilon_sweep) {
    const ThresholdPair t = optimize_thresholds(fit_scores, ctx.fit.y, ctx.fit.a,
                                                c.fairness_criterion, eps, c.perf_metric, opt);
    const auto report =
        full_report(ctx.eval.y, apply_thresholds(eval_scores, ctx.eval.a, t), ctx.eval.a,
                    c.eo_aggregation);
    const double f1 = report.at(Metric::kF1);
    const double crit = report.at(c.fairness_criterion);
    sweep.push_back({{"epsilon", eps}, {"thresholds", t.to_json()}, {"f1", f1}, {"criterion", crit}});
    out.extra_points.push_back({"thr e=" + format_double(eps), f1, crit});
  }
  out.details = {{"thresholds", out.thresholds->to_json()}, {"epsilon_sweep", sweep}};
  return out;
}

std::vector<std::pair<std::string, MethodFn>>& method_registry() {
  static std::vector<std::pair<std::string, MethodFn>> registry = {
      {"leace", run_leace},   {"pclarc", run_pclarc},
      {"aclarc", run_aclarc}, {"savani", run_savani},
      {"random_perturb", run_random_perturb}, {"threshold_opt", run_threshold_opt},
  };
  return registry;
}

const MethodFn& find_method(const std::string& name) {
  for (const auto& [n, fn] : method_registry()) {
    if (n == name) return fn;
  }
  fail(ErrorCode::kConfigError, "unknown method '" + name + "'");
}

// First `count` rows in order, split evenly across a where both groups allow.
std::vector<std::size_t> saliency_sample(std::span<const int> a, std::size_t count) {
  std::vector<std::size_t> by_group[2];
  for (std::size_t i = 0; i < a.size(); ++i) by_group[a[i]].push_back(i);
  std::size_t take0 = std::min(by_group[0].size(), count / 2);
  std::size_t take1 = std::min(by_group[1].size(), count - take0);
  take0 = std::min(by_group[0].size(), count - take1);
  std::vector<std::size_t> rows(by_group[0].begin(), by_group[0].begin() + static_cast<std::ptrdiff_t>(take0));
  rows.insert(rows.end(), by_group[1].begin(), by_group[1].begin() + static_cast<std::ptrdiff_t>(take1));
  std::sort(rows.begin(), rows.end());
  return rows;
}

HeatmapRow heatmap_row(const Model& model, const std::vector<Tensor>& images,
                       const std::vector<int>& targets, const std::vector<std::string>& ids,
                       const DebiasConfig& config, const LayerId& layer, const std::string& tag) {
  HeatmapRow row{tag, {}};
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (config.attribution == AttributionKind::kLayer && model.is_spatial(model.layer_index(layer.name))) {
      row.maps.push_back(layer_attribution(model, images[i], targets[i], layer.name, ids[i], tag));
    } else {
      row.maps.push_back(gradient_saliency(model, images[i], targets[i], ChannelAggregation::kMax,
                                           ids[i], tag));
    }
  }
  return row;
}

void check_groups(const LabeledBatch& b, const std::string& split) {
  for (int g = 0; g < 2; ++g) {
    if (std::find(b.a.begin(), b.a.end(), g) == b.a.end()) {
      fail(ErrorCode::kEmptyGroup, split + " split has no samples with a = " + std::to_string(g));
    }
  }
}

std::string csv_cell(const FairnessReport& r, Metric m) { return format_double(r.at(m)); }

}  // namespace

std::vector<std::size_t> balanced_cells(std::span<const int> y, std::span<const int> a,
                                        std::uint64_t seed) {
  std::vector<std::size_t> cells[4];
  for (std::size_t i = 0; i < y.size(); ++i) cells[2 * y[i] + a[i]].push_back(i);
  std::size_t take = y.size();
  for (const auto& c : cells) {
    if (!c.empty()) take = std::min(take, c.size());
  }
  std::vector<std::size_t> out;
  for (int c = 0; c < 4; ++c) {
    Rng rng(derive_seed(seed, "cell" + std::to_string(c)));
    rng.shuffle(cells[c]);
    out.insert(out.end(), cells[c].begin(), cells[c].begin() + static_cast<std::ptrdiff_t>(std::min(take, cells[c].size())));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---- config ---------------------------------------------------------------

void DebiasConfig::validate() const {
  if (methods.empty()) fail(ErrorCode::kConfigError, "methods must not be empty");
  std::set<std::string> seen;
  for (const auto& m : methods) {
    if (!seen.insert(m).second) fail(ErrorCode::kConfigError, "method '" + m + "' listed twice");
    find_method(m);
  }
  if (!is_fairness_metric(fairness_criterion)) {
    fail(ErrorCode::kConfigError, "fairness_criterion must be a fairness metric");
  }
  if (is_fairness_metric(perf_metric)) {
    fail(ErrorCode::kConfigError, "perf_metric must be a performance metric");
  }
  const auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(epsilon)) fail(ErrorCode::kConfigError, "epsilon must lie in [0, 1]");
  if (!std::all_of(epsilon_sweep.begin(), epsilon_sweep.end(), unit)) {
    fail(ErrorCode::kConfigError, "epsilon_sweep values must lie in [0, 1]");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail(ErrorCode::kConfigError, "finetune.lambda must be >= 0");
  if (!(alpha_lo <= alpha_hi) || alpha_lo < -2.0 || alpha_hi > 2.0) {
    fail(ErrorCode::kConfigError, "finetune.alpha_range must be an interval inside [-2, 2]");
  }
  if (max_epochs < 1) fail(ErrorCode::kConfigError, "finetune.max_epochs must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail(ErrorCode::kConfigError, "finetune.lr must be >= 0");
  if (batch_size < 1) fail(ErrorCode::kConfigError, "finetune.batch_size must be >= 1");
  if (trials < 1) fail(ErrorCode::kConfigError, "finetune.trials must be >= 1");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) fail(ErrorCode::kConfigError, "finetune.sigma must be >= 0");
  if (saliency_images < 1) fail(ErrorCode::kConfigError, "saliency_images must be >= 1");
  if (target_layer && target_layer->empty()) fail(ErrorCode::kConfigError, "target_layer is empty");
}

DebiasConfig DebiasConfig::from_json(const json& j) {
  reject_unknown_keys(j,
                      {"methods", "target_layer", "fairness_criterion", "perf_metric",
                       "eo_aggregation", "epsilon", "epsilon_sweep", "cav_method", "concept_balance", "surrogate",
                       "finetune", "attribution", "saliency_images", "seed", "output_dir"},
                      "config");
  DebiasConfig c;
  const auto has = [&](const char* k) { return j.contains(k) && !j.at(k).is_null(); };
  c.methods = config_field("methods", [&] { return j.at("methods").get<std::vector<std::string>>(); });
  if (has("target_layer")) {
    c.target_layer = config_field("target_layer", [&] { return j.at("target_layer").get<std::string>(); });
  }
  if (has("fairness_criterion")) {
    c.fairness_criterion = config_field("fairness_criterion", [&] {
      return parse_metric(j.at("fairness_criterion").get<std::string>());
    });
  }
  if (has("perf_metric")) {
    c.perf_metric = config_field("perf_metric", [&] { return parse_metric(j.at("perf_metric").get<std::string>()); });
  }
  if (has("eo_aggregation")) {
    c.eo_aggregation = config_field("eo_aggregation", [&] {
      return parse_eo_aggregation(j.at("eo_aggregation").get<std::string>());
    });
  }
  if (has("epsilon")) c.epsilon = config_field("epsilon", [&] { return j.at("epsilon").get<double>(); });
  if (has("epsilon_sweep")) {
    c.epsilon_sweep = config_field("epsilon_sweep", [&] { return j.at("epsilon_sweep").get<std::vector<double>>(); });
  }
  if (has("cav_method")) {
    c.cav_method = config_field("cav_method", [&] { return parse_cav_method(j.at("cav_method").get<std::string>()); });
  }
  if (has("concept_balance")) {
    c.concept_balance = config_field("concept_balance", [&] { return j.at("concept_balance").get<bool>(); });
  }
  if (has("surrogate")) {
    c.surrogate = config_field("surrogate", [&] { return parse_surrogate(j.at("surrogate").get<std::string>()); });
  }
  if (has("attribution")) {
    c.attribution = config_field("attribution", [&] {
      const auto s = j.at("attribution").get<std::string>();
      if (s == "gradient") return AttributionKind::kGradient;
      if (s == "layer") return AttributionKind::kLayer;
      fail(ErrorCode::kConfigError, "must be 'gradient' or 'layer'");
    });
  }
  if (has("saliency_images")) {
    c.saliency_images = config_field("saliency_images", [&] { return j.at("saliency_images").get<std::size_t>(); });
  }
  if (has("seed")) c.seed = config_field("seed", [&] { return j.at("seed").get<std::uint64_t>(); });
  if (has("output_dir")) {
    c.output_dir = config_field("output_dir", [&] { return j.at("output_dir").get<std::string>(); });
  }
  if (has("finetune")) {
    const json& f = j.at("finetune");
    reject_unknown_keys(f,
                        {"lambda", "trainable_scope", "alpha_range", "max_epochs", "lr",
                         "early_stop_patience", "batch_size", "trials", "sigma"},
                        "finetune");
    const auto fhas = [&](const char* k) { return f.contains(k) && !f.at(k).is_null(); };
    if (fhas("lambda")) c.lambda = config_field("finetune.lambda", [&] { return f.at("lambda").get<double>(); });
    if (fhas("trainable_scope")) {
      c.trainable_scope = config_field("finetune.trainable_scope", [&] {
        return parse_scope(f.at("trainable_scope").get<std::string>());
      });
    }
    if (fhas("alpha_range")) {
      const auto range = config_field("finetune.alpha_range", [&] {
        const auto v = f.at("alpha_range").get<std::vector<double>>();
        if (v.size() != 2) fail(ErrorCode::kConfigError, "expected [lo, hi]");
        return v;
      });
      c.alpha_lo = range[0];
      c.alpha_hi = range[1];
    }
    if (fhas("max_epochs")) c.max_epochs = config_field("finetune.max_epochs", [&] { return f.at("max_epochs").get<std::size_t>(); });
    if (fhas("lr")) c.lr = config_field("finetune.lr", [&] { return f.at("lr").get<double>(); });
    if (fhas("early_stop_patience")) {
      c.early_stop_patience = config_field("finetune.early_stop_patience", [&] {
        return f.at("early_stop_patience").get<std::size_t>();
      });
    }
    if (fhas("batch_size")) c.batch_size = config_field("finetune.batch_size", [&] { return f.at("batch_size").get<std::size_t>(); });
    if (fhas("trials")) c.trials = config_field("finetune.trials", [&] { return f.at("trials").get<std::size_t>(); });
    if (fhas("sigma")) c.sigma = config_field("finetune.sigma", [&] { return f.at("sigma").get<double>(); });
  }
  c.validate();
  return c;
}

json DebiasConfig::to_json() const {
  json j = {{"methods", methods},
            {"fairness_criterion", metric_name(fairness_criterion)},
            {"perf_metric", metric_name(perf_metric)},
            {"eo_aggregation", eo_aggregation_name(eo_aggregation)},
            {"epsilon", epsilon},
            {"epsilon_sweep", epsilon_sweep},
            {"cav_method", cav_method_name(cav_method)},
            {"concept_balance", concept_balance},
            {"finetune",
             {{"lambda", lambda},
              {"trainable_scope", scope_name(trainable_scope)},
              {"alpha_range", {alpha_lo, alpha_hi}},
              {"max_epochs", max_epochs},
              {"lr", lr},
              {"early_stop_patience", early_stop_patience},
              {"batch_size", batch_size},
              {"trials", trials},
              {"sigma", sigma}}},
            {"attribution", attribution == AttributionKind::kLayer ? "layer" : "gradient"},
            {"saliency_images", saliency_images},
            {"seed", seed},
            {"output_dir", output_dir.generic_string()}};
  if (target_layer) j["target_layer"] = *target_layer;
  if (surrogate) j["surrogate"] = surrogate_name(*surrogate);
  return j;
}

DebiasConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorCode::kConfigError, "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfigError, "config is not valid JSON: " + std::string(e.what()));
  }
  return DebiasConfig::from_json(j);
}

// ---- results --------------------------------------------------------------

json DebiasResult::to_json() const {
  return {{"method", method},
          {"status", status},
          {"error", error},
          {"model_ref", model_ref},
          {"report_before", report_before.to_json()},
          {"report_after", report_after.to_json()},
          {"artifacts", artifacts},
          {"wall_time", wall_time},
          {"details", details}};
}

DebiasResult DebiasResult::from_json(const json& j) {
  DebiasResult r;
  r.method = j.at("method");
  r.status = j.at("status");
  r.error = j.at("error");
  r.model_ref = j.at("model_ref");
  r.report_before = FairnessReport::from_json(j.at("report_before"));
  r.report_after = FairnessReport::from_json(j.at("report_after"));
  r.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  r.wall_time = j.at("wall_time");
  r.details = j.at("details");
  return r;
}

void register_method(const std::string& name, MethodFn fn) {
  for (auto& [n, f] : method_registry()) {
    if (n == name) {
      f = std::move(fn);
      return;
    }
  }
  method_registry().emplace_back(name, std::move(fn));
}

bool is_registered_method(const std::string& name) {
  const auto& r = method_registry();
  return std::any_of(r.begin(), r.end(), [&](const auto& p) { return p.first == name; });
}

std::vector<std::string> registered_methods() {
  std::vector<std::string> out;
  for (const auto& [n, f] : method_registry()) out.push_back(n);
  return out;
}

std::vector<DebiasResult> DebiasRun::rows() const {
  std::vector<DebiasResult> out{vanilla};
  out.insert(out.end(), results.begin(), results.end());
  return out;
}

// ---- orchestration ----------------------------------------------------------

DebiasRun debias(const Model& model, const DatasetManifest& data, const DebiasConfig& config) {
  config.validate();
  LayerId layer;
  if (config.target_layer) {
    try {
      layer = model.layer(*config.target_layer);
    } catch (const Error& e) {
      fail(ErrorCode::kConfigError, "target_layer: " + std::string(e.what()));
    }
  } else {
    layer = model.default_target_layer();
  }
  if (data.entries.empty()) fail(ErrorCode::kEmptyBatch, "dataset manifest is empty");

  DatasetManifest fit_manifest, eval_manifest;
  if (data.has_splits()) {
    fit_manifest = data.subset(Split::kFit);
    eval_manifest = data.subset(Split::kEval);
  } else {
    std::vector<int> y, a;
    for (const auto& e : data.entries) {
      y.push_back(e.y);
      a.push_back(e.a);
    }
    const auto split = validation_split(y, a, 0.2, derive_seed(config.seed, "split"));
    fit_manifest = data.subset(split.train);
    eval_manifest = data.subset(split.validation);
  }
  if (fit_manifest.entries.empty() || eval_manifest.entries.empty()) {
    fail(ErrorCode::kEmptyGroup, "fit and eval splits must both be non-empty");
  }
  const LabeledBatch fit = load_all(fit_manifest, model.input_shape());
  const LabeledBatch eval = load_all(eval_manifest, model.input_shape());
  check_groups(fit, "fit");
  check_groups(eval, "eval");

  const fs::path out_dir = config.output_dir;
  fs::create_directories(out_dir);
  const std::string vanilla_hash = model.weight_hash();
  const auto clock = [] { return std::chrono::steady_clock::now(); };
  const auto seconds = [](auto d) { return std::chrono::duration<double>(d).count(); };

  DebiasRun run;
  const auto t0 = clock();
  const FairnessReport before =
      full_report(eval.y, binarize(model.predict_scores(eval)), eval.a, config.eo_aggregation);
  run.vanilla.method = "vanilla";
  run.vanilla.report_before = before;
  run.vanilla.report_after = before;
  run.vanilla.details = {{"target_layer", layer.name},
                         {"fit_size", fit.size()},
                         {"eval_size", eval.size()},
                         {"weight_hash", vanilla_hash}};
  run.vanilla.wall_time = seconds(clock() - t0);

  std::optional<CachedActivations> acts;
  const fs::path cache_dir = default_cache_dir(out_dir / "cache");
  const std::function<const CachedActivations&()> fit_activations = [&]() -> const CachedActivations& {
    if (!acts) acts = cache_activations(model, fit_manifest, layer, cache_dir);
    return *acts;
  };

  std::optional<ConceptData> concept_data;
  const std::function<const ConceptData&()> concept_getter = [&]() -> const ConceptData& {
    if (!concept_data) {
      const auto& all = fit_activations();
      std::vector<std::size_t> rows(all.y.size());
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
      if (config.concept_balance) rows = balanced_cells(all.y, all.a, derive_seed(config.seed, "balance"));
      ConceptData d;
      d.x.layer = all.activations.layer;
      d.x.values.resize(static_cast<Eigen::Index>(rows.size()), all.activations.values.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        d.x.values.row(static_cast<Eigen::Index>(i)) = all.activations.values.row(static_cast<Eigen::Index>(rows[i]));
        d.a.push_back(all.a[rows[i]]);
      }
      concept_data = std::move(d);
    }
    return *concept_data;
  };

  const auto sample = saliency_sample(eval.a, config.saliency_images);
  std::vector<Tensor> images;
  std::vector<int> targets;
  std::vector<std::string> ids;
  for (std::size_t row : sample) {
    const auto pixels = eval.images.slice(row);
    images.emplace_back(model.input_shape(), std::vector<double>(pixels.begin(), pixels.end()));
    targets.push_back(eval.y[row]);
    ids.push_back(eval_manifest.entries[row].filename);
  }
  const HeatmapRow vanilla_row = heatmap_row(model, images, targets, ids, config, layer, "vanilla");
  std::vector<HeatmapRow> grid_rows{vanilla_row};
  run.extra_points.clear();

  for (const auto& name : config.methods) {
    DebiasResult result;
    result.method = name;
    result.report_before = before;
    const fs::path method_dir = out_dir / name;
    const auto start = clock();
    std::vector<json> log_lines;
    try {
      fs::create_directories(method_dir);
      MethodContext ctx{model, config, layer, fit_manifest, fit, eval, out_dir, method_dir,
                        derive_seed(config.seed, name), fit_activations, concept_getter};
      MethodOutcome outcome = find_method(name)(ctx);
      const Model& after_model = outcome.model ? *outcome.model : model;
      std::vector<int> yhat;
      if (outcome.thresholds) {
        yhat = apply_thresholds(model.predict_scores(eval), eval.a, *outcome.thresholds);
      } else {
        yhat = binarize(after_model.predict_scores(eval));
      }
      result.report_after = full_report(eval.y, yhat, eval.a, config.eo_aggregation);
      result.model_ref = outcome.model_ref;
      result.artifacts = outcome.artifacts;
      result.details = outcome.details;

      HeatmapRow row = heatmap_row(after_model, images, targets, ids, config, layer, name);
      render_comparison_grid(images, {vanilla_row, row}, method_dir / "saliency.png");
      result.artifacts.push_back((fs::path(name) / "saliency.png").generic_string());
      grid_rows.push_back(std::move(row));
      run.extra_points.insert(run.extra_points.end(), outcome.extra_points.begin(),
                              outcome.extra_points.end());
      if (result.details.contains("epochs")) {
        for (const auto& e : result.details.at("epochs")) log_lines.push_back(e);
      }
    } catch (const std::exception& e) {
      result.status = "failed";
      result.error = e.what();
      result.report_after = FairnessReport{};
      result.model_ref.clear();
      result.artifacts.clear();
      result.details = json::object();
    }
    log_lines.push_back({{"method", name}, {"status", result.status}, {"error", result.error}});
    try {
      fs::create_directories(method_dir);
      write_run_log(method_dir / "run_log.jsonl", log_lines);
      result.artifacts.push_back((fs::path(name) / "run_log.jsonl").generic_string());
    } catch (const std::exception&) {
      // The run log is best effort; the result already records the outcome.
    }
    result.wall_time = seconds(clock() - start);
    run.results.push_back(std::move(result));
  }

  render_comparison_grid(images, grid_rows, out_dir / "saliency_grid.png");
  run.artifacts.push_back("saliency_grid.png");
  if (model.weight_hash() != vanilla_hash) {
    fail(ErrorCode::kInvalidState, "vanilla model weights changed during debiasing");
  }
  return run;
}

json report_json(const std::vector<DebiasResult>& rows, Metric criterion) {
  json results = json::array();
  for (const auto& r : rows) results.push_back(r.to_json());
  return {{"fairness_criterion", metric_name(criterion)}, {"results", results}};
}

std::vector<DebiasResult> results_from_report(const json& j) {
  std::vector<DebiasResult> out;
  for (const auto& r : j.at("results")) out.push_back(DebiasResult::from_json(r));
  return out;
}

std::vector<fs::path> write_report(const std::vector<DebiasResult>& rows, const fs::path& out_dir,
                                   Metric criterion, const std::vector<TradeoffPoint>& extra_points) {
  if (rows.empty()) fail(ErrorCode::kInvalidArgument, "write_report needs at least one result");
  fs::create_directories(out_dir);
  std::vector<fs::path> written;

  write_text_file(out_dir / "report.json", report_json(rows, criterion).dump(2) + "\n");
  written.push_back(out_dir / "report.json");

  std::string csv = "method,f1,gmean,balanced_accuracy,dp_diff,eo_diff,ap_diff,wall_time,status\n";
  std::vector<TradeoffPoint> points;
  for (const auto& r : rows) {
    csv += r.method;
    if (r.failed()) {
      csv += ",,,,,,";
    } else {
      const auto& a = r.report_after;
      for (Metric m : {Metric::kF1, Metric::kGMean, Metric::kBalancedAccuracy,
                       Metric::kDemographicParityDiff, Metric::kEqualizedOddsDiff,
                       Metric::kAccuracyParityDiff}) {
        csv += "," + csv_cell(a, m);
      }
      points.push_back({r.method, a.at(Metric::kF1), a.at(criterion)});
    }
    csv += "," + format_double(r.wall_time) + "," + r.status + "\n";
  }
  write_text_file(out_dir / "report.csv", csv);
  written.push_back(out_dir / "report.csv");

  points.insert(points.end(), extra_points.begin(), extra_points.end());
  if (!points.empty()) {
    render_tradeoff_plot(points, metric_name(criterion), out_dir / "tradeoff.png");
    written.push_back(out_dir / "tradeoff.png");
    written.push_back(tradeoff_sidecar_path(out_dir / "tradeoff.png"));
  }
  return written;
}

}  // namespace detox
