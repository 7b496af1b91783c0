#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detox/attribution.hpp"
#include "detox/data.hpp"
#include "detox/erasure.hpp"
#include "detox/finetune.hpp"
#include "detox/metrics.hpp"
#include "detox/model.hpp"
#include "detox/threshold.hpp"
#include "json.hpp"

namespace detox {

enum class AttributionKind { kGradient, kLayer };

struct DebiasConfig {
  std::vector<std::string> methods;
  std::optional<std::string> target_layer;  // default: Model::default_target_layer()
  Metric fairness_criterion = Metric::kEqualizedOddsDiff;
  Metric perf_metric = Metric::kF1;
  EoAggregation eo_aggregation = EoAggregation::kMax;
  double epsilon = 0.05;
  std::vector<double> epsilon_sweep = {0.0, 0.02, 0.05, 0.1, 0.2, 1.0};
  CavMethod cav_method = CavMethod::kMeanDifference;
  // Erasers and concept vectors are fitted on a subsample with equal counts
  // in every (y, a) cell, so the label does not leak into the a-direction.
  bool concept_balance = true;
  std::optional<Surrogate> surrogate;  // default follows the criterion

  // Fine-tuning methods (savani, aclarc) and random_perturb.
  double lambda = 1.0;
  TrainableScope trainable_scope = TrainableScope::kLastBlock;
  double alpha_lo = -1.0;
  double alpha_hi = 1.0;
  std::size_t max_epochs = 5;
  double lr = 1e-4;
  std::size_t early_stop_patience = 2;
  std::size_t batch_size = 64;
  std::size_t trials = 64;
  double sigma = 0.05;

  AttributionKind attribution = AttributionKind::kGradient;
  std::size_t saliency_images = 8;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "detox_out";

  // Throws ConfigError naming the offending field.
  void validate() const;
  // Unknown keys are rejected.
  static DebiasConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

DebiasConfig load_config(const std::filesystem::path& path);

struct DebiasResult {
  std::string method;
  std::string status = "ok";  // "ok" or "failed"
  std::string error;
  std::string model_ref;  // relative to the output directory
  FairnessReport report_before;
  FairnessReport report_after;
  std::vector<std::string> artifacts;  // relative to the output directory
  double wall_time = 0.0;
  nlohmann::json details = nlohmann::json::object();

  bool failed() const noexcept { return status == "failed"; }
  nlohmann::json to_json() const;
  static DebiasResult from_json(const nlohmann::json& j);
  friend bool operator==(const DebiasResult&, const DebiasResult&) = default;
};

struct ConceptData {
  ActivationMatrix x;
  std::vector<int> a;
};

// Seeded subsample holding min-cell-count rows of each (y, a) cell.
std::vector<std::size_t> balanced_cells(std::span<const int> y, std::span<const int> a,
                                        std::uint64_t seed);

// Everything a method may read. The vanilla model is shared and const.
struct MethodContext {
  const Model& vanilla;
  const DebiasConfig& config;
  LayerId layer;
  const DatasetManifest& fit_manifest;
  const LabeledBatch& fit;
  const LabeledBatch& eval;
  std::filesystem::path out_dir;     // run output directory
  std::filesystem::path method_dir;  // <out_dir>/<method>
  std::uint64_t seed;                // per-method seed
  std::function<const CachedActivations&()> fit_activations;
  // Fit activations restricted to the concept-fitting subsample.
  std::function<const ConceptData&()> concept_data;
};

struct MethodOutcome {
  std::optional<Model> model;  // edited or fine-tuned copy
  std::optional<ThresholdPair> thresholds;
  std::vector<std::string> artifacts;
  std::string model_ref;
  nlohmann::json details = nlohmann::json::object();
  std::vector<TradeoffPoint> extra_points;  // e.g. an epsilon sweep
};

using MethodFn = std::function<MethodOutcome(const MethodContext&)>;

// Built-ins: leace, pclarc, aclarc, savani, random_perturb, threshold_opt.
void register_method(const std::string& name, MethodFn fn);
bool is_registered_method(const std::string& name);
std::vector<std::string> registered_methods();

struct DebiasRun {
  DebiasResult vanilla;
  std::vector<DebiasResult> results;  // config order
  std::vector<TradeoffPoint> extra_points;
  std::vector<std::string> artifacts;  // run-level files, relative

  // vanilla followed by the per-method results
  std::vector<DebiasResult> rows() const;
};

// Config errors (methods, metrics, layer) are raised before any work.
DebiasRun debias(const Model& model, const DatasetManifest& data, const DebiasConfig& config);

// report.json, report.csv, tradeoff.png and its CSV sidecar. Rows are
// written in the given order.
std::vector<std::filesystem::path> write_report(const std::vector<DebiasResult>& rows,
                                                const std::filesystem::path& out_dir,
                                                Metric criterion = Metric::kEqualizedOddsDiff,
                                                const std::vector<TradeoffPoint>& extra_points = {});

nlohmann::json report_json(const std::vector<DebiasResult>& rows, Metric criterion);
std::vector<DebiasResult> results_from_report(const nlohmann::json& j);

}  // namespace detox
