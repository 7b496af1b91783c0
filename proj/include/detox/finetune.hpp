#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detox/erasure.hpp"
#include "detox/metrics.hpp"
#include "detox/model.hpp"
#include "detox/types.hpp"
#include "json.hpp"

namespace detox {

enum class LossKind { kSavaniJoint, kAclarcAug };
enum class Surrogate { kSoftDp, kSoftEo };

std::string_view surrogate_name(Surrogate s);
Surrogate parse_surrogate(std::string_view name);

struct LossSpec {
  LossKind kind = LossKind::kSavaniJoint;
  double lambda = 1.0;
  TrainableScope scope = TrainableScope::kLastBlock;
  Surrogate surrogate = Surrogate::kSoftEo;
  std::optional<ConceptVector> cav;
  double alpha_lo = -1.0;
  double alpha_hi = 1.0;

  void validate() const;
};

enum class OptimizerKind { kSgd, kAdam };

struct FinetuneBudget {
  std::size_t max_epochs = 5;
  double lr = 1e-4;
  std::size_t early_stop_patience = 2;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  // Validation criterion for early stopping and checkpoint selection.
  Metric criterion = Metric::kEqualizedOddsDiff;
  EoAggregation eo_aggregation = EoAggregation::kMax;

  void validate() const;
};

// First-order optimiser holding per-parameter state for one model.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  // Updates the parameters of `model` that lie in `scope`.
  void step(Model& model, const Gradients& grads, TrainableScope scope);
  double lr() const noexcept { return lr_; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct LossValue {
  double loss = 0.0;
  std::vector<double> margin_grad;  // d(loss)/d(margin) per sample
  bool surrogate_skipped = false;
  double surrogate = 0.0;
};

using LossFn = std::function<LossValue(std::span<const double> margins, const LabeledBatch& batch)>;

// One gradient step on `batch`; returns the loss before the step. The
// model must be in finetune mode. Throws NonFiniteLoss without touching
// the parameters.
double finetune_step(Model& model, const LabeledBatch& batch, const LossFn& loss,
                     TrainableScope scope, Optimizer& optimizer,
                     const ActivationShift* shift = nullptr);
// Plain SGD step with the loss described by `spec` (no augmentation shift).
double finetune_step(Model& model, const LabeledBatch& batch, const LossSpec& spec, double lr);

// Mean binary cross-entropy of sigmoid(margin) against y.
LossValue task_loss(std::span<const double> margins, std::span<const int> y);
// Cross-entropy plus lambda times the soft fairness surrogate.
LossValue savani_loss(std::span<const double> margins, const LabeledBatch& batch,
                      const LossSpec& spec);

// |mean(s | a=0) - mean(s | a=1)|
double soft_dp(std::span<const double> scores, std::span<const int> a);
// max over y of |mean(s | a=0, y) - mean(s | a=1, y)|, over the y with both cells present.
double soft_eo(std::span<const double> scores, std::span<const int> y, std::span<const int> a);

struct EpochLog {
  std::size_t epoch = 0;
  double task_loss = 0.0;
  double surrogate = 0.0;
  double val_task_loss = 0.0;
  double val_criterion = 0.0;
  std::size_t skipped_surrogate_batches = 0;
  bool selected = false;
};

struct FinetuneResult {
  Model model;
  std::vector<EpochLog> log;
};

// Stratified (y, a) split: `fraction` of each cell goes to validation.
struct TrainValSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};
TrainValSplit validation_split(std::span<const int> y, std::span<const int> a, double fraction,
                               std::uint64_t seed);

// Fairness-regularised fine-tuning of a clone of `model`. The checkpoint
// with the best validation criterion among trained epochs is returned.
FinetuneResult savani_finetune(const Model& model, const LabeledBatch& data, const LossSpec& spec,
                               const FinetuneBudget& budget);

// Fine-tuning with each sample's activation at the concept layer shifted by
// alpha * v, alpha ~ U[alpha_lo, alpha_hi] per sample.
FinetuneResult aclarc_finetune(const Model& model, const LabeledBatch& data, const LossSpec& spec,
                               const FinetuneBudget& budget);

// Per-sample alphas in the order training consumes them.
std::vector<double> aclarc_alpha_schedule(const LossSpec& spec, const FinetuneBudget& budget,
                                          std::size_t train_size);

// Mean |score(x shifted by alpha * v) - score(x)|.
double concept_sensitivity(const Model& model, const LabeledBatch& data, const ConceptVector& cav,
                           double alpha);

struct PerturbOptions {
  std::size_t trials = 64;
  double sigma = 0.05;
  Metric criterion = Metric::kEqualizedOddsDiff;
  EoAggregation eo_aggregation = EoAggregation::kMax;
  std::uint64_t seed = 0;
  TrainableScope scope = TrainableScope::kLastBlock;
  double accuracy_guard = 0.05;
};

struct PerturbResult {
  Model model;
  int chosen_trial = -1;  // -1: the original model
  double criterion = 0.0;
  double balanced_accuracy = 0.0;
  double original_criterion = 0.0;
  double original_balanced_accuracy = 0.0;
};

// Gaussian weight perturbations scaled by sigma * ||W|| / sqrt(numel W);
// keeps the one with the lowest validation criterion whose balanced
// accuracy stays within the guard of the original's.
PerturbResult random_perturb_search(const Model& model, const LabeledBatch& data,
                                    const PerturbOptions& options);

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 3e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

// Trains every parameter on cross-entropy with Adam; returns per-epoch loss.
std::vector<double> train_classifier(Model& model, const LabeledBatch& data,
                                     const TrainOptions& options);

nlohmann::json epoch_log_json(const EpochLog& e);
// One JSON object per line.
void write_run_log(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines);

}  // namespace detox
