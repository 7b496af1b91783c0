#include "detox/finetune.hpp"

#include <algorithm>
#include <cmath>

#include "detox/data.hpp"
#include "detox/error.hpp"
#include "detox/threshold.hpp"
#include "detox/util.hpp"

namespace detox {
namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

std::size_t first_block_in_scope(const Model& model, TrainableScope scope) {
  for (std::size_t b = 0; b < model.block_count(); ++b) {
    if (model.in_scope(b, scope)) return b;
  }
  return model.block_count() - 1;
}

double bce(double score, int y) {
  const double s = std::clamp(score, 1e-12, 1.0 - 1e-12);
  return y == 1 ? -std::log(s) : -std::log(1.0 - s);
}

struct Evaluation {
  double criterion = 0.0;
  double balanced_accuracy = 0.0;
  double task_loss = 0.0;
};

Evaluation evaluate(const Model& model, const LabeledBatch& data, Metric criterion,
                    EoAggregation agg) {
  const auto scores = model.predict_scores(data);
  const auto yhat = binarize(scores);
  const auto c = confusion_by_group(data.y, yhat, data.a);
  Evaluation e;
  e.criterion = metric_value(criterion, c, agg);
  e.balanced_accuracy = performance_metrics(c).balanced_accuracy;
  for (std::size_t i = 0; i < scores.size(); ++i) e.task_loss += bce(scores[i], data.y[i]);
  e.task_loss /= static_cast<double>(scores.size());
  return e;
}

// Gradient of a group-mean gap with respect to the per-sample scores.
void add_gap_gradient(std::span<const double> scores, std::span<const int> a,
                      const std::vector<std::size_t>& members, double weight,
                      std::vector<double>& grad) {
  double sum[2] = {0, 0};
  double count[2] = {0, 0};
  for (std::size_t i : members) {
    sum[a[i]] += scores[i];
    count[a[i]] += 1;
  }
  const double gap = sum[0] / count[0] - sum[1] / count[1];
  const double sign = gap > 0 ? 1.0 : (gap < 0 ? -1.0 : 0.0);
  for (std::size_t i : members) {
    grad[i] += weight * sign * (a[i] == 0 ? 1.0 / count[0] : -1.0 / count[1]);
  }
}

struct RunHooks {
  std::function<LossValue(std::span<const double>, const LabeledBatch&)> loss;
  // Optional per-batch activation shift; receives the batch size.
  std::function<std::optional<ActivationShift>(std::size_t)> shift;
};

FinetuneResult run_finetune(const Model& original, const LabeledBatch& data, const LossSpec& spec,
                            const FinetuneBudget& budget, const RunHooks& hooks) {
  spec.validate();
  budget.validate();
  data.validate();
  const auto split = validation_split(data.y, data.a, 0.2, derive_seed(budget.seed, "validation"));
  const LabeledBatch train = data.select(split.train);
  const LabeledBatch val = data.select(split.validation);

  Model model = original.clone();
  model.set_mode(Mode::kFinetune);
  Optimizer optimizer(budget.optimizer, budget.lr);

  FinetuneResult result{original.clone(), {}};
  const Evaluation start = evaluate(model, val, budget.criterion, budget.eo_aggregation);
  result.log.push_back(EpochLog{0, 0.0, 0.0, start.task_loss, start.criterion, 0, false});

  std::optional<double> best;
  std::size_t best_entry = 0;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= budget.max_epochs; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;
    const auto batches = epoch_batches(train.size(), budget.batch_size,
                                       derive_seed(budget.seed, "epoch" + std::to_string(epoch)));
    for (const auto& rows : batches) {
      const LabeledBatch batch = train.select(rows);
      LossValue last;
      const auto loss = [&](std::span<const double> margins, const LabeledBatch& b) {
        last = hooks.loss(margins, b);
        return last;
      };
      std::optional<ActivationShift> shift;
      if (hooks.shift) shift = hooks.shift(batch.size());
      entry.task_loss += finetune_step(model, batch, loss, spec.scope, optimizer,
                                       shift ? &*shift : nullptr) /
                         static_cast<double>(batches.size());
      entry.surrogate += last.surrogate / static_cast<double>(batches.size());
      if (last.surrogate_skipped) ++entry.skipped_surrogate_batches;
    }
    const Evaluation e = evaluate(model, val, budget.criterion, budget.eo_aggregation);
    entry.val_task_loss = e.task_loss;
    entry.val_criterion = e.criterion;
    result.log.push_back(entry);
    if (!best || e.criterion < *best - kMetricTolerance) {
      best = e.criterion;
      best_entry = result.log.size() - 1;
      result.model = model;
      stale = 0;
    } else if (++stale >= budget.early_stop_patience) {
      break;
    }
  }
  result.log[best_entry].selected = true;
  result.model.set_mode(Mode::kInference);
  return result;
}

}  // namespace

std::string_view surrogate_name(Surrogate s) {
  return s == Surrogate::kSoftDp ? "soft_dp" : "soft_eo";
}

Surrogate parse_surrogate(std::string_view name) {
  if (name == "soft_dp") return Surrogate::kSoftDp;
  if (name == "soft_eo") return Surrogate::kSoftEo;
  fail(ErrorCode::kConfigError, "unknown surrogate '" + std::string(name) + "'");
}

void LossSpec::validate() const {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    fail(ErrorCode::kInvalidArgument, "lambda must be finite and non-negative");
  }
  if (!(alpha_lo <= alpha_hi) || alpha_lo < -2.0 || alpha_hi > 2.0) {
    fail(ErrorCode::kInvalidArgument, "alpha range must be an interval inside [-2, 2]");
  }
  if ((kind == LossKind::kAclarcAug) != cav.has_value()) {
    fail(ErrorCode::kInvalidArgument, "a concept vector is required exactly for A-ClArC");
  }
}

void FinetuneBudget::validate() const {
  if (max_epochs < 1) fail(ErrorCode::kInvalidArgument, "max_epochs must be at least 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail(ErrorCode::kInvalidArgument, "lr must be >= 0");
  if (batch_size < 1) fail(ErrorCode::kInvalidArgument, "batch_size must be at least 1");
  if (!is_fairness_metric(criterion)) {
    fail(ErrorCode::kUnknownMetric, "early stopping needs a fairness criterion");
  }
}

void Optimizer::step(Model& model, const Gradients& grads, TrainableScope scope) {
  auto params = model.parameters();
  if (grads.params.size() != params.size()) {
    fail(ErrorCode::kDimensionMismatch, "gradient list does not match the model");
  }
  if (kind_ == OptimizerKind::kAdam && m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor->shape());
      v_.emplace_back(p.tensor->shape());
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!model.in_scope(params[i].block, scope)) continue;
    Tensor& w = *params[i].tensor;
    const Tensor& g = grads.params[i];
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr_ * g[k];
      continue;
    }
    for (std::size_t k = 0; k < w.size(); ++k) {
      m_[i][k] = kAdamBeta1 * m_[i][k] + (1.0 - kAdamBeta1) * g[k];
      v_[i][k] = kAdamBeta2 * v_[i][k] + (1.0 - kAdamBeta2) * g[k] * g[k];
      w[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + kAdamEps);
    }
  }
}

double finetune_step(Model& model, const LabeledBatch& batch, const LossFn& loss,
                     TrainableScope scope, Optimizer& optimizer, const ActivationShift* shift) {
  if (model.mode() != Mode::kFinetune) {
    fail(ErrorCode::kInvalidState, "finetune_step needs a model in finetune mode");
  }
  if (batch.empty()) fail(ErrorCode::kEmptyBatch, "finetune_step on an empty batch");
  ForwardOptions options;
  options.keep_trace = true;
  options.shift = shift;
  const ForwardPass pass = model.forward(batch.images, options);
  const LossValue value = loss(pass.margin, batch);
  const bool finite_grad = std::all_of(value.margin_grad.begin(), value.margin_grad.end(),
                                       [](double g) { return std::isfinite(g); });
  if (!std::isfinite(value.loss) || !finite_grad) {
    fail(ErrorCode::kNonFiniteLoss, "loss or its gradient is not finite");
  }
  BackwardOptions back;
  back.min_block = first_block_in_scope(model, scope);
  const Gradients grads = model.backward(pass, value.margin_grad, back);
  optimizer.step(model, grads, scope);
  return value.loss;
}

double finetune_step(Model& model, const LabeledBatch& batch, const LossSpec& spec, double lr) {
  spec.validate();
  Optimizer sgd(OptimizerKind::kSgd, lr);
  return finetune_step(
      model, batch,
      [&](std::span<const double> m, const LabeledBatch& b) { return savani_loss(m, b, spec); },
      spec.scope, sgd);
}

LossValue task_loss(std::span<const double> margins, std::span<const int> y) {
  LossValue out;
  const double n = static_cast<double>(margins.size());
  out.margin_grad.resize(margins.size());
  for (std::size_t i = 0; i < margins.size(); ++i) {
    const double m = margins[i];
    // softplus(m) - y m, evaluated stably.
    const double softplus = m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
    out.loss += (softplus - y[i] * m) / n;
    out.margin_grad[i] = (sigmoid(m) - y[i]) / n;
  }
  return out;
}

double soft_dp(std::span<const double> scores, std::span<const int> a) {
  double sum[2] = {0, 0}, count[2] = {0, 0};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    sum[a[i]] += scores[i];
    count[a[i]] += 1;
  }
  if (count[0] == 0 || count[1] == 0) fail(ErrorCode::kEmptyGroup, "soft_dp needs both groups");
  return std::abs(sum[0] / count[0] - sum[1] / count[1]);
}

double soft_eo(std::span<const double> scores, std::span<const int> y, std::span<const int> a) {
  double best = 0.0;
  bool any = false;
  for (int label = 0; label < 2; ++label) {
    double sum[2] = {0, 0}, count[2] = {0, 0};
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (y[i] != label) continue;
      sum[a[i]] += scores[i];
      count[a[i]] += 1;
    }
    if (count[0] == 0 || count[1] == 0) continue;
    any = true;
    best = std::max(best, std::abs(sum[0] / count[0] - sum[1] / count[1]));
  }
  if (!any) fail(ErrorCode::kEmptyGroup, "soft_eo needs both groups within some label");
  return best;
}

LossValue savani_loss(std::span<const double> margins, const LabeledBatch& batch,
                      const LossSpec& spec) {
  LossValue out = task_loss(margins, batch.y);
  if (spec.lambda == 0.0) return out;
  const std::size_t n = margins.size();
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) scores[i] = sigmoid(margins[i]);
  const auto a = std::span<const int>(batch.a);
  const auto y = std::span<const int>(batch.y);
  const bool both = std::count(a.begin(), a.end(), 0) > 0 && std::count(a.begin(), a.end(), 1) > 0;
  if (!both) {
    out.surrogate_skipped = true;
    return out;
  }
  std::vector<double> score_grad(n, 0.0);
  if (spec.surrogate == Surrogate::kSoftDp) {
    out.surrogate = soft_dp(scores, a);
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    add_gap_gradient(scores, a, all, spec.lambda, score_grad);
  } else {
    // Gradient flows through the label cell attaining the max.
    int arg = -1;
    double best = -1.0;
    std::vector<std::size_t> cells[2];
    for (std::size_t i = 0; i < n; ++i) cells[y[i]].push_back(i);
    for (int label = 0; label < 2; ++label) {
      double sum[2] = {0, 0}, count[2] = {0, 0};
      for (std::size_t i : cells[label]) {
        sum[a[i]] += scores[i];
        count[a[i]] += 1;
      }
      if (count[0] == 0 || count[1] == 0) continue;
      const double gap = std::abs(sum[0] / count[0] - sum[1] / count[1]);
      if (gap > best) {
        best = gap;
        arg = label;
      }
    }
    if (arg < 0) {
      out.surrogate_skipped = true;
      return out;
    }
    out.surrogate = best;
    add_gap_gradient(scores, a, cells[arg], spec.lambda, score_grad);
  }
  out.loss += spec.lambda * out.surrogate;
  for (std::size_t i = 0; i < n; ++i) {
    out.margin_grad[i] += score_grad[i] * scores[i] * (1.0 - scores[i]);
  }
  return out;
}

TrainValSplit validation_split(std::span<const int> y, std::span<const int> a, double fraction,
                               std::uint64_t seed) {
  std::vector<std::size_t> cells[4];
  for (std::size_t i = 0; i < y.size(); ++i) cells[2 * y[i] + a[i]].push_back(i);
  TrainValSplit out;
  for (int c = 0; c < 4; ++c) {
    Rng rng(derive_seed(seed, "cell" + std::to_string(c)));
    rng.shuffle(cells[c]);
    const std::size_t size = cells[c].size();
    std::size_t k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(size)));
    if (size >= 2) k = std::clamp<std::size_t>(k, 1, size - 1);
    out.validation.insert(out.validation.end(), cells[c].begin(), cells[c].begin() + static_cast<std::ptrdiff_t>(k));
    out.train.insert(out.train.end(), cells[c].begin() + static_cast<std::ptrdiff_t>(k), cells[c].end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.validation.begin(), out.validation.end());
  return out;
}

FinetuneResult savani_finetune(const Model& model, const LabeledBatch& data, const LossSpec& spec,
                               const FinetuneBudget& budget) {
  if (spec.kind != LossKind::kSavaniJoint) {
    fail(ErrorCode::kInvalidArgument, "savani_finetune needs a savani_joint loss spec");
  }
  RunHooks hooks;
  hooks.loss = [&](std::span<const double> m, const LabeledBatch& b) { return savani_loss(m, b, spec); };
  return run_finetune(model, data, spec, budget, hooks);
}

std::vector<double> aclarc_alpha_schedule(const LossSpec& spec, const FinetuneBudget& budget,
                                          std::size_t train_size) {
  Rng rng(derive_seed(budget.seed, "aclarc-alpha"));
  std::vector<double> out(budget.max_epochs * train_size);
  for (double& alpha : out) alpha = rng.uniform(spec.alpha_lo, spec.alpha_hi);
  return out;
}

FinetuneResult aclarc_finetune(const Model& model, const LabeledBatch& data, const LossSpec& spec,
                               const FinetuneBudget& budget) {
  if (spec.kind != LossKind::kAclarcAug) {
    fail(ErrorCode::kInvalidArgument, "aclarc_finetune needs an aclarc_aug loss spec");
  }
  spec.validate();
  data.validate();
  const ConceptVector& cav = *spec.cav;
  const std::size_t block = model.layer_index(cav.layer.name);
  if (static_cast<std::size_t>(cav.direction.size()) != model.layer(cav.layer.name).dim) {
    fail(ErrorCode::kDimensionMismatch, "concept vector does not match its layer");
  }
  const auto split = validation_split(data.y, data.a, 0.2, derive_seed(budget.seed, "validation"));
  const auto alphas = aclarc_alpha_schedule(spec, budget, split.train.size());
  std::size_t cursor = 0;
  RunHooks hooks;
  hooks.loss = [](std::span<const double> m, const LabeledBatch& b) { return task_loss(m, b.y); };
  hooks.shift = [&](std::size_t n) {
    ActivationShift shift{block, Eigen::MatrixXd(static_cast<Eigen::Index>(n), cav.direction.size())};
    for (std::size_t i = 0; i < n; ++i) {
      shift.per_sample.row(static_cast<Eigen::Index>(i)) = alphas.at(cursor++) * cav.direction.transpose();
    }
    return std::optional<ActivationShift>(std::move(shift));
  };
  return run_finetune(model, data, spec, budget, hooks);
}

double concept_sensitivity(const Model& model, const LabeledBatch& data, const ConceptVector& cav,
                           double alpha) {
  const std::size_t block = model.layer_index(cav.layer.name);
  const auto base = model.predict_scores(data);
  constexpr std::size_t kChunk = 256;
  double total = 0.0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) rows.push_back(i);
    const LabeledBatch chunk = data.select(rows);
    ActivationShift shift{block, Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()),
                                                 cav.direction.size())};
    for (Eigen::Index i = 0; i < shift.per_sample.rows(); ++i) {
      shift.per_sample.row(i) = alpha * cav.direction.transpose();
    }
    ForwardOptions options;
    options.shift = &shift;
    const auto pass = model.forward(chunk.images, options);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      total += std::abs(sigmoid(pass.margin[i]) - base[rows[i]]);
    }
  }
  return total / static_cast<double>(data.size());
}

PerturbResult random_perturb_search(const Model& model, const LabeledBatch& data,
                                    const PerturbOptions& options) {
  if (options.trials < 1) fail(ErrorCode::kInvalidArgument, "trials must be at least 1");
  if (!(options.sigma >= 0.0)) fail(ErrorCode::kInvalidArgument, "sigma must be >= 0");
  data.validate();
  const auto split = validation_split(data.y, data.a, 0.2, derive_seed(options.seed, "validation"));
  const LabeledBatch val = data.select(split.validation);
  const Evaluation base = evaluate(model, val, options.criterion, options.eo_aggregation);

  PerturbResult result{model.clone(), -1, base.criterion, base.balanced_accuracy, base.criterion,
                       base.balanced_accuracy};
  for (std::size_t trial = 0; trial < options.trials; ++trial) {
    Model candidate = model.clone();
    Rng rng(derive_seed(options.seed, "trial" + std::to_string(trial)));
    for (auto& p : candidate.parameters()) {
      if (!candidate.in_scope(p.block, options.scope)) continue;
      Tensor& w = *p.tensor;
      double norm = 0.0;
      for (double v : w.values()) norm += v * v;
      const double scale = options.sigma * std::sqrt(norm / static_cast<double>(w.size()));
      for (double& v : w.values()) v += scale * rng.normal();
    }
    const Evaluation e = evaluate(candidate, val, options.criterion, options.eo_aggregation);
    const bool guarded =
        e.balanced_accuracy >= base.balanced_accuracy - options.accuracy_guard - kMetricTolerance;
    if (guarded && e.criterion < result.criterion - kMetricTolerance) {
      result.model = std::move(candidate);
      result.chosen_trial = static_cast<int>(trial);
      result.criterion = e.criterion;
      result.balanced_accuracy = e.balanced_accuracy;
    }
  }
  return result;
}

std::vector<double> train_classifier(Model& model, const LabeledBatch& data,
                                     const TrainOptions& options) {
  data.validate();
  model.set_mode(Mode::kFinetune);
  Optimizer adam(OptimizerKind::kAdam, options.lr);
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto batches = epoch_batches(data.size(), options.batch_size,
                                       derive_seed(options.seed, "train" + std::to_string(epoch)));
    double total = 0.0;
    for (const auto& rows : batches) {
      total += finetune_step(
          model, data.select(rows),
          [](std::span<const double> m, const LabeledBatch& b) { return task_loss(m, b.y); },
          TrainableScope::kAll, adam);
    }
    losses.push_back(total / static_cast<double>(batches.size()));
  }
  model.set_mode(Mode::kInference);
  return losses;
}

nlohmann::json epoch_log_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"task_loss", e.task_loss},
          {"surrogate", e.surrogate},
          {"val_task_loss", e.val_task_loss},
          {"val_criterion", e.val_criterion},
          {"skipped_surrogate_batches", e.skipped_surrogate_batches},
          {"selected", e.selected}};
}

void write_run_log(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines) {
  std::string text;
  for (const auto& l : lines) text += l.dump() + "\n";
  write_text_file(path, text);
}

}  // namespace detox
