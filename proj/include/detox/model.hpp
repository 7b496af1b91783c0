#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "detox/tensor.hpp"
#include "detox/types.hpp"

namespace detox {

// ---- primitive operations -------------------------------------------------

struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t padding = 1;
  Tensor weight;  // (out, in, kernel, kernel)
  Tensor bias;    // (out)
};

struct Linear {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  Tensor weight;  // (out, in)
  Tensor bias;    // (out)
};

struct Relu {};
struct Tanh {};
struct MaxPool2d { std::size_t size = 2; };
struct AvgPool2d { std::size_t size = 2; };
struct GlobalAvgPool {};
struct Flatten {};

using Op = std::variant<Conv2d, Linear, Relu, Tanh, MaxPool2d, AvgPool2d,
                        GlobalAvgPool, Flatten>;

std::string_view op_name(const Op& op);

// A named group of ops. Block outputs are the model's capture/edit points.
struct Block {
  std::string name;
  std::vector<Op> ops;
};

enum class Mode { kInference, kFinetune };

enum class TrainableScope { kHeadOnly, kLastBlock, kAll };

std::string_view scope_name(TrainableScope scope);
TrainableScope parse_scope(std::string_view name);

// ---- forward/backward plumbing --------------------------------------------

// Per-sample additive shift applied at one block output after installed
// edits (used for concept-direction augmentation during fine-tuning).
struct ActivationShift {
  std::size_t block = 0;
  Eigen::MatrixXd per_sample;  // n x dim
};

struct ForwardOptions {
  bool keep_trace = false;
  const ActivationShift* shift = nullptr;
  // Stop after this block; the margin is left empty.
  std::optional<std::size_t> stop_after_block;
};

struct BackwardOptions {
  bool need_input_grad = false;
  // Blocks below this index are not visited (their parameter gradients stay 0).
  std::size_t min_block = 0;
};

struct ForwardPass {
  // Positive-class margin per sample; score = sigmoid(margin).
  std::vector<double> margin;
  // Output of every block, after edits and shift.
  std::vector<Tensor> block_outputs;
  // Input of every op (only when keep_trace).
  std::vector<std::vector<Tensor>> op_inputs;
  // Block outputs before edits (only when keep_trace).
  std::vector<Tensor> pre_edit_outputs;
  std::size_t batch = 0;
};

struct Gradients {
  std::vector<Tensor> params;        // aligned with Model::parameters()
  Tensor input;                      // d(loss)/d(images)
  std::vector<Tensor> block_outputs; // d(loss)/d(block output after edits)
};

struct ParamRef {
  std::size_t block = 0;
  Tensor* tensor = nullptr;
};

struct ConstParamRef {
  std::size_t block = 0;
  const Tensor* tensor = nullptr;
};

// A feed-forward binary classifier: a chain of blocks whose last block is
// the head producing one logit (sigmoid) or two logits (softmax).
//
// Value type: copies are deep and fully independent, so clone() is a copy.
class Model {
 public:
  Model(std::string arch, std::vector<std::size_t> input_shape,
        std::vector<Block> blocks);

  const std::string& arch() const noexcept { return arch_; }
  const std::vector<std::size_t>& input_shape() const noexcept { return input_shape_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  std::size_t block_count() const noexcept { return blocks_.size(); }
  const std::vector<std::size_t>& block_output_shape(std::size_t block) const {
    return output_shapes_.at(block);
  }

  std::vector<LayerId> list_layers() const;
  std::size_t layer_index(std::string_view name) const;
  LayerId layer(std::string_view name) const;
  bool is_spatial(std::size_t block) const;
  // Last block of width > 1 ahead of the head.
  LayerId default_target_layer() const;

  const std::vector<AffineEraser>& edits() const noexcept { return edits_; }
  Model install_eraser(const AffineEraser& eraser) const;
  Model clone() const { return *this; }

  Mode mode() const noexcept { return mode_; }
  void set_mode(Mode mode) noexcept { mode_ = mode; }

  std::vector<double> predict_scores(const LabeledBatch& batch) const;
  std::vector<double> predict_scores(const Tensor& images) const;
  ActivationMatrix capture_activations(const LabeledBatch& batch,
                                       const LayerId& layer) const;

  ForwardPass forward(const Tensor& images, const ForwardOptions& options = {}) const;
  // `margin_grad` holds d(loss)/d(margin) per sample. Requires a traced pass.
  Gradients backward(const ForwardPass& pass, std::span<const double> margin_grad,
                     const BackwardOptions& options = {}) const;

  std::vector<ParamRef> parameters();
  std::vector<ConstParamRef> parameters() const;
  bool in_scope(std::size_t block, TrainableScope scope) const;
  std::size_t parameter_count() const;

  // SHA-256 over architecture, parameters and installed edits.
  std::string fingerprint() const;
  // SHA-256 over parameters only.
  std::string weight_hash() const;

 private:
  void check_input(const Tensor& images) const;

  std::string arch_;
  std::vector<std::size_t> input_shape_;
  std::vector<Block> blocks_;
  std::vector<std::vector<std::size_t>> output_shapes_;
  std::vector<AffineEraser> edits_;
  Mode mode_ = Mode::kInference;
};

double sigmoid(double x);

// ---- registry and checkpoints ---------------------------------------------

using ModelFactory = std::function<Model(const std::vector<std::size_t>& input_shape,
                                         std::string_view options, std::uint64_t seed)>;

// Architecture identifiers look like "family:CxHxW[:options]", e.g.
// "small_cnn:3x32x32" or "mlp:3x8x8:h16".
struct ArchSpec {
  std::string family;
  std::vector<std::size_t> input_shape;
  std::string options;
};

ArchSpec parse_arch(std::string_view arch_id);
void register_architecture(const std::string& family, ModelFactory factory);
std::vector<std::string> registered_architectures();
// Fresh, seeded initialization of a registered architecture.
Model make_model(std::string_view arch_id, std::uint64_t seed);

void save_model(const Model& model, const std::filesystem::path& path);
// The architecture id stored in the checkpoint must equal `arch_id`.
Model load_model(const std::filesystem::path& path, std::string_view arch_id);

}  // namespace detox
