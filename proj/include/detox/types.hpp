#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "detox/tensor.hpp"

namespace detox {

// A capture/edit point in a model: the output of one named block.
struct LayerId {
  std::string name;
  std::size_t dim = 0;  // flattened width, or channel count for feature maps

  friend bool operator==(const LayerId&, const LayerId&) = default;
};

// One row per sample. Feature maps are average-pooled over space.
struct ActivationMatrix {
  Eigen::MatrixXd values;
  LayerId layer;
};

enum class EraserKind { kIdentity, kLeace, kPClarc };

std::string_view eraser_kind_name(EraserKind kind);
EraserKind parse_eraser_kind(std::string_view name);

// x <- matrix * x + bias at `layer`; feature maps are edited per spatial
// location on the channel vector.
struct AffineEraser {
  Eigen::MatrixXd matrix;
  Eigen::VectorXd bias;
  LayerId layer;
  EraserKind kind = EraserKind::kIdentity;

  static AffineEraser identity(const LayerId& layer);
};

// Images are (n, channels, height, width) in [0, 1]; y and a are binary.
struct LabeledBatch {
  Tensor images;
  std::vector<int> y;
  std::vector<int> a;

  std::size_t size() const noexcept { return y.size(); }
  bool empty() const noexcept { return y.empty(); }
  // Throws if lengths disagree, labels are not binary or pixels are not finite.
  void validate() const;
  LabeledBatch select(const std::vector<std::size_t>& rows) const;
};

LabeledBatch concat(const std::vector<LabeledBatch>& parts);

}  // namespace detox
