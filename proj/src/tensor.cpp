#include "detox/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "detox/error.hpp"

namespace detox {

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_size(shape_)) {
    fail(ErrorCode::kDimensionMismatch,
         "tensor of shape " + shape_string(shape_) + " given " +
             std::to_string(data_.size()) + " values");
  }
}

std::size_t Tensor::stride0() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return data_.size() / shape_[0];
}

std::span<double> Tensor::slice(std::size_t i) {
  const std::size_t s = stride0();
  return std::span<double>(data_).subspan(i * s, s);
}

std::span<const double> Tensor::slice(std::size_t i) const {
  const std::size_t s = stride0();
  return std::span<const double>(data_).subspan(i * s, s);
}

void Tensor::reshape(std::vector<std::size_t> shape) {
  if (shape_size(shape) != data_.size()) {
    fail(ErrorCode::kDimensionMismatch,
         "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace detox
