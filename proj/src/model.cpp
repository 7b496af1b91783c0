#include "detox/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "detox/error.hpp"
#include "detox/util.hpp"

namespace detox {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;
using Idx = Eigen::Index;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

[[noreturn]] void unsupported(const std::string& where, const std::string& why) {
  fail(ErrorCode::kUnsupportedArchitecture, where + ": " + why);
}

std::vector<std::size_t> infer_shape(const Op& op, const std::vector<std::size_t>& in,
                                     const std::string& where) {
  const bool spatial = in.size() == 3;
  return std::visit(
      Overloaded{
          [&](const Conv2d& c) -> std::vector<std::size_t> {
            if (!spatial || in[0] != c.in_channels) {
              unsupported(where, "conv expects " + std::to_string(c.in_channels) +
                                     " input channels, got " + shape_string(in));
            }
            if (c.kernel == 0 || in[1] + 2 * c.padding < c.kernel ||
                in[2] + 2 * c.padding < c.kernel) {
              unsupported(where, "conv kernel larger than padded input");
            }
            if (c.weight.shape() !=
                    std::vector<std::size_t>{c.out_channels, c.in_channels, c.kernel, c.kernel} ||
                c.bias.shape() != std::vector<std::size_t>{c.out_channels}) {
              unsupported(where, "conv parameter shapes do not match its declaration");
            }
            return {c.out_channels, in[1] + 2 * c.padding - c.kernel + 1,
                    in[2] + 2 * c.padding - c.kernel + 1};
          },
          [&](const Linear& l) -> std::vector<std::size_t> {
            if (in.size() != 1 || in[0] != l.in_features) {
              unsupported(where, "linear expects width " + std::to_string(l.in_features) +
                                     ", got " + shape_string(in));
            }
            if (l.weight.shape() != std::vector<std::size_t>{l.out_features, l.in_features} ||
                l.bias.shape() != std::vector<std::size_t>{l.out_features}) {
              unsupported(where, "linear parameter shapes do not match its declaration");
            }
            return {l.out_features};
          },
          [&](const Relu&) { return in; },
          [&](const Tanh&) { return in; },
          [&](const MaxPool2d& p) -> std::vector<std::size_t> {
            if (!spatial || p.size == 0 || in[1] < p.size || in[2] < p.size) {
              unsupported(where, "pooling needs a feature map at least the window size");
            }
            return {in[0], in[1] / p.size, in[2] / p.size};
          },
          [&](const AvgPool2d& p) -> std::vector<std::size_t> {
            if (!spatial || p.size == 0 || in[1] < p.size || in[2] < p.size) {
              unsupported(where, "pooling needs a feature map at least the window size");
            }
            return {in[0], in[1] / p.size, in[2] / p.size};
          },
          [&](const GlobalAvgPool&) -> std::vector<std::size_t> {
            if (!spatial) unsupported(where, "global pooling needs a feature map");
            return {in[0]};
          },
          [&](const Flatten&) -> std::vector<std::size_t> { return {shape_size(in)}; },
      },
      op);
}

// (C*k*k, Ho*Wo) patch matrix of one sample.
void im2col(const double* img, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t k, std::size_t pad, std::size_t ho, std::size_t wo, double* cols) {
  const std::size_t plane = ho * wo;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = cols + ((c * k + ki) * k + kj) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy + ki) - static_cast<long>(pad);
          double* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = img + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox + kj) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? 0.0
                                                             : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t k, std::size_t pad, std::size_t ho, std::size_t wo, double* img) {
  const std::size_t plane = ho * wo;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = cols + ((c * k + ki) * k + kj) * plane;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          double* dst = img + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox + kj) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) {
              dst[static_cast<std::size_t>(ix)] += row[oy * wo + ox];
            }
          }
        }
      }
    }
  }
}

Tensor conv_forward(const Conv2d& c, const Tensor& in) {
  const std::size_t n = in.dim(0), h = in.dim(2), w = in.dim(3);
  const std::size_t ho = h + 2 * c.padding - c.kernel + 1;
  const std::size_t wo = w + 2 * c.padding - c.kernel + 1;
  const std::size_t patch = c.in_channels * c.kernel * c.kernel;
  Tensor out({n, c.out_channels, ho, wo});
  std::vector<double> cols(patch * ho * wo);
  ConstRowMap weight(c.weight.data(), static_cast<Idx>(c.out_channels), static_cast<Idx>(patch));
  Eigen::Map<const Eigen::VectorXd> bias(c.bias.data(), static_cast<Idx>(c.out_channels));
  for (std::size_t s = 0; s < n; ++s) {
    im2col(in.slice(s).data(), c.in_channels, h, w, c.kernel, c.padding, ho, wo, cols.data());
    ConstRowMap patches(cols.data(), static_cast<Idx>(patch), static_cast<Idx>(ho * wo));
    RowMap dst(out.slice(s).data(), static_cast<Idx>(c.out_channels), static_cast<Idx>(ho * wo));
    dst.noalias() = weight * patches;
    dst.colwise() += bias;
  }
  return out;
}

Tensor conv_backward(const Conv2d& c, const Tensor& in, const Tensor& gout, Tensor& gweight,
                     Tensor& gbias, bool need_input) {
  const std::size_t n = in.dim(0), h = in.dim(2), w = in.dim(3);
  const std::size_t ho = gout.dim(2), wo = gout.dim(3);
  const std::size_t patch = c.in_channels * c.kernel * c.kernel;
  std::vector<double> cols(patch * ho * wo);
  std::vector<double> gcols(need_input ? patch * ho * wo : 0);
  ConstRowMap weight(c.weight.data(), static_cast<Idx>(c.out_channels), static_cast<Idx>(patch));
  RowMap gw(gweight.data(), static_cast<Idx>(c.out_channels), static_cast<Idx>(patch));
  Eigen::Map<Eigen::VectorXd> gb(gbias.data(), static_cast<Idx>(c.out_channels));
  Tensor gin;
  if (need_input) gin = Tensor(in.shape());
  for (std::size_t s = 0; s < n; ++s) {
    im2col(in.slice(s).data(), c.in_channels, h, w, c.kernel, c.padding, ho, wo, cols.data());
    ConstRowMap patches(cols.data(), static_cast<Idx>(patch), static_cast<Idx>(ho * wo));
    ConstRowMap g(gout.slice(s).data(), static_cast<Idx>(c.out_channels),
                  static_cast<Idx>(ho * wo));
    gw.noalias() += g * patches.transpose();
    gb += g.rowwise().sum();
    if (need_input) {
      RowMap gc(gcols.data(), static_cast<Idx>(patch), static_cast<Idx>(ho * wo));
      gc.noalias() = weight.transpose() * g;
      col2im(gcols.data(), c.in_channels, h, w, c.kernel, c.padding, ho, wo,
             gin.slice(s).data());
    }
  }
  return gin;
}

Tensor linear_forward(const Linear& l, const Tensor& in) {
  const std::size_t n = in.dim(0);
  Tensor out({n, l.out_features});
  ConstRowMap x(in.data(), static_cast<Idx>(n), static_cast<Idx>(l.in_features));
  ConstRowMap weight(l.weight.data(), static_cast<Idx>(l.out_features),
                     static_cast<Idx>(l.in_features));
  Eigen::Map<const Eigen::RowVectorXd> bias(l.bias.data(), static_cast<Idx>(l.out_features));
  RowMap dst(out.data(), static_cast<Idx>(n), static_cast<Idx>(l.out_features));
  dst.noalias() = x * weight.transpose();
  dst.rowwise() += bias;
  return out;
}

Tensor linear_backward(const Linear& l, const Tensor& in, const Tensor& gout, Tensor& gweight,
                       Tensor& gbias, bool need_input) {
  const std::size_t n = in.dim(0);
  ConstRowMap x(in.data(), static_cast<Idx>(n), static_cast<Idx>(l.in_features));
  ConstRowMap g(gout.data(), static_cast<Idx>(n), static_cast<Idx>(l.out_features));
  ConstRowMap weight(l.weight.data(), static_cast<Idx>(l.out_features),
                     static_cast<Idx>(l.in_features));
  RowMap gw(gweight.data(), static_cast<Idx>(l.out_features), static_cast<Idx>(l.in_features));
  Eigen::Map<Eigen::RowVectorXd> gb(gbias.data(), static_cast<Idx>(l.out_features));
  gw.noalias() += g.transpose() * x;
  gb += g.colwise().sum();
  Tensor gin;
  if (need_input) {
    gin = Tensor(in.shape());
    RowMap gi(gin.data(), static_cast<Idx>(n), static_cast<Idx>(l.in_features));
    gi.noalias() = g * weight;
  }
  return gin;
}

template <bool kMax>
Tensor pool_forward(std::size_t size, const Tensor& in) {
  const std::size_t n = in.dim(0), ch = in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::size_t ho = h / size, wo = w / size;
  Tensor out({n, ch, ho, wo});
  const double inv = 1.0 / static_cast<double>(size * size);
  for (std::size_t p = 0; p < n * ch; ++p) {
    const double* src = in.data() + p * h * w;
    double* dst = out.data() + p * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = kMax ? src[(oy * size) * w + ox * size] : 0.0;
        for (std::size_t dy = 0; dy < size; ++dy) {
          for (std::size_t dx = 0; dx < size; ++dx) {
            const double v = src[(oy * size + dy) * w + ox * size + dx];
            if constexpr (kMax) {
              acc = std::max(acc, v);
            } else {
              acc += v;
            }
          }
        }
        dst[oy * wo + ox] = kMax ? acc : acc * inv;
      }
    }
  }
  return out;
}

template <bool kMax>
Tensor pool_backward(std::size_t size, const Tensor& in, const Tensor& gout) {
  const std::size_t n = in.dim(0), ch = in.dim(1), h = in.dim(2), w = in.dim(3);
  const std::size_t ho = h / size, wo = w / size;
  Tensor gin(in.shape());
  const double inv = 1.0 / static_cast<double>(size * size);
  for (std::size_t p = 0; p < n * ch; ++p) {
    const double* src = in.data() + p * h * w;
    const double* g = gout.data() + p * ho * wo;
    double* dst = gin.data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        if constexpr (kMax) {
          // Gradient goes to the first maximal element of the window.
          std::size_t best = (oy * size) * w + ox * size;
          for (std::size_t dy = 0; dy < size; ++dy) {
            for (std::size_t dx = 0; dx < size; ++dx) {
              const std::size_t at = (oy * size + dy) * w + ox * size + dx;
              if (src[at] > src[best]) best = at;
            }
          }
          dst[best] += g[oy * wo + ox];
        } else {
          for (std::size_t dy = 0; dy < size; ++dy) {
            for (std::size_t dx = 0; dx < size; ++dx) {
              dst[(oy * size + dy) * w + ox * size + dx] += g[oy * wo + ox] * inv;
            }
          }
        }
      }
    }
  }
  return gin;
}

Tensor op_forward(const Op& op, const Tensor& in) {
  return std::visit(
      Overloaded{
          [&](const Conv2d& c) { return conv_forward(c, in); },
          [&](const Linear& l) { return linear_forward(l, in); },
          [&](const Relu&) {
            Tensor out = in;
            for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
            return out;
          },
          [&](const Tanh&) {
            Tensor out = in;
            for (double& v : out.values()) v = std::tanh(v);
            return out;
          },
          [&](const MaxPool2d& p) { return pool_forward<true>(p.size, in); },
          [&](const AvgPool2d& p) { return pool_forward<false>(p.size, in); },
          [&](const GlobalAvgPool&) {
            const std::size_t n = in.dim(0), ch = in.dim(1);
            const std::size_t plane = in.dim(2) * in.dim(3);
            Tensor out({n, ch});
            for (std::size_t p = 0; p < n * ch; ++p) {
              const double* src = in.data() + p * plane;
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += src[i];
              out[p] = acc / static_cast<double>(plane);
            }
            return out;
          },
          [&](const Flatten&) {
            Tensor out = in;
            out.reshape({in.dim(0), in.stride0()});
            return out;
          },
      },
      op);
}

Tensor op_backward(const Op& op, const Tensor& in, const Tensor& gout, Tensor* gweight,
                   Tensor* gbias, bool need_input) {
  return std::visit(
      Overloaded{
          [&](const Conv2d& c) {
            return conv_backward(c, in, gout, *gweight, *gbias, need_input);
          },
          [&](const Linear& l) {
            return linear_backward(l, in, gout, *gweight, *gbias, need_input);
          },
          [&](const Relu&) {
            Tensor gin = gout;
            for (std::size_t i = 0; i < gin.size(); ++i) {
              if (!(in[i] > 0.0)) gin[i] = 0.0;
            }
            return gin;
          },
          [&](const Tanh&) {
            Tensor gin = gout;
            for (std::size_t i = 0; i < gin.size(); ++i) {
              const double t = std::tanh(in[i]);
              gin[i] *= 1.0 - t * t;
            }
            return gin;
          },
          [&](const MaxPool2d& p) { return pool_backward<true>(p.size, in, gout); },
          [&](const AvgPool2d& p) { return pool_backward<false>(p.size, in, gout); },
          [&](const GlobalAvgPool&) {
            Tensor gin(in.shape());
            const std::size_t plane = in.dim(2) * in.dim(3);
            const double inv = 1.0 / static_cast<double>(plane);
            for (std::size_t p = 0; p < gout.size(); ++p) {
              double* dst = gin.data() + p * plane;
              for (std::size_t i = 0; i < plane; ++i) dst[i] = gout[p] * inv;
            }
            return gin;
          },
          [&](const Flatten&) {
            Tensor gin = gout;
            gin.reshape(in.shape());
            return gin;
          },
      },
      op);
}

// Feature maps are edited per location on the channel vector.
void apply_affine(const Eigen::MatrixXd& matrix, const Eigen::VectorXd& bias, Tensor& x) {
  const std::size_t n = x.dim(0);
  const auto d = static_cast<Idx>(x.dim(1));
  if (x.rank() == 4) {
    const auto plane = static_cast<Idx>(x.dim(2) * x.dim(3));
    RowMat tmp(d, plane);
    for (std::size_t s = 0; s < n; ++s) {
      RowMap m(x.slice(s).data(), d, plane);
      tmp.noalias() = matrix * m;
      tmp.colwise() += bias;
      m = tmp;
    }
  } else {
    RowMap m(x.data(), static_cast<Idx>(n), d);
    RowMat tmp = m * matrix.transpose();
    tmp.rowwise() += bias.transpose();
    m = tmp;
  }
}

void affine_backward(const Eigen::MatrixXd& matrix, Tensor& g) {
  const std::size_t n = g.dim(0);
  const auto d = static_cast<Idx>(g.dim(1));
  if (g.rank() == 4) {
    const auto plane = static_cast<Idx>(g.dim(2) * g.dim(3));
    RowMat tmp(d, plane);
    for (std::size_t s = 0; s < n; ++s) {
      RowMap m(g.slice(s).data(), d, plane);
      tmp.noalias() = matrix.transpose() * m;
      m = tmp;
    }
  } else {
    RowMap m(g.data(), static_cast<Idx>(n), d);
    RowMat tmp = m * matrix;
    m = tmp;
  }
}

void apply_shift(const Eigen::MatrixXd& shift, Tensor& x) {
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (std::size_t s = 0; s < n; ++s) {
    double* dst = x.slice(s).data();
    for (std::size_t c = 0; c < d; ++c) {
      const double v = shift(static_cast<Idx>(s), static_cast<Idx>(c));
      for (std::size_t i = 0; i < plane; ++i) dst[c * plane + i] += v;
    }
  }
}

bool has_params(const Op& op) {
  return std::holds_alternative<Conv2d>(op) || std::holds_alternative<Linear>(op);
}

}  // namespace

std::string_view op_name(const Op& op) {
  return std::visit(Overloaded{
                        [](const Conv2d&) { return std::string_view("conv2d"); },
                        [](const Linear&) { return std::string_view("linear"); },
                        [](const Relu&) { return std::string_view("relu"); },
                        [](const Tanh&) { return std::string_view("tanh"); },
                        [](const MaxPool2d&) { return std::string_view("maxpool2d"); },
                        [](const AvgPool2d&) { return std::string_view("avgpool2d"); },
                        [](const GlobalAvgPool&) { return std::string_view("global_avgpool"); },
                        [](const Flatten&) { return std::string_view("flatten"); },
                    },
                    op);
}

std::string_view scope_name(TrainableScope scope) {
  switch (scope) {
    case TrainableScope::kHeadOnly: return "head_only";
    case TrainableScope::kLastBlock: return "last_block";
    case TrainableScope::kAll: return "all";
  }
  return "last_block";
}

TrainableScope parse_scope(std::string_view name) {
  if (name == "head_only") return TrainableScope::kHeadOnly;
  if (name == "last_block") return TrainableScope::kLastBlock;
  if (name == "all") return TrainableScope::kAll;
  fail(ErrorCode::kConfigError, "unknown trainable scope '" + std::string(name) + "'");
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Model::Model(std::string arch, std::vector<std::size_t> input_shape, std::vector<Block> blocks)
    : arch_(std::move(arch)), input_shape_(std::move(input_shape)), blocks_(std::move(blocks)) {
  if (input_shape_.size() != 3 || shape_size(input_shape_) == 0) {
    unsupported(arch_, "input shape must be (channels, height, width)");
  }
  if (blocks_.empty()) unsupported(arch_, "model has no blocks");
  std::set<std::string> names;
  std::vector<std::size_t> shape = input_shape_;
  for (const auto& block : blocks_) {
    if (block.name.empty() || !names.insert(block.name).second) {
      unsupported(arch_, "block names must be unique and non-empty ('" + block.name + "')");
    }
    if (block.ops.empty()) unsupported(arch_, "block '" + block.name + "' has no ops");
    for (const auto& op : block.ops) shape = infer_shape(op, shape, arch_ + "/" + block.name);
    if (shape.size() != 1 && shape.size() != 3) {
      unsupported(arch_, "block '" + block.name + "' output is neither a vector nor a map");
    }
    output_shapes_.push_back(shape);
  }
  if (shape.size() != 1 || (shape[0] != 1 && shape[0] != 2)) {
    unsupported(arch_, "head must produce one or two logits, got " + shape_string(shape));
  }
}

std::vector<LayerId> Model::list_layers() const {
  std::vector<LayerId> out;
  out.reserve(blocks_.size());
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    out.push_back(LayerId{blocks_[b].name, output_shapes_[b][0]});
  }
  return out;
}

std::size_t Model::layer_index(std::string_view name) const {
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (blocks_[b].name == name) return b;
  }
  fail(ErrorCode::kUnknownLayer, "no layer named '" + std::string(name) + "' in " + arch_);
}

LayerId Model::layer(std::string_view name) const {
  const std::size_t b = layer_index(name);
  return LayerId{blocks_[b].name, output_shapes_[b][0]};
}

bool Model::is_spatial(std::size_t block) const {
  const auto& s = output_shapes_.at(block);
  return s.size() == 3 && s[1] * s[2] > 1;
}

LayerId Model::default_target_layer() const {
  for (std::size_t b = blocks_.size() - 1; b-- > 0;) {
    if (output_shapes_[b][0] > 1) return LayerId{blocks_[b].name, output_shapes_[b][0]};
  }
  fail(ErrorCode::kUnknownLayer, arch_ + " has no hidden layer of width > 1");
}

Model Model::install_eraser(const AffineEraser& eraser) const {
  const std::size_t b = layer_index(eraser.layer.name);
  const auto d = static_cast<Idx>(output_shapes_[b][0]);
  if (eraser.matrix.rows() != d || eraser.matrix.cols() != d || eraser.bias.size() != d) {
    fail(ErrorCode::kDimensionMismatch,
         "eraser for '" + eraser.layer.name + "' must be " + std::to_string(d) + "x" +
             std::to_string(d) + " with bias " + std::to_string(d));
  }
  if (!eraser.matrix.allFinite() || !eraser.bias.allFinite()) {
    fail(ErrorCode::kInvalidArgument, "eraser has non-finite entries");
  }
  Model edited = *this;
  AffineEraser stored = eraser;
  stored.layer.dim = static_cast<std::size_t>(d);
  edited.edits_.push_back(std::move(stored));
  return edited;
}

void Model::check_input(const Tensor& images) const {
  if (images.rank() == 0 || images.dim(0) == 0) fail(ErrorCode::kEmptyBatch, "no samples");
  if (images.rank() != 4 || !std::equal(input_shape_.begin(), input_shape_.end(),
                                        images.shape().begin() + 1)) {
    fail(ErrorCode::kDimensionMismatch, arch_ + " expects images of shape (n, " +
                                            shape_string(input_shape_).substr(1) + ", got " +
                                            shape_string(images.shape()));
  }
}

ForwardPass Model::forward(const Tensor& images, const ForwardOptions& options) const {
  check_input(images);
  const std::size_t n = images.dim(0);
  const std::size_t last = std::min(options.stop_after_block.value_or(blocks_.size() - 1),
                                    blocks_.size() - 1);
  if (options.shift != nullptr) {
    const auto& s = *options.shift;
    if (s.block >= blocks_.size() || s.per_sample.rows() != static_cast<Idx>(n) ||
        s.per_sample.cols() != static_cast<Idx>(output_shapes_[s.block][0])) {
      fail(ErrorCode::kDimensionMismatch, "activation shift does not match the batch/layer");
    }
  }
  std::vector<std::vector<const AffineEraser*>> edits_at(blocks_.size());
  for (const auto& e : edits_) edits_at[layer_index(e.layer.name)].push_back(&e);

  ForwardPass pass;
  pass.batch = n;
  Tensor x = images;
  for (std::size_t b = 0; b <= last; ++b) {
    if (options.keep_trace) pass.op_inputs.emplace_back();
    for (const auto& op : blocks_[b].ops) {
      if (options.keep_trace) pass.op_inputs.back().push_back(x);
      x = op_forward(op, x);
    }
    if (options.keep_trace) pass.pre_edit_outputs.push_back(x);
    for (const AffineEraser* e : edits_at[b]) apply_affine(e->matrix, e->bias, x);
    if (options.shift != nullptr && options.shift->block == b) {
      apply_shift(options.shift->per_sample, x);
    }
    pass.block_outputs.push_back(x);
  }
  if (last == blocks_.size() - 1) {
    pass.margin.resize(n);
    const std::size_t k = x.dim(1);
    for (std::size_t s = 0; s < n; ++s) {
      pass.margin[s] = k == 1 ? x[s] : x[2 * s + 1] - x[2 * s];
    }
  }
  return pass;
}

Gradients Model::backward(const ForwardPass& pass, std::span<const double> margin_grad,
                          const BackwardOptions& options) const {
  if (pass.op_inputs.size() != blocks_.size() || pass.margin.empty()) {
    fail(ErrorCode::kInvalidState, "backward needs a full traced forward pass");
  }
  if (margin_grad.size() != pass.batch) {
    fail(ErrorCode::kDimensionMismatch, "margin gradient length differs from batch");
  }
  if (options.need_input_grad && options.min_block != 0) {
    fail(ErrorCode::kInvalidArgument, "input gradient requires min_block = 0");
  }
  std::vector<std::vector<const AffineEraser*>> edits_at(blocks_.size());
  for (const auto& e : edits_) edits_at[layer_index(e.layer.name)].push_back(&e);

  Gradients grads;
  std::vector<std::size_t> first_param(blocks_.size() + 1, 0);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    first_param[b + 1] = first_param[b];
    for (const auto& op : blocks_[b].ops) {
      std::visit(Overloaded{
                     [&](const Conv2d& c) {
                       grads.params.emplace_back(c.weight.shape());
                       grads.params.emplace_back(c.bias.shape());
                     },
                     [&](const Linear& l) {
                       grads.params.emplace_back(l.weight.shape());
                       grads.params.emplace_back(l.bias.shape());
                     },
                     [](const auto&) {},
                 },
                 op);
      if (has_params(op)) first_param[b + 1] += 2;
    }
  }
  grads.block_outputs.resize(blocks_.size());

  const std::size_t n = pass.batch;
  const std::size_t k = output_shapes_.back()[0];
  Tensor g({n, k});
  for (std::size_t s = 0; s < n; ++s) {
    if (k == 1) {
      g[s] = margin_grad[s];
    } else {
      g[2 * s] = -margin_grad[s];
      g[2 * s + 1] = margin_grad[s];
    }
  }
  for (std::size_t b = blocks_.size(); b-- > options.min_block;) {
    grads.block_outputs[b] = g;
    for (auto it = edits_at[b].rbegin(); it != edits_at[b].rend(); ++it) {
      affine_backward((*it)->matrix, g);
    }
    std::size_t param = first_param[b + 1];
    const auto& ops = blocks_[b].ops;
    for (std::size_t i = ops.size(); i-- > 0;) {
      Tensor* gw = nullptr;
      Tensor* gb = nullptr;
      if (has_params(ops[i])) {
        param -= 2;
        gw = &grads.params[param];
        gb = &grads.params[param + 1];
      }
      const bool need_input =
          i > 0 || b > options.min_block || options.need_input_grad;
      g = op_backward(ops[i], pass.op_inputs[b][i], g, gw, gb, need_input);
    }
  }
  if (options.need_input_grad) grads.input = std::move(g);
  return grads;
}

std::vector<double> Model::predict_scores(const LabeledBatch& batch) const {
  if (batch.empty()) fail(ErrorCode::kEmptyBatch, "predict_scores on an empty batch");
  return predict_scores(batch.images);
}

std::vector<double> Model::predict_scores(const Tensor& images) const {
  check_input(images);
  const std::size_t n = images.dim(0);
  constexpr std::size_t kChunk = 256;
  std::vector<double> scores;
  scores.reserve(n);
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t count = std::min(kChunk, n - start);
    Tensor chunk;
    if (count == n) {
      chunk = images;
    } else {
      auto shape = images.shape();
      shape[0] = count;
      const std::size_t stride = images.stride0();
      chunk = Tensor(shape, std::vector<double>(images.data() + start * stride,
                                                images.data() + (start + count) * stride));
    }
    const auto pass = forward(chunk);
    for (double m : pass.margin) scores.push_back(sigmoid(m));
  }
  return scores;
}

ActivationMatrix Model::capture_activations(const LabeledBatch& batch,
                                            const LayerId& layer) const {
  if (batch.empty()) fail(ErrorCode::kEmptyBatch, "capture_activations on an empty batch");
  const std::size_t b = layer_index(layer.name);
  const std::size_t n = batch.size();
  const std::size_t d = output_shapes_[b][0];
  ActivationMatrix out{Eigen::MatrixXd(static_cast<Idx>(n), static_cast<Idx>(d)),
                       LayerId{blocks_[b].name, d}};
  ForwardOptions options;
  options.stop_after_block = b;
  const auto pass = forward(batch.images, options);
  const Tensor& act = pass.block_outputs[b];
  const std::size_t plane = act.rank() == 4 ? act.dim(2) * act.dim(3) : 1;
  for (std::size_t s = 0; s < n; ++s) {
    const double* src = act.slice(s).data();
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += src[c * plane + i];
      out.values(static_cast<Idx>(s), static_cast<Idx>(c)) = acc / static_cast<double>(plane);
    }
  }
  return out;
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (auto& op : blocks_[b].ops) {
      if (auto* c = std::get_if<Conv2d>(&op)) {
        out.push_back({b, &c->weight});
        out.push_back({b, &c->bias});
      } else if (auto* l = std::get_if<Linear>(&op)) {
        out.push_back({b, &l->weight});
        out.push_back({b, &l->bias});
      }
    }
  }
  return out;
}

std::vector<ConstParamRef> Model::parameters() const {
  std::vector<ConstParamRef> out;
  for (auto& p : const_cast<Model*>(this)->parameters()) out.push_back({p.block, p.tensor});
  return out;
}

bool Model::in_scope(std::size_t block, TrainableScope scope) const {
  const std::size_t head = blocks_.size() - 1;
  switch (scope) {
    case TrainableScope::kHeadOnly: return block == head;
    case TrainableScope::kLastBlock: return block + 1 >= head;
    case TrainableScope::kAll: return true;
  }
  return false;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p.tensor->size();
  return total;
}

std::string Model::weight_hash() const {
  Hasher h;
  for (const auto& p : parameters()) h.update(p.tensor->values());
  return h.hex();
}

std::string Model::fingerprint() const {
  Hasher h;
  h.update(arch_);
  for (const auto& block : blocks_) {
    h.update(block.name);
    for (const auto& op : block.ops) h.update(op_name(op));
  }
  for (const auto& p : parameters()) h.update(p.tensor->values());
  for (const auto& e : edits_) {
    h.update(e.layer.name);
    h.update(eraser_kind_name(e.kind));
    h.update(std::span<const double>(e.matrix.data(), static_cast<std::size_t>(e.matrix.size())));
    h.update(std::span<const double>(e.bias.data(), static_cast<std::size_t>(e.bias.size())));
  }
  return h.hex();
}

// ---- registry ----------------------------------------------------------------

namespace {

Conv2d make_conv(std::size_t in, std::size_t out, Rng& rng, double gain) {
  Conv2d c{in, out, 3, 1, Tensor({out, in, 3, 3}), Tensor({out})};
  const double scale = std::sqrt(gain / static_cast<double>(in * 9));
  for (double& v : c.weight.values()) v = scale * rng.normal();
  return c;
}

Linear make_linear(std::size_t in, std::size_t out, Rng& rng, double gain) {
  Linear l{in, out, Tensor({out, in}), Tensor({out})};
  const double scale = std::sqrt(gain / static_cast<double>(in));
  for (double& v : l.weight.values()) v = scale * rng.normal();
  return l;
}

std::string canonical_id(const std::string& family, const std::vector<std::size_t>& shape,
                         std::string_view options) {
  std::string id = family + ":" + std::to_string(shape[0]) + "x" + std::to_string(shape[1]) +
                   "x" + std::to_string(shape[2]);
  if (!options.empty()) id += ":" + std::string(options);
  return id;
}

Model build_small_cnn(const std::vector<std::size_t>& shape, std::string_view options,
                      std::uint64_t seed) {
  if (!options.empty()) unsupported("small_cnn", "takes no options");
  Rng rng(seed);
  const std::size_t widths[] = {8, 16, 32, 32};
  std::vector<Block> blocks;
  std::size_t in = shape[0];
  for (std::size_t i = 0; i < 4; ++i) {
    blocks.push_back(Block{"block" + std::to_string(i + 1),
                           {make_conv(in, widths[i], rng, 2.0), Relu{}, MaxPool2d{2}}});
    in = widths[i];
  }
  blocks.push_back(Block{"head", {GlobalAvgPool{}, make_linear(in, 1, rng, 1.0)}});
  return Model(canonical_id("small_cnn", shape, options), shape, std::move(blocks));
}

Model build_smooth_cnn(const std::vector<std::size_t>& shape, std::string_view options,
                       std::uint64_t seed) {
  if (!options.empty()) unsupported("smooth_cnn", "takes no options");
  Rng rng(seed);
  std::vector<Block> blocks;
  blocks.push_back(Block{"conv1", {make_conv(shape[0], 4, rng, 1.0), Tanh{}, AvgPool2d{2}}});
  blocks.push_back(Block{"conv2", {make_conv(4, 6, rng, 1.0), Tanh{}}});
  blocks.push_back(Block{"head", {GlobalAvgPool{}, make_linear(6, 1, rng, 1.0)}});
  return Model(canonical_id("smooth_cnn", shape, options), shape, std::move(blocks));
}

Model build_mlp(const std::vector<std::size_t>& shape, std::string_view options,
                std::uint64_t seed) {
  std::size_t hidden = 8;
  if (!options.empty()) {
    if (options.front() != 'h' || options.size() < 2) unsupported("mlp", "options are h<width>");
    hidden = std::stoul(std::string(options.substr(1)));
    if (hidden == 0) unsupported("mlp", "hidden width must be positive");
  }
  Rng rng(seed);
  std::vector<Block> blocks;
  blocks.push_back(Block{"fc1", {Flatten{}, make_linear(shape_size(shape), hidden, rng, 1.0),
                                 Tanh{}}});
  blocks.push_back(Block{"fc2", {make_linear(hidden, 1, rng, 1.0)}});
  return Model(canonical_id("mlp", shape, options), shape, std::move(blocks));
}

Model build_logistic(const std::vector<std::size_t>& shape, std::string_view options,
                     std::uint64_t seed) {
  if (!options.empty()) unsupported("logistic", "takes no options");
  Rng rng(seed);
  std::vector<Block> blocks;
  blocks.push_back(Block{"fc", {Flatten{}, make_linear(shape_size(shape), 1, rng, 1.0)}});
  return Model(canonical_id("logistic", shape, options), shape, std::move(blocks));
}

struct Registry {
  std::mutex mutex;
  std::map<std::string, ModelFactory> factories{
      {"small_cnn", build_small_cnn},
      {"smooth_cnn", build_smooth_cnn},
      {"mlp", build_mlp},
      {"logistic", build_logistic},
  };
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

ArchSpec parse_arch(std::string_view arch_id) {
  ArchSpec spec;
  const auto first = arch_id.find(':');
  if (first == std::string_view::npos || first == 0) {
    unsupported(std::string(arch_id), "expected family:CxHxW[:options]");
  }
  spec.family = std::string(arch_id.substr(0, first));
  std::string_view rest = arch_id.substr(first + 1);
  const auto second = rest.find(':');
  std::string_view dims = rest.substr(0, second);
  if (second != std::string_view::npos) spec.options = std::string(rest.substr(second + 1));
  std::size_t start = 0;
  while (start <= dims.size()) {
    const auto x = dims.find('x', start);
    const auto token = dims.substr(start, x == std::string_view::npos ? dims.npos : x - start);
    if (token.empty() || token.find_first_not_of("0123456789") != std::string_view::npos) {
      unsupported(std::string(arch_id), "malformed input shape '" + std::string(dims) + "'");
    }
    spec.input_shape.push_back(std::stoul(std::string(token)));
    if (x == std::string_view::npos) break;
    start = x + 1;
  }
  if (spec.input_shape.size() != 3 || shape_size(spec.input_shape) == 0) {
    unsupported(std::string(arch_id), "input shape must be CxHxW");
  }
  return spec;
}

void register_architecture(const std::string& family, ModelFactory factory) {
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  r.factories[family] = std::move(factory);
}

std::vector<std::string> registered_architectures() {
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  std::vector<std::string> out;
  for (const auto& [name, _] : r.factories) out.push_back(name);
  return out;
}

Model make_model(std::string_view arch_id, std::uint64_t seed) {
  const ArchSpec spec = parse_arch(arch_id);
  ModelFactory factory;
  {
    auto& r = registry();
    std::lock_guard lock(r.mutex);
    const auto it = r.factories.find(spec.family);
    if (it == r.factories.end()) {
      unsupported(std::string(arch_id), "no registered architecture '" + spec.family + "'");
    }
    factory = it->second;
  }
  return factory(spec.input_shape, spec.options, seed);
}

}  // namespace detox
