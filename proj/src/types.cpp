#include "detox/types.hpp"

#include <cstring>

#include "detox/error.hpp"

namespace detox {

std::string_view eraser_kind_name(EraserKind kind) {
  switch (kind) {
    case EraserKind::kIdentity: return "identity";
    case EraserKind::kLeace: return "leace";
    case EraserKind::kPClarc: return "pclarc";
  }
  return "identity";
}

EraserKind parse_eraser_kind(std::string_view name) {
  if (name == "identity") return EraserKind::kIdentity;
  if (name == "leace") return EraserKind::kLeace;
  if (name == "pclarc") return EraserKind::kPClarc;
  fail(ErrorCode::kDecodeError, "unknown eraser kind '" + std::string(name) + "'");
}

AffineEraser AffineEraser::identity(const LayerId& layer) {
  const auto d = static_cast<Eigen::Index>(layer.dim);
  return AffineEraser{Eigen::MatrixXd::Identity(d, d), Eigen::VectorXd::Zero(d), layer,
                      EraserKind::kIdentity};
}

void LabeledBatch::validate() const {
  if (y.empty()) fail(ErrorCode::kEmptyBatch, "batch has no samples");
  if (a.size() != y.size()) {
    fail(ErrorCode::kDimensionMismatch, "label and attribute lengths differ");
  }
  if (images.rank() != 4 || images.dim(0) != y.size()) {
    fail(ErrorCode::kDimensionMismatch,
         "images must be (n, c, h, w) with n = " + std::to_string(y.size()) +
             ", got " + shape_string(images.shape()));
  }
  for (std::size_t i = 0; i < y.size(); ++i) {
    if ((y[i] != 0 && y[i] != 1) || (a[i] != 0 && a[i] != 1)) {
      fail(ErrorCode::kBadLabel, "sample " + std::to_string(i) + " is not binary");
    }
  }
  if (!images.all_finite()) fail(ErrorCode::kDecodeError, "non-finite pixel values");
}

LabeledBatch LabeledBatch::select(const std::vector<std::size_t>& rows) const {
  LabeledBatch out;
  auto shape = images.shape();
  const std::size_t stride = images.stride0();
  shape[0] = rows.size();
  std::vector<double> values(rows.size() * stride);
  out.y.reserve(rows.size());
  out.a.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= y.size()) fail(ErrorCode::kInvalidArgument, "row index out of range");
    std::memcpy(values.data() + i * stride, images.data() + r * stride,
                stride * sizeof(double));
    out.y.push_back(y[r]);
    out.a.push_back(a[r]);
  }
  out.images = Tensor(std::move(shape), std::move(values));
  return out;
}

LabeledBatch concat(const std::vector<LabeledBatch>& parts) {
  LabeledBatch out;
  if (parts.empty()) return out;
  auto shape = parts.front().images.shape();
  std::vector<double> values;
  std::size_t n = 0;
  for (const auto& p : parts) {
    auto s = p.images.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      fail(ErrorCode::kDimensionMismatch, "cannot concatenate batches of different image shape");
    }
    values.insert(values.end(), p.images.values().begin(), p.images.values().end());
    out.y.insert(out.y.end(), p.y.begin(), p.y.end());
    out.a.insert(out.a.end(), p.a.begin(), p.a.end());
    n += p.size();
  }
  shape[0] = n;
  out.images = Tensor(std::move(shape), std::move(values));
  return out;
}

}  // namespace detox
