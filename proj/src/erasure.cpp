#include "detox/erasure.hpp"

#include <algorithm>
#include <cmath>

#include "detox/error.hpp"
#include "detox/util.hpp"

namespace detox {
namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct GroupCounts {
  std::size_t n0 = 0;
  std::size_t n1 = 0;
};

GroupCounts count_groups(const MatrixXd& x, std::span<const int> z) {
  if (static_cast<std::size_t>(x.rows()) != z.size()) {
    fail(ErrorCode::kDimensionMismatch, "activation rows and attribute length differ");
  }
  GroupCounts c;
  for (int v : z) {
    if (v == 0) {
      ++c.n0;
    } else if (v == 1) {
      ++c.n1;
    } else {
      fail(ErrorCode::kBadLabel, "attribute values must be 0 or 1");
    }
  }
  if (c.n0 == 0 || c.n1 == 0) {
    fail(ErrorCode::kDegenerateAttribute, "attribute takes a single value");
  }
  return c;
}

// z centred: 1 - p for z = 1 and -p for z = 0, p the share of z = 1.
VectorXd centred_attribute(std::span<const int> z) {
  double p = 0.0;
  for (int v : z) p += v;
  p /= static_cast<double>(z.size());
  VectorXd out(static_cast<Index>(z.size()));
  for (std::size_t i = 0; i < z.size(); ++i) out(static_cast<Index>(i)) = z[i] - p;
  return out;
}

struct Whitening {
  MatrixXd whiten;    // pseudo-inverse square root of the covariance
  MatrixXd unwhiten;  // square root restricted to the same support
};

Whitening whitening(const MatrixXd& cov) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) {
    fail(ErrorCode::kNumericalFailure, "covariance eigendecomposition did not converge");
  }
  const VectorXd& lambda = eig.eigenvalues();
  const double lambda_max = lambda.size() ? lambda.maxCoeff() : 0.0;
  VectorXd inv_sqrt = VectorXd::Zero(lambda.size());
  VectorXd sqrt_l = VectorXd::Zero(lambda.size());
  for (Index i = 0; i < lambda.size(); ++i) {
    if (lambda_max > 0.0 && lambda(i) > kWhiteningCutoff * lambda_max) {
      inv_sqrt(i) = 1.0 / std::sqrt(lambda(i));
      sqrt_l(i) = std::sqrt(lambda(i));
    }
  }
  const MatrixXd& v = eig.eigenvectors();
  return {v * inv_sqrt.asDiagonal() * v.transpose(), v * sqrt_l.asDiagonal() * v.transpose()};
}

void check_finite(const MatrixXd& x) {
  if (!x.allFinite()) fail(ErrorCode::kInvalidArgument, "activations contain NaN or Inf");
}

double balanced_accuracy(std::span<const int> truth, std::span<const int> pred) {
  double tp = 0, p = 0, tn = 0, n = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 1) {
      ++p;
      tp += pred[i];
    } else {
      ++n;
      tn += 1 - pred[i];
    }
  }
  return 0.5 * ((p > 0 ? tp / p : 0.0) + (n > 0 ? tn / n : 0.0));
}

// Class-balanced, L2-penalised logistic regression by Newton iterations.
// Returns weights with the intercept in the last slot.
VectorXd fit_logistic(const MatrixXd& x, std::span<const int> a, double l2) {
  const Index n = x.rows(), d = x.cols();
  MatrixXd design(n, d + 1);
  design.leftCols(d) = x;
  design.col(d).setOnes();
  double n1 = 0;
  for (int v : a) n1 += v;
  const double n0 = static_cast<double>(n) - n1;
  VectorXd sample_w(n);
  for (Index i = 0; i < n; ++i) {
    sample_w(i) = a[static_cast<std::size_t>(i)] == 1 ? 0.5 * n / n1 : 0.5 * n / n0;
  }
  VectorXd beta = VectorXd::Zero(d + 1);
  VectorXd penalty = VectorXd::Constant(d + 1, l2);
  penalty(d) = 1e-8;
  for (int iter = 0; iter < 50; ++iter) {
    const VectorXd eta = design * beta;
    VectorXd grad = penalty.cwiseProduct(beta);
    VectorXd curv(n);
    for (Index i = 0; i < n; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-eta(i)));
      grad += sample_w(i) * (p - a[static_cast<std::size_t>(i)]) * design.row(i).transpose();
      curv(i) = sample_w(i) * std::max(p * (1.0 - p), 1e-12);
    }
    MatrixXd hess = design.transpose() * curv.asDiagonal() * design;
    hess.diagonal() += penalty;
    const VectorXd step = hess.ldlt().solve(grad);
    if (!step.allFinite()) break;
    beta -= step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-10) break;
  }
  return beta;
}

}  // namespace

CavMethod parse_cav_method(std::string_view name) {
  if (name == "mean_difference") return CavMethod::kMeanDifference;
  if (name == "least_squares") return CavMethod::kLeastSquares;
  fail(ErrorCode::kConfigError, "unknown concept-vector method '" + std::string(name) + "'");
}

std::string_view cav_method_name(CavMethod method) {
  return method == CavMethod::kMeanDifference ? "mean_difference" : "least_squares";
}

Eigen::VectorXd cross_covariance(const Eigen::MatrixXd& x, std::span<const int> z) {
  count_groups(x, z);
  const VectorXd zc = centred_attribute(z);
  const VectorXd mu = x.colwise().mean().transpose();
  return (x.rowwise() - mu.transpose()).transpose() * zc / static_cast<double>(x.rows());
}

AffineEraser fit_leace(const ActivationMatrix& x, std::span<const int> z) {
  check_finite(x.values);
  count_groups(x.values, z);
  if (x.values.rows() < 2) fail(ErrorCode::kDegenerateAttribute, "need at least two samples");
  const Index d = x.values.cols();
  const double n = static_cast<double>(x.values.rows());
  const VectorXd mu = x.values.colwise().mean().transpose();
  const MatrixXd centred = x.values.rowwise() - mu.transpose();
  const MatrixXd cov = centred.transpose() * centred / n;
  const VectorXd zc = centred_attribute(z);
  const VectorXd cross = centred.transpose() * zc / n;

  const Whitening w = whitening(cov);
  const VectorXd u = w.whiten * cross;
  const double z_std = std::sqrt(zc.squaredNorm() / n);
  AffineEraser eraser = AffineEraser::identity(LayerId{x.layer.name, static_cast<std::size_t>(d)});
  eraser.kind = EraserKind::kLeace;
  if (!(u.norm() > 1e-10 * z_std)) return eraser;

  // x -> x - W+ P W (x - mu), P the projector onto span(W * cross).
  const VectorXd unit = u / u.norm();
  const MatrixXd removal = (w.unwhiten * unit) * (unit.transpose() * w.whiten);
  eraser.matrix = MatrixXd::Identity(d, d) - removal;
  eraser.bias = removal * mu;
  if (!eraser.matrix.allFinite() || !eraser.bias.allFinite()) {
    fail(ErrorCode::kNumericalFailure, "eraser has non-finite entries");
  }
  return eraser;
}

ConceptVector fit_cav(const ActivationMatrix& x, std::span<const int> a, CavMethod method) {
  check_finite(x.values);
  const GroupCounts counts = count_groups(x.values, a);
  if (counts.n0 < 2 || counts.n1 < 2) {
    fail(ErrorCode::kDegenerateAttribute, "each group needs at least two samples");
  }
  const Index d = x.values.cols();
  VectorXd mean0 = VectorXd::Zero(d), mean1 = VectorXd::Zero(d);
  for (Index i = 0; i < x.values.rows(); ++i) {
    (a[static_cast<std::size_t>(i)] == 1 ? mean1 : mean0) += x.values.row(i).transpose();
  }
  mean0 /= static_cast<double>(counts.n0);
  mean1 /= static_cast<double>(counts.n1);
  const VectorXd diff = mean1 - mean0;

  VectorXd direction = diff;
  if (method == CavMethod::kLeastSquares) {
    // Regression of the centred attribute on the features.
    const double n = static_cast<double>(x.values.rows());
    const VectorXd mu = x.values.colwise().mean().transpose();
    const MatrixXd centred = x.values.rowwise() - mu.transpose();
    const MatrixXd cov = centred.transpose() * centred / n;
    const Whitening w = whitening(cov);
    direction = w.whiten * w.whiten * cross_covariance(x.values, a);
    if (direction.dot(diff) < 0) direction = -direction;
  }
  const double norm = direction.norm();
  if (norm == 0.0 || !std::isfinite(norm)) {
    fail(ErrorCode::kZeroDirection, "group means coincide; no concept direction");
  }
  return ConceptVector{direction / norm, mean0, LayerId{x.layer.name, static_cast<std::size_t>(d)}};
}

AffineEraser make_pclarc(const ConceptVector& cav) {
  const Index d = cav.direction.size();
  if (cav.mu_free.size() != d) fail(ErrorCode::kDimensionMismatch, "concept vector dims differ");
  AffineEraser e;
  e.layer = LayerId{cav.layer.name, static_cast<std::size_t>(d)};
  e.kind = EraserKind::kPClarc;
  e.matrix = MatrixXd::Identity(d, d) - cav.direction * cav.direction.transpose();
  e.bias = cav.direction * cav.direction.dot(cav.mu_free);
  return e;
}

ActivationMatrix apply_eraser(const ActivationMatrix& x, const AffineEraser& eraser) {
  const Index d = x.values.cols();
  if (eraser.matrix.rows() != d || eraser.matrix.cols() != d || eraser.bias.size() != d) {
    fail(ErrorCode::kDimensionMismatch,
         "eraser is " + std::to_string(eraser.matrix.rows()) + "-dimensional, activations are " +
             std::to_string(d) + "-dimensional");
  }
  ActivationMatrix out{x.values * eraser.matrix.transpose(), x.layer};
  out.values.rowwise() += eraser.bias.transpose();
  return out;
}

double mean_squared_displacement(const Eigen::MatrixXd& x, const AffineEraser& eraser) {
  const ActivationMatrix erased = apply_eraser(ActivationMatrix{x, {}}, eraser);
  return (x - erased.values).rowwise().squaredNorm().mean();
}

double probe_accuracy(const Eigen::MatrixXd& x, std::span<const int> a, std::uint64_t seed) {
  check_finite(x);
  count_groups(x, a);
  const std::size_t n = a.size();
  const std::size_t folds = std::min<std::size_t>(5, n);
  const auto order = permutation(n, seed);
  static constexpr double kPenalties[] = {1e-4, 1e-2, 1.0, 1e2};

  std::vector<std::vector<int>> predictions(std::size(kPenalties), std::vector<int>(n, 0));
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train, test;
    for (std::size_t k = 0; k < n; ++k) (k % folds == f ? test : train).push_back(order[k]);
    std::vector<int> train_a;
    for (std::size_t i : train) train_a.push_back(a[i]);
    const bool both = std::count(train_a.begin(), train_a.end(), 1) > 0 &&
                      std::count(train_a.begin(), train_a.end(), 0) > 0;

    MatrixXd xtrain(static_cast<Index>(train.size()), x.cols());
    for (std::size_t i = 0; i < train.size(); ++i) {
      xtrain.row(static_cast<Index>(i)) = x.row(static_cast<Index>(train[i]));
    }
    const VectorXd mean = xtrain.colwise().mean().transpose();
    VectorXd scale =
        ((xtrain.rowwise() - mean.transpose()).colwise().squaredNorm() /
         static_cast<double>(train.size()))
            .cwiseSqrt()
            .transpose();
    for (Index j = 0; j < scale.size(); ++j) {
      scale(j) = scale(j) > 1e-12 * (1.0 + std::abs(mean(j))) ? 1.0 / scale(j) : 0.0;
    }
    const auto standardise = [&](const MatrixXd& m) {
      return MatrixXd((m.rowwise() - mean.transpose()) * scale.asDiagonal());
    };
    const MatrixXd ztrain = standardise(xtrain);
    for (std::size_t p = 0; p < std::size(kPenalties); ++p) {
      VectorXd beta = VectorXd::Zero(x.cols() + 1);
      if (both) beta = fit_logistic(ztrain, train_a, kPenalties[p] * static_cast<double>(train.size()));
      for (std::size_t i : test) {
        const VectorXd row = standardise(x.row(static_cast<Index>(i))).transpose();
        const double eta = row.dot(beta.head(x.cols())) + beta(x.cols());
        predictions[p][i] = eta > 0.0 ? 1 : 0;
      }
    }
  }
  double best = 0.0;
  for (const auto& pred : predictions) best = std::max(best, balanced_accuracy(a, pred));
  return best;
}

nlohmann::json eraser_to_json(const AffineEraser& eraser) {
  const Index d = eraser.matrix.rows();
  std::vector<double> row_major;
  row_major.reserve(static_cast<std::size_t>(d * d));
  for (Index r = 0; r < d; ++r) {
    for (Index c = 0; c < eraser.matrix.cols(); ++c) row_major.push_back(eraser.matrix(r, c));
  }
  const std::vector<double> bias(eraser.bias.data(), eraser.bias.data() + eraser.bias.size());
  return {{"kind", eraser_kind_name(eraser.kind)},
          {"layer", eraser.layer.name},
          {"dim", d},
          {"dtype", "float64-le"},
          {"matrix", base64_encode(doubles_to_bytes(row_major))},
          {"bias", base64_encode(doubles_to_bytes(bias))}};
}

AffineEraser eraser_from_json(const nlohmann::json& j) {
  if (j.value("dtype", "") != "float64-le") fail(ErrorCode::kDecodeError, "unsupported eraser dtype");
  AffineEraser e;
  e.kind = parse_eraser_kind(j.at("kind").get<std::string>());
  const auto d = j.at("dim").get<Index>();
  e.layer = LayerId{j.at("layer"), static_cast<std::size_t>(d)};
  const auto m = bytes_to_doubles(base64_decode(j.at("matrix").get<std::string>()));
  const auto b = bytes_to_doubles(base64_decode(j.at("bias").get<std::string>()));
  if (static_cast<Index>(m.size()) != d * d || static_cast<Index>(b.size()) != d) {
    fail(ErrorCode::kDecodeError, "eraser blob sizes do not match its dim");
  }
  e.matrix = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      m.data(), d, d);
  e.bias = Eigen::Map<const VectorXd>(b.data(), d);
  return e;
}

void save_eraser(const AffineEraser& eraser, const std::filesystem::path& path) {
  write_text_file(path, eraser_to_json(eraser).dump(2) + "\n");
}

AffineEraser load_eraser(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::kMissingFile, path.string());
  return eraser_from_json(nlohmann::json::parse(read_text_file(path)));
}

}  // namespace detox
