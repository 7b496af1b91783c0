#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>

#include "detox/types.hpp"
#include "json.hpp"

namespace detox {

// Unit direction separating the protected groups, anchored at the mean of
// the concept-free group (a = 0).
struct ConceptVector {
  Eigen::VectorXd direction;
  Eigen::VectorXd mu_free;
  LayerId layer;
};

enum class CavMethod { kMeanDifference, kLeastSquares };

CavMethod parse_cav_method(std::string_view name);
std::string_view cav_method_name(CavMethod method);

// Eigenvalues below this fraction of the largest are treated as zero when
// whitening.
inline constexpr double kWhiteningCutoff = 1e-10;

// Closed-form least-squares concept eraser: after erasure the sample
// cross-covariance between features and z vanishes. Throws
// DegenerateAttribute when z takes a single value.
AffineEraser fit_leace(const ActivationMatrix& x, std::span<const int> z);

ConceptVector fit_cav(const ActivationMatrix& x, std::span<const int> a,
                      CavMethod method = CavMethod::kMeanDifference);

// x -> x - v (v.x - v.mu_free)
AffineEraser make_pclarc(const ConceptVector& cav);

ActivationMatrix apply_eraser(const ActivationMatrix& x, const AffineEraser& eraser);

// Per-feature sample covariance with z.
Eigen::VectorXd cross_covariance(const Eigen::MatrixXd& x, std::span<const int> z);

// Mean over rows of ||x - erased(x)||^2.
double mean_squared_displacement(const Eigen::MatrixXd& x, const AffineEraser& eraser);

// Out-of-fold balanced accuracy of an L2-regularised logistic probe under
// seeded 5-fold cross-validation, maximised over a fixed regularisation grid.
double probe_accuracy(const Eigen::MatrixXd& x, std::span<const int> a, std::uint64_t seed);

nlohmann::json eraser_to_json(const AffineEraser& eraser);
AffineEraser eraser_from_json(const nlohmann::json& j);
void save_eraser(const AffineEraser& eraser, const std::filesystem::path& path);
AffineEraser load_eraser(const std::filesystem::path& path);

}  // namespace detox
