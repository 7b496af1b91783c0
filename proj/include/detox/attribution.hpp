#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "detox/model.hpp"
#include "detox/raster.hpp"

namespace detox {

// Per-pixel attribution in [0, 1]; max is exactly 1 unless all zero.
struct Heatmap {
  Eigen::MatrixXd values;  // height x width
  std::string source_id;
  std::string method_tag;
};

struct TradeoffPoint {
  std::string method_tag;
  double perf = 0.0;      // F1
  double fairness = 0.0;  // criterion value, lower is better
};

enum class ChannelAggregation { kMax, kMean, kL2 };

ChannelAggregation parse_channel_aggregation(std::string_view name);

// Scales so the maximum is 1; all-zero maps stay zero.
void normalize_heatmap(Eigen::MatrixXd& values);

// d(score of target class)/d(pixel) for one (c, h, w) image, where the
// class-0 score is 1 - sigmoid(margin).
Tensor input_gradient(const Model& model, const Tensor& image, int target);

Heatmap gradient_saliency(const Model& model, const Tensor& image, int target,
                          ChannelAggregation agg = ChannelAggregation::kMax,
                          std::string source_id = {}, std::string method_tag = {});

// max(0, sum_k alpha_k A_k) at the layer's own resolution, alpha_k being the
// spatial mean of d(score)/d(A_k). Throws NonSpatialLayer.
Eigen::MatrixXd class_activation_map(const Model& model, const Tensor& image, int target,
                                     std::string_view layer);

Eigen::MatrixXd upsample_bilinear(const Eigen::MatrixXd& map, std::size_t height,
                                  std::size_t width);

Heatmap layer_attribution(const Model& model, const Tensor& image, int target,
                          std::string_view layer, std::string source_id = {},
                          std::string method_tag = {});

struct HeatmapRow {
  std::string method_tag;
  std::vector<Heatmap> maps;  // one per image
};

struct GridGeometry {
  long scale = 1;  // integer upscaling of each image
  long cell_w = 0;
  long cell_h = 0;
  long label_width = 0;
  long pad = 0;
  long width = 0;
  long height = 0;
};

GridGeometry grid_geometry(std::size_t images, std::size_t rows, std::size_t image_h,
                           std::size_t image_w);

// Rows are methods (the first is drawn as given, so callers put vanilla
// first), columns are images. Heatmaps are blended over the greyscale input.
RgbImage compose_comparison_grid(const std::vector<Tensor>& images,
                                 const std::vector<HeatmapRow>& rows);
std::filesystem::path render_comparison_grid(const std::vector<Tensor>& images,
                                             const std::vector<HeatmapRow>& rows,
                                             const std::filesystem::path& out_path);

struct TradeoffLayout {
  long width = 0;
  long height = 0;
  std::vector<std::pair<long, long>> markers;  // pixel centre per point
  std::vector<LabelBox> labels;                // one per point
};

TradeoffLayout tradeoff_layout(const std::vector<TradeoffPoint>& points);
RgbImage compose_tradeoff_plot(const std::vector<TradeoffPoint>& points,
                               std::string_view criterion_name);
// Writes the PNG and `<stem>.csv` next to it (`method,fairness,f1`).
std::filesystem::path render_tradeoff_plot(const std::vector<TradeoffPoint>& points,
                                           std::string_view criterion_name,
                                           const std::filesystem::path& out_path);
std::filesystem::path tradeoff_sidecar_path(const std::filesystem::path& png_path);
std::vector<TradeoffPoint> read_tradeoff_csv(const std::filesystem::path& csv_path);

}  // namespace detox
