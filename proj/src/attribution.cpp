#include "detox/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "detox/error.hpp"
#include "detox/image_io.hpp"
#include "detox/util.hpp"

namespace detox {
namespace {

constexpr long kLabelWidth = 110;
constexpr long kPad = 4;
constexpr long kMinCell = 64;

Tensor as_batch(const Model& model, const Tensor& image) {
  if (image.rank() != 3) fail(ErrorCode::kDimensionMismatch, "expected one (c, h, w) image");
  Tensor batch = image;
  auto shape = image.shape();
  shape.insert(shape.begin(), 1);
  batch.reshape(shape);
  if (!std::equal(model.input_shape().begin(), model.input_shape().end(), image.shape().begin(),
                  image.shape().end())) {
    fail(ErrorCode::kDimensionMismatch, "image shape " + shape_string(image.shape()) +
                                            " differs from model input " +
                                            shape_string(model.input_shape()));
  }
  return batch;
}

void check_target(int target) {
  if (target != 0 && target != 1) fail(ErrorCode::kBadLabel, "target class must be 0 or 1");
}

// d(target score)/d(margin)
double score_slope(double margin, int target) {
  const double s = sigmoid(margin);
  return (target == 1 ? 1.0 : -1.0) * s * (1.0 - s);
}

std::string two_decimals(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

const Rgb kPalette[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
                        {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {23, 190, 207}};

struct PlotFrame {
  long left = 56, right = 340, top = 34, bottom = 300;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  long px(double x) const {
    return left + std::lround((x - x0) / (x1 - x0) * static_cast<double>(right - left));
  }
  long py(double y) const {
    return bottom - std::lround((y - y0) / (y1 - y0) * static_cast<double>(bottom - top));
  }
};

constexpr long kPlotWidth = 480;
constexpr long kPlotHeight = 340;

PlotFrame plot_frame(const std::vector<TradeoffPoint>& points) {
  PlotFrame f;
  double xmax = 0.0, ymin = 1.0, ymax = 0.0;
  for (const auto& p : points) {
    xmax = std::max(xmax, p.fairness);
    ymin = std::min(ymin, p.perf);
    ymax = std::max(ymax, p.perf);
  }
  f.x1 = std::min(1.0, std::max(0.05, xmax * 1.1));
  f.y0 = std::max(0.0, ymin - 0.05);
  f.y1 = std::min(1.0, ymax + 0.05);
  if (f.y1 - f.y0 < 0.1) {
    f.y0 = std::max(0.0, f.y1 - 0.1);
    f.y1 = f.y0 + 0.1;
  }
  return f;
}

void validate_points(const std::vector<TradeoffPoint>& points) {
  if (points.empty()) fail(ErrorCode::kInvalidArgument, "trade-off plot needs at least one point");
  for (const auto& p : points) {
    if (!(p.perf >= 0.0 && p.perf <= 1.0 && p.fairness >= 0.0 && p.fairness <= 1.0)) {
      fail(ErrorCode::kInvalidArgument, "trade-off values must lie in [0, 1]");
    }
    if (p.method_tag.find_first_of(",\"\n") != std::string::npos) {
      fail(ErrorCode::kInvalidArgument, "method tag '" + p.method_tag + "' is not CSV-safe");
    }
  }
}

}  // namespace

ChannelAggregation parse_channel_aggregation(std::string_view name) {
  if (name == "max") return ChannelAggregation::kMax;
  if (name == "mean") return ChannelAggregation::kMean;
  if (name == "l2") return ChannelAggregation::kL2;
  fail(ErrorCode::kConfigError, "unknown channel aggregation '" + std::string(name) + "'");
}

void normalize_heatmap(Eigen::MatrixXd& values) {
  if (values.size() == 0) return;
  const double peak = values.maxCoeff();
  // peak / peak is exactly 1 in IEEE arithmetic.
  if (peak > 0.0) values /= peak;
}

Tensor input_gradient(const Model& model, const Tensor& image, int target) {
  check_target(target);
  const Tensor batch = as_batch(model, image);
  ForwardOptions fo;
  fo.keep_trace = true;
  const ForwardPass pass = model.forward(batch, fo);
  const double slope = score_slope(pass.margin[0], target);
  BackwardOptions bo;
  bo.need_input_grad = true;
  Gradients grads = model.backward(pass, std::vector<double>{slope}, bo);
  Tensor g = std::move(grads.input);
  g.reshape(image.shape());
  return g;
}

Heatmap gradient_saliency(const Model& model, const Tensor& image, int target,
                          ChannelAggregation agg, std::string source_id, std::string method_tag) {
  const Tensor g = input_gradient(model, image, target);
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Heatmap out{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w)),
              std::move(source_id), std::move(method_tag)};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double v = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = std::abs(g[(ch * h + y) * w + x]);
        switch (agg) {
          case ChannelAggregation::kMax: v = std::max(v, d); break;
          case ChannelAggregation::kMean: v += d / static_cast<double>(c); break;
          case ChannelAggregation::kL2: v += d * d; break;
        }
      }
      if (agg == ChannelAggregation::kL2) v = std::sqrt(v);
      out.values(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) = v;
    }
  }
  normalize_heatmap(out.values);
  return out;
}

Eigen::MatrixXd class_activation_map(const Model& model, const Tensor& image, int target,
                                     std::string_view layer) {
  check_target(target);
  const std::size_t block = model.layer_index(layer);
  if (!model.is_spatial(block)) {
    fail(ErrorCode::kNonSpatialLayer, "layer '" + std::string(layer) + "' has no spatial extent");
  }
  const Tensor batch = as_batch(model, image);
  ForwardOptions fo;
  fo.keep_trace = true;
  const ForwardPass pass = model.forward(batch, fo);
  BackwardOptions bo;
  bo.min_block = block;
  const Gradients grads =
      model.backward(pass, std::vector<double>{score_slope(pass.margin[0], target)}, bo);
  const Tensor& act = pass.block_outputs[block];
  const Tensor& grad = grads.block_outputs[block];
  const std::size_t k = act.dim(1), h = act.dim(2), w = act.dim(3), plane = h * w;
  Eigen::MatrixXd map = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  for (std::size_t ch = 0; ch < k; ++ch) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += grad[ch * plane + i];
    alpha /= static_cast<double>(plane);
    if (alpha == 0.0) continue;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        map(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) +=
            alpha * act[ch * plane + y * w + x];
      }
    }
  }
  return map.cwiseMax(0.0);
}

Eigen::MatrixXd upsample_bilinear(const Eigen::MatrixXd& map, std::size_t height, std::size_t width) {
  const auto h = static_cast<std::size_t>(map.rows()), w = static_cast<std::size_t>(map.cols());
  Tensor t({1, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      t[y * w + x] = map(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x));
    }
  }
  const Tensor up = resize_bilinear(t, height, width);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(height), static_cast<Eigen::Index>(width));
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      out(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) = up[y * width + x];
    }
  }
  return out;
}

Heatmap layer_attribution(const Model& model, const Tensor& image, int target,
                          std::string_view layer, std::string source_id, std::string method_tag) {
  const Eigen::MatrixXd cam = class_activation_map(model, image, target, layer);
  Heatmap out{upsample_bilinear(cam, image.dim(1), image.dim(2)).cwiseMax(0.0),
              std::move(source_id), std::move(method_tag)};
  normalize_heatmap(out.values);
  return out;
}

GridGeometry grid_geometry(std::size_t images, std::size_t rows, std::size_t image_h,
                           std::size_t image_w) {
  GridGeometry g;
  const long side = static_cast<long>(std::max(image_h, image_w));
  g.scale = std::max(1L, (kMinCell + side - 1) / side);
  g.cell_w = g.scale * static_cast<long>(image_w);
  g.cell_h = g.scale * static_cast<long>(image_h);
  g.label_width = kLabelWidth;
  g.pad = kPad;
  g.width = g.label_width + static_cast<long>(images) * (g.cell_w + g.pad) + g.pad;
  g.height = static_cast<long>(rows) * (g.cell_h + g.pad) + g.pad;
  return g;
}

RgbImage compose_comparison_grid(const std::vector<Tensor>& images,
                                 const std::vector<HeatmapRow>& rows) {
  if (images.empty() || rows.empty()) {
    fail(ErrorCode::kInvalidArgument, "comparison grid needs images and rows");
  }
  const std::size_t h = images[0].dim(1), w = images[0].dim(2);
  for (const auto& img : images) {
    if (img.rank() != 3 || img.dim(1) != h || img.dim(2) != w) {
      fail(ErrorCode::kDimensionMismatch, "grid images must share one (c, h, w) size");
    }
  }
  for (const auto& row : rows) {
    if (row.maps.size() != images.size()) {
      fail(ErrorCode::kDimensionMismatch, "row '" + row.method_tag + "' has " +
                                              std::to_string(row.maps.size()) + " maps for " +
                                              std::to_string(images.size()) + " images");
    }
    for (const auto& m : row.maps) {
      if (static_cast<std::size_t>(m.values.rows()) != h ||
          static_cast<std::size_t>(m.values.cols()) != w) {
        fail(ErrorCode::kDimensionMismatch, "heatmap size differs from its image");
      }
    }
  }
  const GridGeometry g = grid_geometry(images.size(), rows.size(), h, w);
  Canvas canvas(static_cast<std::size_t>(g.width), static_cast<std::size_t>(g.height));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const long top = g.pad + static_cast<long>(r) * (g.cell_h + g.pad);
    std::string tag = rows[r].method_tag;
    const std::size_t max_chars = static_cast<std::size_t>((g.label_width - 2 * g.pad) / (kGlyphWidth + 1));
    if (tag.size() > max_chars) tag.resize(max_chars);
    canvas.text(g.pad, top + g.cell_h / 2 - kGlyphHeight / 2, tag, {0, 0, 0});
    for (std::size_t i = 0; i < images.size(); ++i) {
      const Tensor& img = images[i];
      const std::size_t c = img.dim(0);
      const long left = g.label_width + static_cast<long>(i) * (g.cell_w + g.pad);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double grey = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) grey += img[(ch * h + y) * w + x];
          grey /= static_cast<double>(c);
          const Rgb px = blend_heat(
              grey, rows[r].maps[i].values(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)));
          canvas.fill_rect(left + static_cast<long>(x) * g.scale, top + static_cast<long>(y) * g.scale,
                           g.scale, g.scale, px);
        }
      }
    }
  }
  return canvas.image();
}

std::filesystem::path render_comparison_grid(const std::vector<Tensor>& images,
                                             const std::vector<HeatmapRow>& rows,
                                             const std::filesystem::path& out_path) {
  write_png(out_path, compose_comparison_grid(images, rows));
  return out_path;
}

TradeoffLayout tradeoff_layout(const std::vector<TradeoffPoint>& points) {
  validate_points(points);
  const PlotFrame f = plot_frame(points);
  TradeoffLayout layout;
  layout.width = kPlotWidth;
  layout.height = kPlotHeight;
  std::vector<std::pair<long, long>> sizes;
  for (const auto& p : points) {
    layout.markers.emplace_back(f.px(p.fairness), f.py(p.perf));
    sizes.emplace_back(text_width(p.method_tag), kGlyphHeight);
  }
  layout.labels = layout_labels(layout.markers, sizes);
  return layout;
}

RgbImage compose_tradeoff_plot(const std::vector<TradeoffPoint>& points,
                               std::string_view criterion_name) {
  const TradeoffLayout layout = tradeoff_layout(points);
  const PlotFrame f = plot_frame(points);
  Canvas canvas(static_cast<std::size_t>(layout.width), static_cast<std::size_t>(layout.height));
  const Rgb black{0, 0, 0}, grid{225, 225, 225};

  for (int t = 0; t <= 4; ++t) {
    const double xv = f.x0 + (f.x1 - f.x0) * t / 4.0;
    const double yv = f.y0 + (f.y1 - f.y0) * t / 4.0;
    const long x = f.px(xv), y = f.py(yv);
    canvas.line(x, f.top, x, f.bottom, grid);
    canvas.line(f.left, y, f.right, y, grid);
    const std::string xs = two_decimals(xv), ys = two_decimals(yv);
    canvas.text(x - text_width(xs) / 2, f.bottom + 6, xs, black);
    canvas.text(f.left - 6 - text_width(ys), y - kGlyphHeight / 2, ys, black);
  }
  canvas.line(f.left, f.bottom, f.right, f.bottom, black);
  canvas.line(f.left, f.top, f.left, f.bottom, black);
  const std::string title = "F1 VS " + std::string(criterion_name);
  canvas.text((f.left + f.right) / 2 - text_width(title) / 2, 10, title, black);
  const std::string xlabel = std::string(criterion_name) + " (LOWER IS BETTER)";
  canvas.text((f.left + f.right) / 2 - text_width(xlabel) / 2, f.bottom + 22, xlabel, black);
  canvas.text(8, f.top - 14, "F1", black);

  std::size_t colour = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto [mx, my] = layout.markers[i];
    const bool vanilla = points[i].method_tag == "vanilla";
    Rgb c = black;
    if (vanilla) {
      canvas.diamond(mx, my, 6, black);
    } else {
      c = kPalette[colour++ % std::size(kPalette)];
      canvas.disc(mx, my, 4, c);
    }
    const LabelBox& box = layout.labels[i];
    canvas.text(box.x, box.y, points[i].method_tag, c);
    if (box.y > my + kGlyphHeight) canvas.line(mx, my, box.x - 1, box.y + kGlyphHeight / 2, c);
  }
  return canvas.image();
}

std::filesystem::path tradeoff_sidecar_path(const std::filesystem::path& png_path) {
  std::filesystem::path csv = png_path;
  csv.replace_extension(".csv");
  return csv;
}

std::filesystem::path render_tradeoff_plot(const std::vector<TradeoffPoint>& points,
                                           std::string_view criterion_name,
                                           const std::filesystem::path& out_path) {
  const RgbImage image = compose_tradeoff_plot(points, criterion_name);
  write_png(out_path, image);
  std::string csv = "method,fairness,f1\n";
  for (const auto& p : points) {
    csv += p.method_tag + "," + format_double(p.fairness) + "," + format_double(p.perf) + "\n";
  }
  write_text_file(tradeoff_sidecar_path(out_path), csv);
  return out_path;
}

std::vector<TradeoffPoint> read_tradeoff_csv(const std::filesystem::path& csv_path) {
  std::istringstream in(read_text_file(csv_path));
  std::string line;
  if (!std::getline(in, line) || line != "method,fairness,f1") {
    fail(ErrorCode::kDecodeError, "unexpected trade-off CSV header in " + csv_path.string());
  }
  std::vector<TradeoffPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.rfind(',');
    if (c1 == std::string::npos || c1 == c2) {
      fail(ErrorCode::kDecodeError, "malformed trade-off CSV line: " + line);
    }
    TradeoffPoint p;
    p.method_tag = line.substr(0, c1);
    p.fairness = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    p.perf = std::stod(line.substr(c2 + 1));
    out.push_back(p);
  }
  return out;
}

}  // namespace detox
