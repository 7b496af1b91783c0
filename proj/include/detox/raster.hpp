#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "detox/image_io.hpp"

namespace detox {

using Rgb = std::array<std::uint8_t, 3>;

// Minimal drawing surface over RgbImage; everything clips to the bounds.
class Canvas {
 public:
  Canvas(std::size_t width, std::size_t height, Rgb background = {255, 255, 255});

  std::size_t width() const noexcept { return image_.width; }
  std::size_t height() const noexcept { return image_.height; }
  const RgbImage& image() const noexcept { return image_; }

  void set(long x, long y, Rgb color);
  void fill_rect(long x, long y, long w, long h, Rgb color);
  void rect_outline(long x, long y, long w, long h, Rgb color);
  void line(long x0, long y0, long x1, long y1, Rgb color);
  void disc(long cx, long cy, long radius, Rgb color);
  void diamond(long cx, long cy, long radius, Rgb color);
  // Copies `src` with its top-left corner at (x, y).
  void blit(const RgbImage& src, long x, long y);
  // Upper-case 5x7 glyphs; unknown characters draw as blanks.
  void text(long x, long y, std::string_view s, Rgb color, int scale = 1);

 private:
  RgbImage image_;
};

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;
long text_width(std::string_view s, int scale = 1);

// Fixed blue-to-red ramp on [0, 1].
Rgb colormap(double v);

// Grey input pixel blended with the colormap by weight 0.6 * v; v = 0
// leaves the grey untouched.
Rgb blend_heat(double grey, double v);

struct LabelBox {
  long x = 0;
  long y = 0;
  long width = 0;
  long height = 0;
};

// Places each label right of its anchor, pushing it down until it overlaps
// no label placed before it.
std::vector<LabelBox> layout_labels(const std::vector<std::pair<long, long>>& anchors,
                                    const std::vector<std::pair<long, long>>& sizes);

bool boxes_overlap(const LabelBox& a, const LabelBox& b);

}  // namespace detox
