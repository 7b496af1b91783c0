#include "detox/raster.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>

namespace detox {
namespace {

struct Glyph {
  char c;
  std::array<std::uint8_t, kGlyphHeight> rows;  // low 5 bits, MSB = leftmost
};

constexpr Glyph kFont[] = {
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
    {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
    {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
    {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
};

const Glyph* find_glyph(char c) {
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : kFont) {
    if (g.c == u) return &g;
  }
  return nullptr;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

}  // namespace

Canvas::Canvas(std::size_t width, std::size_t height, Rgb background) : image_(width, height) {
  for (std::size_t i = 0; i < width * height; ++i) {
    std::copy(background.begin(), background.end(), image_.pixels.begin() + 3 * i);
  }
}

void Canvas::set(long x, long y, Rgb color) {
  if (x < 0 || y < 0 || x >= static_cast<long>(width()) || y >= static_cast<long>(height())) return;
  std::copy(color.begin(), color.end(), image_.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)));
}

void Canvas::fill_rect(long x, long y, long w, long h, Rgb color) {
  for (long j = y; j < y + h; ++j) {
    for (long i = x; i < x + w; ++i) set(i, j, color);
  }
}

void Canvas::rect_outline(long x, long y, long w, long h, Rgb color) {
  line(x, y, x + w - 1, y, color);
  line(x, y + h - 1, x + w - 1, y + h - 1, color);
  line(x, y, x, y + h - 1, color);
  line(x + w - 1, y, x + w - 1, y + h - 1, color);
}

void Canvas::line(long x0, long y0, long x1, long y1, Rgb color) {
  // Bresenham
  const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  while (true) {
    set(x0, y0, color);
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void Canvas::disc(long cx, long cy, long radius, Rgb color) {
  for (long j = -radius; j <= radius; ++j) {
    for (long i = -radius; i <= radius; ++i) {
      if (i * i + j * j <= radius * radius) set(cx + i, cy + j, color);
    }
  }
}

void Canvas::diamond(long cx, long cy, long radius, Rgb color) {
  for (long j = -radius; j <= radius; ++j) {
    for (long i = -radius; i <= radius; ++i) {
      if (std::abs(i) + std::abs(j) <= radius) set(cx + i, cy + j, color);
    }
  }
}

void Canvas::blit(const RgbImage& src, long x, long y) {
  for (std::size_t j = 0; j < src.height; ++j) {
    for (std::size_t i = 0; i < src.width; ++i) {
      const std::uint8_t* p = src.at(i, j);
      set(x + static_cast<long>(i), y + static_cast<long>(j), {p[0], p[1], p[2]});
    }
  }
}

void Canvas::text(long x, long y, std::string_view s, Rgb color, int scale) {
  long pen = x;
  for (char c : s) {
    if (const Glyph* g = find_glyph(c)) {
      for (int row = 0; row < kGlyphHeight; ++row) {
        for (int col = 0; col < kGlyphWidth; ++col) {
          if (g->rows[row] & (0x10 >> col)) {
            fill_rect(pen + col * scale, y + row * scale, scale, scale, color);
          }
        }
      }
    }
    pen += (kGlyphWidth + 1) * scale;
  }
}

long text_width(std::string_view s, int scale) {
  if (s.empty()) return 0;
  return static_cast<long>(s.size()) * (kGlyphWidth + 1) * scale - scale;
}

Rgb colormap(double v) {
  struct Stop {
    double at;
    double r, g, b;
  };
  static constexpr Stop kStops[] = {{0.0, 48, 18, 160},
                                    {0.25, 30, 120, 255},
                                    {0.5, 40, 220, 120},
                                    {0.75, 255, 210, 0},
                                    {1.0, 220, 20, 20}};
  v = std::clamp(v, 0.0, 1.0);
  std::size_t k = 1;
  while (k + 1 < std::size(kStops) && v > kStops[k].at) ++k;
  const Stop& lo = kStops[k - 1];
  const Stop& hi = kStops[k];
  const double t = (v - lo.at) / (hi.at - lo.at);
  return {to_byte(lo.r + t * (hi.r - lo.r)), to_byte(lo.g + t * (hi.g - lo.g)),
          to_byte(lo.b + t * (hi.b - lo.b))};
}

Rgb blend_heat(double grey, double v) {
  const double base = std::clamp(grey, 0.0, 1.0) * 255.0;
  if (!(v > 0.0)) {
    const std::uint8_t g = to_byte(base);
    return {g, g, g};
  }
  const double w = 0.6 * std::min(v, 1.0);
  const Rgb c = colormap(v);
  return {to_byte((1 - w) * base + w * c[0]), to_byte((1 - w) * base + w * c[1]),
          to_byte((1 - w) * base + w * c[2])};
}

bool boxes_overlap(const LabelBox& a, const LabelBox& b) {
  return a.x < b.x + b.width && b.x < a.x + a.width && a.y < b.y + b.height &&
         b.y < a.y + a.height;
}

std::vector<LabelBox> layout_labels(const std::vector<std::pair<long, long>>& anchors,
                                    const std::vector<std::pair<long, long>>& sizes) {
  std::vector<LabelBox> placed;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    LabelBox box{anchors[i].first + 6, anchors[i].second - sizes[i].second / 2, sizes[i].first,
                 sizes[i].second};
    bool moved = true;
    while (moved) {
      moved = false;
      for (const auto& other : placed) {
        if (boxes_overlap(box, other)) {
          box.y = other.y + other.height + 1;
          moved = true;
        }
      }
    }
    placed.push_back(box);
  }
  return placed;
}

}  // namespace detox
