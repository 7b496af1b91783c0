#include "detox/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>

#include "detox/error.hpp"

namespace detox {

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  if (image.width == 0 || image.height == 0) {
    fail(ErrorCode::kInvalidArgument, "cannot write an empty image");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    const std::string why = png.message;
    png_image_free(&png);
    fail(ErrorCode::kIoError, "writing " + path.string() + ": " + why);
  }
}

RgbImage read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::kMissingFile, path.string());
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    fail(ErrorCode::kDecodeError, path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  RgbImage out(png.width, png.height);
  if (!png_image_finish_read(&png, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string why = png.message;
    png_image_free(&png);
    fail(ErrorCode::kDecodeError, path.string() + ": " + why);
  }
  return out;
}

Tensor resize_bilinear(const Tensor& chw, std::size_t out_h, std::size_t out_w) {
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (h == out_h && w == out_w) return chw;
  Tensor out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = chw.data() + ch * h * w;
        const double top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
        const double bottom = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
        out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

Tensor load_image_tensor(const std::filesystem::path& path, std::size_t channels,
                         std::size_t height, std::size_t width) {
  if (channels != 1 && channels != 3) {
    fail(ErrorCode::kInvalidArgument, "images must have 1 or 3 channels");
  }
  const RgbImage rgb = read_png(path);
  Tensor chw({channels, rgb.height, rgb.width});
  const std::size_t plane = rgb.height * rgb.width;
  for (std::size_t i = 0; i < plane; ++i) {
    const std::uint8_t* px = &rgb.pixels[i * 3];
    if (channels == 3) {
      for (std::size_t ch = 0; ch < 3; ++ch) chw[ch * plane + i] = px[ch] / 255.0;
    } else {
      chw[i] = (px[0] + px[1] + px[2]) / (3.0 * 255.0);
    }
  }
  return resize_bilinear(chw, height, width);
}

RgbImage tensor_to_rgb(const Tensor& chw) {
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  RgbImage out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = chw[((c == 3 ? ch : 0) * h + y) * w + x];
        out.at(x, y)[ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  return out;
}

}  // namespace detox
