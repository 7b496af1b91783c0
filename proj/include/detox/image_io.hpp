#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "detox/tensor.hpp"

namespace detox {

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(w * h * 3, fill) {}

  std::uint8_t* at(std::size_t x, std::size_t y) { return &pixels[(y * width + x) * 3]; }
  const std::uint8_t* at(std::size_t x, std::size_t y) const {
    return &pixels[(y * width + x) * 3];
  }
};

void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

// Decodes a PNG into a (channels, height, width) tensor in [0, 1]; RGB is
// averaged for single-channel targets, and the raster is bilinearly resized
// when it differs from (height, width).
Tensor load_image_tensor(const std::filesystem::path& path, std::size_t channels,
                         std::size_t height, std::size_t width);

// (c, h, w) -> (c, out_h, out_w), half-pixel-centre sampling.
Tensor resize_bilinear(const Tensor& chw, std::size_t out_h, std::size_t out_w);

RgbImage tensor_to_rgb(const Tensor& chw);

}  // namespace detox
