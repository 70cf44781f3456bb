#pragma once

#include "bsm/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bsm {

/// Single-channel netpbm image (P5), 8 or 16 bit.
struct GrayImage {
  Index height = 0;
  Index width = 0;
  int maxval = 255;
  std::vector<std::uint16_t> pixels;  // row-major

  std::uint16_t at(Index y, Index x) const { return pixels[y * width + x]; }
};

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// Decodes a PNG into a [3, H, W] tensor in [0, 1]. Gray is replicated,
/// alpha dropped, 16-bit scaled. Throws FormatError on undecodable files.
Tensor<double> read_png(const std::filesystem::path& path);
/// Writes a [C, H, W] tensor (C = 1 or 3) as 8-bit PNG, values clamped to [0, 1].
void write_png(const std::filesystem::path& path, const Tensor<double>& image);

/// Rounds to the nearest 8-bit level, the quantization a PNG round trip applies.
Tensor<double> quantize_8bit(const Tensor<double>& image);

}  // namespace bsm
