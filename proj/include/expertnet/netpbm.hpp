#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "expertnet/tensor.hpp"

namespace expertnet {

// 8-bit single-channel raster, row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// Decodes binary PGM (P5) or PPM (P6) into a (1, 3, H, W) tensor with values
// in [0, 1]. Grayscale input is replicated to three channels. Throws
// FormatError on malformed input.
TensorF decode_netpbm(std::span<const std::uint8_t> bytes);

// Decodes keeping the native channel count (1 for P5, 3 for P6).
TensorF decode_netpbm_native(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_pgm(const GrayImage& image);

// Channel `channel` of batch item 0, values clamped to [0, 1] and quantized
// to 8 bits.
GrayImage to_gray(const TensorF& image, std::size_t channel = 0);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace expertnet
