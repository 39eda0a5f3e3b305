#pragma once

#include "egmt/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace egmt {

// Unreadable, missing or inconsistent input data.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 8-bit interleaved pixels, channels is 1 (gray) or 3 (RGB).
struct Image8 {
  Index height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(Index y, Index x, Index c) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
  std::uint8_t at(Index y, Index x, Index c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool operator==(const Image8&) const = default;
};

Image8 make_image8(Index height, Index width, Index channels);

Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

// Uncompressed 8-bit palettised or 24-bit BMP.
Image8 read_bmp(const std::filesystem::path& path);
void write_bmp(const std::filesystem::path& path, const Image8& image);

// Dispatches on the file signature.
Image8 read_image(const std::filesystem::path& path);

bool is_image_file(const std::filesystem::path& path);

}  // namespace egmt
