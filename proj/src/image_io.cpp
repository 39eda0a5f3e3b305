#include "egmt/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>

namespace egmt {

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  if (at + 4 > b.size()) throw DataError("truncated BMP");
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t at) {
  if (at + 2 > b.size()) throw DataError("truncated BMP");
  return static_cast<std::uint16_t>(b[at] | b[at + 1] << 8);
}

void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace

Image8 make_image8(Index height, Index width, Index channels) {
  if (height < 1 || width < 1 || (channels != 1 && channels != 3)) throw std::invalid_argument("bad image geometry");
  Image8 img;
  img.height = height;
  img.width = width;
  img.channels = channels;
  img.pixels.assign(static_cast<std::size_t>(height * width * channels), 0);
  return img;
}

Image8 read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + png.message);
  }
  // Gray sources stay gray, everything else decodes to RGB; alpha is composited onto black.
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 img = make_image8(png.height, png.width, gray ? 1 : 3);
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&png, &black, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw DataError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

Image8 read_bmp(const std::filesystem::path& path) {
  const auto b = read_bytes(path);
  if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') throw DataError(path.string() + ": not a BMP file");
  const std::uint32_t data_offset = le32(b, 10);
  const std::uint32_t header_size = le32(b, 14);
  const auto width = static_cast<std::int32_t>(le32(b, 18));
  const auto raw_height = static_cast<std::int32_t>(le32(b, 22));
  const std::uint16_t bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  if (compression != 0) throw DataError(path.string() + ": compressed BMP is not supported");
  if (bpp != 8 && bpp != 24) throw DataError(path.string() + ": only 8 and 24 bit BMP are supported");
  if (width <= 0 || raw_height == 0) throw DataError(path.string() + ": bad BMP extents");
  const bool top_down = raw_height < 0;
  const Index h = std::abs(raw_height), w = width;

  std::vector<std::array<std::uint8_t, 3>> palette;
  bool gray_palette = true;
  if (bpp == 8) {
    std::uint32_t colors = le32(b, 46);
    if (colors == 0) colors = 256;
    const std::size_t at = 14 + header_size;
    for (std::uint32_t i = 0; i < colors; ++i) {
      const std::size_t p = at + 4 * i;
      if (p + 3 > b.size()) throw DataError("truncated BMP palette");
      palette.push_back({b[p + 2], b[p + 1], b[p]});
      gray_palette = gray_palette && b[p] == b[p + 1] && b[p + 1] == b[p + 2];
    }
  }
  const Index channels = (bpp == 8 && gray_palette) ? 1 : 3;
  Image8 img = make_image8(h, w, channels);
  const std::size_t stride = (static_cast<std::size_t>(w) * bpp / 8 + 3) & ~std::size_t{3};
  if (data_offset + stride * static_cast<std::size_t>(h) > b.size()) throw DataError(path.string() + ": truncated BMP data");
  for (Index y = 0; y < h; ++y) {
    const std::size_t row = data_offset + stride * static_cast<std::size_t>(top_down ? y : h - 1 - y);
    for (Index x = 0; x < w; ++x) {
      if (bpp == 24) {
        const std::size_t p = row + 3 * static_cast<std::size_t>(x);
        img.at(y, x, 0) = b[p + 2];
        img.at(y, x, 1) = b[p + 1];
        img.at(y, x, 2) = b[p];
      } else {
        const std::uint8_t i = b[row + static_cast<std::size_t>(x)];
        if (i >= palette.size()) throw DataError(path.string() + ": palette index out of range");
        for (Index c = 0; c < channels; ++c) img.at(y, x, c) = palette[i][static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

void write_bmp(const std::filesystem::path& path, const Image8& image) {
  const bool gray = image.channels == 1;
  const std::uint32_t bpp = gray ? 8 : 24;
  const std::uint32_t stride = (static_cast<std::uint32_t>(image.width) * bpp / 8 + 3) & ~3u;
  const std::uint32_t palette_bytes = gray ? 256 * 4 : 0;
  const std::uint32_t offset = 54 + palette_bytes;
  const std::uint32_t data_bytes = stride * static_cast<std::uint32_t>(image.height);
  std::vector<std::uint8_t> b = {'B', 'M'};
  put32(b, offset + data_bytes);
  put32(b, 0);
  put32(b, offset);
  put32(b, 40);
  put32(b, static_cast<std::uint32_t>(image.width));
  put32(b, static_cast<std::uint32_t>(image.height));
  put16(b, 1);
  put16(b, static_cast<std::uint16_t>(bpp));
  put32(b, 0);
  put32(b, data_bytes);
  put32(b, 2835);
  put32(b, 2835);
  put32(b, gray ? 256 : 0);
  put32(b, 0);
  if (gray) {
    for (std::uint32_t i = 0; i < 256; ++i) put32(b, i | i << 8 | i << 16);
  }
  for (Index y = image.height - 1; y >= 0; --y) {
    const std::size_t start = b.size();
    for (Index x = 0; x < image.width; ++x) {
      if (gray) {
        b.push_back(image.at(y, x, 0));
      } else {
        b.push_back(image.at(y, x, 2));
        b.push_back(image.at(y, x, 1));
        b.push_back(image.at(y, x, 0));
      }
    }
    b.resize(start + stride, 0);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Image8 read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::array<char, 8> sig{};
  in.read(sig.data(), sig.size());
  if (in.gcount() >= 2 && sig[0] == 'B' && sig[1] == 'M') return read_bmp(path);
  static constexpr std::array<unsigned char, 8> kPng = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (in.gcount() == 8 && std::equal(kPng.begin(), kPng.end(), sig.begin(),
                                     [](unsigned char a, char c) { return a == static_cast<unsigned char>(c); })) {
    return read_png(path);
  }
  throw DataError(path.string() + ": unrecognised image format");
}

bool is_image_file(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".bmp";
}

}  // namespace egmt
