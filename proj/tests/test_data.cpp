#include "test_util.hpp"

#include "egmt/data.hpp"
#include "egmt/image_io.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

using namespace egmt;
using egmt::test::fixture;
using egmt::test::scratch_dir;

namespace {

std::vector<std::uint8_t> bytes_of(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void put32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

// A 3-wide, 2-high top-down 24-bit BMP assembled byte by byte.
std::vector<std::uint8_t> handmade_bmp() {
  const std::size_t stride = 12;  // 9 bytes of pixels padded to 4
  std::vector<std::uint8_t> b(54 + 2 * stride, 0);
  b[0] = 'B';
  b[1] = 'M';
  put32(b, 2, static_cast<std::uint32_t>(b.size()));
  put32(b, 10, 54);
  put32(b, 14, 40);
  put32(b, 18, 3);
  put32(b, 22, static_cast<std::uint32_t>(-2));
  b[26] = 1;
  b[28] = 24;
  for (std::size_t y = 0; y < 2; ++y) {
    for (std::size_t x = 0; x < 3; ++x) {
      const std::size_t p = 54 + y * stride + 3 * x;
      b[p] = static_cast<std::uint8_t>(10 * x);       // blue
      b[p + 1] = static_cast<std::uint8_t>(100 + y);  // green
      b[p + 2] = static_cast<std::uint8_t>(200 + x);  // red
    }
  }
  return b;
}

Tensor<float> ramp(Index c, Index h, Index w) {
  Tensor<float> t({c, h, w});
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  return t;
}

}  // namespace

TEST_CASE("png round trip") {
  const auto dir = scratch_dir("data_png");
  Rng rng(1);
  for (Index channels : {Index{1}, Index{3}}) {
    Image8 img = make_image8(9, 13, channels);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    const auto path = dir / ("img" + std::to_string(channels) + ".png");
    write_png(path, img);
    CHECK(read_png(path) == img);
    CHECK(read_image(path) == img);
    CHECK(is_image_file(path));
  }
  CHECK_THROWS_AS(read_png(dir / "absent.png"), DataError);
}

TEST_CASE("bmp decoding") {
  SUBCASE("palettised gray fixture") {
    const Image8 img = read_image(fixture("gray_5x7.bmp"));
    REQUIRE(img.channels == 1);
    REQUIRE(img.height == 5);
    REQUIRE(img.width == 7);
    for (Index y = 0; y < 5; ++y) {
      for (Index x = 0; x < 7; ++x) CHECK(img.at(y, x, 0) == y * 40 + x * 5);
    }
    // Bottom-up rows of 8 bytes after the header and palette.
    const auto b = bytes_of(fixture("gray_5x7.bmp"));
    const std::uint32_t offset = b[10] | (b[11] << 8) | (b[12] << 16) | (b[13] << 24);
    CHECK(b[offset + 4 * 8 + 2] == 10);
  }
  SUBCASE("top-down 24-bit") {
    const auto dir = scratch_dir("data_bmp");
    const auto bytes = handmade_bmp();
    std::ofstream(dir / "hand.bmp", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                            static_cast<std::streamsize>(bytes.size()));
    const Image8 img = read_image(dir / "hand.bmp");
    REQUIRE(img.channels == 3);
    REQUIRE(img.height == 2);
    REQUIRE(img.width == 3);
    for (Index y = 0; y < 2; ++y) {
      for (Index x = 0; x < 3; ++x) {
        CHECK(img.at(y, x, 0) == 200 + x);
        CHECK(img.at(y, x, 1) == 100 + y);
        CHECK(img.at(y, x, 2) == 10 * x);
      }
    }
    write_bmp(dir / "again.bmp", img);
    CHECK(read_bmp(dir / "again.bmp") == img);

    auto truncated = bytes;
    truncated.resize(60);
    std::ofstream(dir / "short.bmp", std::ios::binary).write(reinterpret_cast<const char*>(truncated.data()), 60);
    CHECK_THROWS_AS(read_image(dir / "short.bmp"), DataError);
  }
}

TEST_CASE("luminance conversion") {
  Image8 img = make_image8(1, 4, 3);
  const std::uint8_t rgb[4][3] = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {30, 140, 220}};
  for (Index x = 0; x < 4; ++x) {
    for (Index c = 0; c < 3; ++c) img.at(0, x, c) = rgb[x][c];
  }
  const YCbCr ycc = to_ycbcr(img);
  REQUIRE(ycc.cbcr.has_value());
  for (Index x = 0; x < 4; ++x) {
    const double r = rgb[x][0] / 255.0, g = rgb[x][1] / 255.0, b = rgb[x][2] / 255.0;
    CHECK(ycc.y[x] == doctest::Approx(0.299 * r + 0.587 * g + 0.114 * b).epsilon(1e-6));
  }
  // Round trip through 8 bits reproduces the original pixels.
  const Image8 back = to_image8(recolor(ycc.y, &*ycc.cbcr));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= 1);

  Image8 gray = make_image8(2, 2, 1);
  gray.pixels = {0, 51, 204, 255};
  const YCbCr g = to_ycbcr(gray);
  CHECK_FALSE(g.cbcr.has_value());
  CHECK(g.y[1] == doctest::Approx(0.2));
  CHECK(to_image8(recolor(g.y, nullptr)) == gray);
}

TEST_CASE("crop offsets cover the extent") {
  CHECK(crop_offsets(448, 448, 200) == std::vector<Index>{0});
  CHECK(crop_offsets(100, 448, 200) == std::vector<Index>{0});
  CHECK(crop_offsets(64, 32, 16) == std::vector<Index>{0, 16, 32});
  CHECK(crop_offsets(70, 32, 16) == std::vector<Index>{0, 16, 32, 38});
  CHECK_THROWS(crop_offsets(64, 32, 0));
  for (Index length : {33, 100, 479, 640}) {
    const auto offs = crop_offsets(length, 32, 24);
    CHECK(offs.front() == 0);
    CHECK(offs.back() + 32 == length);
    CHECK(std::is_sorted(offs.begin(), offs.end()));
    for (std::size_t i = 1; i < offs.size(); ++i) CHECK(offs[i] - offs[i - 1] <= 24);
  }
}

TEST_CASE("reflect padding and cropping") {
  const Tensor<float> x = ramp(2, 3, 4);
  const Tensor<float> p = pad_reflect(x, 6, 7);
  REQUIRE(p.shape() == Shape{2, 6, 7});
  // Mirror without repeating the edge: 0 1 2 1 0 1 ...
  const Index ry[6] = {0, 1, 2, 1, 0, 1}, rx[7] = {0, 1, 2, 3, 2, 1, 0};
  for (Index c = 0; c < 2; ++c) {
    for (Index y = 0; y < 6; ++y) {
      for (Index xx = 0; xx < 7; ++xx) CHECK(p.at(c, y, xx) == x.at(c, ry[y], rx[xx]));
    }
  }
  CHECK(crop(p, 0, 0, 3, 4) == x);
  CHECK_THROWS(pad_reflect(x, 2, 4));
  CHECK_THROWS(crop(x, 1, 0, 3, 4));
}

TEST_CASE("sliding crops of a sample") {
  ImagePairSample s;
  s.id = "scene";
  s.ir = ramp(1, 40, 64);
  s.vi_y = ramp(1, 40, 64);
  s.vi_cbcr = ramp(2, 40, 64);
  s.label[3] = 1;
  const auto crops = crop_sliding(s, 32, 16);
  std::vector<std::string> ids;
  for (const auto& c : crops) ids.push_back(c.id);
  CHECK(ids == std::vector<std::string>{"scene_0_0", "scene_0_16", "scene_0_32", "scene_8_0", "scene_8_16", "scene_8_32"});
  for (const auto& c : crops) {
    CHECK(c.ir.shape() == Shape{1, 32, 32});
    CHECK(c.vi_cbcr->shape() == Shape{2, 32, 32});
    CHECK(c.label == s.label);
  }
  CHECK(crops[4].ir == crop(s.ir, 8, 16, 32, 32));

  // Smaller than the crop: padded up to one window.
  s.ir = s.vi_y = ramp(1, 20, 20);
  s.vi_cbcr.reset();
  const auto small = crop_sliding(s, 32, 16);
  REQUIRE(small.size() == 1);
  CHECK(small[0].ir == pad_reflect(s.ir, 32, 32));
  CHECK_THROWS(crop_sliding(s, 20, 16));
}

TEST_CASE("epoch batches") {
  const auto a = epoch_batches(10, 4, 7, 0), b = epoch_batches(10, 4, 7, 0);
  CHECK(a == b);
  REQUIRE(a.size() == 3);
  CHECK(a[2].size() == 2);
  std::vector<Index> all;
  for (const auto& batch : a) all.insert(all.end(), batch.begin(), batch.end());
  std::sort(all.begin(), all.end());
  std::vector<Index> expected(10);
  std::iota(expected.begin(), expected.end(), Index{0});
  CHECK(all == expected);
  CHECK(epoch_batches(10, 4, 7, 1) != a);
  CHECK(epoch_batches(10, 4, 8, 0) != a);
  CHECK_THROWS_AS(epoch_batches(0, 4, 7, 0), DataError);
}

TEST_CASE("manifest parsing and serialisation") {
  const DatasetManifest m = load_manifest(fixture("manifest.json"));
  CHECK(m.split == Split::Train);
  REQUIRE(m.entries.size() == 8);
  CHECK(m.entries[7].vi == fixture("vi/pair_07.bmp"));
  CHECK_NOTHROW(validate_manifest(m));

  const std::string text = serialize_manifest(m, fixture(""));
  const DatasetManifest again = parse_manifest(text, fixture(""));
  CHECK(again.entries == m.entries);
  CHECK(serialize_manifest(again, fixture("")) == text);

  const DatasetManifest bare = parse_manifest(R"([{"ir": "a.png", "vi": "b.png", "annotation": "c.json"}])", "/data");
  CHECK(bare.entries[0].ir == std::filesystem::path("/data/a.png"));
  CHECK(parse_manifest(R"({"split": "test", "entries": []})", "/").split == Split::Test);

  CHECK_THROWS_AS(parse_manifest("{", "/"), DataError);
  CHECK_THROWS_AS(parse_manifest(R"({"split": "val", "entries": []})", "/"), DataError);
  CHECK_THROWS_AS(parse_manifest(R"([{"ir": "a.png"}])", "/"), DataError);

  DatasetManifest dup = m;
  dup.entries.push_back(m.entries[0]);
  CHECK_THROWS_AS(validate_manifest(dup), DataError);
  DatasetManifest missing = m;
  missing.entries[1].vi = fixture("vi/none.png");
  CHECK_THROWS_AS(validate_manifest(missing), DataError);
}

TEST_CASE("loading a pair") {
  const DatasetManifest m = load_manifest(fixture("manifest.json"));
  const LabelVocabulary vocab = load_vocabulary(fixture("vocab.json"));
  const ImagePairSample s = load_pair(m.entries[0], vocab);
  CHECK(s.id == "pair_00");
  CHECK(s.ir.shape() == Shape{1, 32, 32});
  CHECK(s.vi_y.shape() == s.ir.shape());
  CHECK(s.annotation.entities.size() == 2);
  CHECK(*std::max_element(s.ir.data().begin(), s.ir.data().end()) <= 1.0f);
  CHECK(*std::min_element(s.vi_y.data().begin(), s.vi_y.data().end()) >= 0.0f);

  ManifestEntry bad = m.entries[0];
  bad.vi = fixture("ir/large_00.png");
  try {
    load_pair(bad, vocab);
    FAIL("extent mismatch accepted");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("pair_00") != std::string::npos);
  }
}
