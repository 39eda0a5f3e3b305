#include "egmt/data.hpp"

#include "egmt/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace egmt {

using nlohmann::json;

namespace {

Index mirror(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

ManifestEntry parse_entry(const json& j, const std::filesystem::path& base_dir) {
  for (const char* key : {"ir", "vi", "annotation"}) {
    if (!j.contains(key) || !j[key].is_string()) throw DataError(std::string("manifest entry missing string field ") + key);
  }
  return {base_dir / j["ir"].get<std::string>(), base_dir / j["vi"].get<std::string>(),
          base_dir / j["annotation"].get<std::string>()};
}

}  // namespace

DatasetManifest parse_manifest(std::string_view document, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(document);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  DatasetManifest m;
  const json* list = &j;
  if (j.is_object()) {
    const std::string split = j.value("split", "train");
    if (split == "train") {
      m.split = Split::Train;
    } else if (split == "test") {
      m.split = Split::Test;
    } else {
      throw DataError("manifest split must be train or test");
    }
    if (!j.contains("entries")) throw DataError("manifest has no entries");
    list = &j["entries"];
  }
  if (!list->is_array()) throw DataError("manifest entries must be a list");
  for (const auto& e : *list) m.entries.push_back(parse_entry(e, base_dir));
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path());
}

std::string serialize_manifest(const DatasetManifest& manifest, const std::filesystem::path& base_dir) {
  json entries = json::array();
  auto rel = [&](const std::filesystem::path& p) { return std::filesystem::path(p).lexically_relative(base_dir).generic_string(); };
  for (const auto& e : manifest.entries) entries.push_back({{"ir", rel(e.ir)}, {"vi", rel(e.vi)}, {"annotation", rel(e.annotation)}});
  json j;
  j["split"] = manifest.split == Split::Train ? "train" : "test";
  j["entries"] = std::move(entries);
  return j.dump(2) + "\n";
}

void validate_manifest(const DatasetManifest& manifest) {
  std::set<std::string> stems;
  for (const auto& e : manifest.entries) {
    const std::string stem = entry_stem(e);
    if (!stems.insert(stem).second) throw DataError("duplicate stem " + stem + " in manifest");
    for (const auto& p : {e.ir, e.vi, e.annotation}) {
      if (!std::filesystem::exists(p)) throw DataError(stem + ": missing file " + p.string());
    }
  }
}

std::string entry_stem(const ManifestEntry& entry) { return entry.ir.stem().string(); }

YCbCr to_ycbcr(const Image8& image) {
  YCbCr out{Tensor<float>({1, image.height, image.width}), std::nullopt};
  if (image.channels == 1) {
    for (Index i = 0; i < image.height * image.width; ++i) {
      out.y[i] = static_cast<float>(image.pixels[static_cast<std::size_t>(i)] / 255.0);
    }
    return out;
  }
  Tensor<float> cbcr({2, image.height, image.width});
  const Index n = image.height * image.width;
  for (Index i = 0; i < n; ++i) {
    const double r = image.pixels[static_cast<std::size_t>(3 * i)] / 255.0;
    const double g = image.pixels[static_cast<std::size_t>(3 * i + 1)] / 255.0;
    const double b = image.pixels[static_cast<std::size_t>(3 * i + 2)] / 255.0;
    out.y[i] = static_cast<float>(0.299 * r + 0.587 * g + 0.114 * b);
    cbcr[i] = static_cast<float>(0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b);
    cbcr[n + i] = static_cast<float>(0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b);
  }
  out.cbcr = std::move(cbcr);
  return out;
}

Tensor<float> recolor(const Tensor<float>& y, const Tensor<float>* cbcr) {
  const Index h = y.dim(1), w = y.dim(2), n = h * w;
  auto clamp01 = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };
  if (!cbcr) {
    Tensor<float> out({1, h, w});
    for (Index i = 0; i < n; ++i) out[i] = clamp01(y[i]);
    return out;
  }
  if (cbcr->shape() != Shape{2, h, w}) throw DataError("recolor: chroma extents differ from luminance");
  Tensor<float> out({3, h, w});
  for (Index i = 0; i < n; ++i) {
    const double yy = y[i], cb = (*cbcr)[i] - 0.5, cr = (*cbcr)[n + i] - 0.5;
    out[i] = clamp01(yy + 1.402 * cr);
    out[n + i] = clamp01(yy - 0.344136 * cb - 0.714136 * cr);
    out[2 * n + i] = clamp01(yy + 1.772 * cb);
  }
  return out;
}

Image8 to_image8(const Tensor<float>& chw) {
  const Index c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Image8 img = make_image8(h, w, c);
  for (Index k = 0; k < c; ++k) {
    for (Index p = 0; p < h * w; ++p) {
      const double v = std::clamp(static_cast<double>(chw[k * h * w + p]), 0.0, 1.0);
      img.pixels[static_cast<std::size_t>(p * c + k)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return img;
}

Tensor<float> to_tensor(const Image8& image) {
  const Index c = image.channels, h = image.height, w = image.width;
  Tensor<float> t({c, h, w});
  for (Index k = 0; k < c; ++k) {
    for (Index p = 0; p < h * w; ++p) t[k * h * w + p] = static_cast<float>(image.pixels[static_cast<std::size_t>(p * c + k)] / 255.0);
  }
  return t;
}

ImagePairSample load_pair(const ManifestEntry& entry, const LabelVocabulary& vocab) {
  ImagePairSample s;
  s.id = entry_stem(entry);
  try {
    const YCbCr ir = to_ycbcr(read_image(entry.ir));
    YCbCr vi = to_ycbcr(read_image(entry.vi));
    if (ir.y.shape() != vi.y.shape()) {
      throw DataError("extent mismatch: ir " + shape_string(ir.y.shape()) + " vs vi " + shape_string(vi.y.shape()));
    }
    s.ir = ir.y;
    s.vi_y = std::move(vi.y);
    s.vi_cbcr = std::move(vi.cbcr);
    s.annotation = load_annotation(entry.annotation);
  } catch (const AnnotationError& e) {
    throw DataError(s.id + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(s.id + ": " + e.what());
  }
  s.label = entities_to_labels(s.annotation, vocab);
  return s;
}

Tensor<float> pad_reflect(const Tensor<float>& x, Index height, Index width) {
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (height < h || width < w) throw std::invalid_argument("pad_reflect: target smaller than input");
  Tensor<float> out({c, height, width});
  for (Index k = 0; k < c; ++k) {
    for (Index y = 0; y < height; ++y) {
      for (Index xx = 0; xx < width; ++xx) out.at(k, y, xx) = x.at(k, mirror(y, h), mirror(xx, w));
    }
  }
  return out;
}

Tensor<float> crop(const Tensor<float>& x, Index y0, Index x0, Index height, Index width) {
  const Index c = x.dim(0);
  if (y0 < 0 || x0 < 0 || y0 + height > x.dim(1) || x0 + width > x.dim(2)) throw std::invalid_argument("crop out of range");
  Tensor<float> out({c, height, width});
  for (Index k = 0; k < c; ++k) {
    for (Index y = 0; y < height; ++y) {
      for (Index xx = 0; xx < width; ++xx) out.at(k, y, xx) = x.at(k, y0 + y, x0 + xx);
    }
  }
  return out;
}

std::vector<Index> crop_offsets(Index length, Index size, Index stride) {
  if (stride < 1) throw std::invalid_argument("crop stride must be >= 1");
  if (length <= size) return {0};
  std::vector<Index> offs;
  for (Index o = 0; o + size <= length; o += stride) offs.push_back(o);
  if (offs.back() + size < length) offs.push_back(length - size);
  return offs;
}

std::vector<ImagePairSample> crop_sliding(const ImagePairSample& sample, Index size, Index stride) {
  if (size < 16 || size % 16) throw std::invalid_argument("crop size must be a positive multiple of 16");
  const Index h = sample.ir.dim(1), w = sample.ir.dim(2);
  const Index ph = std::max(h, size), pw = std::max(w, size);
  auto padded = [&](const Tensor<float>& t) { return (ph == h && pw == w) ? t : pad_reflect(t, ph, pw); };
  const Tensor<float> ir = padded(sample.ir), vi = padded(sample.vi_y);
  std::optional<Tensor<float>> cbcr;
  if (sample.vi_cbcr) cbcr = padded(*sample.vi_cbcr);

  std::vector<ImagePairSample> out;
  for (Index oy : crop_offsets(ph, size, stride)) {
    for (Index ox : crop_offsets(pw, size, stride)) {
      ImagePairSample p;
      p.id = sample.id + "_" + std::to_string(oy) + "_" + std::to_string(ox);
      p.ir = crop(ir, oy, ox, size, size);
      p.vi_y = crop(vi, oy, ox, size, size);
      if (cbcr) p.vi_cbcr = crop(*cbcr, oy, ox, size, size);
      p.annotation = sample.annotation;
      p.label = sample.label;
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<std::vector<Index>> epoch_batches(Index count, Index batch, std::uint64_t seed, std::uint64_t epoch) {
  if (count < 1) throw DataError("empty dataset");
  if (batch < 1) throw std::invalid_argument("batch size must be >= 1");
  std::vector<Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng = Rng::derive(seed, epoch);
  rng.shuffle(order);
  std::vector<std::vector<Index>> batches;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace egmt
