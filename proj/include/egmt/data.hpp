#pragma once

#include "egmt/entity.hpp"
#include "egmt/image_io.hpp"
#include "egmt/tensor.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace egmt {

struct ImagePairSample {
  std::string id;
  Tensor<float> ir;                      // 1×H×W
  Tensor<float> vi_y;                    // 1×H×W
  std::optional<Tensor<float>> vi_cbcr;  // 2×H×W, chroma offset by 0.5
  EntityAnnotation annotation;
  LabelVector label{};
};

enum class Split { Train, Test };

struct ManifestEntry {
  std::filesystem::path ir, vi, annotation;  // resolved against the manifest directory
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  Split split = Split::Train;
  std::vector<ManifestEntry> entries;
};

// Accepts {"split": "train"|"test", "entries": [...]} or a bare entry list.
DatasetManifest parse_manifest(std::string_view document, const std::filesystem::path& base_dir);
DatasetManifest load_manifest(const std::filesystem::path& path);
// Paths are written relative to `base_dir`.
std::string serialize_manifest(const DatasetManifest& manifest, const std::filesystem::path& base_dir);
// Unique stems and existing files.
void validate_manifest(const DatasetManifest& manifest);
std::string entry_stem(const ManifestEntry& entry);

// Full-range BT.601.
struct YCbCr {
  Tensor<float> y;                      // 1×H×W
  std::optional<Tensor<float>> cbcr;    // 2×H×W, absent for gray input
};
YCbCr to_ycbcr(const Image8& image);
// 3×H×W RGB in [0, 1] from luminance and chroma, clamped; 1×H×W when chroma is absent.
Tensor<float> recolor(const Tensor<float>& y, const Tensor<float>* cbcr);
// C×H×W in [0, 1] -> 8-bit with rounding and clamping.
Image8 to_image8(const Tensor<float>& chw);
Tensor<float> to_tensor(const Image8& image);

ImagePairSample load_pair(const ManifestEntry& entry, const LabelVocabulary& vocab);

// Mirror padding on the bottom and right edges to (height, width).
Tensor<float> pad_reflect(const Tensor<float>& x, Index height, Index width);
Tensor<float> crop(const Tensor<float>& x, Index y0, Index x0, Index height, Index width);

// Window origins along one axis: 0, stride, ... plus a final window flush with the edge.
std::vector<Index> crop_offsets(Index length, Index size, Index stride);
std::vector<ImagePairSample> crop_sliding(const ImagePairSample& sample, Index size, Index stride);

// Sample indices grouped into batches for one epoch; the order depends only on (seed, epoch).
std::vector<std::vector<Index>> epoch_batches(Index count, Index batch, std::uint64_t seed, std::uint64_t epoch);

}  // namespace egmt
