// Writes the synthetic test fixtures under the given directory (tests/fixtures in
// the repository). Output is a pure function of the constants below.

#include "egmt/entity.hpp"
#include "egmt/image_io.hpp"
#include "egmt/rng.hpp"
#include "egmt/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace egmt;

namespace {

const std::vector<std::string> kEntityPool = {"person", "car",   "bus",        "truck", "motorcycle", "bicycle",
                                              "lamp",   "house", "tree",       "road",  "sky",        "fence",
                                              "people", "cars",  "street lamp", "pedestrian"};

// Entities per pair, hand picked so that every category occurs and a few texts fall outside the vocabulary.
const std::vector<std::vector<std::string>> kPairEntities = {
    {"person", "road"},
    {"car", "tree", "sky"},
    {"bus", "people", "street lamp"},
    {"truck", "fence"},
    {"motorcycle", "pedestrian", "road", "lamp"},
    {"bicycle", "house"},
    {"cars", "tree", "person"},
    {"house", "sky", "lamp", "car", "fence"},
};

Index pool_row(const std::string& text) {
  auto it = std::find(kEntityPool.begin(), kEntityPool.end(), text);
  if (it == kEntityPool.end()) throw std::runtime_error("entity not in pool: " + text);
  return it - kEntityPool.begin();
}

// Placeholder text features: unit-length Gaussian vectors, one stream per pool row.
Tensor<float> embedding_table(const std::vector<std::string>& pool) {
  Tensor<float> t({static_cast<Index>(pool.size()), kEmbeddingDim});
  for (Index r = 0; r < t.dim(0); ++r) {
    Rng rng = Rng::derive(2024, static_cast<std::uint64_t>(r));
    double norm = 0;
    for (Index c = 0; c < kEmbeddingDim; ++c) {
      const double v = rng.normal();
      t[r * kEmbeddingDim + c] = static_cast<float>(v);
      norm += v * v;
    }
    t.matrix().row(r) /= static_cast<float>(std::sqrt(norm));
  }
  return t;
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

struct Scene {
  Image8 ir, vi;
};

// Infrared: warm targets on a cool gradient. Visible: textured background with
// coloured structures at the same positions and a faint copy of the targets.
Scene make_scene(Index size, std::uint64_t seed) {
  Rng rng = Rng::derive(7, seed);
  struct Blob {
    double y, x, r, heat;
  };
  std::vector<Blob> blobs;
  const int count = 2 + static_cast<int>(rng.below(3));
  for (int i = 0; i < count; ++i) {
    blobs.push_back({rng.uniform() * size, rng.uniform() * size, (0.08 + 0.12 * rng.uniform()) * size,
                     0.5 + 0.5 * rng.uniform()});
  }
  const double freq = 2.0 + 4.0 * rng.uniform(), phase = rng.uniform() * 6.283;
  const double tilt = rng.uniform() * 3.1416;
  const double hue_r = 0.6 + 0.4 * rng.uniform(), hue_b = 0.6 + 0.4 * rng.uniform();

  Scene s{make_image8(size, size, 1), make_image8(size, size, 3)};
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) / size, v = static_cast<double>(y) / size;
      double heat = 0;
      for (const auto& b : blobs) {
        const double d2 = ((y - b.y) * (y - b.y) + (x - b.x) * (x - b.x)) / (b.r * b.r);
        heat = std::max(heat, b.heat * std::exp(-d2));
      }
      const double ir = 0.12 + 0.15 * v + 0.7 * heat + 0.02 * rng.normal();
      s.ir.at(y, x, 0) = to_u8(ir);

      const double along = std::cos(tilt) * u + std::sin(tilt) * v;
      const double texture = 0.5 + 0.25 * std::sin(6.283 * freq * along + phase);
      const bool step = (x / (size / 4) + y / (size / 4)) % 2 == 0;
      const double lum = 0.25 + 0.45 * texture + (step ? 0.12 : -0.05) + 0.1 * heat + 0.015 * rng.normal();
      s.vi.at(y, x, 0) = to_u8(lum * hue_r);
      s.vi.at(y, x, 1) = to_u8(lum);
      s.vi.at(y, x, 2) = to_u8(lum * hue_b + 0.05 * u);
    }
  }
  return s;
}

json annotation_doc(const std::string& id, const std::vector<std::string>& entities, const std::string& sidecar) {
  json list = json::array();
  for (std::size_t i = 0; i < entities.size(); ++i) {
    list.push_back({{"text", entities[i]},
                    {"source", i % 2 == 0 ? "ir" : "vi"},
                    {"embedding_ref", {{"file", sidecar}, {"row", pool_row(entities[i])}}}});
  }
  return {{"image_id", id}, {"entities", list}};
}

json inline_doc(const std::string& id, const std::vector<std::string>& entities, const Tensor<float>& table) {
  json list = json::array();
  for (std::size_t i = 0; i < entities.size(); ++i) {
    const Index r = pool_row(entities[i]);
    std::vector<float> emb(table.ptr() + r * kEmbeddingDim, table.ptr() + (r + 1) * kEmbeddingDim);
    list.push_back({{"text", entities[i]}, {"source", "vi"}, {"embedding", emb}});
  }
  return {{"image_id", id}, {"entities", list}};
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  f << j.dump(2) << "\n";
}

void write_raw(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures <output dir>\n";
    return 1;
  }
  const fs::path root = argv[1];
  for (const char* d : {"ir", "vi", "annotations", "annotations_inline", "invalid_annotations"}) {
    fs::create_directories(root / d);
  }

  const Tensor<float> table = embedding_table(kEntityPool);
  save_egt1((root / "embeddings.egt").string(), table);

  json entries = json::array();
  for (std::size_t i = 0; i < kPairEntities.size(); ++i) {
    const std::string id = "pair_0" + std::to_string(i);
    const Scene s = make_scene(32, i);
    write_png(root / "ir" / (id + ".png"), s.ir);
    // One visible image goes through the BMP reader.
    const std::string vi_name = id + (i == 7 ? ".bmp" : ".png");
    if (i == 7) {
      write_bmp(root / "vi" / vi_name, s.vi);
    } else {
      write_png(root / "vi" / vi_name, s.vi);
    }
    write_json(root / "annotations" / (id + ".json"), annotation_doc(id, kPairEntities[i], "../embeddings.egt"));
    entries.push_back({{"ir", "ir/" + id + ".png"}, {"vi", "vi/" + vi_name}, {"annotation", "annotations/" + id + ".json"}});
  }
  write_json(root / "manifest.json", {{"split", "train"}, {"entries", entries}});

  // Large pair, separate manifest; "building" is not in the pool so it is stored inline.
  {
    const Scene s = make_scene(448, 100);
    write_png(root / "ir" / "large_00.png", s.ir);
    write_png(root / "vi" / "large_00.png", s.vi);
    json doc = annotation_doc("large_00", {"person", "car", "tree"}, "../embeddings.egt");
    Rng rng = Rng::derive(2024, 999);
    std::vector<float> building(static_cast<std::size_t>(kEmbeddingDim));
    double norm = 0;
    for (auto& v : building) {
      v = static_cast<float>(rng.normal());
      norm += static_cast<double>(v) * v;
    }
    for (auto& v : building) v = static_cast<float>(v / std::sqrt(norm));
    doc["entities"].push_back({{"text", "building"}, {"source", "vi"}, {"embedding", building}});
    write_json(root / "annotations" / "large_00.json", doc);
    write_json(root / "manifest_large.json",
               {{"split", "test"},
                {"entries", json::array({{{"ir", "ir/large_00.png"}, {"vi", "vi/large_00.png"},
                                          {"annotation", "annotations/large_00.json"}}})}});
  }

  for (int i = 0; i < 3; ++i) {
    const std::string id = "inline_0" + std::to_string(i);
    write_json(root / "annotations_inline" / (id + ".json"), inline_doc(id, kPairEntities[static_cast<std::size_t>(i)], table));
  }

  // Each document breaks exactly one rule.
  const fs::path bad = root / "invalid_annotations";
  write_raw(bad / "truncated.json", R"({"image_id": "t", "entities": [{"text": "car", )");
  write_json(bad / "duplicate.json", annotation_doc("d", {"car", "car"}, "../embeddings.egt"));
  {
    json doc = annotation_doc("c", {"car", "tree"}, "../embeddings.egt");
    doc["entities"][0]["text"] = "Car";
    doc["entities"][1]["text"] = "car";
    write_json(bad / "case_duplicate.json", doc);
  }
  {
    json doc = inline_doc("s", {"car"}, table);
    doc["entities"][0]["embedding"] = json::array({0.1, 0.2, 0.3});
    write_json(bad / "short_embedding.json", doc);
  }
  {
    json doc = annotation_doc("m", {"car"}, "../embeddings.egt");
    doc["entities"][0]["source"] = "thermal";
    write_json(bad / "bad_source.json", doc);
  }
  write_json(bad / "empty.json", {{"image_id", "e"}, {"entities", json::array()}});
  {
    json doc = annotation_doc("r", {"car"}, "../embeddings.egt");
    doc["entities"][0]["embedding_ref"]["row"] = 1000;
    write_json(bad / "row_out_of_range.json", doc);
  }

  write_json(root / "vocab.json",
             {{"categories", {"person", "car", "bus", "truck", "motorcycle", "bicycle", "lamp", "building", "tree"}},
              {"synonyms",
               {{"person", {"people", "pedestrian"}},
                {"car", {"cars"}},
                {"lamp", {"street lamp"}},
                {"building", {"house"}}}}});

  // Fixture training setup: 32×32 patches taken whole.
  write_json(root / "config.json", {{"data", {{"crop", 32}, {"stride", 32}}}, {"train", {{"max_steps", 300}}}});
  write_json(root / "config_short.json", {{"data", {{"crop", 32}, {"stride", 32}}}, {"train", {{"max_steps", 6}}}});

  // Small 8-bit palettised BMP for the decoder tests.
  Image8 gray = make_image8(5, 7, 1);
  for (Index y = 0; y < 5; ++y) {
    for (Index x = 0; x < 7; ++x) gray.at(y, x, 0) = static_cast<std::uint8_t>(y * 40 + x * 5);
  }
  write_bmp(root / "gray_5x7.bmp", gray);
  std::cout << "fixtures written to " << root.string() << "\n";
  return 0;
}
