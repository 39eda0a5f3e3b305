#include "egmt/entity.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace egmt {

using nlohmann::json;

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AnnotationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json(std::string_view document) {
  try {
    return json::parse(document);
  } catch (const json::parse_error& e) {
    throw AnnotationError(std::string("malformed JSON: ") + e.what());
  }
}

Modality parse_modality(const json& j) {
  if (!j.is_string()) throw AnnotationError("entity source must be a string");
  const auto s = j.get<std::string>();
  if (s == "ir") return Modality::Ir;
  if (s == "vi") return Modality::Vi;
  throw AnnotationError("entity source must be \"ir\" or \"vi\", got \"" + s + "\"");
}

std::vector<float> load_sidecar_row(const EmbeddingRef& ref, const std::filesystem::path& base_dir) {
  const auto path = base_dir / ref.file;
  Tensor<float> table;
  try {
    table = load_egt1(path.string());
  } catch (const std::exception& e) {
    throw AnnotationError("embedding sidecar " + path.string() + ": " + e.what());
  }
  if (table.rank() != 2) throw AnnotationError("embedding sidecar must be a matrix");
  if (ref.row < 0 || ref.row >= table.dim(0)) throw AnnotationError("embedding_ref row out of range");
  if (table.dim(1) != kEmbeddingDim) {
    throw AnnotationError("embedding length " + std::to_string(table.dim(1)) + " != " + std::to_string(kEmbeddingDim));
  }
  auto row = table.matrix().row(ref.row);
  return std::vector<float>(row.data(), row.data() + row.size());
}

}  // namespace

std::string_view modality_name(Modality m) { return m == Modality::Ir ? "ir" : "vi"; }

std::string fold_case(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (static_cast<unsigned char>(c) < 0x80) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> dedupe_entities(const std::vector<std::string>& texts) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& raw : texts) {
    std::string t = trim(raw);
    if (t.empty()) continue;
    if (seen.insert(fold_case(t)).second) out.push_back(std::move(t));
  }
  return out;
}

void validate_annotation(const EntityAnnotation& a) {
  if (a.entities.empty()) throw AnnotationError("annotation " + a.image_id + ": empty entity list");
  if (a.entities.size() > kMaxEntities) {
    throw AnnotationError("annotation " + a.image_id + ": more than " + std::to_string(kMaxEntities) + " entities");
  }
  std::set<std::string> seen;
  for (const auto& e : a.entities) {
    if (e.text.empty()) throw AnnotationError("annotation " + a.image_id + ": empty entity text");
    if (trim(e.text) != e.text) throw AnnotationError("entity \"" + e.text + "\" has surrounding whitespace");
    if (!seen.insert(fold_case(e.text)).second) throw AnnotationError("duplicate entity \"" + e.text + "\"");
    if (static_cast<Index>(e.embedding.size()) != kEmbeddingDim) {
      throw AnnotationError("entity \"" + e.text + "\": embedding length " + std::to_string(e.embedding.size()) +
                            " != " + std::to_string(kEmbeddingDim));
    }
    for (float v : e.embedding) {
      if (!std::isfinite(v)) throw AnnotationError("entity \"" + e.text + "\": non-finite embedding value");
    }
  }
}

EntityAnnotation parse_annotation(std::string_view document, const std::filesystem::path& base_dir) {
  const json j = parse_json(document);
  if (!j.is_object()) throw AnnotationError("annotation must be a JSON object");
  if (!j.contains("image_id") || !j["image_id"].is_string()) throw AnnotationError("missing string field image_id");
  if (!j.contains("entities") || !j["entities"].is_array()) throw AnnotationError("missing array field entities");

  EntityAnnotation a;
  a.image_id = j["image_id"].get<std::string>();
  for (const auto& je : j["entities"]) {
    if (!je.is_object()) throw AnnotationError("entity must be an object");
    EntityRecord r;
    if (!je.contains("text") || !je["text"].is_string()) throw AnnotationError("entity missing string field text");
    r.text = je["text"].get<std::string>();
    if (!je.contains("source")) throw AnnotationError("entity \"" + r.text + "\" missing source");
    r.source = parse_modality(je["source"]);
    const bool inline_emb = je.contains("embedding");
    const bool ref_emb = je.contains("embedding_ref");
    if (inline_emb == ref_emb) {
      throw AnnotationError("entity \"" + r.text + "\" needs exactly one of embedding / embedding_ref");
    }
    if (inline_emb) {
      const auto& arr = je["embedding"];
      if (!arr.is_array()) throw AnnotationError("embedding must be an array");
      r.embedding.reserve(arr.size());
      for (const auto& v : arr) {
        if (!v.is_number()) throw AnnotationError("embedding values must be numbers");
        r.embedding.push_back(v.get<float>());
      }
    } else {
      const auto& ref = je["embedding_ref"];
      if (!ref.is_object() || !ref.contains("file") || !ref["file"].is_string() || !ref.contains("row") ||
          !ref["row"].is_number_integer()) {
        throw AnnotationError("embedding_ref must be {\"file\": str, \"row\": int}");
      }
      r.embedding_ref = EmbeddingRef{ref["file"].get<std::string>(), ref["row"].get<Index>()};
      r.embedding = load_sidecar_row(*r.embedding_ref, base_dir);
    }
    a.entities.push_back(std::move(r));
  }
  validate_annotation(a);
  return a;
}

EntityAnnotation load_annotation(const std::filesystem::path& path) {
  try {
    return parse_annotation(read_text(path), path.parent_path());
  } catch (const AnnotationError& e) {
    throw AnnotationError(path.filename().string() + ": " + e.what());
  }
}

std::string serialize_annotation(const EntityAnnotation& a) {
  json entities = json::array();
  for (const auto& e : a.entities) {
    json je;
    je["text"] = e.text;
    je["source"] = std::string(modality_name(e.source));
    if (e.embedding_ref) {
      je["embedding_ref"] = {{"file", e.embedding_ref->file}, {"row", e.embedding_ref->row}};
    } else {
      je["embedding"] = e.embedding;
    }
    entities.push_back(std::move(je));
  }
  json j;
  j["image_id"] = a.image_id;
  j["entities"] = std::move(entities);
  return j.dump();
}

void validate_vocabulary(const LabelVocabulary& v) {
  if (v.categories.size() != kNumLabels) {
    throw AnnotationError("vocabulary must have exactly " + std::to_string(kNumLabels) + " categories, got " +
                          std::to_string(v.categories.size()));
  }
  std::map<std::string, std::string> owner;
  for (const auto& cat : v.categories) {
    auto it = v.synonyms.find(cat);
    if (it == v.synonyms.end()) throw AnnotationError("vocabulary category " + cat + " has no synonyms");
    for (const auto& s : it->second) {
      const auto folded = fold_case(s);
      auto [pos, inserted] = owner.emplace(folded, cat);
      if (!inserted && pos->second != cat) {
        throw AnnotationError("synonym \"" + s + "\" appears in both " + pos->second + " and " + cat);
      }
    }
  }
}

LabelVocabulary parse_vocabulary(std::string_view document) {
  const json j = parse_json(document);
  if (!j.is_object() || !j.contains("categories") || !j["categories"].is_array()) {
    throw AnnotationError("vocabulary must contain a categories array");
  }
  LabelVocabulary v;
  for (const auto& c : j["categories"]) {
    if (!c.is_string()) throw AnnotationError("category names must be strings");
    v.categories.push_back(c.get<std::string>());
  }
  // Every category matches its own name plus any listed synonyms.
  const json syn = j.value("synonyms", json::object());
  for (const auto& cat : v.categories) {
    std::set<std::string> words{cat};
    if (syn.contains(cat)) {
      if (!syn[cat].is_array()) throw AnnotationError("synonyms of " + cat + " must be an array");
      for (const auto& w : syn[cat]) {
        if (!w.is_string()) throw AnnotationError("synonyms must be strings");
        words.insert(w.get<std::string>());
      }
    }
    v.synonyms[cat] = std::move(words);
  }
  for (const auto& [cat, _] : syn.items()) {
    if (std::find(v.categories.begin(), v.categories.end(), cat) == v.categories.end()) {
      throw AnnotationError("synonyms given for unknown category " + cat);
    }
  }
  validate_vocabulary(v);
  return v;
}

LabelVocabulary load_vocabulary(const std::filesystem::path& path) { return parse_vocabulary(read_text(path)); }

LabelVocabulary default_vocabulary() {
  LabelVocabulary v;
  const std::vector<std::pair<std::string, std::set<std::string>>> table = {
      {"person", {"person", "people", "pedestrian", "pedestrians", "man", "men", "woman", "women"}},
      {"car", {"car", "cars", "vehicle", "vehicles"}},
      {"bus", {"bus", "buses"}},
      {"truck", {"truck", "trucks"}},
      {"motorcycle", {"motorcycle", "motorcycles", "motorbike", "motorbikes"}},
      {"bicycle", {"bicycle", "bicycles", "bike", "bikes"}},
      {"lamp", {"lamp", "lamps", "street light", "street lights", "streetlight"}},
      {"building", {"building", "buildings", "house", "houses"}},
      {"tree", {"tree", "trees"}},
  };
  for (const auto& [cat, words] : table) {
    v.categories.push_back(cat);
    v.synonyms[cat] = words;
  }
  return v;
}

LabelVector entities_to_labels(const EntityAnnotation& annotation, const LabelVocabulary& vocab) {
  std::map<std::string, std::size_t> lookup;
  for (std::size_t c = 0; c < vocab.categories.size(); ++c) {
    for (const auto& s : vocab.synonyms.at(vocab.categories[c])) lookup.emplace(fold_case(s), c);
  }
  LabelVector y{};
  for (const auto& e : annotation.entities) {
    auto it = lookup.find(fold_case(e.text));
    if (it != lookup.end()) y[it->second] = 1;
  }
  return y;
}

Tensor<float> stack_entity_features(const EntityAnnotation& annotation) {
  const Index e = static_cast<Index>(annotation.entities.size());
  if (e == 0) throw AnnotationError("stack_entity_features: no entities");
  Tensor<float> out({e, kEmbeddingDim});
  for (Index i = 0; i < e; ++i) {
    const auto& emb = annotation.entities[static_cast<std::size_t>(i)].embedding;
    if (static_cast<Index>(emb.size()) != kEmbeddingDim) throw AnnotationError("embedding length mismatch");
    out.matrix().row(i) = Eigen::Map<const Eigen::RowVectorXf>(emb.data(), kEmbeddingDim);
  }
  return out;
}

}  // namespace egmt
