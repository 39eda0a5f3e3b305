#pragma once

#include "egmt/tensor.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace egmt {

inline constexpr Index kEmbeddingDim = 768;
inline constexpr std::size_t kMaxEntities = 16;
inline constexpr std::size_t kNumLabels = 9;

struct AnnotationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Modality { Ir, Vi };

std::string_view modality_name(Modality m);

// Sidecar location of an embedding stored as a row of an EGT1 matrix.
struct EmbeddingRef {
  std::string file;
  Index row = 0;
  bool operator==(const EmbeddingRef&) const = default;
};

struct EntityRecord {
  std::string text;
  Modality source = Modality::Ir;
  std::vector<float> embedding;
  std::optional<EmbeddingRef> embedding_ref;  // kept so serialisation reproduces the sidecar form
  bool operator==(const EntityRecord&) const = default;
};

struct EntityAnnotation {
  std::string image_id;
  std::vector<EntityRecord> entities;
  bool operator==(const EntityAnnotation&) const = default;
};

using LabelVector = std::array<int, kNumLabels>;

struct LabelVocabulary {
  std::vector<std::string> categories;
  std::map<std::string, std::set<std::string>> synonyms;
};

// ASCII case folding; bytes outside ASCII pass through unchanged.
std::string fold_case(std::string_view s);
std::string trim(std::string_view s);

// Keeps the first of any case-insensitively equal strings, trimmed. Blank strings are dropped.
std::vector<std::string> dedupe_entities(const std::vector<std::string>& texts);

// Parses one annotation document. Sidecar references resolve against `base_dir`.
EntityAnnotation parse_annotation(std::string_view document, const std::filesystem::path& base_dir = {});
EntityAnnotation load_annotation(const std::filesystem::path& path);
// Canonical JSON text: sorted keys, no whitespace.
std::string serialize_annotation(const EntityAnnotation& annotation);
void validate_annotation(const EntityAnnotation& annotation);

LabelVocabulary parse_vocabulary(std::string_view document);
LabelVocabulary load_vocabulary(const std::filesystem::path& path);
LabelVocabulary default_vocabulary();
void validate_vocabulary(const LabelVocabulary& vocab);

LabelVector entities_to_labels(const EntityAnnotation& annotation, const LabelVocabulary& vocab);

// E×768, row e is the embedding of entity e.
Tensor<float> stack_entity_features(const EntityAnnotation& annotation);

}  // namespace egmt
