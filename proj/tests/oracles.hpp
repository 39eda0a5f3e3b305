#pragma once

// Reference computations shared by the unit tests and the acceptance binary.

#include "egmt/entity.hpp"
#include "egmt/rng.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace egmt::test {

inline EntityAnnotation random_annotation(Rng& rng, const std::string& id) {
  static const std::vector<std::string> words = {"car", "Person", "tree", "street lamp", "dog", "bus", "fence", "sky",
                                                 "truck", "bike", "house", "road"};
  std::vector<std::string> pool = words;
  rng.shuffle(pool);
  EntityAnnotation a;
  a.image_id = id;
  const std::size_t n = 1 + rng.below(8);
  for (std::size_t i = 0; i < n; ++i) {
    EntityRecord r;
    r.text = pool[i];
    r.source = rng.bernoulli(0.5) ? Modality::Ir : Modality::Vi;
    r.embedding.resize(static_cast<std::size_t>(kEmbeddingDim));
    for (auto& v : r.embedding) v = static_cast<float>(rng.normal() * std::pow(10.0, static_cast<double>(rng.below(7)) - 3));
    a.entities.push_back(std::move(r));
  }
  return a;
}

using Scores = std::vector<std::array<double, kNumLabels>>;

// Mis-ordered (positive, negative) label pairs per sample, ties counting half.
inline double ranking_loss_oracle(const Scores& s, const std::vector<LabelVector>& y) {
  double total = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    double bad = 0, pairs = 0;
    for (std::size_t p = 0; p < kNumLabels; ++p) {
      for (std::size_t q = 0; q < kNumLabels; ++q) {
        if (!y[i][p] || y[i][q]) continue;
        pairs += 1;
        bad += s[i][p] < s[i][q] ? 1.0 : (s[i][p] == s[i][q] ? 0.5 : 0.0);
      }
    }
    if (pairs > 0) total += bad / pairs;
  }
  return total / static_cast<double>(s.size());
}

// Macro ROC area from correctly ordered (positive, negative) sample pairs per class.
inline double auc_oracle(const Scores& s, const std::vector<LabelVector>& y) {
  double total = 0;
  int used = 0;
  for (std::size_t c = 0; c < kNumLabels; ++c) {
    double good = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (std::size_t j = 0; j < s.size(); ++j) {
        if (!y[i][c] || y[j][c]) continue;
        pairs += 1;
        good += s[i][c] > s[j][c] ? 1.0 : (s[i][c] == s[j][c] ? 0.5 : 0.0);
      }
    }
    if (pairs > 0) {
      total += good / pairs;
      ++used;
    }
  }
  return total / used;
}

// Random multi-label problem; coarse scores (multiples of 0.1) force ties.
inline void random_problem(std::size_t n, std::uint64_t seed, bool coarse, Scores& s, std::vector<LabelVector>& y) {
  Rng rng(seed);
  s.assign(n, {});
  y.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < kNumLabels; ++c) {
      y[i][c] = rng.uniform() < 0.4;
      s[i][c] = coarse ? std::round(rng.uniform() * 10) / 10 : rng.uniform();
    }
  }
}

}  // namespace egmt::test
