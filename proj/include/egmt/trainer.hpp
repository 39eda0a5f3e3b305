#pragma once

#include "egmt/config.hpp"
#include "egmt/data.hpp"
#include "egmt/grad_check.hpp"
#include "egmt/model.hpp"
#include "egmt/rng.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace egmt {

template <typename Scalar>
struct AdamState {
  ParameterSet<Scalar> m, v;
  Index step = 0;

  static AdamState zeros_like(const ParameterSet<Scalar>& params) { return {params.zeros_like(), params.zeros_like(), 0}; }
  bool operator==(const AdamState&) const = default;
};

// One bias-corrected Adam update in place. Throws NumericError naming the first
// tensor whose gradient is not finite; parameters are untouched in that case.
template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state, const ParameterSet<Scalar>& grads,
               const TrainConfig& cfg);

// Scales gradients so their global L2 norm is at most max_norm. Returns the norm before scaling.
template <typename Scalar>
double clip_gradients(ParameterSet<Scalar>& grads, double max_norm);

struct TrainState {
  ParameterSet<float> params;
  AdamState<float> adam;
  Index step = 0;
  Rng rng;  // mask stream, advanced once per sample
};

struct Checkpoint {
  RunConfig config;
  TrainState state;
};

// EGCK container: "EGCK", u64 manifest length, JSON manifest, then EGT1 blobs
// at the offsets listed in the manifest.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint initial_checkpoint(const RunConfig& cfg);

struct LossRecord {
  Index step = 0;
  double total = 0, fusion = 0, intensity = 0, edge = 0, ssim = 0, classification = 0;
  double lambda1 = 0, lambda2 = 0, w1 = 0, w2 = 0;
};

std::string loss_csv_header();
std::string loss_csv_row(const LossRecord& r);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const LossRecord&)> on_step;
};

struct TrainResult {
  Checkpoint final;
  std::vector<LossRecord> log;
};

// Entity features fed to the model: stacked embeddings, or a single zero row when
// text guidance is disabled.
Tensor<float> entity_input(const ImagePairSample& sample, const ModelConfig& cfg);

// Forward, loss and gradient for one sample. The mask stream is consumed only when masking is active.
struct SampleStep {
  ParameterSet<float> grads;
  LossRecord losses;
};
SampleStep sample_gradients(const ParameterSet<float>& params, const ImagePairSample& sample, const RunConfig& cfg,
                            Rng& rng);

// L_total of one sample as a function of the parameters, mask disabled. Used for
// gradient checks in either precision.
template <typename Scalar>
Objective<Scalar> sample_objective(const ImagePairSample& sample, const RunConfig& cfg);

// Runs from `start` (its state and config) until the configured step count.
// Batches are fixed per (seed, epoch); gradients are averaged over the batch in order.
TrainResult train(const std::vector<ImagePairSample>& samples, Checkpoint start, const TrainOptions& options = {});

// Training crops for every manifest entry.
std::vector<ImagePairSample> load_training_samples(const DatasetManifest& manifest, const LabelVocabulary& vocab,
                                                   const DataConfig& cfg);

struct Inference {
  Tensor<float> fused;                          // 1×H×W in [0, 1]
  std::array<double, kNumLabels> probabilities;
};

// Inference on one pair of 1×H×W luminance images: pads to a multiple of the
// patch size, runs the network without gradients, crops back and clamps to [0, 1].
Inference infer(const ParameterSet<float>& params, const ModelConfig& cfg, const Tensor<float>& ir,
                const Tensor<float>& vi, const Tensor<float>& entities);
Tensor<float> fuse_image(const ParameterSet<float>& params, const ModelConfig& cfg, const Tensor<float>& ir,
                         const Tensor<float>& vi, const Tensor<float>& entities);

struct FuseOptions {
  bool color = false;  // recolor with the visible chroma when present
};

// Writes <stem>_fused.png for each entry; returns the written paths.
std::vector<std::filesystem::path> fuse_manifest(const Checkpoint& ckpt, const DatasetManifest& manifest,
                                                 const LabelVocabulary& vocab, const std::filesystem::path& out_dir,
                                                 const FuseOptions& options = {});

}  // namespace egmt
