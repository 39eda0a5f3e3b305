#pragma once

#include "egmt/autodiff.hpp"
#include "egmt/entity.hpp"

#include <array>
#include <utility>

namespace egmt {

struct FusionLossConfig {
  double alpha_int = 1.0;
  double alpha_edge = 15.0;
  double alpha_ssim = 5.0;
  Index ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_c1 = 0.01 * 0.01;
  double ssim_c2 = 0.03 * 0.03;

  void validate() const;
  bool operator==(const FusionLossConfig&) const = default;
};

enum class FocalForm {
  Standard,  // modulates by the probability of the true class
  Verbatim,  // modulates by (1 - p) whatever the label
};

struct FocalConfig {
  double gamma = 2.0;
  std::array<double, kNumLabels> class_weights = {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  FocalForm form = FocalForm::Standard;
  double clamp = 1e-7;

  void validate() const;
  bool operator==(const FocalConfig&) const = default;
};

// Per-class weight = negatives / samples, clamped to [0.05, 0.95].
std::array<double, kNumLabels> class_weights_from_labels(const std::vector<LabelVector>& labels);

// Normalised Gaussian window, size×size.
RowMatrix<double> gaussian_window(Index size, double sigma);

// Mean SSIM over all windows that fit inside the image (no padding).
double ssim_index(const RowMatrix<double>& a, const RowMatrix<double>& b, const FusionLossConfig& cfg = {});

// Images are 1×H×W variables; every loss returns a [1] variable.
template <typename Scalar>
Var<Scalar> intensity_loss(const Var<Scalar>& fused, const Var<Scalar>& ir, const Var<Scalar>& vi);

template <typename Scalar>
Var<Scalar> edge_loss(const Var<Scalar>& fused, const Var<Scalar>& ir, const Var<Scalar>& vi);

// Mean SSIM of a against b as a tape expression.
template <typename Scalar>
Var<Scalar> ssim(const Var<Scalar>& a, const Var<Scalar>& b, const FusionLossConfig& cfg);

template <typename Scalar>
Var<Scalar> ssim_loss(const Var<Scalar>& fused, const Var<Scalar>& ir, const Var<Scalar>& vi,
                      const FusionLossConfig& cfg);

template <typename Scalar>
struct FusionTerms {
  Var<Scalar> total, intensity, edge, ssim;
};

template <typename Scalar>
FusionTerms<Scalar> fusion_loss(const Var<Scalar>& fused, const Var<Scalar>& ir, const Var<Scalar>& vi,
                                const FusionLossConfig& cfg);

// probabilities: [9] variable.
template <typename Scalar>
Var<Scalar> focal_loss(const Var<Scalar>& probabilities, const LabelVector& labels, const FocalConfig& cfg);

// softmax(-w / tau) over a [2] variable.
template <typename Scalar>
Var<Scalar> task_weights(const Var<Scalar>& w, Scalar tau);

std::pair<double, double> task_weights(double w1, double w2, double tau);

template <typename Scalar>
struct LossBreakdown {
  Var<Scalar> total;
  double fusion = 0, intensity = 0, edge = 0, ssim = 0, classification = 0;
  double lambda1 = 0, lambda2 = 0;
};

// lambda1·L_fus + lambda2·L_cla. With `multi_task` off lambda is (1, 0) and the
// classification term is not evaluated.
template <typename Scalar>
LossBreakdown<Scalar> total_loss(const Var<Scalar>& fused, const Var<Scalar>& probabilities, const Var<Scalar>& ir,
                                 const Var<Scalar>& vi, const LabelVector& labels, const Var<Scalar>& task_w,
                                 const FusionLossConfig& fusion_cfg, const FocalConfig& focal_cfg, Scalar tau,
                                 bool multi_task);

}  // namespace egmt
