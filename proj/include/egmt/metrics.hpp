#pragma once

#include "egmt/entity.hpp"
#include "egmt/image_io.hpp"
#include "egmt/losses.hpp"
#include "egmt/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace egmt {

// Grayscale image in [0, 1], rows × cols.
using Image = RowMatrix<double>;

struct FusionMetricConfig {
  Index bins = 256;
  // Edge model shared by Q_abf and N_abf.
  double gamma = 1.0;
  double kappa_g = -10.0, sigma_g = 0.5;
  double kappa_a = -20.0, sigma_a = 0.75;
  double edge_exponent = 1.0;
  // Log-Gabor bank for phase congruency.
  Index pc_scales = 4, pc_orientations = 4;
  double pc_min_wavelength = 3.0, pc_mult = 2.1, pc_sigma_onf = 0.55;
  double pc_noise_k = 2.0, pc_cutoff = 0.5, pc_g = 10.0;
  FusionLossConfig ssim;
};

inline const std::vector<std::string>& fusion_metric_names() {
  static const std::vector<std::string> names = {"PC", "SSIM", "MI", "Q_abf", "PSNR", "FMI_w", "N_abf", "NCIE"};
  return names;
}

double entropy(const Image& a, Index bins = 256);
// Mutual information (bits) between two images quantised to `bins` levels.
double mutual_information(const Image& a, const Image& b, Index bins = 256);
double mi(const Image& fused, const Image& ir, const Image& vi, Index bins = 256);

double psnr(const Image& a, const Image& ref);
double psnr_fusion(const Image& fused, const Image& ir, const Image& vi);

double ssim_metric(const Image& fused, const Image& ir, const Image& vi, const FusionLossConfig& cfg = {});

struct EdgeMaps {
  Image strength, orientation;
};
// Sobel strength and orientation in [-pi/2, pi/2], reflect padding.
EdgeMaps sobel_edges(const Image& a);
// Per-pixel edge preservation Q^{AF} of source a in fused f.
Image edge_preservation(const EdgeMaps& a, const EdgeMaps& f, const FusionMetricConfig& cfg = {});

double qabf(const Image& fused, const Image& ir, const Image& vi, const FusionMetricConfig& cfg = {});
double nabf(const Image& fused, const Image& ir, const Image& vi, const FusionMetricConfig& cfg = {});

// Normalised nonlinear correlation coefficient with rank binning.
double nonlinear_correlation(const Image& a, const Image& b, Index bins = 256);
double ncie(const Image& fused, const Image& ir, const Image& vi, Index bins = 256);

struct PhaseCongruency {
  Image pc, max_moment, min_moment;
};
PhaseCongruency phase_congruency(const Image& a, const FusionMetricConfig& cfg = {});
double pc_metric(const Image& fused, const Image& ir, const Image& vi, const FusionMetricConfig& cfg = {});

// Single-level Haar details (horizontal, vertical, diagonal); extents are truncated to even.
std::array<Image, 3> haar_details(const Image& a);
double fmi_w(const Image& fused, const Image& ir, const Image& vi, Index bins = 256);

std::map<std::string, double> fusion_metrics(const Image& fused, const Image& ir, const Image& vi,
                                             const FusionMetricConfig& cfg = {});

struct ClassificationMetrics {
  double hamming_loss = 0, ranking_loss = 0, mean_ap = 0, auc = 0, jaccard = 0, micro_f1 = 0;
  std::vector<std::string> warnings;  // classes left out of mAP/AUC
};

inline const std::vector<std::string>& classification_metric_names() {
  static const std::vector<std::string> names = {"HL", "RL", "mAP", "AUC", "JI", "F1"};
  return names;
}

// scores[i][c] in [0, 1]; ties count half in RL and AUC.
ClassificationMetrics classification_metrics(const std::vector<std::array<double, kNumLabels>>& scores,
                                             const std::vector<LabelVector>& labels, double threshold = 0.5);

struct MetricReport {
  std::vector<std::string> columns;
  std::vector<std::string> ids;
  std::vector<std::map<std::string, double>> rows;
  std::map<std::string, double> mean() const;
  std::string to_csv() const;
  std::string to_json() const;
};

// Fused files are <stem>.png or <stem>_fused.png; sources are matched by stem
// in ir_dir and vi_dir. Rows are in sorted stem order.
MetricReport evaluate_directory(const std::filesystem::path& fused_dir, const std::filesystem::path& ir_dir,
                                const std::filesystem::path& vi_dir, const FusionMetricConfig& cfg = {});

}  // namespace egmt
