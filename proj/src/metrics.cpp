#include "egmt/metrics.hpp"

#include "egmt/data.hpp"

#include <Eigen/Eigenvalues>
#include <unsupported/Eigen/FFT>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

namespace egmt {

namespace {

constexpr double kEps = 1e-4;

// Entropies (natural log) of two code sequences and of their joint.
struct JointEntropy {
  double a = 0, b = 0, joint = 0;
  double mutual() const { return a + b - joint; }
};

double entropy_of_counts(const std::vector<double>& counts, double n) {
  double h = 0;
  for (double c : counts) {
    if (c > 0) {
      const double p = c / n;
      h -= p * std::log(p);
    }
  }
  return h;
}

JointEntropy joint_entropy(const std::vector<Index>& a, const std::vector<Index>& b, Index bins) {
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<double> ha(nb, 0.0), hb(nb, 0.0), hab(nb * nb, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto ia = static_cast<std::size_t>(a[i]), ib = static_cast<std::size_t>(b[i]);
    ha[ia] += 1;
    hb[ib] += 1;
    hab[ia * nb + ib] += 1;
  }
  const double n = static_cast<double>(a.size());
  return {entropy_of_counts(ha, n), entropy_of_counts(hb, n), entropy_of_counts(hab, n)};
}

std::vector<Index> quantise(const Image& a, Index bins) {
  std::vector<Index> q(static_cast<std::size_t>(a.size()));
  for (Index i = 0; i < a.size(); ++i) {
    const double v = std::clamp(a.data()[i], 0.0, 1.0);
    q[static_cast<std::size_t>(i)] = std::min<Index>(bins - 1, static_cast<Index>(std::lround(v * static_cast<double>(bins - 1))));
  }
  return q;
}

// Bin = floor(mid-rank · bins / N); tied values share a bin.
std::vector<Index> rank_bins(const Image& a, Index bins) {
  const Index n = a.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return a.data()[i] < a.data()[j]; });
  std::vector<Index> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n;) {
    Index j = i;
    while (j < n && a.data()[order[static_cast<std::size_t>(j)]] == a.data()[order[static_cast<std::size_t>(i)]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j - 1);
    const Index bin = std::min<Index>(bins - 1, static_cast<Index>(mid * static_cast<double>(bins) / static_cast<double>(n)));
    for (Index k = i; k < j; ++k) out[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = bin;
    i = j;
  }
  return out;
}

void require_same(const Image& a, const Image& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(what) + ": image extents differ");
}

Index reflect(Index i, Index n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

double correlation(const Image& a, const Image& b) {
  const double ma = a.mean(), mb = b.mean();
  const auto da = (a.array() - ma), db = (b.array() - mb);
  const double saa = (da * da).sum(), sbb = (db * db).sum(), sab = (da * db).sum();
  if (saa <= 0 || sbb <= 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

using Complex = std::complex<double>;
using ComplexMatrix = Eigen::Matrix<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

ComplexMatrix fft2(const ComplexMatrix& x, bool inverse) {
  Eigen::FFT<double> fft;
  ComplexMatrix out(x.rows(), x.cols());
  std::vector<Complex> in, res;
  for (Index r = 0; r < x.rows(); ++r) {
    in.assign(x.row(r).data(), x.row(r).data() + x.cols());
    inverse ? fft.inv(res, in) : fft.fwd(res, in);
    for (Index c = 0; c < x.cols(); ++c) out(r, c) = res[static_cast<std::size_t>(c)];
  }
  for (Index c = 0; c < x.cols(); ++c) {
    in.resize(static_cast<std::size_t>(x.rows()));
    for (Index r = 0; r < x.rows(); ++r) in[static_cast<std::size_t>(r)] = out(r, c);
    inverse ? fft.inv(res, in) : fft.fwd(res, in);
    for (Index r = 0; r < x.rows(); ++r) out(r, c) = res[static_cast<std::size_t>(r)];
  }
  return out;
}

double fft_frequency(Index k, Index n) {
  return static_cast<double>(k <= (n - 1) / 2 ? k : k - n) / static_cast<double>(n);
}

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  if (v.size() % 2) return v[mid];
  const double hi = v[mid];
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

double normalised_mi(const Image& a, const Image& b, Index bins) {
  auto codes = [bins](const Image& x) {
    const double top = x.maxCoeff();
    std::vector<Index> q(static_cast<std::size_t>(x.size()), 0);
    if (top <= 0) return q;
    for (Index i = 0; i < x.size(); ++i) {
      q[static_cast<std::size_t>(i)] =
          std::min<Index>(bins - 1, static_cast<Index>(x.data()[i] / top * static_cast<double>(bins)));
    }
    return q;
  };
  const JointEntropy h = joint_entropy(codes(a), codes(b), bins);
  const double denom = h.a + h.b;
  return denom > 0 ? 2.0 * h.mutual() / denom : 0.0;
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double entropy(const Image& a, Index bins) {
  const auto q = quantise(a, bins);
  std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
  for (Index v : q) counts[static_cast<std::size_t>(v)] += 1;
  return entropy_of_counts(counts, static_cast<double>(q.size())) / std::log(2.0);
}

double mutual_information(const Image& a, const Image& b, Index bins) {
  require_same(a, b, "mutual_information");
  return joint_entropy(quantise(a, bins), quantise(b, bins), bins).mutual() / std::log(2.0);
}

double mi(const Image& fused, const Image& ir, const Image& vi, Index bins) {
  return mutual_information(fused, ir, bins) + mutual_information(fused, vi, bins);
}

double psnr(const Image& a, const Image& ref) {
  require_same(a, ref, "psnr");
  const double mse = (a - ref).array().square().mean();
  if (mse == 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double psnr_fusion(const Image& fused, const Image& ir, const Image& vi) {
  return 0.5 * (psnr(fused, ir) + psnr(fused, vi));
}

double ssim_metric(const Image& fused, const Image& ir, const Image& vi, const FusionLossConfig& cfg) {
  return 0.5 * (ssim_index(fused, ir, cfg) + ssim_index(fused, vi, cfg));
}

EdgeMaps sobel_edges(const Image& a) {
  const Index h = a.rows(), w = a.cols();
  if (h < 3 || w < 3) throw std::invalid_argument("sobel_edges: image must be at least 3x3");
  EdgeMaps e{Image(h, w), Image(h, w)};
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      auto p = [&](Index dy, Index dx) { return a(reflect(y + dy, h), reflect(x + dx, w)); };
      const double sx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
      const double sy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
      e.strength(y, x) = std::sqrt(sx * sx + sy * sy);
      e.orientation(y, x) = sx == 0.0 ? std::numbers::pi / 2 : std::atan(sy / sx);
    }
  }
  return e;
}

Image edge_preservation(const EdgeMaps& a, const EdgeMaps& f, const FusionMetricConfig& cfg) {
  Image q(a.strength.rows(), a.strength.cols());
  for (Index i = 0; i < q.size(); ++i) {
    const double ga = a.strength.data()[i], gf = f.strength.data()[i];
    double g = 1.0;
    if (ga > gf) {
      g = gf / ga;
    } else if (gf > ga) {
      g = ga / gf;
    }
    // Orientations are lines, so the distance wraps at pi; this keeps +pi/2 and -pi/2 equal under mirroring.
    const double d = std::abs(a.orientation.data()[i] - f.orientation.data()[i]);
    const double orient = 1.0 - std::min(d, std::numbers::pi - d) / (std::numbers::pi / 2);
    const double qg = cfg.gamma / (1.0 + std::exp(cfg.kappa_g * (g - cfg.sigma_g)));
    const double qa = cfg.gamma / (1.0 + std::exp(cfg.kappa_a * (orient - cfg.sigma_a)));
    q.data()[i] = qg * qa;
  }
  return q;
}

double qabf(const Image& fused, const Image& ir, const Image& vi, const FusionMetricConfig& cfg) {
  require_same(fused, ir, "qabf");
  require_same(fused, vi, "qabf");
  const EdgeMaps ef = sobel_edges(fused), ea = sobel_edges(ir), eb = sobel_edges(vi);
  const Image qa = edge_preservation(ea, ef, cfg), qb = edge_preservation(eb, ef, cfg);
  const Image wa = ea.strength.array().pow(cfg.edge_exponent), wb = eb.strength.array().pow(cfg.edge_exponent);
  const double denom = (wa + wb).sum();
  if (denom <= 0) return 0.0;
  return (qa.cwiseProduct(wa) + qb.cwiseProduct(wb)).sum() / denom;
}

double nabf(const Image& fused, const Image& ir, const Image& vi, const FusionMetricConfig& cfg) {
  require_same(fused, ir, "nabf");
  require_same(fused, vi, "nabf");
  const EdgeMaps ef = sobel_edges(fused), ea = sobel_edges(ir), eb = sobel_edges(vi);
  const Image qa = edge_preservation(ea, ef, cfg), qb = edge_preservation(eb, ef, cfg);
  const Image wa = ea.strength.array().pow(cfg.edge_exponent), wb = eb.strength.array().pow(cfg.edge_exponent);
  const double denom = (wa + wb).sum();
  if (denom <= 0) return 0.0;
  double num = 0;
  for (Index i = 0; i < fused.size(); ++i) {
    // Only fused edges stronger than both sources count as artifacts.
    const double gf = ef.strength.data()[i];
    if (gf > ea.strength.data()[i] && gf > eb.strength.data()[i]) {
      num += (1.0 - qa.data()[i]) * wa.data()[i] + (1.0 - qb.data()[i]) * wb.data()[i];
    }
  }
  return num / denom;
}

double nonlinear_correlation(const Image& a, const Image& b, Index bins) {
  require_same(a, b, "nonlinear_correlation");
  const JointEntropy h = joint_entropy(rank_bins(a, bins), rank_bins(b, bins), bins);
  const double norm = std::sqrt(h.a * h.b);
  return norm > 0 ? h.mutual() / norm : 0.0;
}

double ncie(const Image& fused, const Image& ir, const Image& vi, Index bins) {
  const Image* imgs[3] = {&ir, &vi, &fused};
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) r(i, j) = r(j, i) = nonlinear_correlation(*imgs[i], *imgs[j], bins);
  }
  const Eigen::Vector3d lambda = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(r, Eigen::EigenvaluesOnly).eigenvalues();
  double h = 0;
  for (int i = 0; i < 3; ++i) {
    const double p = lambda[i] / 3.0;
    if (p > 0) h -= p * std::log(p) / std::log(static_cast<double>(bins));
  }
  return 1.0 - h;
}

PhaseCongruency phase_congruency(const Image& a, const FusionMetricConfig& cfg) {
  const Index rows = a.rows(), cols = a.cols();
  const Index ns = cfg.pc_scales, no = cfg.pc_orientations;
  const ComplexMatrix spectrum = fft2(a.cast<Complex>(), false);

  Image radius(rows, cols), theta(rows, cols), nyquist = Image::Ones(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const double u = fft_frequency(c, cols), v = fft_frequency(r, rows);
      radius(r, c) = std::sqrt(u * u + v * v);
      theta(r, c) = std::atan2(-v, u);
      // The Nyquist row/column has no mirror partner; dropping it keeps the bank flip-symmetric.
      if ((cols % 2 == 0 && c == cols / 2) || (rows % 2 == 0 && r == rows / 2)) nyquist(r, c) = 0.0;
    }
  }
  radius(0, 0) = 1.0;
  const Image lowpass = (1.0 + (radius.array() / 0.45).pow(30)).inverse();
  std::vector<Image> gabor;
  for (Index s = 0; s < ns; ++s) {
    const double fo = 1.0 / (cfg.pc_min_wavelength * std::pow(cfg.pc_mult, static_cast<double>(s)));
    const double denom = 2.0 * std::pow(std::log(cfg.pc_sigma_onf), 2);
    Image g = (-(radius.array() / fo).log().square() / denom).exp() * lowpass.array() * nyquist.array();
    g(0, 0) = 0.0;
    gabor.push_back(std::move(g));
  }

  PhaseCongruency out{Image::Zero(rows, cols), Image::Zero(rows, cols), Image::Zero(rows, cols)};
  Image total_energy = Image::Zero(rows, cols), total_an = Image::Zero(rows, cols);
  Image covx2 = Image::Zero(rows, cols), covy2 = Image::Zero(rows, cols), covxy = Image::Zero(rows, cols);
  for (Index o = 0; o < no; ++o) {
    const double angle = static_cast<double>(o) * std::numbers::pi / static_cast<double>(no);
    Image spread(rows, cols);
    for (Index i = 0; i < spread.size(); ++i) {
      const double t = theta.data()[i];
      const double ds = std::sin(t) * std::cos(angle) - std::cos(t) * std::sin(angle);
      const double dc = std::cos(t) * std::cos(angle) + std::sin(t) * std::sin(angle);
      const double dtheta = std::min(std::abs(std::atan2(ds, dc)) * static_cast<double>(no) / 2.0, std::numbers::pi);
      spread.data()[i] = (std::cos(dtheta) + 1.0) / 2.0;
    }
    std::vector<Image> even, odd;
    Image sum_e = Image::Zero(rows, cols), sum_o = Image::Zero(rows, cols), sum_an = Image::Zero(rows, cols), max_an;
    double tau = 0;
    for (Index s = 0; s < ns; ++s) {
      const ComplexMatrix filtered = spectrum.cwiseProduct((gabor[static_cast<std::size_t>(s)].cwiseProduct(spread)).cast<Complex>());
      const ComplexMatrix eo = fft2(filtered, true);
      Image e = eo.real(), od = eo.imag();
      Image an = (e.array().square() + od.array().square()).sqrt();
      sum_an += an;
      sum_e += e;
      sum_o += od;
      if (s == 0) {
        tau = median(std::vector<double>(an.data(), an.data() + an.size())) / std::sqrt(std::log(4.0));
        max_an = an;
      } else {
        max_an = max_an.cwiseMax(an);
      }
      even.push_back(std::move(e));
      odd.push_back(std::move(od));
    }
    const Image x_energy = (sum_e.array().square() + sum_o.array().square()).sqrt() + kEps;
    const Image mean_e = sum_e.cwiseQuotient(x_energy), mean_o = sum_o.cwiseQuotient(x_energy);
    Image energy = Image::Zero(rows, cols);
    for (Index s = 0; s < ns; ++s) {
      const auto& e = even[static_cast<std::size_t>(s)].array();
      const auto& od = odd[static_cast<std::size_t>(s)].array();
      energy.array() += e * mean_e.array() + od * mean_o.array() - (e * mean_o.array() - od * mean_e.array()).abs();
    }
    const double inv_mult = 1.0 / cfg.pc_mult;
    const double total_tau = tau * (1.0 - std::pow(inv_mult, static_cast<double>(ns))) / (1.0 - inv_mult);
    const double threshold = total_tau * std::sqrt(std::numbers::pi / 2) + cfg.pc_noise_k * total_tau * std::sqrt((4 - std::numbers::pi) / 2);
    energy = (energy.array() - threshold).max(0.0);
    const Image width = (sum_an.array() / (max_an.array() + kEps) - 1.0) / static_cast<double>(std::max<Index>(ns - 1, 1));
    const Image weight = (1.0 + ((cfg.pc_cutoff - width.array()) * cfg.pc_g).exp()).inverse();
    const Image pc_o = weight.array() * energy.array() / (sum_an.array() + kEps);
    total_energy.array() += weight.array() * energy.array();
    total_an += sum_an;
    const Image cx = pc_o * std::cos(angle), cy = pc_o * std::sin(angle);
    covx2.array() += cx.array().square();
    covy2.array() += cy.array().square();
    covxy.array() += cx.array() * cy.array();
  }
  const double half = static_cast<double>(no) / 2.0;
  covx2 /= half;
  covy2 /= half;
  covxy *= 4.0 / static_cast<double>(no);
  const Image denom = ((covxy.array().square() + (covx2 - covy2).array().square()).sqrt() + kEps).matrix();
  out.max_moment = (covy2 + covx2 + denom) / 2.0;
  out.min_moment = (covy2 + covx2 - denom) / 2.0;
  out.pc = total_energy.array() / (total_an.array() + kEps);
  return out;
}

double pc_metric(const Image& fused, const Image& ir, const Image& vi, const FusionMetricConfig& cfg) {
  require_same(fused, ir, "pc_metric");
  require_same(fused, vi, "pc_metric");
  const PhaseCongruency f = phase_congruency(fused, cfg), a = phase_congruency(ir, cfg), b = phase_congruency(vi, cfg);
  auto best = [](const Image& fa, const Image& fb, const Image& ff) {
    const Image fs = fa.cwiseMax(fb);
    return std::max({0.0, correlation(fa, ff), correlation(fb, ff), correlation(fs, ff)});
  };
  return best(a.pc, b.pc, f.pc) * best(a.max_moment, b.max_moment, f.max_moment) *
         best(a.min_moment, b.min_moment, f.min_moment);
}

std::array<Image, 3> haar_details(const Image& a) {
  const Index h = a.rows() / 2, w = a.cols() / 2;
  if (h < 1 || w < 1) throw std::invalid_argument("haar_details: image must be at least 2x2");
  std::array<Image, 3> d = {Image(h, w), Image(h, w), Image(h, w)};
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double p = a(2 * y, 2 * x), q = a(2 * y, 2 * x + 1), r = a(2 * y + 1, 2 * x), s = a(2 * y + 1, 2 * x + 1);
      d[0](y, x) = (p + q - r - s) / 2;
      d[1](y, x) = (p - q + r - s) / 2;
      d[2](y, x) = (p - q - r + s) / 2;
    }
  }
  return d;
}

double fmi_w(const Image& fused, const Image& ir, const Image& vi, Index bins) {
  require_same(fused, ir, "fmi_w");
  require_same(fused, vi, "fmi_w");
  const auto df = haar_details(fused), da = haar_details(ir), db = haar_details(vi);
  double total = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const Image f = df[k].cwiseAbs();
    total += normalised_mi(f, da[k].cwiseAbs(), bins) + normalised_mi(f, db[k].cwiseAbs(), bins);
  }
  return total / 6.0;
}

std::map<std::string, double> fusion_metrics(const Image& fused, const Image& ir, const Image& vi,
                                             const FusionMetricConfig& cfg) {
  return {
      {"PC", pc_metric(fused, ir, vi, cfg)},
      {"SSIM", ssim_metric(fused, ir, vi, cfg.ssim)},
      {"MI", mi(fused, ir, vi, cfg.bins)},
      {"Q_abf", qabf(fused, ir, vi, cfg)},
      {"PSNR", psnr_fusion(fused, ir, vi)},
      {"FMI_w", fmi_w(fused, ir, vi, cfg.bins)},
      {"N_abf", nabf(fused, ir, vi, cfg)},
      {"NCIE", ncie(fused, ir, vi, cfg.bins)},
  };
}

ClassificationMetrics classification_metrics(const std::vector<std::array<double, kNumLabels>>& scores,
                                             const std::vector<LabelVector>& labels, double threshold) {
  if (scores.size() != labels.size()) throw std::invalid_argument("classification_metrics: length mismatch");
  if (scores.empty()) throw std::invalid_argument("classification_metrics: no samples");
  const std::size_t n = scores.size(), l = kNumLabels;
  ClassificationMetrics m;

  // Mid-ranks (1-based) of a score list.
  auto midranks = [](const std::vector<double>& s) {
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return s[i] < s[j]; });
    std::vector<double> r(s.size());
    for (std::size_t i = 0; i < s.size();) {
      std::size_t j = i;
      while (j < s.size() && s[order[j]] == s[order[i]]) ++j;
      const double mid = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) r[order[k]] = mid;
      i = j;
    }
    return r;
  };

  double disagreements = 0, tp = 0, fp = 0, fn = 0, jaccard = 0, ranking = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double inter = 0, uni = 0;
    for (std::size_t c = 0; c < l; ++c) {
      const bool pred = scores[i][c] >= threshold;
      const bool truth = labels[i][c] != 0;
      disagreements += pred != truth;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
      inter += pred && truth;
      uni += pred || truth;
    }
    jaccard += uni > 0 ? inter / uni : 1.0;

    // Mis-ordered (positive, negative) pairs from the rank sum of the negatives.
    const std::vector<double> s(scores[i].begin(), scores[i].end());
    const std::vector<double> r = midranks(s);
    double pos = 0, neg = 0, neg_rank = 0;
    for (std::size_t c = 0; c < l; ++c) {
      if (labels[i][c]) {
        pos += 1;
      } else {
        neg += 1;
        neg_rank += r[c];
      }
    }
    if (pos > 0 && neg > 0) ranking += (neg_rank - neg * (neg + 1) / 2) / (pos * neg);
  }
  const double dn = static_cast<double>(n);
  m.hamming_loss = disagreements / (dn * static_cast<double>(l));
  m.jaccard = jaccard / dn;
  m.ranking_loss = ranking / dn;
  m.micro_f1 = (2 * tp + fp + fn) > 0 ? 2 * tp / (2 * tp + fp + fn) : 1.0;

  double ap_sum = 0, auc_sum = 0;
  int used = 0;
  for (std::size_t c = 0; c < l; ++c) {
    std::vector<double> s(n);
    double pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = scores[i][c];
      pos += labels[i][c] != 0;
    }
    const double neg = dn - pos;
    if (pos == 0 || neg == 0) {
      m.warnings.push_back("class " + std::to_string(c) + " has " + (pos == 0 ? "no positives" : "no negatives") +
                           "; excluded from mAP and AUC");
      continue;
    }
    const std::vector<double> r = midranks(s);
    double pos_rank = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i][c]) pos_rank += r[i];
    }
    auc_sum += (pos_rank - pos * (pos + 1) / 2) / (pos * neg);

    // Average precision over distinct thresholds, highest first.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return s[i] > s[j]; });
    double hits = 0, seen = 0, ap = 0;
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      double group_hits = 0;
      while (j < n && s[order[j]] == s[order[i]]) group_hits += labels[order[j++]][c] != 0;
      seen += static_cast<double>(j - i);
      hits += group_hits;
      ap += group_hits / pos * (hits / seen);
      i = j;
    }
    ap_sum += ap;
    ++used;
  }
  m.mean_ap = used ? ap_sum / used : 0.0;
  m.auc = used ? auc_sum / used : 0.0;
  return m;
}

std::map<std::string, double> MetricReport::mean() const {
  std::map<std::string, double> out;
  if (rows.empty()) return out;
  for (const auto& c : columns) {
    double s = 0;
    for (const auto& r : rows) s += r.at(c);
    out[c] = s / static_cast<double>(rows.size());
  }
  return out;
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "image";
  for (const auto& c : columns) os << ',' << c;
  os << '\n';
  auto row = [&](const std::string& id, const std::map<std::string, double>& values) {
    os << id;
    for (const auto& c : columns) os << ',' << format_number(values.at(c));
    os << '\n';
  };
  for (std::size_t i = 0; i < rows.size(); ++i) row(ids[i], rows[i]);
  if (!rows.empty()) row("MEAN", mean());
  return os.str();
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["columns"] = columns;
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    nlohmann::ordered_json r;
    r["image"] = ids[i];
    for (const auto& c : columns) r[c] = rows[i].at(c);
    images.push_back(std::move(r));
  }
  j["images"] = std::move(images);
  nlohmann::ordered_json mean_row = nlohmann::ordered_json::object();
  for (const auto& [k, v] : mean()) mean_row[k] = v;
  j["mean"] = std::move(mean_row);
  return j.dump(2) + "\n";
}

MetricReport evaluate_directory(const std::filesystem::path& fused_dir, const std::filesystem::path& ir_dir,
                                const std::filesystem::path& vi_dir, const FusionMetricConfig& cfg) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(fused_dir)) throw DataError("not a directory: " + fused_dir.string());
  std::vector<std::pair<std::string, fs::path>> fused;
  for (const auto& e : fs::directory_iterator(fused_dir)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    std::string stem = e.path().stem().string();
    const std::string suffix = "_fused";
    if (stem.size() > suffix.size() && stem.ends_with(suffix)) stem.resize(stem.size() - suffix.size());
    fused.emplace_back(stem, e.path());
  }
  std::sort(fused.begin(), fused.end());
  auto find_source = [](const fs::path& dir, const std::string& stem, const char* what) {
    for (const char* ext : {".png", ".bmp", ".PNG", ".BMP"}) {
      const fs::path p = dir / (stem + ext);
      if (fs::exists(p)) return p;
    }
    throw DataError(std::string("missing ") + what + " counterpart for stem " + stem);
  };

  MetricReport report;
  report.columns = fusion_metric_names();
  for (const auto& [stem, path] : fused) {
    const Tensor<double> f = to_ycbcr(read_image(path)).y.cast<double>();
    const Tensor<double> a = to_ycbcr(read_image(find_source(ir_dir, stem, "ir"))).y.cast<double>();
    const Tensor<double> b = to_ycbcr(read_image(find_source(vi_dir, stem, "vi"))).y.cast<double>();
    if (f.shape() != a.shape() || f.shape() != b.shape()) throw DataError(stem + ": fused and source extents differ");
    const Index h = f.dim(1), w = f.dim(2);
    report.ids.push_back(stem);
    report.rows.push_back(fusion_metrics(f.matrix(h, w), a.matrix(h, w), b.matrix(h, w), cfg));
  }
  return report;
}

}  // namespace egmt
