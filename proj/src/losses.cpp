#include "egmt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace egmt {

void FusionLossConfig::validate() const {
  if (alpha_int < 0 || alpha_edge < 0 || alpha_ssim < 0) throw std::invalid_argument("fusion loss weights must be non-negative");
  if (ssim_window < 1 || ssim_window % 2 == 0) throw std::invalid_argument("ssim_window must be odd");
  if (!(ssim_sigma > 0)) throw std::invalid_argument("ssim_sigma must be positive");
}

void FocalConfig::validate() const {
  if (!(gamma >= 0) || !std::isfinite(gamma)) throw std::invalid_argument("focal gamma must be >= 0");
  for (double a : class_weights) {
    if (!std::isfinite(a) || a < 0) throw std::invalid_argument("focal class weights must be finite and non-negative");
  }
  if (!(clamp > 0 && clamp < 0.5)) throw std::invalid_argument("focal clamp must lie in (0, 0.5)");
}

std::array<double, kNumLabels> class_weights_from_labels(const std::vector<LabelVector>& labels) {
  std::array<double, kNumLabels> w{};
  if (labels.empty()) {
    w.fill(0.5);
    return w;
  }
  for (std::size_t c = 0; c < kNumLabels; ++c) {
    std::size_t negatives = 0;
    for (const auto& y : labels) negatives += y[c] == 0;
    w[c] = std::clamp(static_cast<double>(negatives) / static_cast<double>(labels.size()), 0.05, 0.95);
  }
  return w;
}

RowMatrix<double> gaussian_window(Index size, double sigma) {
  RowMatrix<double> w(size, size);
  const double c = static_cast<double>(size / 2);
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
      w(y, x) = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    }
  }
  return w / w.sum();
}

double ssim_index(const RowMatrix<double>& a, const RowMatrix<double>& b, const FusionLossConfig& cfg) {
  const Index k = cfg.ssim_window;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("ssim: shape mismatch");
  if (a.rows() < k || a.cols() < k) throw std::invalid_argument("ssim: image smaller than window");
  const RowMatrix<double> w = gaussian_window(k, cfg.ssim_sigma);
  const Index oh = a.rows() - k + 1, ow = a.cols() - k + 1;
  double total = 0;
  for (Index y = 0; y < oh; ++y) {
    for (Index x = 0; x < ow; ++x) {
      const auto pa = a.block(y, x, k, k).array();
      const auto pb = b.block(y, x, k, k).array();
      const double ma = (w.array() * pa).sum(), mb = (w.array() * pb).sum();
      const double saa = (w.array() * pa * pa).sum() - ma * ma;
      const double sbb = (w.array() * pb * pb).sum() - mb * mb;
      const double sab = (w.array() * pa * pb).sum() - ma * mb;
      total += ((2 * ma * mb + cfg.ssim_c1) * (2 * sab + cfg.ssim_c2)) /
               ((ma * ma + mb * mb + cfg.ssim_c1) * (saa + sbb + cfg.ssim_c2));
    }
  }
  return total / static_cast<double>(oh * ow);
}

namespace {

template <typename Scalar>
void require_image(const Var<Scalar>& v, const Shape& ref, const char* op) {
  if (v.shape().size() != 3 || v.shape()[0] != 1) throw std::invalid_argument(std::string(op) + ": expected a 1 x H x W image");
  if (v.shape() != ref) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

template <typename Scalar>
Tensor<Scalar> laplacian_kernel() {
  Tensor<Scalar> k({1, 1, 3, 3});
  const Scalar v[9] = {0, 1, 0, 1, -4, 1, 0, 1, 0};
  for (Index i = 0; i < 9; ++i) k[i] = v[i];
  return k;
}

// Same-size Gaussian blur with zero padding, cropped to the valid region.
template <typename Scalar>
Var<Scalar> blur_valid(const Var<Scalar>& x, const Var<Scalar>& kernel, Index k) {
  const Index h = x.shape()[1], w = x.shape()[2];
  const Index oh = h - k + 1, ow = w - k + 1, r = k / 2;
  auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(oh * ow));
  for (Index y = 0; y < oh; ++y) {
    for (Index xx = 0; xx < ow; ++xx) (*idx)[static_cast<std::size_t>(y * ow + xx)] = (y + r) * w + xx + r;
  }
  return ad::gather(ad::conv2d(x, kernel, static_cast<const Var<Scalar>*>(nullptr), 1, Padding::Zero), idx, {oh, ow});
}

}  // namespace

template <typename Scalar>
Var<Scalar> intensity_loss(const Var<Scalar>& fused, const Var<Scalar>& ir, const Var<Scalar>& vi) {
  require_image(ir, fused.shape(), "intensity_loss");
  require_image(vi, fused.shape(), "intensity_loss");
  return ad::mean(ad::abs(ad::sub(fused, ad::maximum(ir, vi))));
}

template <typename Scalar>
Var<Scalar> edge_loss(const Var<Scalar>& fused, const Var<Scalar>& ir, const Var<Scalar>& vi) {
  require_image(ir, fused.shape(), "edge_loss");
  require_image(vi, fused.shape(), "edge_loss");
  const Var<Scalar> lap = fused.tape().constant(laplacian_kernel<Scalar>());
  auto grad_mag = [&](const Var<Scalar>& x) { return ad::abs(ad::conv2d(x, lap, static_cast<const Var<Scalar>*>(nullptr), 1, Padding::Reflect)); };
  return ad::mean(ad::abs(ad::sub(grad_mag(fused), ad::maximum(grad_mag(ir), grad_mag(vi)))));
}

template <typename Scalar>
Var<Scalar> ssim(const Var<Scalar>& a, const Var<Scalar>& b, const FusionLossConfig& cfg) {
  require_image(b, a.shape(), "ssim");
  const Index k = cfg.ssim_window;
  if (a.shape()[1] < k || a.shape()[2] < k) throw std::invalid_argument("ssim: image smaller than window");
  Tape<Scalar>& tape = a.tape();
  const RowMatrix<double> w = gaussian_window(k, cfg.ssim_sigma);
  Tensor<Scalar> kt({1, 1, k, k});
  for (Index i = 0; i < k * k; ++i) kt[i] = static_cast<Scalar>(w.data()[i]);
  const Var<Scalar> kernel = tape.constant(std::move(kt));

  const Var<Scalar> ma = blur_valid(a, kernel, k), mb = blur_valid(b, kernel, k);
  const Var<Scalar> ma2 = ad::square(ma), mb2 = ad::square(mb), mab = ad::mul(ma, mb);
  const Var<Scalar> saa = ad::sub(blur_valid(ad::square(a), kernel, k), ma2);
  const Var<Scalar> sbb = ad::sub(blur_valid(ad::square(b), kernel, k), mb2);
  const Var<Scalar> sab = ad::sub(blur_valid(ad::mul(a, b), kernel, k), mab);
  const auto c1 = static_cast<Scalar>(cfg.ssim_c1), c2 = static_cast<Scalar>(cfg.ssim_c2);
  const Var<Scalar> num = ad::mul(ad::add_scalar(ad::scale(mab, Scalar(2)), c1), ad::add_scalar(ad::scale(sab, Scalar(2)), c2));
  const Var<Scalar> den = ad::mul(ad::add_scalar(ad::add(ma2, mb2), c1), ad::add_scalar(ad::add(saa, sbb), c2));
  return ad::mean(ad::div(num, den));
}

template <typename Scalar>
Var<Scalar> ssim_loss(const Var<Scalar>& fused, const Var<Scalar>& ir, const Var<Scalar>& vi,
                      const FusionLossConfig& cfg) {
  // (1 - SSIM(f, ir)) + (1 - SSIM(f, vi))
  return ad::add_scalar(ad::scale(ad::add(ssim(fused, ir, cfg), ssim(fused, vi, cfg)), Scalar(-1)), Scalar(2));
}

template <typename Scalar>
FusionTerms<Scalar> fusion_loss(const Var<Scalar>& fused, const Var<Scalar>& ir, const Var<Scalar>& vi,
                                const FusionLossConfig& cfg) {
  cfg.validate();
  FusionTerms<Scalar> t;
  t.intensity = intensity_loss(fused, ir, vi);
  t.edge = edge_loss(fused, ir, vi);
  t.ssim = ssim_loss(fused, ir, vi, cfg);
  t.total = ad::add(ad::add(ad::scale(t.intensity, static_cast<Scalar>(cfg.alpha_int)),
                            ad::scale(t.edge, static_cast<Scalar>(cfg.alpha_edge))),
                    ad::scale(t.ssim, static_cast<Scalar>(cfg.alpha_ssim)));
  return t;
}

template <typename Scalar>
Var<Scalar> focal_loss(const Var<Scalar>& probabilities, const LabelVector& labels, const FocalConfig& cfg) {
  cfg.validate();
  const Index n = probabilities.value().size();
  if (n != static_cast<Index>(kNumLabels)) throw std::invalid_argument("focal_loss: expected 9 probabilities");
  const double lo = cfg.clamp, hi = 1.0 - cfg.clamp;
  const double gamma = cfg.gamma;

  // Per-class value and derivative with respect to the (unclamped) probability.
  auto term = [&](double p_raw, int y, double alpha, double* dp) {
    const double p = std::clamp(p_raw, lo, hi);
    const bool inside = p_raw > lo && p_raw < hi;
    double value = 0, d = 0;
    if (cfg.form == FocalForm::Standard) {
      const double q = y ? p : 1.0 - p;
      const double m = std::pow(1.0 - q, gamma);
      value = -alpha * m * std::log(q);
      const double dm = gamma > 0 ? -gamma * std::pow(1.0 - q, gamma - 1.0) : 0.0;
      const double dq = alpha * (-dm * std::log(q) - m / q);
      d = y ? dq : -dq;
    } else {
      const double bce = -(y ? std::log(p) : std::log(1.0 - p));
      const double dbce = y ? -1.0 / p : 1.0 / (1.0 - p);
      const double m = std::pow(1.0 - p, gamma);
      const double dm = gamma > 0 ? -gamma * std::pow(1.0 - p, gamma - 1.0) : 0.0;
      value = alpha * m * bce;
      d = alpha * (dm * bce + m * dbce);
    }
    *dp = inside ? d : 0.0;
    return value;
  };

  auto grads = std::make_shared<Vector<Scalar>>(n);
  double total = 0;
  for (Index i = 0; i < n; ++i) {
    double dp = 0;
    total += term(static_cast<double>(probabilities.value()[i]), labels[static_cast<std::size_t>(i)],
                  cfg.class_weights[static_cast<std::size_t>(i)], &dp);
    (*grads)[i] = static_cast<Scalar>(dp / static_cast<double>(n));
  }
  Tensor<Scalar> y({1});
  y[0] = static_cast<Scalar>(total / static_cast<double>(n));
  return probabilities.tape().record(std::move(y), {probabilities},
                                     [probabilities, grads](Tape<Scalar>& t, const Tensor<Scalar>& g) {
                                       t.grad_ref(probabilities).data() += *grads * g[0];
                                     });
}

template <typename Scalar>
Var<Scalar> task_weights(const Var<Scalar>& w, Scalar tau) {
  if (!(tau > 0)) throw std::invalid_argument("task_weights: tau must be positive");
  if (w.value().size() != 2) throw std::invalid_argument("task_weights: expected two weights");
  return ad::reshape(ad::softmax_rows(ad::reshape(ad::scale(w, Scalar(-1) / tau), {1, 2})), {2});
}

std::pair<double, double> task_weights(double w1, double w2, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("task_weights: tau must be positive");
  RowMatrix<double> m(1, 2);
  m << -w1 / tau, -w2 / tau;
  softmax_rows_inplace(m);
  return {m(0, 0), m(0, 1)};
}

template <typename Scalar>
LossBreakdown<Scalar> total_loss(const Var<Scalar>& fused, const Var<Scalar>& probabilities, const Var<Scalar>& ir,
                                 const Var<Scalar>& vi, const LabelVector& labels, const Var<Scalar>& task_w,
                                 const FusionLossConfig& fusion_cfg, const FocalConfig& focal_cfg, Scalar tau,
                                 bool multi_task) {
  LossBreakdown<Scalar> out;
  const FusionTerms<Scalar> f = fusion_loss(fused, ir, vi, fusion_cfg);
  out.fusion = static_cast<double>(f.total.value()[0]);
  out.intensity = static_cast<double>(f.intensity.value()[0]);
  out.edge = static_cast<double>(f.edge.value()[0]);
  out.ssim = static_cast<double>(f.ssim.value()[0]);
  if (!multi_task) {
    out.total = f.total;
    out.lambda1 = 1.0;
    out.lambda2 = 0.0;
    return out;
  }
  const Var<Scalar> cla = focal_loss(probabilities, labels, focal_cfg);
  const Var<Scalar> lambda = task_weights(task_w, tau);
  out.classification = static_cast<double>(cla.value()[0]);
  out.lambda1 = static_cast<double>(lambda.value()[0]);
  out.lambda2 = static_cast<double>(lambda.value()[1]);
  out.total = ad::sum(ad::mul(lambda, ad::concat0(ad::reshape(f.total, {1}), ad::reshape(cla, {1}))));
  return out;
}

#define EGMT_INSTANTIATE_LOSSES(S)                                                                                   \
  template Var<S> intensity_loss<S>(const Var<S>&, const Var<S>&, const Var<S>&);                                   \
  template Var<S> edge_loss<S>(const Var<S>&, const Var<S>&, const Var<S>&);                                        \
  template Var<S> ssim<S>(const Var<S>&, const Var<S>&, const FusionLossConfig&);                                   \
  template Var<S> ssim_loss<S>(const Var<S>&, const Var<S>&, const Var<S>&, const FusionLossConfig&);               \
  template FusionTerms<S> fusion_loss<S>(const Var<S>&, const Var<S>&, const Var<S>&, const FusionLossConfig&);     \
  template Var<S> focal_loss<S>(const Var<S>&, const LabelVector&, const FocalConfig&);                             \
  template Var<S> task_weights<S>(const Var<S>&, S);                                                                \
  template LossBreakdown<S> total_loss<S>(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&,              \
                                          const LabelVector&, const Var<S>&, const FusionLossConfig&,               \
                                          const FocalConfig&, S, bool);

EGMT_INSTANTIATE_LOSSES(float)
EGMT_INSTANTIATE_LOSSES(double)
EGMT_INSTANTIATE_LOSSES(long double)

}  // namespace egmt
