#include "test_util.hpp"

#include "egmt/losses.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace egmt;
using egmt::test::check_op;
using egmt::test::check_op_t;
using egmt::test::random_tensor;

namespace {

Index reflect(Index i, Index n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); }

template <typename S>
double at(const Tensor<S>& t, Index y, Index x) {
  return static_cast<double>(t[y * t.dim(2) + x]);
}

template <typename S>
double laplacian_at(const Tensor<S>& t, Index y, Index x) {
  const Index h = t.dim(1), w = t.dim(2);
  return at(t, reflect(y - 1, h), x) + at(t, reflect(y + 1, h), x) + at(t, y, reflect(x - 1, w)) +
         at(t, y, reflect(x + 1, w)) - 4 * at(t, y, x);
}

template <typename S>
double intensity_oracle(const Tensor<S>& f, const Tensor<S>& a, const Tensor<S>& b) {
  double s = 0;
  for (Index i = 0; i < f.size(); ++i) s += std::abs(static_cast<double>(f[i]) - std::max<double>(a[i], b[i]));
  return s / static_cast<double>(f.size());
}

template <typename S>
double edge_oracle(const Tensor<S>& f, const Tensor<S>& a, const Tensor<S>& b) {
  double s = 0;
  for (Index y = 0; y < f.dim(1); ++y) {
    for (Index x = 0; x < f.dim(2); ++x) {
      s += std::abs(std::abs(laplacian_at(f, y, x)) -
                    std::max(std::abs(laplacian_at(a, y, x)), std::abs(laplacian_at(b, y, x))));
    }
  }
  return s / static_cast<double>(f.size());
}

// Mean SSIM over every fully contained 11×11 window, Gaussian σ = 1.5.
double ssim_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  const Index k = 11, h = a.dim(1), w = a.dim(2);
  double g[11][11], gs = 0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) gs += g[y][x] = std::exp(-((y - 5) * (y - 5) + (x - 5) * (x - 5)) / (2 * 1.5 * 1.5));
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  Index n = 0;
  for (Index y0 = 0; y0 + k <= h; ++y0) {
    for (Index x0 = 0; x0 + k <= w; ++x0, ++n) {
      double ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
      for (int y = 0; y < 11; ++y) {
        for (int x = 0; x < 11; ++x) {
          const double wt = g[y][x] / gs, va = at(a, y0 + y, x0 + x), vb = at(b, y0 + y, x0 + x);
          ma += wt * va;
          mb += wt * vb;
          aa += wt * va * va;
          bb += wt * vb * vb;
          ab += wt * va * vb;
        }
      }
      const double saa = aa - ma * ma, sbb = bb - mb * mb, sab = ab - ma * mb;
      total += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
    }
  }
  return total / static_cast<double>(n);
}

double focal_oracle(const std::array<double, 9>& p_raw, const LabelVector& y, const FocalConfig& cfg) {
  double s = 0;
  for (std::size_t i = 0; i < 9; ++i) {
    const double p = std::min(std::max(p_raw[i], cfg.clamp), 1 - cfg.clamp);
    const double bce = y[i] ? -std::log(p) : -std::log(1 - p);
    const double m = cfg.form == FocalForm::Standard ? std::pow(y[i] ? 1 - p : p, cfg.gamma) : std::pow(1 - p, cfg.gamma);
    s += cfg.class_weights[i] * m * bce;
  }
  return s / 9;
}

template <typename S>
double scalar_of(const Var<S>& v) {
  REQUIRE(v.value().size() == 1);
  return static_cast<double>(v.value()[0]);
}

// 0.5 + A·checkerboard + small noise: every Laplacian magnitude stays clear of zero
// and of the other images' magnitudes, so the edge loss is differentiable here.
Tensor<double> checker_image(Index n, double amplitude, Rng& rng) {
  Tensor<double> t({1, n, n});
  for (Index y = 0; y < n; ++y)
    for (Index x = 0; x < n; ++x) t[y * n + x] = 0.5 + amplitude * ((x + y) % 2 ? -1 : 1) + 0.02 * (2 * rng.uniform() - 1);
  return t;
}

}  // namespace

TEST_CASE("identical images give zero fusion losses") {
  Rng rng(1);
  const Tensor<float> x = random_tensor<float>({1, 16, 16}, rng, 0, 1);
  Tape<float> tape;
  const Var<float> v = tape.constant(x);
  CHECK(scalar_of(intensity_loss(v, v, v)) <= 1e-7);
  CHECK(scalar_of(edge_loss(v, v, v)) <= 1e-7);
  CHECK(std::abs(scalar_of(ssim_loss(v, v, v, FusionLossConfig{}))) <= 1e-7);
  CHECK(std::abs(scalar_of(fusion_loss(v, v, v, FusionLossConfig{}).total)) <= 1e-7);

  Tape<double> td;
  const Var<double> c = td.constant(Tensor<double>::constant({1, 12, 12}, 0.3));
  const Var<double> z = td.constant(Tensor<double>({1, 12, 12}));
  CHECK(scalar_of(edge_loss(c, z, c)) == 0.0);
  CHECK(scalar_of(intensity_loss(c, z, z)) == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("intensity and edge losses match direct loops") {
  Rng rng(2);
  for (const Index n : {4, 5, 9}) {
    const auto f = random_tensor<double>({1, n, n}, rng, 0, 1), a = random_tensor<double>({1, n, n}, rng, 0, 1),
               b = random_tensor<double>({1, n, n}, rng, 0, 1);
    Tape<double> t;
    CHECK(scalar_of(intensity_loss(t.constant(f), t.constant(a), t.constant(b))) ==
          doctest::Approx(intensity_oracle(f, a, b)).epsilon(1e-13));
    CHECK(scalar_of(edge_loss(t.constant(f), t.constant(a), t.constant(b))) ==
          doctest::Approx(edge_oracle(f, a, b)).epsilon(1e-13));
  }
  Tape<double> t;
  CHECK_THROWS_AS(intensity_loss(t.constant(Tensor<double>({1, 4, 4})), t.constant(Tensor<double>({1, 4, 5})),
                                 t.constant(Tensor<double>({1, 4, 4}))),
                  std::invalid_argument);
}

TEST_CASE("ssim matches a sliding-window computation") {
  Rng rng(3);
  const auto a = random_tensor<double>({1, 16, 16}, rng, 0, 1), b = random_tensor<double>({1, 16, 16}, rng, 0, 1);
  Tape<double> t;
  const double want = ssim_oracle(a, b);
  CHECK(std::abs(scalar_of(ssim(t.constant(a), t.constant(b), FusionLossConfig{})) - want) < 1e-6);
  CHECK(std::abs(ssim_index(a.matrix(16, 16), b.matrix(16, 16)) - want) < 1e-12);
  // One term vanishes when the fused image equals one source.
  CHECK(scalar_of(ssim_loss(t.constant(a), t.constant(a), t.constant(b), FusionLossConfig{})) ==
        doctest::Approx(1 - want).epsilon(1e-9));
  CHECK_THROWS_AS(ssim(t.constant(Tensor<double>({1, 10, 12})), t.constant(Tensor<double>({1, 10, 12})), FusionLossConfig{}),
                  std::invalid_argument);
}

TEST_CASE("fusion loss is the weighted sum of its terms") {
  Rng rng(4);
  const auto f = random_tensor<double>({1, 12, 12}, rng, 0, 1), a = random_tensor<double>({1, 12, 12}, rng, 0, 1),
             b = random_tensor<double>({1, 12, 12}, rng, 0, 1);
  Tape<double> t;
  const auto vf = t.constant(f), va = t.constant(a), vb = t.constant(b);
  const FusionLossConfig cfg;
  CHECK(cfg.alpha_int == 1.0);
  CHECK(cfg.alpha_edge == 15.0);
  CHECK(cfg.alpha_ssim == 5.0);
  const auto terms = fusion_loss(vf, va, vb, cfg);
  const double want = intensity_oracle(f, a, b) + 15 * edge_oracle(f, a, b) + 5 * (2 - ssim_oracle(f, a) - ssim_oracle(f, b));
  CHECK(scalar_of(terms.total) == doctest::Approx(want).epsilon(1e-9));
  FusionLossConfig only_int = cfg;
  only_int.alpha_edge = only_int.alpha_ssim = 0;
  CHECK(scalar_of(fusion_loss(vf, va, vb, only_int).total) == scalar_of(intensity_loss(vf, va, vb)));
  FusionLossConfig bad = cfg;
  bad.ssim_window = 10;
  CHECK_THROWS(fusion_loss(vf, va, vb, bad));
}

TEST_CASE("focal loss reduces to binary cross-entropy") {
  Rng rng(5);
  FocalConfig cfg;
  cfg.gamma = 0;
  cfg.class_weights.fill(1.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::array<double, 9> p{};
    LabelVector y{};
    Tensor<double> pt({9});
    double bce = 0;
    for (std::size_t i = 0; i < 9; ++i) {
      p[i] = 0.02 + 0.96 * rng.uniform();
      y[i] = rng.bernoulli(0.4);
      pt[static_cast<Index>(i)] = p[i];
      bce += y[i] ? -std::log(p[i]) : -std::log(1 - p[i]);
    }
    Tape<double> t;
    CHECK(std::abs(scalar_of(focal_loss(t.constant(pt), y, cfg)) - bce / 9) < 1e-6);
    Tape<float> tf;
    CHECK(std::abs(scalar_of(focal_loss(tf.constant(pt.cast<float>()), y, cfg)) - bce / 9) < 1e-6);
  }
}

TEST_CASE("focal loss matches a per-class scalar computation") {
  Rng rng(6);
  for (const FocalForm form : {FocalForm::Standard, FocalForm::Verbatim}) {
    for (int trial = 0; trial < 20; ++trial) {
      FocalConfig cfg;
      cfg.form = form;
      cfg.gamma = 3 * rng.uniform();
      std::array<double, 9> p{};
      LabelVector y{};
      Tensor<double> pt({9});
      for (std::size_t i = 0; i < 9; ++i) {
        cfg.class_weights[i] = rng.uniform();
        p[i] = trial == 0 && i == 0 ? 0.0 : rng.uniform();  // one value below the clamp
        y[i] = rng.bernoulli(0.5);
        pt[static_cast<Index>(i)] = p[i];
      }
      Tape<double> t;
      CHECK(scalar_of(focal_loss(t.constant(pt), y, cfg)) == doctest::Approx(focal_oracle(p, y, cfg)).epsilon(1e-12));
    }
  }
  // Perfect predictions cost nothing.
  LabelVector y{1, 0, 0, 1, 1, 0, 1, 0, 0};
  Tensor<double> pt({9});
  for (Index i = 0; i < 9; ++i) pt[i] = y[static_cast<std::size_t>(i)];
  Tape<double> t;
  CHECK(scalar_of(focal_loss(t.constant(pt), y, FocalConfig{})) <= 1e-5);
}

TEST_CASE("focal loss is equivariant under class permutation") {
  Rng rng(7);
  FocalConfig cfg;
  Tensor<double> p({9});
  LabelVector y{};
  for (std::size_t i = 0; i < 9; ++i) {
    p[static_cast<Index>(i)] = rng.uniform();
    y[i] = rng.bernoulli(0.5);
    cfg.class_weights[i] = rng.uniform();
  }
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  FocalConfig pc = cfg;
  Tensor<double> pp({9});
  LabelVector py{};
  for (std::size_t i = 0; i < 9; ++i) {
    pp[static_cast<Index>(i)] = p[static_cast<Index>(perm[i])];
    py[i] = y[perm[i]];
    pc.class_weights[i] = cfg.class_weights[perm[i]];
  }
  Tape<double> t;
  CHECK(scalar_of(focal_loss(t.constant(p), y, cfg)) == doctest::Approx(scalar_of(focal_loss(t.constant(pp), py, pc))).epsilon(1e-14));
}

TEST_CASE("task weights") {
  const auto [a, b] = task_weights(0.0, 0.0, 1.0);
  CHECK(a == 0.5);
  CHECK(b == 0.5);
  const auto [c, d] = task_weights(0.0, std::log(3.0), 1.0);
  CHECK(c == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(d == doctest::Approx(0.25).epsilon(1e-15));
  double previous = 1.0;
  for (double w1 = -3; w1 <= 3; w1 += 0.25) {
    const auto [l1, l2] = task_weights(w1, 0.4, 1.0);
    CHECK(l1 < previous);
    CHECK(l1 + l2 == doctest::Approx(1.0).epsilon(1e-15));
    previous = l1;
    const auto [s1, s2] = task_weights(w1 + 7.5, 7.9, 1.0);
    CHECK(s1 == doctest::Approx(l1).epsilon(1e-12));
  }
  CHECK_THROWS(task_weights(0.0, 0.0, 0.0));

  Tape<float> t;
  const Var<float> lambda = task_weights(t.constant(Tensor<float>({2})), 1.0f);
  CHECK(lambda.value()[0] == 0.5f);
  CHECK(lambda.value()[1] == 0.5f);
}

TEST_CASE("total loss composition") {
  Rng rng(8);
  const auto f = random_tensor<double>({1, 12, 12}, rng, 0, 1), a = random_tensor<double>({1, 12, 12}, rng, 0, 1),
             b = random_tensor<double>({1, 12, 12}, rng, 0, 1), p = random_tensor<double>({9}, rng, 0.1, 0.9);
  const LabelVector y{1, 0, 1, 0, 0, 0, 1, 0, 0};
  Tape<double> t;
  const auto vf = t.constant(f), va = t.constant(a), vb = t.constant(b), vp = t.constant(p);
  const FusionLossConfig fc;
  const FocalConfig kc;
  const double fus = scalar_of(fusion_loss(vf, va, vb, fc).total);
  const double cla = scalar_of(focal_loss(vp, y, kc));

  const auto even = total_loss(vf, vp, va, vb, y, t.constant(Tensor<double>({2})), fc, kc, 1.0, true);
  CHECK(even.lambda1 == 0.5);
  CHECK(even.lambda2 == 0.5);
  CHECK(scalar_of(even.total) == doctest::Approx(0.5 * fus + 0.5 * cla).epsilon(1e-14));
  CHECK(even.fusion == fus);
  CHECK(even.classification == cla);
  CHECK(even.fusion == doctest::Approx(even.intensity + 15 * even.edge + 5 * even.ssim).epsilon(1e-14));

  Tensor<double> w({2});
  w[0] = 0.7;
  w[1] = -0.4;
  const auto skew = total_loss(vf, vp, va, vb, y, t.constant(w), fc, kc, 1.0, true);
  CHECK(scalar_of(skew.total) == doctest::Approx(skew.lambda1 * skew.fusion + skew.lambda2 * skew.classification).epsilon(1e-14));

  const auto single = total_loss(vf, vp, va, vb, y, t.constant(w), fc, kc, 1.0, false);
  CHECK(single.lambda1 == 1.0);
  CHECK(single.lambda2 == 0.0);
  CHECK(scalar_of(single.total) == fus);
}

TEST_CASE("class weights follow the negative ratio") {
  std::vector<LabelVector> labels(10);
  for (std::size_t s = 0; s < 10; ++s) {
    labels[s][0] = s < 3;   // 3 positives
    labels[s][1] = 1;       // all positive
    labels[s][2] = s == 0;  // 1 positive
  }
  const auto w = class_weights_from_labels(labels);
  CHECK(w[0] == doctest::Approx(0.7));
  CHECK(w[1] == 0.05);
  CHECK(w[2] == doctest::Approx(0.9));
  CHECK(w[3] == 0.95);
  CHECK(class_weights_from_labels({})[4] == 0.5);
}

TEST_CASE("loss gradients in double precision") {
  Rng rng(9);
  // Intensity: keep every pixel away from the |·| and max kinks.
  Tensor<double> a = random_tensor<double>({1, 8, 8}, rng, 0.2, 0.8), b(a.shape()), f(a.shape());
  for (Index i = 0; i < a.size(); ++i) {
    b[i] = a[i] + (rng.bernoulli(0.5) ? 1 : -1) * (0.05 + 0.1 * rng.uniform());
    f[i] = std::max(a[i], b[i]) + (rng.bernoulli(0.5) ? 1 : -1) * (0.05 + 0.1 * rng.uniform());
  }
  auto r = check_op({f, a, b}, [](Tape<double>&, const std::vector<Var<double>>& v) { return intensity_loss(v[0], v[1], v[2]); });
  CHECK(r.max_rel_error < 1e-5);

  const Tensor<double> cf = checker_image(8, 0.15, rng), ca = checker_image(8, 0.05, rng), cb = checker_image(8, 0.1, rng);
  r = check_op({cf, ca, cb}, [](Tape<double>&, const std::vector<Var<double>>& v) { return edge_loss(v[0], v[1], v[2]); });
  CHECK(r.max_rel_error < 1e-5);

  const auto sf = random_tensor<double>({1, 12, 12}, rng, 0, 1), sa = random_tensor<double>({1, 12, 12}, rng, 0, 1),
             sb = random_tensor<double>({1, 12, 12}, rng, 0, 1);
  // Corner pixels reach a single window through a ~1e-5 Gaussian tap, so their
  // gradients are tiny. SSIM is smooth, so a wide fourth-order stencil keeps both
  // round-off and truncation below them.
  GradCheckOptions smooth;
  smooth.five_point = true;
  r = check_op({sf, sa, sb}, [](Tape<double>&, const std::vector<Var<double>>& v) {
    return ssim_loss(v[0], v[1], v[2], FusionLossConfig{});
  }, 1, 1e-3, smooth);
  CAPTURE(r.worst);
  CHECK(r.max_rel_error < 1e-5);

  const auto p = random_tensor<double>({9}, rng, 0.05, 0.95);
  for (const FocalForm form : {FocalForm::Standard, FocalForm::Verbatim}) {
    FocalConfig cfg;
    cfg.form = form;
    r = check_op({p}, [&](Tape<double>&, const std::vector<Var<double>>& v) { return focal_loss(v[0], LabelVector{1, 0, 1, 1, 0, 0, 0, 1, 0}, cfg); });
    CHECK(r.max_rel_error < 1e-5);
  }
  r = check_op({random_tensor<double>({2}, rng)}, [](Tape<double>&, const std::vector<Var<double>>& v) { return task_weights(v[0], 1.0); });
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("intensity loss gradient in single precision on two parameters") {
  // f(a, b) = L_int(a·ir + b·vi, ir, vi) on 4×4 images, eps = 1e-3.
  Rng rng(10);
  const auto ir = random_tensor<float>({1, 4, 4}, rng, 0, 1), vi = random_tensor<float>({1, 4, 4}, rng, 0, 1);
  Tensor<float> ab({2});
  ab[0] = 0.3f;
  ab[1] = 0.45f;
  const auto r = check_op_t<float>({ab}, [&](Tape<float>& t, const std::vector<Var<float>>& v) {
    const Var<float> a = ad::reshape(ad::gather(v[0], std::make_shared<const std::vector<Index>>(16, 0), {16}), {1, 4, 4});
    const Var<float> b = ad::reshape(ad::gather(v[0], std::make_shared<const std::vector<Index>>(16, 1), {16}), {1, 4, 4});
    const Var<float> fused = ad::add(ad::mul(a, t.constant(ir)), ad::mul(b, t.constant(vi)));
    return intensity_loss(fused, t.constant(ir), t.constant(vi));
  }, 1, 1e-3f);
  CHECK(r.max_rel_error < 1e-3);
}
