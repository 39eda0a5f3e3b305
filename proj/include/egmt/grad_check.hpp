#pragma once

#include "egmt/parameters.hpp"
#include "egmt/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>

namespace egmt {

// Value of a scalar objective; fills `grad` (same layout as params) when non-null.
template <typename Scalar>
using Objective = std::function<Scalar(const ParameterSet<Scalar>& params, ParameterSet<Scalar>* grad)>;

struct GradCheckOptions {
  enum class Mode {
    Exhaustive,  // every scalar of every tensor
    Sampled,     // per tensor: largest-gradient entries, random entries and optionally one random direction
  };
  Mode mode = Mode::Exhaustive;
  Index largest_per_tensor = 1;
  Index samples_per_tensor = 2;
  bool direction = true;
  std::uint64_t seed = 0;
  // Fourth-order central stencil (x±h, x±2h) instead of the two-point one, for
  // smooth objectives where round-off rules out a small step.
  bool five_point = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[<flat index>]" or "<tensor>:direction"
  Index checks = 0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-8);
}

// Central finite differences of `f` against a gradient computed elsewhere, for
// instance by a lower-precision instance of the same objective.
template <typename Scalar>
GradCheckReport grad_check_against(const ParameterSet<Scalar>& analytic, const Objective<Scalar>& f,
                                   ParameterSet<Scalar> params, Scalar eps, const GradCheckOptions& options = {}) {
  if (analytic.size() != params.size()) throw std::invalid_argument("grad_check: gradient layout differs from parameters");
  GradCheckReport report;
  auto eval = [&](const ParameterSet<Scalar>& p) {
    const Scalar v = f(p, nullptr);
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("grad_check: objective is not finite under perturbation");
    return static_cast<double>(v);
  };
  auto note = [&](double ga, double gn, const std::string& where) {
    const double err = relative_error(ga, gn);
    ++report.checks;
    if (report.worst.empty() || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = where;
    }
  };
  // Central difference of g(s) = f(params moved by s) at s = 0.
  auto derivative = [&](const std::function<void(Scalar)>& move) {
    move(eps);
    const double up = eval(params);
    move(-eps);
    const double down = eval(params);
    move(Scalar(0));
    const double h = static_cast<double>(eps);
    if (!options.five_point) return (up - down) / (2.0 * h);
    move(2 * eps);
    const double up2 = eval(params);
    move(-2 * eps);
    const double down2 = eval(params);
    move(Scalar(0));
    return (8.0 * (up - down) - (up2 - down2)) / (12.0 * h);
  };
  auto check_entry = [&](std::size_t t, Index i) {
    auto& value = params.entries()[t].value;
    const Scalar saved = value[i];
    const double numeric = derivative([&](Scalar s) { value[i] = saved + s; });
    value[i] = saved;
    note(static_cast<double>(analytic.entries()[t].value[i]), numeric,
         params.entries()[t].name + "[" + std::to_string(i) + "]");
  };

  Rng rng(options.seed);
  for (std::size_t t = 0; t < params.size(); ++t) {
    const Index n = params.entries()[t].value.size();
    if (options.mode == GradCheckOptions::Mode::Exhaustive) {
      for (Index i = 0; i < n; ++i) check_entry(t, i);
      continue;
    }
    const auto& g = analytic.entries()[t].value;
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    const auto top = static_cast<std::ptrdiff_t>(std::min(options.largest_per_tensor, n));
    std::partial_sort(order.begin(), order.begin() + top, order.end(),
                      [&](Index a, Index b) { return std::abs(g[a]) > std::abs(g[b]); });
    for (std::ptrdiff_t i = 0; i < top; ++i) check_entry(t, order[static_cast<std::size_t>(i)]);
    for (Index s = 0; s < options.samples_per_tensor; ++s) check_entry(t, static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    if (!options.direction) continue;

    // Unit random direction restricted to this tensor.
    Vector<Scalar> dir(n);
    for (Index i = 0; i < n; ++i) dir[i] = static_cast<Scalar>(rng.normal());
    dir /= dir.norm();
    auto& value = params.entries()[t].value.data();
    const Vector<Scalar> saved = value;
    const double numeric = derivative([&](Scalar s) { value = saved + s * dir; });
    value = saved;
    note(static_cast<double>(analytic.entries()[t].value.data().dot(dir)), numeric,
         params.entries()[t].name + ":direction");
  }
  return report;
}

// Central finite differences against the objective's own gradient.
template <typename Scalar>
GradCheckReport grad_check(const Objective<Scalar>& f, const ParameterSet<Scalar>& params, Scalar eps,
                           const GradCheckOptions& options = {}) {
  ParameterSet<Scalar> analytic = params.zeros_like();
  const Scalar f0 = f(params, &analytic);
  if (!std::isfinite(static_cast<double>(f0))) throw NumericError("grad_check: objective is not finite");
  return grad_check_against(analytic, f, params, eps, options);
}

}  // namespace egmt
