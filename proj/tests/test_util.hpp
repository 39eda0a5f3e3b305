#pragma once

#include "egmt/autodiff.hpp"
#include "egmt/entity.hpp"
#include "egmt/grad_check.hpp"
#include "egmt/rng.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace egmt::test {

inline std::filesystem::path fixture(const std::string& rel) { return std::filesystem::path(EGMT_FIXTURE_DIR) / rel; }

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("egmt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(lo + (hi - lo) * rng.uniform());
  return t;
}

// Moves freshly initialised parameters to a generic point for gradient checks.
// At initialisation the 0.02-scale projections leave attention nearly uniform and
// some gradients near 1e-8, below what finite differences resolve. Dense maps get
// N(0, 1/fan_in) noise (unit-norm embedding inputs: N(0, 1)), vectors 0.3·N(0, 1);
// convolutions keep their He initialisation.
template <typename Scalar>
void move_to_generic_point(ParameterSet<Scalar>& params, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& e : params) {
    double sd = 0.0;
    if (e.value.rank() == 2) sd = e.value.dim(0) == kEmbeddingDim ? 1.0 : 1.0 / std::sqrt(static_cast<double>(e.value.dim(0)));
    if (e.value.rank() == 1) sd = 0.3;
    for (Index i = 0; i < e.value.size(); ++i) e.value[i] += static_cast<Scalar>(sd * rng.normal());
  }
}

template <typename Scalar>
using OpBuilderT = std::function<Var<Scalar>(Tape<Scalar>&, const std::vector<Var<Scalar>>&)>;
using OpBuilder = OpBuilderT<double>;

// Exhaustive finite-difference check of one op. The op's output is contracted
// with fixed random weights so every output element matters.
template <typename Scalar>
GradCheckReport check_op_t(const std::vector<Tensor<Scalar>>& inputs, const OpBuilderT<Scalar>& build,
                           std::uint64_t seed, Scalar eps, const GradCheckOptions& options = {}) {
  ParameterSet<Scalar> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.add("in" + std::to_string(i), inputs[i]);
  auto weights = std::make_shared<Tensor<Scalar>>();
  Objective<Scalar> f = [&, weights, seed](const ParameterSet<Scalar>& p, ParameterSet<Scalar>* grad) {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    for (const auto& e : p) vars.push_back(tape.leaf(e.value, grad != nullptr));
    const Var<Scalar> out = build(tape, vars);
    if (weights->empty()) {
      Rng rng(seed);
      *weights = random_tensor<Scalar>(out.shape(), rng);
    }
    const Var<Scalar> loss = ad::sum(ad::mul(out, tape.constant(*weights)));
    if (grad) {
      tape.backward(loss);
      for (std::size_t i = 0; i < vars.size(); ++i) grad->entries()[i].value = tape.grad(vars[i]);
    }
    return loss.value()[0];
  };
  return grad_check<Scalar>(f, params, eps, options);
}

inline GradCheckReport check_op(const std::vector<Tensor<double>>& inputs, const OpBuilder& build,
                                std::uint64_t seed = 1, double eps = 1e-6, const GradCheckOptions& options = {}) {
  return check_op_t<double>(inputs, build, seed, eps, options);
}

}  // namespace egmt::test
