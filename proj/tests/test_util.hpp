#pragma once

#include <functional>
#include <vector>

#include "tlkit/autodiff.hpp"
#include "tlkit/rng.hpp"
#include "tlkit/tensor.hpp"

namespace tlkit::testing {

inline TensorD random_tensor(std::vector<int> shape, RngState& rng, double lo = -1.0,
                             double hi = 1.0) {
  TensorD t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Scalar readout with fixed pseudo-random coefficients so every output
// element influences the loss (a plain sum would hide permutation bugs).
inline Var<double> readout(Var<double> out, uint64_t salt = 17) {
  const TensorD& v = out.tape->value(out.id);
  RngState rng(salt);
  TensorD w(v.shape());
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.0, 1.0);
  return ad::dot_const(out, w);
}

// Max relative error between analytic gradients and central finite
// differences, over every element of every input.
// build: (tape, leaves) -> scalar var.
inline double fd_check(std::vector<TensorD> inputs,
                       const std::function<Var<double>(Tape<double>&,
                                                       std::vector<Var<double>>&)>& build,
                       double eps = 1e-5) {
  std::vector<TensorD> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    Var<double> root = build(tape, leaves);
    tape.backward(root);
    for (auto& lv : leaves) {
      const TensorD& g = lv.grad();
      analytic.push_back(g.empty() ? TensorD(lv.value().shape()) : g);
    }
  }
  auto eval = [&]() {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, false));
    return build(tape, leaves).value()[0];
  };
  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + eps;
      const double lp = eval();
      inputs[i][j] = saved - eps;
      const double lm = eval();
      inputs[i][j] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double a = analytic[i][j];
      const double denom = std::max({1e-3, std::fabs(a), std::fabs(fd)});
      worst = std::max(worst, std::fabs(a - fd) / denom);
    }
  }
  return worst;
}

}  // namespace tlkit::testing
