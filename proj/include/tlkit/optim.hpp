#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tlkit/errors.hpp"
#include "tlkit/model.hpp"
#include "tlkit/tensor.hpp"

namespace tlkit {

template <typename T>
struct AdamWOptions {
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

// Single-tensor AdamW with decoupled decay: the shrink step theta *= (1-lr*wd)
// happens before the bias-corrected moment update.
template <typename T>
void adamw_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v,
                  int64_t step, T lr, T weight_decay, const AdamWOptions<T>& opt,
                  const std::string& name) {
  if (!param.same_shape(grad)) throw ShapeError("adamw: grad shape mismatch for " + name);
  const int64_t n = param.numel();
  const T bc1 = T(1) - T(std::pow(double(opt.beta1), double(step)));
  const T bc2 = T(1) - T(std::pow(double(opt.beta2), double(step)));
  T* p = param.data();
  T* md = m.data();
  T* vd = v.data();
  const T* g = grad.data();
  const T decay = T(1) - lr * weight_decay;
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(double(g[i]))) {
      throw TrainingError("non-finite gradient in parameter " + name);
    }
    p[i] *= decay;
    md[i] = opt.beta1 * md[i] + (T(1) - opt.beta1) * g[i];
    vd[i] = opt.beta2 * vd[i] + (T(1) - opt.beta2) * g[i] * g[i];
    const T mhat = md[i] / bc1;
    const T vhat = vd[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
  }
}

// Moments for the whole parameter set, in declaration order.
template <typename T>
struct AdamWState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  int64_t step = 0;

  static AdamWState init(const VitParams<T>& params) {
    AdamWState st;
    params.for_each([&](const std::string&, const Tensor<T>& t) {
      st.m.emplace_back(t.shape());
      st.v.emplace_back(t.shape());
    });
    return st;
  }
};

// One optimizer step over every parameter tensor. `grads` must follow
// declaration order (as produced by collect_grads below).
template <typename T>
void adamw_step(VitParams<T>& params, const std::vector<Tensor<T>>& grads,
                AdamWState<T>& state, T lr, T weight_decay,
                const AdamWOptions<T>& opt = {}) {
  ++state.step;
  size_t i = 0;
  params.for_each([&](const std::string& name, Tensor<T>& t) {
    if (i >= grads.size()) throw UsageError("adamw_step: missing gradients");
    adamw_update(t, grads[i], state.m[i], state.v[i], state.step, lr, weight_decay, opt,
                 name);
    ++i;
  });
  if (i != grads.size()) throw UsageError("adamw_step: gradient count mismatch");
}

}  // namespace tlkit
