#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "tlkit/mixtoken.hpp"
#include "tlkit/train_graph.hpp"

namespace tlkit {

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double worst = 0.0;
  double tol = 1e-4;
  double seconds = 0.0;

  bool pass() const { return worst <= tol; }
};

// Checks analytic parameter gradients of the full training loss (MixToken +
// class/token cross-entropies at the given beta) against central finite
// differences at 64-bit precision. Stochastic depth is off so the loss is a
// deterministic function of the parameters.
inline GradCheckReport gradcheck_total_loss(const ModelConfig& cfg_in, uint64_t seed,
                                            double eps = 1e-5, double tol = 1e-4,
                                            double beta = 0.5) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg = cfg_in;
  cfg.stoch_depth_rate = 0.0;
  cfg.validate();

  VitParams<double> params = build_model<double>(cfg, seed);
  RngState rng(RngState::mix(seed, 0x67636b00ull));

  const int bsz = 2;
  const int s = cfg.image_size;
  const int n = cfg.token_count();
  const int k = cfg.num_classes;
  const int grid = cfg.grid_side();

  LossGraphSpec<double> spec;
  spec.images = Tensor<double>({bsz, 3, s, s});
  for (int64_t i = 0; i < spec.images.numel(); ++i) spec.images[i] = rng.uniform();

  const MixMask mask = sample_mask(grid, rng);
  spec.mix_perm = {1, 0};
  spec.mix_mask = &mask;

  // Random normalized labels, mixed with the same mask/permutation.
  auto random_rows = [&](int rows) {
    Tensor<double> t({rows, k});
    for (int r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (int j = 0; j < k; ++j) {
        t.at(r, j) = 0.05 + rng.uniform();
        sum += t.at(r, j);
      }
      for (int j = 0; j < k; ++j) t.at(r, j) /= sum;
    }
    return t;
  };
  const Tensor<double> y0 = random_rows(n), y1 = random_rows(n);
  const Tensor<double> ymix0 = mix_token_labels(y0, y1, mask);
  const Tensor<double> ymix1 = mix_token_labels(y1, y0, mask);
  spec.token_labels = Tensor<double>({bsz, n, k});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      spec.token_labels.at(0, i, j) = ymix0.at(i, j);
      spec.token_labels.at(1, i, j) = ymix1.at(i, j);
    }
  }
  const Tensor<double> c0 = random_rows(1), c1 = random_rows(1);
  const Tensor<double> cmix0 = mix_class_label(c0, c1, mask);
  const Tensor<double> cmix1 = mix_class_label(c1, c0, mask);
  spec.cls_labels = Tensor<double>({bsz, k});
  for (int j = 0; j < k; ++j) {
    spec.cls_labels.at(0, j) = cmix0[j];
    spec.cls_labels.at(1, j) = cmix1[j];
  }

  spec.participation.resize(size_t(n));
  for (int i = 0; i < n; ++i) spec.participation[size_t(i)] = i;
  spec.beta = beta;
  spec.drops.assign(size_t(cfg.depth), 0);
  spec.token_labeling = true;

  auto loss_value = [&]() {
    Tape<double> tape;
    return build_loss_graph(tape, params, spec, false).l_total.value()[0];
  };

  // Analytic gradients, one backward pass.
  std::vector<Tensor<double>> analytic;
  std::vector<std::string> names;
  {
    Tape<double> tape;
    LossGraphResult<double> out = build_loss_graph(tape, params, spec, true);
    tape.backward(out.l_total);
    for (const auto& [name, var] : out.leaves.named) {
      const Tensor<double>& g = var.grad();
      analytic.push_back(g.empty() ? Tensor<double>(var.value().shape()) : g);
      names.push_back(name);
    }
  }

  GradCheckReport report;
  report.tol = tol;
  size_t group_idx = 0;
  params.for_each([&](const std::string& name, Tensor<double>& t) {
    const Tensor<double>& g = analytic[group_idx];
    double worst = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t[i];
      t[i] = saved + eps;
      const double lp = loss_value();
      t[i] = saved - eps;
      const double lm = loss_value();
      t[i] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double a = g[i];
      const double denom = std::max({1e-3, std::fabs(a), std::fabs(fd)});
      worst = std::max(worst, std::fabs(a - fd) / denom);
    }
    report.groups.push_back({name, worst});
    report.worst = std::max(report.worst, worst);
    ++group_idx;
  });
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace tlkit
