#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tlkit/autodiff.hpp"
#include "tlkit/errors.hpp"
#include "tlkit/rng.hpp"
#include "tlkit/tensor.hpp"

namespace tlkit {

// Per-sample soft labels: one row per patch token plus the class-token label.
template <typename T>
struct TokenLabelMap {
  Tensor<T> token_labels;  // [N, K], rows normalized
  Tensor<T> cls_label;     // [K], normalized

  void validate(double tol = 1e-6) const {
    const int n = token_labels.dim(0);
    const int k = token_labels.dim(1);
    if (cls_label.numel() != k) throw ShapeError("TokenLabelMap: class count mismatch");
    auto check_row = [&](const T* row, const char* what) {
      double sum = 0.0;
      for (int j = 0; j < k; ++j) {
        if (row[j] < T(0)) throw LabelError(std::string(what) + ": negative entry");
        sum += double(row[j]);
      }
      if (std::fabs(sum - 1.0) > tol) {
        throw LabelError(std::string(what) + ": row sum " + std::to_string(sum));
      }
    };
    for (int i = 0; i < n; ++i) check_row(&token_labels.at(i, 0), "token_labels");
    check_row(cls_label.data(), "cls_label");
  }
};

template <typename T>
struct LossReport {
  T l_cls = T(0);
  T l_tl = T(0);
  T l_total = T(0);
  T beta = T(0);
  int tokens_used = 0;
};

// ---------------------------------------------------------------------------
// Row kernels. Single source of truth for every cross-entropy evaluation in
// the toolkit (pure API, tape op and trainer all route through these).
// ---------------------------------------------------------------------------

// -sum_k label_k * log softmax(logits)_k via max-subtracted log-sum-exp.
template <typename T>
T soft_ce_row(const T* logits, const T* label, int k) {
  T mx = logits[0];
  for (int j = 1; j < k; ++j) mx = logits[j] > mx ? logits[j] : mx;
  T sum = T(0);
  for (int j = 0; j < k; ++j) sum += std::exp(logits[j] - mx);
  const T lse = mx + std::log(sum);
  T loss = T(0);
  for (int j = 0; j < k; ++j) loss += label[j] * (lse - logits[j]);
  return loss;
}

// acc += coeff * (softmax(logits) - label)
template <typename T>
void soft_ce_grad_row(const T* logits, const T* label, int k, T coeff, T* acc) {
  T mx = logits[0];
  for (int j = 1; j < k; ++j) mx = logits[j] > mx ? logits[j] : mx;
  T sum = T(0);
  for (int j = 0; j < k; ++j) sum += std::exp(logits[j] - mx);
  const T inv = T(1) / sum;
  for (int j = 0; j < k; ++j) {
    acc[j] += coeff * (std::exp(logits[j] - mx) * inv - label[j]);
  }
}

template <typename T>
void validate_label_row(const T* label, int k, double tol = 1e-4) {
  double sum = 0.0;
  for (int j = 0; j < k; ++j) {
    if (label[j] < T(0)) throw LabelError("label has a negative entry");
    sum += double(label[j]);
  }
  if (std::fabs(sum - 1.0) > tol) {
    throw LabelError("label not normalized: sum = " + std::to_string(sum));
  }
}

// ---------------------------------------------------------------------------
// Pure loss API
// ---------------------------------------------------------------------------

template <typename T>
T cross_entropy_soft(const Tensor<T>& logits, const Tensor<T>& label) {
  if (logits.numel() != label.numel()) {
    throw ShapeError("cross_entropy_soft: length mismatch");
  }
  if (!logits.all_finite()) throw InputError("cross_entropy_soft: non-finite logits");
  const int k = int(logits.numel());
  validate_label_row(label.data(), k);
  return soft_ce_row(logits.data(), label.data(), k);
}

// Mean soft cross-entropy over the participating token rows.
template <typename T>
T token_labeling_loss(const Tensor<T>& token_logits, const Tensor<T>& token_labels,
                      const std::vector<int>& participation) {
  if (token_logits.ndim() != 2 || !token_logits.same_shape(token_labels)) {
    throw ShapeError("token_labeling_loss: shape mismatch");
  }
  if (participation.empty()) {
    throw UsageError("token_labeling_loss: empty participation set");
  }
  const int n = token_logits.dim(0), k = token_logits.dim(1);
  T sum = T(0);
  for (int idx : participation) {
    if (idx < 0 || idx >= n) throw UsageError("token_labeling_loss: index out of range");
    sum += soft_ce_row(&token_logits.at(idx, 0), &token_labels.at(idx, 0), k);
  }
  return sum / T(participation.size());
}

template <typename T>
LossReport<T> total_loss(const Tensor<T>& cls_logits, const Tensor<T>& token_logits,
                         const TokenLabelMap<T>& labels, T beta,
                         const std::vector<int>& participation) {
  if (beta < T(0)) throw ConfigError("beta must be nonnegative");
  LossReport<T> r;
  r.beta = beta;
  r.l_cls = cross_entropy_soft(cls_logits, labels.cls_label);
  r.l_tl = token_labeling_loss(token_logits, labels.token_labels, participation);
  r.l_total = r.l_cls + beta * r.l_tl;
  r.tokens_used = int(participation.size());
  return r;
}

// Uniform subset of ceil(rate * n_tokens) indices without replacement,
// ascending. rate == 1 returns 0..n-1 without consuming randomness.
inline std::vector<int> sample_participation(int n_tokens, double rate, RngState& rng) {
  if (rate <= 0.0 || rate > 1.0) {
    throw ConfigError("participation rate must lie in (0, 1]");
  }
  std::vector<int> all(size_t(n_tokens));
  for (int i = 0; i < n_tokens; ++i) all[size_t(i)] = i;
  if (rate == 1.0) return all;
  int m = int(std::ceil(rate * n_tokens));
  if (m > n_tokens) m = n_tokens;
  // Partial Fisher-Yates: the first m slots end up a uniform subset.
  for (int i = 0; i < m; ++i) {
    const int j = i + rng.uniform_int(n_tokens - i);
    std::swap(all[size_t(i)], all[size_t(j)]);
  }
  all.resize(size_t(m));
  std::sort(all.begin(), all.end());
  return all;
}

// ---------------------------------------------------------------------------
// Tape op: sum_r w_r * H(logits_r, labels_r). Gradient w.r.t. logits only;
// labels and weights are data.
// ---------------------------------------------------------------------------
template <typename T>
Var<T> weighted_softmax_ce(Var<T> logits, const Tensor<T>& labels,
                           std::vector<T> row_weights) {
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& L = tp.value(logits.id);
  if (L.numel() != labels.numel() || L.cols() != labels.cols()) {
    throw ShapeError("weighted_softmax_ce: label shape mismatch");
  }
  const int64_t rows = L.rows();
  const int k = L.cols();
  if (int64_t(row_weights.size()) != rows) {
    throw ShapeError("weighted_softmax_ce: weight count mismatch");
  }
  auto lab = std::make_shared<Tensor<T>>(labels);
  auto wts = std::make_shared<std::vector<T>>(std::move(row_weights));
  T acc = T(0);
  {
    const T* ld = L.data();
    const T* yd = lab->data();
    const T* wd = wts->data();
    for (int64_t r = 0; r < rows; ++r) {
      if (wd[r] == T(0)) continue;
      acc += wd[r] * soft_ce_row(ld + r * k, yd + r * k, k);
    }
  }
  Tensor<T> out({1});
  out[0] = acc;
  const bool req = tp.requires_grad(logits.id);
  Tape<T>* t = &tp;
  const int lid = logits.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, lid, oid, rows, k, lab, wts] {
      const T g = t->grad(oid)[0];
      const T* ld = t->value(lid).data();
      const T* yd = lab->data();
      const T* wd = wts->data();
      T* dl = t->grad_buf(lid).data();
      parallel_for(rows, [=](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
          if (wd[r] == T(0)) continue;
          soft_ce_grad_row(ld + r * k, yd + r * k, k, g * wd[r], dl + r * k);
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

}  // namespace tlkit
