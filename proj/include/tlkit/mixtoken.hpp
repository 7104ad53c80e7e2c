#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "tlkit/autodiff.hpp"
#include "tlkit/errors.hpp"
#include "tlkit/rng.hpp"
#include "tlkit/tensor.hpp"

namespace tlkit {

// Binary token-grid mask; 1 keeps the token from the first sample. The zero
// region is a single axis-aligned rectangle (possibly empty or full).
struct MixMask {
  int grid_side = 0;
  std::vector<uint8_t> mask;  // row-major, grid_side^2 entries
  double mean = 1.0;          // fraction of ones in the clipped mask
  double lambda_drawn = 1.0;  // retained for diagnostics only

  uint8_t at(int r, int c) const {
    return mask[size_t(r) * size_t(grid_side) + size_t(c)];
  }
};

// Deterministic rectangle geometry for a given draw. Cut side length is
// floor(g*sqrt(1-lambda)); the rectangle is centered on (center_row,
// center_col) with ties resolved toward the top-left, then clipped.
MixMask mask_from_draw(int grid_side, double lambda, int center_row, int center_col);

// CutMix-style mask draw: lambda ~ U(0,1), then a uniform center cell.
// Consumes exactly lambda, row, col from the stream, in that order.
MixMask sample_mask(int grid_side, RngState& rng);

namespace detail {

template <typename T>
Tensor<T> mix_rows(const Tensor<T>& a, const Tensor<T>& b, const MixMask& m,
                   const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
  if (a.ndim() != 2 || a.dim(0) != m.grid_side * m.grid_side) {
    throw ShapeError(std::string(op) + ": rows do not match the mask grid");
  }
  const int n = a.dim(0), d = a.dim(1);
  Tensor<T> out(a.shape());
  for (int i = 0; i < n; ++i) {
    const Tensor<T>& src = m.mask[size_t(i)] ? a : b;
    for (int j = 0; j < d; ++j) out.at(i, j) = src.at(i, j);
  }
  return out;
}

}  // namespace detail

// T_hat = T1 .* M + T2 .* (1-M) with M broadcast across the feature axis.
// Binary masks make this exact row selection, so every output token carries
// clean content from exactly one source.
template <typename T>
Tensor<T> mix_tokens(const Tensor<T>& t1, const Tensor<T>& t2, const MixMask& m) {
  return detail::mix_rows(t1, t2, m, "mix_tokens");
}

// Y_hat = Y1 .* M + Y2 .* (1-M); normalized rows stay normalized.
template <typename T>
Tensor<T> mix_token_labels(const Tensor<T>& y1, const Tensor<T>& y2, const MixMask& m) {
  return detail::mix_rows(y1, y2, m, "mix_token_labels");
}

// y_hat = mean(M)*y1 + (1-mean(M))*y2.
template <typename T>
Tensor<T> mix_class_label(const Tensor<T>& y1, const Tensor<T>& y2, const MixMask& m) {
  if (!y1.same_shape(y2)) throw ShapeError("mix_class_label: shape mismatch");
  Tensor<T> out(y1.shape());
  const T w = T(m.mean);
  for (int64_t i = 0; i < y1.numel(); ++i) {
    out[i] = w * y1[i] + (T(1) - w) * y2[i];
  }
  return out;
}

// Tape op: mask-select rows of [B,N,D] between two token tensors, one mask
// shared across the batch. Gradients route to whichever source supplied the
// row.
template <typename T>
Var<T> mask_mix(Var<T> t1, Var<T> t2, const MixMask& m) {
  Tape<T>& tp = *t1.tape;
  const Tensor<T>& A = tp.value(t1.id);
  const Tensor<T>& B = tp.value(t2.id);
  ad::check_same_shape(A, B, "mask_mix");
  if (A.ndim() != 3 || A.dim(1) != m.grid_side * m.grid_side) {
    throw ShapeError("mask_mix: token count does not match the mask grid");
  }
  const int bsz = A.dim(0), n = A.dim(1), d = A.dim(2);
  auto mask = std::make_shared<std::vector<uint8_t>>(m.mask);
  Tensor<T> out(A.shape());
  {
    const T* ad_ = A.data();
    const T* bd = B.data();
    const uint8_t* md = mask->data();
    T* od = out.data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        for (int i = 0; i < n; ++i) {
          const T* src = (md[i] ? ad_ : bd) + (b * n + i) * int64_t(d);
          T* dst = od + (b * n + i) * int64_t(d);
          for (int j = 0; j < d; ++j) dst[j] = src[j];
        }
      }
    });
  }
  const bool req = tp.any_requires({t1.id, t2.id});
  Tape<T>* t = &tp;
  const int aid = t1.id, bid = t2.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, aid, bid, oid, bsz, n, d, mask] {
      const T* g = t->grad(oid).data();
      T* da = t->requires_grad(aid) ? t->grad_buf(aid).data() : nullptr;
      T* db = t->requires_grad(bid) ? t->grad_buf(bid).data() : nullptr;
      const uint8_t* md = mask->data();
      parallel_for(bsz, [=](int64_t b0, int64_t b1) {
        for (int64_t b = b0; b < b1; ++b) {
          for (int i = 0; i < n; ++i) {
            T* dst = md[i] ? da : db;
            if (dst == nullptr) continue;
            const T* src = g + (b * n + i) * int64_t(d);
            T* out_row = dst + (b * n + i) * int64_t(d);
            for (int j = 0; j < d; ++j) out_row[j] += src[j];
          }
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

}  // namespace tlkit
