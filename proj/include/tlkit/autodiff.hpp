#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tlkit/errors.hpp"
#include "tlkit/tensor.hpp"
#include "tlkit/threading.hpp"

namespace tlkit {

// ---------------------------------------------------------------------------
// Raw kernels shared by forward and backward passes. Each output element is
// produced by exactly one task with a fixed inner reduction order, so results
// do not depend on the thread budget.
// ---------------------------------------------------------------------------
namespace kern {

// c = a·b, a: [m,k], b: [k,n]
template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  parallel_for(m, [=](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* ai = a + i * k;
      T* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
      for (int64_t kk = 0; kk < k; ++kk) {
        const T aik = ai[kk];
        const T* bk = b + kk * n;
        for (int64_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
      }
    }
  });
}

// c += g·b^T, g: [m,n], b: [k,n]  (grad w.r.t. the left matmul operand)
template <typename T>
void matmul_nt_acc(const T* g, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
  parallel_for(m, [=](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const T* gi = g + i * n;
      T* ci = c + i * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        const T* bk = b + kk * n;
        T acc = T(0);
        for (int64_t j = 0; j < n; ++j) acc += gi[j] * bk[j];
        ci[kk] += acc;
      }
    }
  });
}

// c += a^T·g, a: [m,k], g: [m,n]  (grad w.r.t. the right matmul operand)
template <typename T>
void matmul_tn_acc(const T* a, const T* g, T* c, int64_t m, int64_t k, int64_t n) {
  parallel_for(k, [=](int64_t k0, int64_t k1) {
    for (int64_t kk = k0; kk < k1; ++kk) {
      T* ck = c + kk * n;
      for (int64_t i = 0; i < m; ++i) {
        const T aik = a[i * k + kk];
        const T* gi = g + i * n;
        for (int64_t j = 0; j < n; ++j) ck[j] += aik * gi[j];
      }
    }
  });
}

template <typename T>
void softmax_row(const T* x, T* p, int64_t n) {
  T mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
  T sum = T(0);
  for (int64_t j = 0; j < n; ++j) {
    p[j] = std::exp(x[j] - mx);
    sum += p[j];
  }
  const T inv = T(1) / sum;
  for (int64_t j = 0; j < n; ++j) p[j] *= inv;
}

}  // namespace kern

// ---------------------------------------------------------------------------
// Reverse-mode tape. Nodes append in evaluation order (a topological order),
// values live on the tape, and every op registers an explicit backward
// closure that accumulates into its parents' grad buffers.
// ---------------------------------------------------------------------------

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const { return tape->value(id); }
  const Tensor<T>& grad() const { return tape->grad(id); }
};

template <typename T>
class Tape {
 public:
  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    return wrap(add(std::move(value), requires_grad, nullptr));
  }

  const Tensor<T>& value(int id) const { return nodes_[size_t(id)].value; }
  const Tensor<T>& grad(int id) const { return nodes_[size_t(id)].grad; }
  bool requires_grad(int id) const { return nodes_[size_t(id)].requires_grad; }

  // Grad buffer, allocated (zeroed) on first touch.
  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  int next_id() const { return int(nodes_.size()); }

  int add(Tensor<T> value, bool requires_grad, std::function<void()> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  Var<T> wrap(int id) { return Var<T>{this, id}; }

  bool any_requires(std::initializer_list<int> ids) const {
    for (int id : ids) {
      if (nodes_[size_t(id)].requires_grad) return true;
    }
    return false;
  }

  void backward(Var<T> root) {
    if (root.tape != this) throw UsageError("backward: var from another tape");
    Node& r = nodes_[size_t(root.id)];
    if (r.value.numel() != 1) throw UsageError("backward: root must be scalar");
    grad_buf(root.id)[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.grad.empty() || !n.backward) continue;
      n.backward();
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------
namespace ad {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     Tensor<T>::shape_str(a.shape()) + " vs " +
                     Tensor<T>::shape_str(b.shape()));
  }
}

// out = a·b where a is [..., K] (leading axes folded) and b is [K, N].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& A = tp.value(a.id);
  const Tensor<T>& B = tp.value(b.id);
  if (A.ndim() < 2 || B.ndim() != 2 || A.cols() != B.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " +
                     Tensor<T>::shape_str(A.shape()) + " x " +
                     Tensor<T>::shape_str(B.shape()));
  }
  const int64_t m = A.rows(), k = A.cols(), n = B.dim(1);
  std::vector<int> out_shape = A.shape();
  out_shape.back() = int(n);
  Tensor<T> out(out_shape);
  kern::matmul(A.data(), B.data(), out.data(), m, k, n);

  const bool req = tp.any_requires({a.id, b.id});
  Tape<T>* t = &tp;
  const int aid = a.id, bid = b.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, aid, bid, oid, m, k, n] {
      const T* g = t->grad(oid).data();
      if (t->requires_grad(aid)) {
        kern::matmul_nt_acc(g, t->value(bid).data(), t->grad_buf(aid).data(), m, n, k);
      }
      if (t->requires_grad(bid)) {
        kern::matmul_tn_acc(t->value(aid).data(), g, t->grad_buf(bid).data(), m, k, n);
      }
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// out = x + v broadcast over rows; v: [E], x: [..., E].
template <typename T>
Var<T> add_rowvec(Var<T> x, Var<T> v) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const Tensor<T>& V = tp.value(v.id);
  if (V.ndim() != 1 || V.dim(0) != X.cols()) {
    throw ShapeError("add_rowvec: vector length mismatch");
  }
  const int64_t rows = X.rows(), e = X.cols();
  Tensor<T> out(X.shape());
  {
    const T* xd = X.data();
    const T* vd = V.data();
    T* od = out.data();
    parallel_for(rows, [=](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        for (int64_t j = 0; j < e; ++j) od[r * e + j] = xd[r * e + j] + vd[j];
      }
    });
  }
  const bool req = tp.any_requires({x.id, v.id});
  Tape<T>* t = &tp;
  const int xid = x.id, vid = v.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, vid, oid, rows, e] {
      const T* g = t->grad(oid).data();
      if (t->requires_grad(xid)) {
        T* dx = t->grad_buf(xid).data();
        parallel_for(rows * e, [=](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) dx[i] += g[i];
        });
      }
      if (t->requires_grad(vid)) {
        T* dv = t->grad_buf(vid).data();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < e; ++j) dv[j] += g[r * e + j];
        }
      }
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// out = ca·a + cb·b, elementwise on equal shapes.
template <typename T>
Var<T> axpy(Var<T> a, Var<T> b, T ca, T cb) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& A = tp.value(a.id);
  const Tensor<T>& B = tp.value(b.id);
  check_same_shape(A, B, "axpy");
  const int64_t n = A.numel();
  Tensor<T> out(A.shape());
  {
    const T* ad = A.data();
    const T* bd = B.data();
    T* od = out.data();
    parallel_for(n, [=](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) od[i] = ca * ad[i] + cb * bd[i];
    });
  }
  const bool req = tp.any_requires({a.id, b.id});
  Tape<T>* t = &tp;
  const int aid = a.id, bid = b.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, aid, bid, oid, n, ca, cb] {
      const T* g = t->grad(oid).data();
      if (t->requires_grad(aid)) {
        T* da = t->grad_buf(aid).data();
        parallel_for(n, [=](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) da[i] += ca * g[i];
        });
      }
      if (t->requires_grad(bid)) {
        T* db = t->grad_buf(bid).data();
        parallel_for(n, [=](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) db[i] += cb * g[i];
        });
      }
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return axpy(a, b, T(1), T(1));
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const int64_t n = X.numel();
  Tensor<T> out(X.shape());
  {
    const T* xd = X.data();
    T* od = out.data();
    for (int64_t i = 0; i < n; ++i) od[i] = c * xd[i];
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, n, c] {
      const T* g = t->grad(oid).data();
      T* dx = t->grad_buf(xid).data();
      for (int64_t i = 0; i < n; ++i) dx[i] += c * g[i];
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Layer norm over the last axis with affine parameters.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const Tensor<T>& G = tp.value(gamma.id);
  const Tensor<T>& Bt = tp.value(beta.id);
  const int64_t d = X.cols();
  if (G.numel() != d || Bt.numel() != d) {
    throw ShapeError("layer_norm: affine parameter length mismatch");
  }
  const int64_t rows = X.rows();
  Tensor<T> out(X.shape());
  auto xhat = std::make_shared<Tensor<T>>(X.shape());
  auto inv_std = std::make_shared<std::vector<T>>(size_t(rows));
  {
    const T* xd = X.data();
    const T* gd = G.data();
    const T* bd = Bt.data();
    T* od = out.data();
    T* xh = xhat->data();
    T* is = inv_std->data();
    parallel_for(rows, [=](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        const T* xr = xd + r * d;
        T mean = T(0);
        for (int64_t j = 0; j < d; ++j) mean += xr[j];
        mean /= T(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) {
          const T c = xr[j] - mean;
          var += c * c;
        }
        var /= T(d);
        const T s = T(1) / std::sqrt(var + eps);
        is[r] = s;
        for (int64_t j = 0; j < d; ++j) {
          const T h = (xr[j] - mean) * s;
          xh[r * d + j] = h;
          od[r * d + j] = gd[j] * h + bd[j];
        }
      }
    });
  }
  const bool req = tp.any_requires({x.id, gamma.id, beta.id});
  Tape<T>* t = &tp;
  const int xid = x.id, gid = gamma.id, bid = beta.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, gid, bid, oid, rows, d, xhat, inv_std] {
      const T* g = t->grad(oid).data();
      const T* xh = xhat->data();
      const T* is = inv_std->data();
      const T* gam = t->value(gid).data();
      if (t->requires_grad(xid)) {
        T* dx = t->grad_buf(xid).data();
        parallel_for(rows, [=](int64_t r0, int64_t r1) {
          for (int64_t r = r0; r < r1; ++r) {
            const T* gr = g + r * d;
            const T* hr = xh + r * d;
            T sum_dh = T(0), sum_dh_h = T(0);
            for (int64_t j = 0; j < d; ++j) {
              const T dh = gr[j] * gam[j];
              sum_dh += dh;
              sum_dh_h += dh * hr[j];
            }
            const T inv_d = T(1) / T(d);
            for (int64_t j = 0; j < d; ++j) {
              const T dh = gr[j] * gam[j];
              dx[r * d + j] += is[r] * (dh - sum_dh * inv_d - hr[j] * sum_dh_h * inv_d);
            }
          }
        });
      }
      if (t->requires_grad(gid)) {
        T* dg = t->grad_buf(gid).data();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * xh[r * d + j];
        }
      }
      if (t->requires_grad(bid)) {
        T* db = t->grad_buf(bid).data();
        for (int64_t r = 0; r < rows; ++r) {
          for (int64_t j = 0; j < d; ++j) db[j] += g[r * d + j];
        }
      }
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const int64_t n = X.numel();
  Tensor<T> out(X.shape());
  {
    const T* xd = X.data();
    T* od = out.data();
    parallel_for(n, [=](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) {
        od[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * T(M_SQRT1_2)));
      }
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, n] {
      const T* g = t->grad(oid).data();
      const T* xd = t->value(xid).data();
      T* dx = t->grad_buf(xid).data();
      const T inv_sqrt_2pi = T(0.3989422804014326779);
      parallel_for(n, [=](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          const T xi = xd[i];
          const T cdf = T(0.5) * (T(1) + std::erf(xi * T(M_SQRT1_2)));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xi * xi);
          dx[i] += g[i] * (cdf + xi * pdf);
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const int64_t n = X.numel();
  Tensor<T> out(X.shape());
  {
    const T* xd = X.data();
    T* od = out.data();
    parallel_for(n, [=](int64_t i0, int64_t i1) {
      for (int64_t i = i0; i < i1; ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, n] {
      const T* g = t->grad(oid).data();
      const T* xd = t->value(xid).data();
      T* dx = t->grad_buf(xid).data();
      parallel_for(n, [=](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
          if (xd[i] > T(0)) dx[i] += g[i];
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Softmax over the last axis.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const int64_t rows = X.rows(), k = X.cols();
  Tensor<T> out(X.shape());
  {
    const T* xd = X.data();
    T* od = out.data();
    parallel_for(rows, [=](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) kern::softmax_row(xd + r * k, od + r * k, k);
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, rows, k] {
      const T* g = t->grad(oid).data();
      const T* p = t->value(oid).data();
      T* dx = t->grad_buf(xid).data();
      parallel_for(rows, [=](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
          const T* gr = g + r * k;
          const T* pr = p + r * k;
          T dot = T(0);
          for (int64_t j = 0; j < k; ++j) dot += gr[j] * pr[j];
          for (int64_t j = 0; j < k; ++j) dx[r * k + j] += pr[j] * (gr[j] - dot);
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// 2-D convolution via im2col. x: [B,C,H,W], w: [F,C,k,k], bias: [F].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int pad) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const Tensor<T>& W = tp.value(w.id);
  const Tensor<T>& Bv = tp.value(bias.id);
  if (X.ndim() != 4 || W.ndim() != 4) throw ShapeError("conv2d: expects 4-D operands");
  const int bsz = X.dim(0), c = X.dim(1), h = X.dim(2), wd = X.dim(3);
  const int f = W.dim(0), kk = W.dim(2);
  if (W.dim(1) != c || W.dim(3) != kk) throw ShapeError("conv2d: weight shape mismatch");
  if (Bv.numel() != f) throw ShapeError("conv2d: bias length mismatch");
  const int ho = (h + 2 * pad - kk) / stride + 1;
  const int wo = (wd + 2 * pad - kk) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");

  const int64_t ckk = int64_t(c) * kk * kk;
  const int64_t m = int64_t(bsz) * ho * wo;
  auto col = std::make_shared<Tensor<T>>(std::vector<int>{int(m), int(ckk)});
  {
    const T* xd = X.data();
    T* cd = col->data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            T* row = cd + ((b * ho + oy) * wo + ox) * ckk;
            int64_t idx = 0;
            for (int ci = 0; ci < c; ++ci) {
              const T* plane = xd + (b * c + ci) * int64_t(h) * wd;
              for (int ky = 0; ky < kk; ++ky) {
                const int iy = oy * stride + ky - pad;
                for (int kx = 0; kx < kk; ++kx, ++idx) {
                  const int ix = ox * stride + kx - pad;
                  row[idx] = (iy >= 0 && iy < h && ix >= 0 && ix < wd)
                                 ? plane[int64_t(iy) * wd + ix]
                                 : T(0);
                }
              }
            }
          }
        }
      }
    });
  }
  // w transposed to [ckk, f] for a streaming matmul.
  Tensor<T> wt({int(ckk), f});
  {
    const T* wdt = W.data();
    T* wtd = wt.data();
    for (int fi = 0; fi < f; ++fi) {
      for (int64_t j = 0; j < ckk; ++j) wtd[j * f + fi] = wdt[fi * ckk + j];
    }
  }
  Tensor<T> out2d({int(m), f});
  kern::matmul(col->data(), wt.data(), out2d.data(), m, ckk, f);
  Tensor<T> out({bsz, f, ho, wo});
  {
    const T* src = out2d.data();
    const T* bd = Bv.data();
    T* od = out.data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const T* r = src + ((b * ho + oy) * wo + ox) * f;
            for (int fi = 0; fi < f; ++fi) {
              od[((b * f + fi) * ho + oy) * wo + ox] = r[fi] + bd[fi];
            }
          }
        }
      }
    });
  }

  const bool req = tp.any_requires({x.id, w.id, bias.id});
  Tape<T>* t = &tp;
  const int xid = x.id, wid = w.id, bid = bias.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, wid, bid, oid, col, bsz, c, h, wd, f, kk, ho, wo, stride, pad,
            m, ckk] {
      const T* g = t->grad(oid).data();
      // Gather grads back to [m, f] row layout.
      Tensor<T> g2d({int(m), f});
      {
        T* gd = g2d.data();
        parallel_for(bsz, [=](int64_t b0, int64_t b1) {
          for (int64_t b = b0; b < b1; ++b) {
            for (int oy = 0; oy < ho; ++oy) {
              for (int ox = 0; ox < wo; ++ox) {
                T* r = gd + ((b * ho + oy) * wo + ox) * f;
                for (int fi = 0; fi < f; ++fi) {
                  r[fi] = g[((b * f + fi) * ho + oy) * wo + ox];
                }
              }
            }
          }
        });
      }
      if (t->requires_grad(bid)) {
        T* db = t->grad_buf(bid).data();
        const T* gd = g2d.data();
        for (int64_t i = 0; i < m; ++i) {
          for (int fi = 0; fi < f; ++fi) db[fi] += gd[i * f + fi];
        }
      }
      if (t->requires_grad(wid)) {
        // dw[f, ckk] += g2d^T·col
        kern::matmul_tn_acc(g2d.data(), col->data(), t->grad_buf(wid).data(), m, f,
                            ckk);
      }
      if (t->requires_grad(xid)) {
        Tensor<T> dcol({int(m), int(ckk)});
        kern::matmul(g2d.data(), t->value(wid).data(), dcol.data(), m, f, ckk);
        T* dx = t->grad_buf(xid).data();
        const T* dc = dcol.data();
        parallel_for(bsz, [=](int64_t b0, int64_t b1) {
          for (int64_t b = b0; b < b1; ++b) {
            for (int oy = 0; oy < ho; ++oy) {
              for (int ox = 0; ox < wo; ++ox) {
                const T* row = dc + ((b * ho + oy) * wo + ox) * ckk;
                int64_t idx = 0;
                for (int ci = 0; ci < c; ++ci) {
                  T* plane = dx + (b * c + ci) * int64_t(h) * wd;
                  for (int ky = 0; ky < kk; ++ky) {
                    const int iy = oy * stride + ky - pad;
                    for (int kx = 0; kx < kk; ++kx, ++idx) {
                      const int ix = ox * stride + kx - pad;
                      if (iy >= 0 && iy < h && ix >= 0 && ix < wd) {
                        plane[int64_t(iy) * wd + ix] += row[idx];
                      }
                    }
                  }
                }
              }
            }
          }
        });
      }
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// [B,N,D] -> [B,H,N,D/H]
template <typename T>
Var<T> split_heads(Var<T> x, int heads) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  if (X.ndim() != 3) throw ShapeError("split_heads: expects [B,N,D]");
  const int bsz = X.dim(0), n = X.dim(1), d = X.dim(2);
  if (d % heads != 0) throw ShapeError("split_heads: heads must divide dim");
  const int dh = d / heads;
  Tensor<T> out({bsz, heads, n, dh});
  {
    const T* xd = X.data();
    T* od = out.data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        for (int hh = 0; hh < heads; ++hh) {
          for (int i = 0; i < n; ++i) {
            const T* src = xd + (b * n + i) * d + int64_t(hh) * dh;
            T* dst = od + ((b * heads + hh) * n + i) * int64_t(dh);
            for (int j = 0; j < dh; ++j) dst[j] = src[j];
          }
        }
      }
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, bsz, heads, n, d, dh] {
      const T* g = t->grad(oid).data();
      T* dx = t->grad_buf(xid).data();
      parallel_for(bsz, [=](int64_t b0, int64_t b1) {
        for (int64_t b = b0; b < b1; ++b) {
          for (int hh = 0; hh < heads; ++hh) {
            for (int i = 0; i < n; ++i) {
              const T* src = g + ((b * heads + hh) * n + i) * int64_t(dh);
              T* dst = dx + (b * n + i) * d + int64_t(hh) * dh;
              for (int j = 0; j < dh; ++j) dst[j] += src[j];
            }
          }
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// [B,H,N,dh] -> [B,N,H*dh]
template <typename T>
Var<T> merge_heads(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  if (X.ndim() != 4) throw ShapeError("merge_heads: expects [B,H,N,dh]");
  const int bsz = X.dim(0), heads = X.dim(1), n = X.dim(2), dh = X.dim(3);
  const int d = heads * dh;
  Tensor<T> out({bsz, n, d});
  {
    const T* xd = X.data();
    T* od = out.data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        for (int hh = 0; hh < heads; ++hh) {
          for (int i = 0; i < n; ++i) {
            const T* src = xd + ((b * heads + hh) * n + i) * int64_t(dh);
            T* dst = od + (b * n + i) * d + int64_t(hh) * dh;
            for (int j = 0; j < dh; ++j) dst[j] = src[j];
          }
        }
      }
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, bsz, heads, n, d, dh] {
      const T* g = t->grad(oid).data();
      T* dx = t->grad_buf(xid).data();
      parallel_for(bsz, [=](int64_t b0, int64_t b1) {
        for (int64_t b = b0; b < b1; ++b) {
          for (int hh = 0; hh < heads; ++hh) {
            for (int i = 0; i < n; ++i) {
              const T* src = g + (b * n + i) * d + int64_t(hh) * dh;
              T* dst = dx + ((b * heads + hh) * n + i) * int64_t(dh);
              for (int j = 0; j < dh; ++j) dst[j] += src[j];
            }
          }
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Fused scaled-dot-product attention over [B,H,N,dh] operands.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v) {
  Tape<T>& tp = *q.tape;
  const Tensor<T>& Q = tp.value(q.id);
  const Tensor<T>& K = tp.value(k.id);
  const Tensor<T>& V = tp.value(v.id);
  check_same_shape(Q, K, "attention");
  check_same_shape(Q, V, "attention");
  if (Q.ndim() != 4) throw ShapeError("attention: expects [B,H,N,dh]");
  const int bsz = Q.dim(0), heads = Q.dim(1), n = Q.dim(2), dh = Q.dim(3);
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  const int64_t bh = int64_t(bsz) * heads;

  Tensor<T> out(Q.shape());
  auto probs = std::make_shared<Tensor<T>>(std::vector<int>{bsz, heads, n, n});
  {
    const T* qd = Q.data();
    const T* kd = K.data();
    const T* vd = V.data();
    T* od = out.data();
    T* pd = probs->data();
    parallel_for(bh, [=](int64_t g0, int64_t g1) {
      for (int64_t gidx = g0; gidx < g1; ++gidx) {
        const T* qg = qd + gidx * n * dh;
        const T* kg = kd + gidx * n * dh;
        const T* vg = vd + gidx * n * dh;
        T* pg = pd + gidx * int64_t(n) * n;
        T* og = od + gidx * n * dh;
        for (int i = 0; i < n; ++i) {
          T* prow = pg + int64_t(i) * n;
          for (int j = 0; j < n; ++j) {
            T acc = T(0);
            const T* qi = qg + int64_t(i) * dh;
            const T* kj = kg + int64_t(j) * dh;
            for (int x2 = 0; x2 < dh; ++x2) acc += qi[x2] * kj[x2];
            prow[j] = acc * inv_sqrt;
          }
          kern::softmax_row(prow, prow, n);
          T* orow = og + int64_t(i) * dh;
          for (int x2 = 0; x2 < dh; ++x2) orow[x2] = T(0);
          for (int j = 0; j < n; ++j) {
            const T pij = prow[j];
            const T* vj = vg + int64_t(j) * dh;
            for (int x2 = 0; x2 < dh; ++x2) orow[x2] += pij * vj[x2];
          }
        }
      }
    });
  }

  const bool req = tp.any_requires({q.id, k.id, v.id});
  Tape<T>* t = &tp;
  const int qid = q.id, kid = k.id, vid = v.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, qid, kid, vid, oid, probs, bsz, heads, n, dh, inv_sqrt, bh] {
      const T* g = t->grad(oid).data();
      const T* qd = t->value(qid).data();
      const T* kd = t->value(kid).data();
      const T* vd = t->value(vid).data();
      const T* pd = probs->data();
      T* dq = t->requires_grad(qid) ? t->grad_buf(qid).data() : nullptr;
      T* dk = t->requires_grad(kid) ? t->grad_buf(kid).data() : nullptr;
      T* dv = t->requires_grad(vid) ? t->grad_buf(vid).data() : nullptr;
      parallel_for(bh, [=](int64_t g0, int64_t g1) {
        std::vector<T> ds(size_t(n) * size_t(n));
        for (int64_t gidx = g0; gidx < g1; ++gidx) {
          const T* gg = g + gidx * n * dh;
          const T* qg = qd + gidx * n * dh;
          const T* kg = kd + gidx * n * dh;
          const T* vg = vd + gidx * n * dh;
          const T* pg = pd + gidx * int64_t(n) * n;
          for (int i = 0; i < n; ++i) {
            const T* grow = gg + int64_t(i) * dh;
            const T* prow = pg + int64_t(i) * n;
            T* dsrow = ds.data() + int64_t(i) * n;
            // dp then ds = p*(dp - sum(dp*p)) in one sweep
            T dot = T(0);
            for (int j = 0; j < n; ++j) {
              const T* vj = vg + int64_t(j) * dh;
              T dpj = T(0);
              for (int x2 = 0; x2 < dh; ++x2) dpj += grow[x2] * vj[x2];
              dsrow[j] = dpj;
              dot += dpj * prow[j];
            }
            for (int j = 0; j < n; ++j) {
              dsrow[j] = prow[j] * (dsrow[j] - dot) * inv_sqrt;
            }
          }
          if (dv != nullptr) {
            T* dvg = dv + gidx * n * dh;
            for (int j = 0; j < n; ++j) {
              T* dvj = dvg + int64_t(j) * dh;
              for (int i = 0; i < n; ++i) {
                const T pij = pg[int64_t(i) * n + j];
                const T* grow = gg + int64_t(i) * dh;
                for (int x2 = 0; x2 < dh; ++x2) dvj[x2] += pij * grow[x2];
              }
            }
          }
          if (dq != nullptr) {
            T* dqg = dq + gidx * n * dh;
            for (int i = 0; i < n; ++i) {
              const T* dsrow = ds.data() + int64_t(i) * n;
              T* dqi = dqg + int64_t(i) * dh;
              for (int j = 0; j < n; ++j) {
                const T s = dsrow[j];
                const T* kj = kg + int64_t(j) * dh;
                for (int x2 = 0; x2 < dh; ++x2) dqi[x2] += s * kj[x2];
              }
            }
          }
          if (dk != nullptr) {
            T* dkg = dk + gidx * n * dh;
            for (int j = 0; j < n; ++j) {
              T* dkj = dkg + int64_t(j) * dh;
              for (int i = 0; i < n; ++i) {
                const T s = ds[size_t(i) * size_t(n) + size_t(j)];
                const T* qi = qg + int64_t(i) * dh;
                for (int x2 = 0; x2 < dh; ++x2) dkj[x2] += s * qi[x2];
              }
            }
          }
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Prepend one learnable token to every sequence: [B,N,D]+[D] -> [B,N+1,D].
template <typename T>
Var<T> prepend_token(Var<T> tokens, Var<T> tok) {
  Tape<T>& tp = *tokens.tape;
  const Tensor<T>& X = tp.value(tokens.id);
  const Tensor<T>& C = tp.value(tok.id);
  if (X.ndim() != 3 || C.numel() != X.dim(2)) {
    throw ShapeError("prepend_token: incompatible shapes");
  }
  const int bsz = X.dim(0), n = X.dim(1), d = X.dim(2);
  Tensor<T> out({bsz, n + 1, d});
  {
    const T* xd = X.data();
    const T* cd = C.data();
    T* od = out.data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        T* row0 = od + b * (n + 1) * d;
        for (int j = 0; j < d; ++j) row0[j] = cd[j];
        const T* src = xd + b * int64_t(n) * d;
        T* dst = row0 + d;
        for (int64_t i = 0; i < int64_t(n) * d; ++i) dst[i] = src[i];
      }
    });
  }
  const bool req = tp.any_requires({tokens.id, tok.id});
  Tape<T>* t = &tp;
  const int xid = tokens.id, cid = tok.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, cid, oid, bsz, n, d] {
      const T* g = t->grad(oid).data();
      if (t->requires_grad(cid)) {
        T* dc = t->grad_buf(cid).data();
        for (int64_t b = 0; b < bsz; ++b) {
          const T* row0 = g + b * (n + 1) * d;
          for (int j = 0; j < d; ++j) dc[j] += row0[j];
        }
      }
      if (t->requires_grad(xid)) {
        T* dx = t->grad_buf(xid).data();
        parallel_for(bsz, [=](int64_t b0, int64_t b1) {
          for (int64_t b = b0; b < b1; ++b) {
            const T* src = g + b * (n + 1) * d + d;
            T* dst = dx + b * int64_t(n) * d;
            for (int64_t i = 0; i < int64_t(n) * d; ++i) dst[i] += src[i];
          }
        });
      }
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// x[B,N,D] + pos[N,D] broadcast over the batch.
template <typename T>
Var<T> add_pos(Var<T> x, Var<T> pos) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const Tensor<T>& P = tp.value(pos.id);
  if (X.ndim() != 3 || P.ndim() != 2 || X.dim(1) != P.dim(0) || X.dim(2) != P.dim(1)) {
    throw ShapeError("add_pos: incompatible shapes");
  }
  const int bsz = X.dim(0), n = X.dim(1), d = X.dim(2);
  Tensor<T> out(X.shape());
  {
    const T* xd = X.data();
    const T* pdta = P.data();
    T* od = out.data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        const T* src = xd + b * int64_t(n) * d;
        T* dst = od + b * int64_t(n) * d;
        for (int64_t i = 0; i < int64_t(n) * d; ++i) dst[i] = src[i] + pdta[i];
      }
    });
  }
  const bool req = tp.any_requires({x.id, pos.id});
  Tape<T>* t = &tp;
  const int xid = x.id, pid = pos.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, pid, oid, bsz, n, d] {
      const T* g = t->grad(oid).data();
      if (t->requires_grad(xid)) {
        T* dx = t->grad_buf(xid).data();
        const int64_t total = int64_t(bsz) * n * d;
        parallel_for(total, [=](int64_t i0, int64_t i1) {
          for (int64_t i = i0; i < i1; ++i) dx[i] += g[i];
        });
      }
      if (t->requires_grad(pid)) {
        T* dp = t->grad_buf(pid).data();
        parallel_for(n, [=](int64_t n0, int64_t n1) {
          for (int64_t i = n0; i < n1; ++i) {
            for (int64_t b = 0; b < bsz; ++b) {
              const T* src = g + (b * n + i) * d;
              for (int j = 0; j < d; ++j) dp[i * d + j] += src[j];
            }
          }
        });
      }
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Contiguous sequence slice along axis 1 of [B,N,D].
template <typename T>
Var<T> slice_axis1(Var<T> x, int start, int len) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  if (X.ndim() != 3 || start < 0 || len < 1 || start + len > X.dim(1)) {
    throw ShapeError("slice_axis1: bad range");
  }
  const int bsz = X.dim(0), n = X.dim(1), d = X.dim(2);
  Tensor<T> out({bsz, len, d});
  {
    const T* xd = X.data();
    T* od = out.data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        const T* src = xd + (b * n + start) * int64_t(d);
        T* dst = od + b * int64_t(len) * d;
        for (int64_t i = 0; i < int64_t(len) * d; ++i) dst[i] = src[i];
      }
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, bsz, n, d, start, len] {
      const T* g = t->grad(oid).data();
      T* dx = t->grad_buf(xid).data();
      parallel_for(bsz, [=](int64_t b0, int64_t b1) {
        for (int64_t b = b0; b < b1; ++b) {
          const T* src = g + b * int64_t(len) * d;
          T* dst = dx + (b * n + start) * int64_t(d);
          for (int64_t i = 0; i < int64_t(len) * d; ++i) dst[i] += src[i];
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Contiguous slice of the last axis, e.g. splitting fused qkv projections.
template <typename T>
Var<T> slice_last(Var<T> x, int start, int len) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const int c = X.cols();
  if (start < 0 || len < 1 || start + len > c) throw ShapeError("slice_last: bad range");
  const int64_t rows = X.rows();
  std::vector<int> out_shape = X.shape();
  out_shape.back() = len;
  Tensor<T> out(out_shape);
  {
    const T* xd = X.data();
    T* od = out.data();
    parallel_for(rows, [=](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        const T* src = xd + r * c + start;
        T* dst = od + r * len;
        for (int j = 0; j < len; ++j) dst[j] = src[j];
      }
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, rows, c, start, len] {
      const T* g = t->grad(oid).data();
      T* dx = t->grad_buf(xid).data();
      parallel_for(rows, [=](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
          const T* src = g + r * len;
          T* dst = dx + r * c + start;
          for (int j = 0; j < len; ++j) dst[j] += src[j];
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// out[b] = x[perm[b]] along the leading axis.
template <typename T>
Var<T> permute_batch(Var<T> x, std::vector<int> perm) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const int bsz = X.dim(0);
  if (int(perm.size()) != bsz) throw ShapeError("permute_batch: perm length mismatch");
  const int64_t stride = X.numel() / bsz;
  Tensor<T> out(X.shape());
  auto p = std::make_shared<std::vector<int>>(std::move(perm));
  {
    const T* xd = X.data();
    T* od = out.data();
    const int* pp = p->data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        const T* src = xd + int64_t(pp[b]) * stride;
        T* dst = od + b * stride;
        for (int64_t i = 0; i < stride; ++i) dst[i] = src[i];
      }
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, bsz, stride, p] {
      const T* g = t->grad(oid).data();
      T* dx = t->grad_buf(xid).data();
      const int* pp = p->data();
      parallel_for(bsz, [=](int64_t b0, int64_t b1) {
        for (int64_t b = b0; b < b1; ++b) {
          const T* src = g + b * stride;
          T* dst = dx + int64_t(pp[b]) * stride;
          for (int64_t i = 0; i < stride; ++i) dst[i] += src[i];
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Feature-map layout to token-sequence layout: [B,D,g,g] -> [B,g*g,D] with
// tokens in row-major grid order.
template <typename T>
Var<T> channels_to_tokens(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  if (X.ndim() != 4) throw ShapeError("channels_to_tokens: expects [B,D,H,W]");
  const int bsz = X.dim(0), d = X.dim(1), gh = X.dim(2), gw = X.dim(3);
  const int n = gh * gw;
  Tensor<T> out({bsz, n, d});
  {
    const T* xd = X.data();
    T* od = out.data();
    parallel_for(bsz, [=](int64_t b0, int64_t b1) {
      for (int64_t b = b0; b < b1; ++b) {
        for (int c = 0; c < d; ++c) {
          const T* plane = xd + (b * d + c) * int64_t(n);
          for (int i = 0; i < n; ++i) od[(b * n + i) * int64_t(d) + c] = plane[i];
        }
      }
    });
  }
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, bsz, d, n] {
      const T* g = t->grad(oid).data();
      T* dx = t->grad_buf(xid).data();
      parallel_for(bsz, [=](int64_t b0, int64_t b1) {
        for (int64_t b = b0; b < b1; ++b) {
          for (int c = 0; c < d; ++c) {
            T* plane = dx + (b * d + c) * int64_t(n);
            for (int i = 0; i < n; ++i) plane[i] += g[(b * n + i) * int64_t(d) + c];
          }
        }
      });
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

// Scalar projection sum(x .* w) against a constant weight tensor.
template <typename T>
Var<T> dot_const(Var<T> x, const Tensor<T>& w) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  if (X.numel() != w.numel()) throw ShapeError("dot_const: size mismatch");
  const int64_t n = X.numel();
  T acc = T(0);
  {
    const T* xd = X.data();
    const T* wd = w.data();
    for (int64_t i = 0; i < n; ++i) acc += xd[i] * wd[i];
  }
  Tensor<T> out({1});
  out[0] = acc;
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  auto wp = std::make_shared<Tensor<T>>(w);
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, n, wp] {
      const T g = t->grad(oid)[0];
      const T* wd = wp->data();
      T* dx = t->grad_buf(xid).data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g * wd[i];
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& X = tp.value(x.id);
  const int64_t n = X.numel();
  T acc = T(0);
  const T* xd = X.data();
  for (int64_t i = 0; i < n; ++i) acc += xd[i];
  Tensor<T> out({1});
  out[0] = acc;
  const bool req = tp.requires_grad(x.id);
  Tape<T>* t = &tp;
  const int xid = x.id, oid = tp.next_id();
  std::function<void()> back;
  if (req) {
    back = [t, xid, oid, n] {
      const T g = t->grad(oid)[0];
      T* dx = t->grad_buf(xid).data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g;
    };
  }
  return tp.wrap(tp.add(std::move(out), req, std::move(back)));
}

}  // namespace ad

}  // namespace tlkit
