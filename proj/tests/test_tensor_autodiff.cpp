#include <atomic>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "tlkit/autodiff.hpp"
#include "tlkit/half.hpp"
#include "tlkit/rng.hpp"
#include "tlkit/tensor.hpp"
#include "tlkit/threading.hpp"

using namespace tlkit;
using tlkit::testing::fd_check;
using tlkit::testing::random_tensor;
using tlkit::testing::readout;

TEST_CASE("tensor basics") {
  TensorD t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  t.at(1, 2) = 5.0;
  CHECK(t[5] == 5.0);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  const TensorF f = TensorF::from(t);
  CHECK(f[5] == 5.0f);
}

TEST_CASE("rng determinism and uniformity") {
  RngState a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  RngState r(7);
  double mean = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) mean += r.uniform();
  mean /= n;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.02));
  // permutation covers all indices
  auto p = r.permutation(16);
  std::vector<bool> seen(16, false);
  for (int v : p) seen[size_t(v)] = true;
  for (bool s : seen) CHECK(s);
}

TEST_CASE("parallel_for covers each index exactly once") {
  std::vector<std::atomic<int>> hits(257);
  for (auto& h : hits) h.store(0);
  parallel_for(257, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) hits[size_t(i)].fetch_add(1);
  });
  for (auto& h : hits) CHECK(h.load() == 1);
}

TEST_CASE("matmul matches a naive oracle and its gradients check out") {
  RngState rng(1);
  TensorD a = random_tensor({4, 5}, rng);
  TensorD b = random_tensor({5, 3}, rng);
  Tape<double> tape;
  Var<double> out = ad::matmul(tape.leaf(a), tape.leaf(b));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(out.value().at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
  const double err = fd_check({a, b}, [](Tape<double>& t, std::vector<Var<double>>& lv) {
    return readout(ad::matmul(lv[0], lv[1]));
  });
  CHECK(err <= 1e-4);

  // 3-D left operand folds its leading axes
  TensorD a3 = random_tensor({2, 4, 5}, rng);
  const double err3 = fd_check({a3, b}, [](Tape<double>& t, std::vector<Var<double>>& lv) {
    return readout(ad::matmul(lv[0], lv[1]));
  });
  CHECK(err3 <= 1e-4);
}

TEST_CASE("elementwise and broadcast op gradients") {
  RngState rng(2);
  TensorD x = random_tensor({3, 4}, rng);
  TensorD v = random_tensor({4}, rng);
  CHECK(fd_check({x, v}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::add_rowvec(lv[0], lv[1]));
        }) <= 1e-4);
  TensorD y = random_tensor({3, 4}, rng);
  CHECK(fd_check({x, y}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::axpy(lv[0], lv[1], 1.0, 0.5));
        }) <= 1e-4);
  CHECK(fd_check({x}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::scale(lv[0], -1.75));
        }) <= 1e-4);
  CHECK(fd_check({x}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::gelu(lv[0]));
        }) <= 1e-4);
  CHECK(fd_check({x}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::relu(lv[0]));
        }) <= 1e-4);
}

TEST_CASE("layer_norm normalizes rows and its gradients check out") {
  RngState rng(3);
  TensorD x = random_tensor({4, 6}, rng);
  TensorD g = random_tensor({6}, rng, 0.5, 1.5);
  TensorD b = random_tensor({6}, rng, -0.5, 0.5);
  {
    Tape<double> tape;
    Var<double> out = ad::layer_norm(tape.leaf(x), tape.leaf(TensorD::full({6}, 1.0)),
                                     tape.leaf(TensorD({6})), 1e-12);
    for (int r = 0; r < 4; ++r) {
      double mean = 0.0, var = 0.0;
      for (int j = 0; j < 6; ++j) mean += out.value().at(r, j);
      mean /= 6;
      for (int j = 0; j < 6; ++j) {
        var += (out.value().at(r, j) - mean) * (out.value().at(r, j) - mean);
      }
      CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
      CHECK(var / 6 == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  CHECK(fd_check({x, g, b}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::layer_norm(lv[0], lv[1], lv[2]));
        }) <= 1e-4);
}

TEST_CASE("softmax rows sum to one and its gradients check out") {
  RngState rng(4);
  TensorD x = random_tensor({5, 7}, rng, -3.0, 3.0);
  {
    Tape<double> tape;
    Var<double> p = ad::softmax_rows(tape.leaf(x));
    for (int r = 0; r < 5; ++r) {
      double sum = 0.0;
      for (int j = 0; j < 7; ++j) sum += p.value().at(r, j);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK(fd_check({x}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::softmax_rows(lv[0]));
        }) <= 1e-4);
}

TEST_CASE("conv2d matches a direct convolution oracle") {
  RngState rng(5);
  const int bsz = 2, c = 3, h = 6, w = 6, f = 4, k = 3, stride = 1, pad = 1;
  TensorD x = random_tensor({bsz, c, h, w}, rng);
  TensorD wt = random_tensor({f, c, k, k}, rng);
  TensorD bias = random_tensor({f}, rng);
  Tape<double> tape;
  Var<double> out = ad::conv2d(tape.leaf(x), tape.leaf(wt), tape.leaf(bias), stride, pad);
  REQUIRE(out.value().shape() == std::vector<int>{bsz, f, h, w});
  for (int b = 0; b < bsz; ++b) {
    for (int fi = 0; fi < f; ++fi) {
      for (int oy = 0; oy < h; ++oy) {
        for (int ox = 0; ox < w; ++ox) {
          double acc = bias[fi];
          for (int ci = 0; ci < c; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x[((int64_t(b) * c + ci) * h + iy) * w + ix] *
                       wt[((int64_t(fi) * c + ci) * k + ky) * k + kx];
              }
            }
          }
          CHECK(out.value()[((int64_t(b) * f + fi) * h + oy) * w + ox] ==
                doctest::Approx(acc).epsilon(1e-10));
        }
      }
    }
  }
}

TEST_CASE("conv2d gradients check out (strided, padded)") {
  RngState rng(6);
  TensorD x = random_tensor({1, 2, 6, 6}, rng);
  TensorD w = random_tensor({3, 2, 4, 4}, rng);
  TensorD b = random_tensor({3}, rng);
  CHECK(fd_check({x, w, b}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::conv2d(lv[0], lv[1], lv[2], 2, 1));
        }) <= 1e-4);
}

TEST_CASE("attention head splitting round-trips and attention matches the composed oracle") {
  RngState rng(7);
  const int bsz = 2, n = 5, d = 8, heads = 2, dh = d / heads;
  TensorD x = random_tensor({bsz, n, d}, rng);
  {
    Tape<double> tape;
    Var<double> sp = ad::split_heads(tape.leaf(x), heads);
    Var<double> back = ad::merge_heads(sp);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.value()[i] == x[i]);
  }
  TensorD q = random_tensor({bsz, heads, n, dh}, rng);
  TensorD k = random_tensor({bsz, heads, n, dh}, rng);
  TensorD v = random_tensor({bsz, heads, n, dh}, rng);
  {
    Tape<double> tape;
    Var<double> out = ad::attention(tape.leaf(q), tape.leaf(k), tape.leaf(v));
    // oracle: softmax(q k^T / sqrt(dh)) v, one (b,h) group at a time
    for (int b = 0; b < bsz; ++b) {
      for (int hh = 0; hh < heads; ++hh) {
        const int64_t base = (int64_t(b) * heads + hh) * n * dh;
        for (int i = 0; i < n; ++i) {
          std::vector<double> scores(size_t(n));
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int z = 0; z < dh; ++z) {
              acc += q[base + i * dh + z] * k[base + j * dh + z];
            }
            scores[size_t(j)] = acc / std::sqrt(double(dh));
          }
          kern::softmax_row(scores.data(), scores.data(), n);
          for (int z = 0; z < dh; ++z) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += scores[size_t(j)] * v[base + j * dh + z];
            CHECK(out.value()[base + i * dh + z] == doctest::Approx(acc).epsilon(1e-10));
          }
        }
      }
    }
  }
  CHECK(fd_check({q, k, v}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::attention(lv[0], lv[1], lv[2]));
        }) <= 1e-4);
}

TEST_CASE("structural op gradients check out") {
  RngState rng(8);
  TensorD tokens = random_tensor({2, 4, 3}, rng);
  TensorD tok = random_tensor({3}, rng);
  CHECK(fd_check({tokens, tok}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::prepend_token(lv[0], lv[1]));
        }) <= 1e-4);
  TensorD pos = random_tensor({4, 3}, rng);
  CHECK(fd_check({tokens, pos}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::add_pos(lv[0], lv[1]));
        }) <= 1e-4);
  CHECK(fd_check({tokens}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::slice_axis1(lv[0], 1, 2));
        }) <= 1e-4);
  CHECK(fd_check({tokens}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::slice_last(lv[0], 1, 2));
        }) <= 1e-4);
  CHECK(fd_check({tokens}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::permute_batch(lv[0], {1, 0}));
        }) <= 1e-4);
  TensorD fmap = random_tensor({2, 3, 2, 2}, rng);
  CHECK(fd_check({fmap}, [](Tape<double>&, std::vector<Var<double>>& lv) {
          return readout(ad::channels_to_tokens(lv[0]));
        }) <= 1e-4);
}

TEST_CASE("binary16 conversions") {
  CHECK(half_to_float(float_to_half(1.0f)) == 1.0f);
  CHECK(half_to_float(float_to_half(0.5f)) == 0.5f);
  CHECK(half_to_float(float_to_half(0.0f)) == 0.0f);
  // 2^-24 is the smallest subnormal half
  CHECK(half_to_float(float_to_half(5.96046448e-8f)) == doctest::Approx(5.96046448e-8));
  // relative rounding error bounded by 2^-11 for normal values
  RngState rng(9);
  for (int i = 0; i < 2000; ++i) {
    const float x = float(rng.uniform(1e-4, 1.0));
    const float back = half_to_float(float_to_half(x));
    CHECK(std::fabs(double(back) - double(x)) <= std::fabs(double(x)) * 0x1p-11);
  }
  // round-to-nearest-even at a tie: 1 + 2^-11 is exactly between 1 and 1+2^-10
  CHECK(half_to_float(float_to_half(1.0f + 0x1p-11f)) == 1.0f);
  CHECK(half_to_float(float_to_half(1.0f + 3 * 0x1p-11f)) == 1.0f + 0x1p-9f);
}
