#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace tlkit {

// Counter-seeded xoshiro256** stream. Standard-library distributions are
// implementation-defined, so every draw used anywhere in the toolkit goes
// through this class to keep results bitwise reproducible across compilers.
class RngState {
 public:
  explicit RngState(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  // Stable hash for deriving independent substreams, e.g. per (seed, sample).
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ull * (b + 1);
    x = splitmix64(x);
    return x ^ (a << 1);
  }

  static uint64_t mix(uint64_t a, uint64_t b, uint64_t c) {
    return mix(mix(a, b), c);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Lemire's multiply-shift; bias is < 2^-32 for
  // the small n used here and, unlike std::uniform_int_distribution, the
  // mapping is fixed.
  int uniform_int(int n) {
    return int((static_cast<unsigned __int128>(next_u64()) *
                static_cast<unsigned __int128>(uint64_t(n))) >>
               64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; consumes exactly two draws per call.
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // N(0, stddev^2) resampled until within two standard deviations.
  double truncated_normal(double stddev) {
    for (;;) {
      double x = normal();
      if (std::fabs(x) <= 2.0) return x * stddev;
    }
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(p[size_t(i)], p[size_t(j)]);
    }
    return p;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
};

}  // namespace tlkit
