#include "tlkit/mixtoken.hpp"

#include <algorithm>
#include <cmath>

namespace tlkit {

MixMask mask_from_draw(int grid_side, double lambda, int center_row, int center_col) {
  if (grid_side < 1) throw ConfigError("mask grid_side must be >= 1");
  MixMask m;
  m.grid_side = grid_side;
  m.lambda_drawn = lambda;
  m.mask.assign(size_t(grid_side) * size_t(grid_side), uint8_t(1));

  const int cut = int(std::floor(grid_side * std::sqrt(1.0 - lambda)));
  if (cut > 0) {
    // A length-c span covering the center cell: extent c/2 above/left and
    // c-1-c/2 below/right, so even lengths lean toward the top-left.
    const int lo = cut / 2;
    const int hi = cut - 1 - lo;
    const int r0 = std::max(0, center_row - lo);
    const int r1 = std::min(grid_side, center_row + hi + 1);
    const int c0 = std::max(0, center_col - lo);
    const int c1 = std::min(grid_side, center_col + hi + 1);
    for (int r = r0; r < r1; ++r) {
      for (int c = c0; c < c1; ++c) {
        m.mask[size_t(r) * size_t(grid_side) + size_t(c)] = 0;
      }
    }
  }
  int64_t ones = 0;
  for (uint8_t v : m.mask) ones += v;
  m.mean = double(ones) / double(m.mask.size());
  return m;
}

MixMask sample_mask(int grid_side, RngState& rng) {
  const double lambda = rng.uniform();
  const int row = rng.uniform_int(grid_side);
  const int col = rng.uniform_int(grid_side);
  return mask_from_draw(grid_side, lambda, row, col);
}

}  // namespace tlkit
