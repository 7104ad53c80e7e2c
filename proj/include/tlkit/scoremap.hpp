#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tlkit/errors.hpp"
#include "tlkit/tensor.hpp"

namespace tlkit {

// Dense per-cell class-probability map produced by an annotator.
struct DenseScoreMap {
  int height = 0;        // H_s
  int width = 0;         // W_s
  int num_classes = 0;   // K
  int src_height = 0;    // source image pixels
  int src_width = 0;
  std::vector<double> scores;  // H_s*W_s*K, row-major

  double& at(int r, int c, int k) {
    return scores[(size_t(r) * size_t(width) + size_t(c)) * size_t(num_classes) +
                  size_t(k)];
  }
  double at(int r, int c, int k) const {
    return scores[(size_t(r) * size_t(width) + size_t(c)) * size_t(num_classes) +
                  size_t(k)];
  }
  const double* cell(int r, int c) const {
    return &scores[(size_t(r) * size_t(width) + size_t(c)) * size_t(num_classes)];
  }

  // Cells must be probability vectors summing to 1 within `tol`.
  void validate(double tol = 1e-3) const;
};

struct SparseCellEntry {
  uint16_t class_id = 0;
  uint16_t prob_bits = 0;  // binary16
};

// Top-k half-precision records per cell, sorted by descending probability.
struct SparseScoreMap {
  int height = 0;
  int width = 0;
  uint32_t num_classes = 0;
  int k = 0;
  int src_height = 0;
  int src_width = 0;
  std::vector<SparseCellEntry> entries;  // height*width*k

  const SparseCellEntry* cell(int r, int c) const {
    return &entries[(size_t(r) * size_t(width) + size_t(c)) * size_t(k)];
  }
  void validate() const;

  bool operator==(const SparseScoreMap& o) const {
    return height == o.height && width == o.width && num_classes == o.num_classes &&
           k == o.k && src_height == o.src_height && src_width == o.src_width &&
           entries.size() == o.entries.size() &&
           std::equal(entries.begin(), entries.end(), o.entries.begin(),
                      [](const SparseCellEntry& a, const SparseCellEntry& b) {
                        return a.class_id == b.class_id && a.prob_bits == b.prob_bits;
                      });
  }
};

// Crop rectangle in source-image pixel coordinates.
struct CropBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool flip = false;

  void validate(double width, double height) const {
    if (!(x0 >= 0 && x0 < x1 && x1 <= width && y0 >= 0 && y0 < y1 && y1 <= height)) {
      throw CropError("crop box out of bounds");
    }
  }
};

using Annotator = std::function<DenseScoreMap(const TensorF& image)>;

// Runs the annotator and validates its output map.
DenseScoreMap annotate(const Annotator& annotator, const TensorF& image);

// Keeps the k largest probabilities per cell (ties toward the smaller class
// id), rounding to nearest-even binary16.
SparseScoreMap sparsify_topk(const DenseScoreMap& dense, int k);

// Restores kept entries, zeros the rest, renormalizes each cell to sum 1.
DenseScoreMap densify(const SparseScoreMap& sparse);

// TLSM file image (little-endian):
//   "TLSM" | u16 version=1 | u32 K | u16 H_s | u16 W_s | u8 k |
//   u16 src_h | u16 src_w | H_s*W_s cells of k x (u16 class_id, u16 binary16)
std::vector<uint8_t> encode_file(const SparseScoreMap& sparse);
SparseScoreMap decode_file(const std::vector<uint8_t>& bytes);

constexpr size_t kScoreMapHeaderBytes = 19;

// RoIAlign with one bilinear sample at each output cell center (half-pixel
// convention, border clamp). Returns the g*g x K token-label matrix, rows
// renormalized; flip reverses output columns.
Tensor<double> align_crop(const DenseScoreMap& dense, const CropBox& box, int grid);

}  // namespace tlkit
