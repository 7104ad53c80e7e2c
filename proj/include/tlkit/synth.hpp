#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tlkit/errors.hpp"
#include "tlkit/rng.hpp"
#include "tlkit/scoremap.hpp"
#include "tlkit/tensor.hpp"

namespace tlkit {

struct DatasetSpec {
  int num_classes = 9;  // shapes * colors + background
  int image_size = 64;
  int samples_train = 2000;
  int samples_val = 500;
  int shapes = 4;  // kinds drawn from {circle, square, triangle, diamond}
  int colors = 2;
  uint64_t seed = 0;
  int scoremap_grid = 16;

  // Shape footprint as a fraction of image area; tunable for harder/easier
  // tasks without touching the generator.
  double min_area_frac = 0.035;
  double max_area_frac = 0.11;
  int max_shapes = 3;

  int background_class() const { return num_classes - 1; }
  int foreground_classes() const { return num_classes - 1; }

  void validate() const;
  static DatasetSpec load(const std::string& path);
  static DatasetSpec from_text(const std::string& text);
};

enum class ShapeKind { kCircle = 0, kSquare = 1, kTriangle = 2, kDiamond = 3 };

struct ShapeInstance {
  int class_id = 0;
  ShapeKind kind = ShapeKind::kCircle;
  int color = 0;
  double cx = 0, cy = 0;  // pixel coordinates
  double size = 0;        // kind-specific radius parameter
};

double shape_area(ShapeKind kind, double size);
double shape_size_for_area(ShapeKind kind, double area);
double shape_extent(ShapeKind kind, double size);  // bounding-circle radius
bool shape_contains(const ShapeInstance& s, double x, double y);

struct SynthSample {
  TensorF image;  // [3,H,W], values in [0,1]
  int class_label = 0;
  std::vector<ShapeInstance> geometry;
  int64_t sample_id = 0;
};

// Deterministic in (spec, sample_id): background noise plus 1..max_shapes
// non-overlapping shapes; the largest-area shape defines class_label.
SynthSample generate_sample(const DatasetSpec& spec, int64_t sample_id);

// Exact-coverage annotation: per cell, each class gets its covered area
// fraction at 4x4 supersampling; the remainder goes to the background class.
DenseScoreMap oracle_scoremap(const SynthSample& sample, int grid_h, int grid_w,
                              int num_classes);

struct AugRecord {
  CropBox crop;
  bool used_center_fallback = false;
  bool has_erase = false;
  double erase_x0 = 0, erase_y0 = 0, erase_x1 = 0, erase_y1 = 0;
  uint64_t rng_seed = 0;
};

// Area-and-aspect crop sampling (10 attempts, then a center-crop fallback),
// resized to target x target with bilinear interpolation. The box lands in
// the record so align_crop can produce matching token labels.
TensorF random_resized_crop_aligned(const SynthSample& sample, double scale_lo,
                                    double scale_hi, double aspect_lo,
                                    double aspect_hi, int target, RngState& rng,
                                    AugRecord& rec);

// Column reversal; sets the flip flag handled downstream by align_crop.
void hflip_aligned(TensorF& image, AugRecord& rec);

// With probability prob, fills a random rectangle (2..33% of the image) with
// uniform noise. Token labels are intentionally left untouched.
bool random_erase(TensorF& image, double prob, RngState& rng, AugRecord& rec);

// Bilinear resize helper shared with evaluation-time center resizing.
TensorF resize_bilinear(const TensorF& image, int out_h, int out_w);

}  // namespace tlkit
