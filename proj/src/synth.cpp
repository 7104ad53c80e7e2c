#include "tlkit/synth.hpp"

#include <algorithm>
#include <cmath>

#include "tlkit/config.hpp"

namespace tlkit {

namespace {

constexpr double kSqrt3 = 1.7320508075688772;

// Base palette; a dataset uses the first `colors` entries.
constexpr double kPalette[4][3] = {
    {0.88, 0.24, 0.20},
    {0.20, 0.38, 0.90},
    {0.22, 0.78, 0.30},
    {0.92, 0.86, 0.22},
};

}  // namespace

void DatasetSpec::validate() const {
  if (shapes < 1 || shapes > 4) throw ConfigError("shapes must lie in [1,4]");
  if (colors < 1 || colors > 4) throw ConfigError("colors must lie in [1,4]");
  if (num_classes != shapes * colors + 1) {
    throw ConfigError("num_classes must equal shapes*colors + 1 (background)");
  }
  if (image_size < 32) throw ConfigError("image_size must be >= 32");
  if (samples_train < 0 || samples_val < 0) {
    throw ConfigError("sample counts must be nonnegative");
  }
  if (scoremap_grid < 1 || scoremap_grid > image_size) {
    throw ConfigError("scoremap_grid must lie in [1, image_size]");
  }
  if (!(min_area_frac > 0.0 && min_area_frac <= max_area_frac && max_area_frac < 0.7)) {
    throw ConfigError("shape area fractions out of range");
  }
  if (max_shapes < 1) throw ConfigError("max_shapes must be >= 1");
}

DatasetSpec DatasetSpec::from_text(const std::string& text) {
  const KvConfig kv = KvConfig::parse(text);
  DatasetSpec s;
  s.num_classes = int(kv.get_int("num_classes", s.num_classes));
  s.image_size = int(kv.get_int("image_size", s.image_size));
  s.samples_train = int(kv.get_int("samples_train", s.samples_train));
  s.samples_val = int(kv.get_int("samples_val", s.samples_val));
  s.shapes = int(kv.get_int("shapes", s.shapes));
  s.colors = int(kv.get_int("colors", s.colors));
  s.seed = uint64_t(kv.get_int("seed", int64_t(s.seed)));
  s.scoremap_grid = int(kv.get_int("scoremap_grid", s.scoremap_grid));
  s.min_area_frac = kv.get_double("min_area_frac", s.min_area_frac);
  s.max_area_frac = kv.get_double("max_area_frac", s.max_area_frac);
  s.max_shapes = int(kv.get_int("max_shapes", s.max_shapes));
  s.validate();
  return s;
}

DatasetSpec DatasetSpec::load(const std::string& path) {
  DatasetSpec s;
  const KvConfig kv = KvConfig::load(path);
  std::string text;
  for (const auto& [k, v] : kv.values()) text += k + "=" + v + "\n";
  return from_text(text);
}

double shape_area(ShapeKind kind, double size) {
  switch (kind) {
    case ShapeKind::kCircle:
      return M_PI * size * size;
    case ShapeKind::kSquare:
      return 4.0 * size * size;
    case ShapeKind::kTriangle:
      return 0.75 * kSqrt3 * size * size;
    case ShapeKind::kDiamond:
      return 2.0 * size * size;
  }
  return 0.0;
}

double shape_size_for_area(ShapeKind kind, double area) {
  switch (kind) {
    case ShapeKind::kCircle:
      return std::sqrt(area / M_PI);
    case ShapeKind::kSquare:
      return 0.5 * std::sqrt(area);
    case ShapeKind::kTriangle:
      return std::sqrt(area / (0.75 * kSqrt3));
    case ShapeKind::kDiamond:
      return std::sqrt(area / 2.0);
  }
  return 0.0;
}

double shape_extent(ShapeKind kind, double size) {
  switch (kind) {
    case ShapeKind::kCircle:
      return size;
    case ShapeKind::kSquare:
      return size * M_SQRT2;
    case ShapeKind::kTriangle:
      return size;
    case ShapeKind::kDiamond:
      return size;
  }
  return 0.0;
}

bool shape_contains(const ShapeInstance& s, double x, double y) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  switch (s.kind) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= s.size * s.size;
    case ShapeKind::kSquare:
      return std::fabs(dx) <= s.size && std::fabs(dy) <= s.size;
    case ShapeKind::kTriangle: {
      // Equilateral, apex toward -y (screen up), circumradius = size.
      const double ax = 0.0, ay = -s.size;
      const double bx = -s.size * 0.5 * kSqrt3, by = s.size * 0.5;
      const double cx2 = s.size * 0.5 * kSqrt3, cy2 = s.size * 0.5;
      const double c1 = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
      const double c2 = (cx2 - bx) * (dy - by) - (cy2 - by) * (dx - bx);
      const double c3 = (ax - cx2) * (dy - cy2) - (ay - cy2) * (dx - cx2);
      return (c1 >= 0 && c2 >= 0 && c3 >= 0) || (c1 <= 0 && c2 <= 0 && c3 <= 0);
    }
    case ShapeKind::kDiamond:
      return std::fabs(dx) + std::fabs(dy) <= s.size;
  }
  return false;
}

namespace {

const ShapeInstance* hit_shape(const std::vector<ShapeInstance>& shapes, double x,
                               double y) {
  for (const auto& s : shapes) {
    if (shape_contains(s, x, y)) return &s;
  }
  return nullptr;
}

bool place_shape(const DatasetSpec& spec, RngState& rng, ShapeInstance& shape,
                 const std::vector<ShapeInstance>& existing, int attempts) {
  const double extent = shape_extent(shape.kind, shape.size);
  const double lo = extent + 1.0;
  const double hi = double(spec.image_size) - extent - 1.0;
  if (lo >= hi) return false;
  for (int t = 0; t < attempts; ++t) {
    const double cx = rng.uniform(lo, hi);
    const double cy = rng.uniform(lo, hi);
    bool ok = true;
    for (const auto& other : existing) {
      const double dx = cx - other.cx;
      const double dy = cy - other.cy;
      const double min_dist = extent + shape_extent(other.kind, other.size) + 1.0;
      if (dx * dx + dy * dy <= min_dist * min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) {
      shape.cx = cx;
      shape.cy = cy;
      return true;
    }
  }
  return false;
}

}  // namespace

SynthSample generate_sample(const DatasetSpec& spec, int64_t sample_id) {
  spec.validate();
  RngState rng(RngState::mix(RngState::mix(spec.seed, 0x73796e74ull), uint64_t(sample_id)));

  SynthSample out;
  out.sample_id = sample_id;
  const int s = spec.image_size;
  const double image_area = double(s) * double(s);

  const int n_shapes = 1 + rng.uniform_int(spec.max_shapes);
  const int dominant_class = rng.uniform_int(spec.foreground_classes());

  auto make_shape = [&](int class_id, double area) {
    ShapeInstance sh;
    sh.class_id = class_id;
    sh.kind = ShapeKind(class_id / spec.colors);
    sh.color = class_id % spec.colors;
    sh.size = shape_size_for_area(sh.kind, area);
    return sh;
  };

  const double dom_area = rng.uniform(spec.min_area_frac, spec.max_area_frac) * image_area;
  ShapeInstance dominant = make_shape(dominant_class, dom_area);
  if (!place_shape(spec, rng, dominant, out.geometry, 40)) {
    throw GenerationError("could not place the dominant shape for sample " +
                          std::to_string(sample_id));
  }
  out.geometry.push_back(dominant);
  out.class_label = dominant_class;

  // Secondary shapes get classes distinct from each other so no class can
  // out-mass the dominant shape by accumulation.
  std::vector<int> used_classes{dominant_class};
  for (int i = 1; i < n_shapes; ++i) {
    int cls = rng.uniform_int(spec.foreground_classes());
    if (std::find(used_classes.begin(), used_classes.end(), cls) != used_classes.end()) {
      continue;  // skip rather than redraw; keeps the draw count bounded
    }
    const double area = dom_area * rng.uniform(0.35, 0.65);
    ShapeInstance sh = make_shape(cls, area);
    if (place_shape(spec, rng, sh, out.geometry, 40)) {
      out.geometry.push_back(sh);
      used_classes.push_back(cls);
    }
  }

  out.image = TensorF({3, s, s});
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const ShapeInstance* hit = hit_shape(out.geometry, x + 0.5, y + 0.5);
      for (int c = 0; c < 3; ++c) {
        double v;
        if (hit != nullptr) {
          v = kPalette[hit->color][c] + 0.16 * (rng.uniform() - 0.5);
        } else {
          v = 0.45 + 0.50 * (rng.uniform() - 0.5);
        }
        out.image[(int64_t(c) * s + y) * s + x] = float(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

DenseScoreMap oracle_scoremap(const SynthSample& sample, int grid_h, int grid_w,
                              int num_classes) {
  const int s = sample.image.dim(1);
  DenseScoreMap map;
  map.height = grid_h;
  map.width = grid_w;
  map.num_classes = num_classes;
  map.src_height = s;
  map.src_width = s;
  map.scores.assign(size_t(grid_h) * size_t(grid_w) * size_t(num_classes), 0.0);

  const double cell_h = double(s) / grid_h;
  const double cell_w = double(s) / grid_w;
  const int ss = 4;  // supersampling points per axis
  const double frac = 1.0 / double(ss * ss);
  for (int r = 0; r < grid_h; ++r) {
    for (int c = 0; c < grid_w; ++c) {
      double* cellp = &map.at(r, c, 0);
      for (int i = 0; i < ss; ++i) {
        const double y = r * cell_h + (i + 0.5) * cell_h / ss;
        for (int j = 0; j < ss; ++j) {
          const double x = c * cell_w + (j + 0.5) * cell_w / ss;
          const ShapeInstance* hit = hit_shape(sample.geometry, x, y);
          const int cls = hit != nullptr ? hit->class_id : num_classes - 1;
          cellp[cls] += frac;
        }
      }
    }
  }
  return map;
}

namespace {

// Bilinear image read at (y, x), half-pixel centers, border clamp.
float sample_pixel(const TensorF& img, int channel, double y, double x) {
  const int h = img.dim(1), w = img.dim(2);
  const double u = y - 0.5, v = x - 0.5;
  int i0 = int(std::floor(u));
  int j0 = int(std::floor(v));
  double fy = u - i0, fx = v - j0;
  if (i0 < 0) {
    i0 = 0;
    fy = 0.0;
  }
  if (j0 < 0) {
    j0 = 0;
    fx = 0.0;
  }
  if (i0 >= h - 1) {
    i0 = h - 1;
    fy = 0.0;
  }
  if (j0 >= w - 1) {
    j0 = w - 1;
    fx = 0.0;
  }
  const int i1 = std::min(i0 + 1, h - 1);
  const int j1 = std::min(j0 + 1, w - 1);
  const float* plane = img.data() + int64_t(channel) * h * w;
  const double p00 = plane[int64_t(i0) * w + j0];
  const double p01 = plane[int64_t(i0) * w + j1];
  const double p10 = plane[int64_t(i1) * w + j0];
  const double p11 = plane[int64_t(i1) * w + j1];
  return float((1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11));
}

TensorF resample_region(const TensorF& img, double x0, double y0, double w, double h,
                        int out_h, int out_w) {
  TensorF out({3, out_h, out_w});
  for (int c = 0; c < 3; ++c) {
    for (int r = 0; r < out_h; ++r) {
      const double sy = y0 + (r + 0.5) * h / out_h;
      for (int cc = 0; cc < out_w; ++cc) {
        const double sx = x0 + (cc + 0.5) * w / out_w;
        out[(int64_t(c) * out_h + r) * out_w + cc] = sample_pixel(img, c, sy, sx);
      }
    }
  }
  return out;
}

}  // namespace

TensorF resize_bilinear(const TensorF& image, int out_h, int out_w) {
  return resample_region(image, 0.0, 0.0, double(image.dim(2)), double(image.dim(1)),
                         out_h, out_w);
}

TensorF random_resized_crop_aligned(const SynthSample& sample, double scale_lo,
                                    double scale_hi, double aspect_lo,
                                    double aspect_hi, int target, RngState& rng,
                                    AugRecord& rec) {
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0)) {
    throw ConfigError("crop scale range must lie in (0,1]");
  }
  const int s = sample.image.dim(1);
  const double area = double(s) * double(s);
  double bx = 0, by = 0, bw = double(s), bh = double(s);
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double a = rng.uniform(scale_lo, scale_hi) * area;
    const double ar = std::exp(rng.uniform(std::log(aspect_lo), std::log(aspect_hi)));
    const double w = std::sqrt(a * ar);
    const double h = std::sqrt(a / ar);
    if (w <= double(s) && h <= double(s)) {
      bx = rng.uniform(0.0, double(s) - w);
      by = rng.uniform(0.0, double(s) - h);
      bw = w;
      bh = h;
      found = true;
    }
  }
  if (!found) {
    const double side = double(s);
    bx = 0.0;
    by = 0.0;
    bw = side;
    bh = side;
    rec.used_center_fallback = true;
  }
  rec.crop = CropBox{bx, by, bx + bw, by + bh, false};
  return resample_region(sample.image, bx, by, bw, bh, target, target);
}

void hflip_aligned(TensorF& image, AugRecord& rec) {
  const int h = image.dim(1), w = image.dim(2);
  for (int c = 0; c < 3; ++c) {
    float* plane = image.data() + int64_t(c) * h * w;
    for (int r = 0; r < h; ++r) {
      float* row = plane + int64_t(r) * w;
      for (int a = 0, b = w - 1; a < b; ++a, --b) std::swap(row[a], row[b]);
    }
  }
  rec.crop.flip = !rec.crop.flip;
}

bool random_erase(TensorF& image, double prob, RngState& rng, AugRecord& rec) {
  if (prob < 0.0 || prob > 1.0) throw ConfigError("erase probability must lie in [0,1]");
  if (rng.uniform() >= prob) return false;
  const int h = image.dim(1), w = image.dim(2);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double a = rng.uniform(0.02, 0.33) * double(h) * double(w);
    const double ar = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    const int ew = int(std::lround(std::sqrt(a * ar)));
    const int eh = int(std::lround(std::sqrt(a / ar)));
    if (ew < 1 || eh < 1 || ew > w || eh > h) continue;
    const int x0 = rng.uniform_int(w - ew + 1);
    const int y0 = rng.uniform_int(h - eh + 1);
    for (int c = 0; c < 3; ++c) {
      float* plane = image.data() + int64_t(c) * h * w;
      for (int r = y0; r < y0 + eh; ++r) {
        for (int cc = x0; cc < x0 + ew; ++cc) {
          plane[int64_t(r) * w + cc] = float(rng.uniform());
        }
      }
    }
    rec.has_erase = true;
    rec.erase_x0 = x0;
    rec.erase_y0 = y0;
    rec.erase_x1 = x0 + ew;
    rec.erase_y1 = y0 + eh;
    return true;
  }
  return false;
}

}  // namespace tlkit
