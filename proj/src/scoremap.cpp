#include "tlkit/scoremap.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "tlkit/half.hpp"

namespace tlkit {

void DenseScoreMap::validate(double tol) const {
  if (height < 1 || width < 1 || num_classes < 1) {
    throw AnnotationError("score map has empty dimensions");
  }
  if (src_height < 1 || src_width < 1) {
    throw AnnotationError("score map missing source image size");
  }
  if (scores.size() != size_t(height) * size_t(width) * size_t(num_classes)) {
    throw AnnotationError("score buffer size mismatch");
  }
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const double* p = cell(r, c);
      double sum = 0.0;
      for (int k = 0; k < num_classes; ++k) {
        if (p[k] < 0.0 || p[k] > 1.0) {
          throw AnnotationError("score out of [0,1] at cell (" + std::to_string(r) +
                                "," + std::to_string(c) + ")");
        }
        sum += p[k];
      }
      if (std::fabs(sum - 1.0) > tol) {
        throw AnnotationError("cell (" + std::to_string(r) + "," + std::to_string(c) +
                              ") sums to " + std::to_string(sum));
      }
    }
  }
}

void SparseScoreMap::validate() const {
  if (height < 1 || width < 1 || num_classes < 1 || k < 1) {
    throw FormatError("sparse map has empty dimensions", 0);
  }
  if (uint32_t(k) > num_classes) {
    throw FormatError("sparse map k exceeds class count", 0);
  }
  if (entries.size() != size_t(height) * size_t(width) * size_t(k)) {
    throw FormatError("sparse entry count mismatch", 0);
  }
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const SparseCellEntry* e = cell(r, c);
      double sum = 0.0;
      float prev = 2.0f;
      for (int i = 0; i < k; ++i) {
        if (e[i].class_id >= num_classes) {
          throw FormatError("class id out of range in cell", 0);
        }
        for (int j = 0; j < i; ++j) {
          if (e[j].class_id == e[i].class_id) {
            throw FormatError("duplicate class id in cell", 0);
          }
        }
        const float p = half_to_float(e[i].prob_bits);
        if (p > prev) throw FormatError("cell probabilities not sorted", 0);
        prev = p;
        sum += double(p);
      }
      if (sum > 1.0 + 0x1p-8) {
        throw FormatError("cell probability mass exceeds 1", 0);
      }
    }
  }
}

DenseScoreMap annotate(const Annotator& annotator, const TensorF& image) {
  DenseScoreMap map = annotator(image);
  try {
    map.validate();
  } catch (const AnnotationError& e) {
    throw AnnotationError(std::string("annotator produced an invalid map: ") +
                          e.what());
  }
  return map;
}

SparseScoreMap sparsify_topk(const DenseScoreMap& dense, int k) {
  dense.validate();
  if (k < 1) throw ConfigError("top-k size must be >= 1");
  if (k > dense.num_classes) {
    throw ConfigError("top-k size " + std::to_string(k) + " exceeds class count " +
                      std::to_string(dense.num_classes));
  }
  SparseScoreMap sp;
  sp.height = dense.height;
  sp.width = dense.width;
  sp.num_classes = uint32_t(dense.num_classes);
  sp.k = k;
  sp.src_height = dense.src_height;
  sp.src_width = dense.src_width;
  sp.entries.resize(size_t(sp.height) * size_t(sp.width) * size_t(k));

  std::vector<int> idx(size_t(dense.num_classes));
  for (int r = 0; r < dense.height; ++r) {
    for (int c = 0; c < dense.width; ++c) {
      const double* p = dense.cell(r, c);
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (p[a] != p[b]) return p[a] > p[b];
        return a < b;  // ties toward the smaller class id
      });
      SparseCellEntry* out =
          &sp.entries[(size_t(r) * size_t(sp.width) + size_t(c)) * size_t(k)];
      for (int i = 0; i < k; ++i) {
        out[i].class_id = uint16_t(idx[size_t(i)]);
        // Round-to-nearest is monotone, so descending order survives rounding.
        out[i].prob_bits = double_to_half(p[idx[size_t(i)]]);
      }
    }
  }
  return sp;
}

DenseScoreMap densify(const SparseScoreMap& sparse) {
  sparse.validate();
  DenseScoreMap out;
  out.height = sparse.height;
  out.width = sparse.width;
  out.num_classes = int(sparse.num_classes);
  out.src_height = sparse.src_height;
  out.src_width = sparse.src_width;
  out.scores.assign(size_t(out.height) * size_t(out.width) * size_t(out.num_classes),
                    0.0);
  for (int r = 0; r < out.height; ++r) {
    for (int c = 0; c < out.width; ++c) {
      const SparseCellEntry* e = sparse.cell(r, c);
      double sum = 0.0;
      for (int i = 0; i < sparse.k; ++i) sum += double(half_to_float(e[i].prob_bits));
      if (sum <= 0.0) {
        throw DegenerateCellError("cell (" + std::to_string(r) + "," +
                                  std::to_string(c) + ") has zero probability mass");
      }
      for (int i = 0; i < sparse.k; ++i) {
        out.at(r, c, e[i].class_id) = double(half_to_float(e[i].prob_bits)) / sum;
      }
    }
  }
  return out;
}

namespace {

struct Writer {
  std::vector<uint8_t> bytes;
  void u8(uint8_t v) { bytes.push_back(v); }
  void u16(uint16_t v) {
    bytes.push_back(uint8_t(v & 0xff));
    bytes.push_back(uint8_t(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(uint8_t((v >> (8 * i)) & 0xff));
  }
};

struct Reader {
  const std::vector<uint8_t>& bytes;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > bytes.size()) {
      throw FormatError(std::string("truncated while reading ") + what, pos);
    }
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return bytes[pos++];
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = uint16_t(bytes[pos]) | uint16_t(uint16_t(bytes[pos + 1]) << 8);
    pos += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(bytes[pos + size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  }
};

}  // namespace

std::vector<uint8_t> encode_file(const SparseScoreMap& sparse) {
  sparse.validate();
  Writer w;
  w.bytes.reserve(kScoreMapHeaderBytes + sparse.entries.size() * 4);
  w.u8('T');
  w.u8('L');
  w.u8('S');
  w.u8('M');
  w.u16(1);  // version
  w.u32(sparse.num_classes);
  w.u16(uint16_t(sparse.height));
  w.u16(uint16_t(sparse.width));
  w.u8(uint8_t(sparse.k));
  w.u16(uint16_t(sparse.src_height));
  w.u16(uint16_t(sparse.src_width));
  for (const auto& e : sparse.entries) {
    w.u16(e.class_id);
    w.u16(e.prob_bits);
  }
  return w.bytes;
}

SparseScoreMap decode_file(const std::vector<uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), "TLSM", 4) != 0) {
    throw FormatError("bad magic, expected TLSM", 0);
  }
  r.pos = 4;
  const uint16_t version = r.u16("version");
  if (version != 1) {
    throw FormatError("unsupported version " + std::to_string(version), 4);
  }
  SparseScoreMap sp;
  sp.num_classes = r.u32("class count");
  sp.height = r.u16("height");
  sp.width = r.u16("width");
  sp.k = r.u8("top-k size");
  sp.src_height = r.u16("source height");
  sp.src_width = r.u16("source width");
  if (sp.height < 1 || sp.width < 1 || sp.k < 1 || sp.num_classes < 1) {
    throw FormatError("empty dimensions in header", 6);
  }
  const size_t cells = size_t(sp.height) * size_t(sp.width);
  sp.entries.resize(cells * size_t(sp.k));
  for (size_t i = 0; i < sp.entries.size(); ++i) {
    const size_t at = r.pos;
    sp.entries[i].class_id = r.u16("cell class id");
    sp.entries[i].prob_bits = r.u16("cell probability");
    if (sp.entries[i].class_id >= sp.num_classes) {
      throw FormatError("class id out of range", at);
    }
  }
  if (r.pos != bytes.size()) {
    throw FormatError("trailing bytes after payload", r.pos);
  }
  // Structural invariants (sorting, duplicates, mass) with cell offsets.
  for (int rr = 0; rr < sp.height; ++rr) {
    for (int cc = 0; cc < sp.width; ++cc) {
      const size_t cell_off = kScoreMapHeaderBytes +
                              (size_t(rr) * size_t(sp.width) + size_t(cc)) *
                                  size_t(sp.k) * 4;
      const SparseCellEntry* e = sp.cell(rr, cc);
      double sum = 0.0;
      float prev = 2.0f;
      for (int i = 0; i < sp.k; ++i) {
        for (int j = 0; j < i; ++j) {
          if (e[j].class_id == e[i].class_id) {
            throw FormatError("duplicate class id in cell", cell_off + size_t(i) * 4);
          }
        }
        const float p = half_to_float(e[i].prob_bits);
        if (p > prev) {
          throw FormatError("cell probabilities not sorted", cell_off + size_t(i) * 4);
        }
        prev = p;
        sum += double(p);
      }
      if (sum > 1.0 + 0x1p-8) {
        throw FormatError("cell probability mass exceeds 1", cell_off);
      }
    }
  }
  return sp;
}

namespace {

// Bilinear read at (y, x) in map coordinates, half-pixel centers, borders
// clamped. Accumulates weight * cell into out.
void bilinear_accumulate(const DenseScoreMap& m, double y, double x, double* out) {
  const double u = y - 0.5;
  const double v = x - 0.5;
  int i0 = int(std::floor(u));
  int j0 = int(std::floor(v));
  double fy = u - i0;
  double fx = v - j0;
  if (i0 < 0) {
    i0 = 0;
    fy = 0.0;
  }
  if (j0 < 0) {
    j0 = 0;
    fx = 0.0;
  }
  if (i0 >= m.height - 1) {
    i0 = m.height - 1;
    fy = 0.0;
  }
  if (j0 >= m.width - 1) {
    j0 = m.width - 1;
    fx = 0.0;
  }
  const int i1 = std::min(i0 + 1, m.height - 1);
  const int j1 = std::min(j0 + 1, m.width - 1);
  const double w00 = (1.0 - fy) * (1.0 - fx);
  const double w01 = (1.0 - fy) * fx;
  const double w10 = fy * (1.0 - fx);
  const double w11 = fy * fx;
  const double* c00 = m.cell(i0, j0);
  const double* c01 = m.cell(i0, j1);
  const double* c10 = m.cell(i1, j0);
  const double* c11 = m.cell(i1, j1);
  for (int k = 0; k < m.num_classes; ++k) {
    out[k] = w00 * c00[k] + w01 * c01[k] + w10 * c10[k] + w11 * c11[k];
  }
}

}  // namespace

Tensor<double> align_crop(const DenseScoreMap& dense, const CropBox& box, int grid) {
  if (grid < 1) throw ConfigError("token grid must be >= 1");
  box.validate(double(dense.src_width), double(dense.src_height));
  const double sy = double(dense.height) / double(dense.src_height);
  const double sx = double(dense.width) / double(dense.src_width);
  const double my0 = box.y0 * sy, my1 = box.y1 * sy;
  const double mx0 = box.x0 * sx, mx1 = box.x1 * sx;
  if ((my1 - my0) * (mx1 - mx0) <= 0.0) {
    throw CropError("crop box degenerates to zero area on the score map");
  }
  const int k = dense.num_classes;
  Tensor<double> out({grid * grid, k});
  std::vector<double> sample(size_t(k));
  for (int r = 0; r < grid; ++r) {
    const double y = my0 + (r + 0.5) * (my1 - my0) / grid;
    for (int c = 0; c < grid; ++c) {
      const double x = mx0 + (c + 0.5) * (mx1 - mx0) / grid;
      bilinear_accumulate(dense, y, x, sample.data());
      double sum = 0.0;
      for (int j = 0; j < k; ++j) sum += sample[j];
      const int cc = box.flip ? (grid - 1 - c) : c;
      double* row = &out.at(r * grid + cc, 0);
      const double inv = 1.0 / sum;
      for (int j = 0; j < k; ++j) row[j] = sample[j] * inv;
    }
  }
  return out;
}

}  // namespace tlkit
