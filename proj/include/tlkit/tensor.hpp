#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "tlkit/errors.hpp"

namespace tlkit {

// Dense row-major tensor. Plain value type: copies copy the buffer.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(size_t(count(shape_)), T(0));
  }

  Tensor(std::vector<int> shape, T fill) : shape_(std::move(shape)) {
    data_.assign(size_t(count(shape_)), fill);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T v) {
    return Tensor(std::move(shape), v);
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return int(shape_.size()); }
  int dim(int i) const { return shape_[size_t(i)]; }
  int64_t numel() const { return int64_t(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](int64_t i) { return data_[size_t(i)]; }
  const T& operator[](int64_t i) const { return data_[size_t(i)]; }

  T& at(int r, int c) { return data_[size_t(r) * size_t(dim(1)) + size_t(c)]; }
  const T& at(int r, int c) const {
    return data_[size_t(r) * size_t(dim(1)) + size_t(c)];
  }

  T& at(int b, int r, int c) {
    return data_[(size_t(b) * size_t(dim(1)) + size_t(r)) * size_t(dim(2)) + size_t(c)];
  }
  const T& at(int b, int r, int c) const {
    return data_[(size_t(b) * size_t(dim(1)) + size_t(r)) * size_t(dim(2)) + size_t(c)];
  }

  // Number of rows when the last axis is treated as the feature axis.
  int64_t rows() const { return shape_.empty() ? 0 : numel() / dim(ndim() - 1); }
  int cols() const { return shape_.empty() ? 0 : dim(ndim() - 1); }

  Tensor reshaped(std::vector<int> new_shape) const {
    if (count(new_shape) != numel()) {
      throw ShapeError("reshape: element count mismatch");
    }
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
  }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(double(v))) return false;
    }
    return true;
  }

  template <typename U>
  static Tensor<T> from(const Tensor<U>& other) {
    Tensor<T> out;
    out.shape_ = other.shape();
    out.data_.resize(size_t(other.numel()));
    const U* src = other.data();
    for (int64_t i = 0; i < other.numel(); ++i) out.data_[size_t(i)] = T(src[size_t(i)]);
    return out;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

 private:
  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative dimension");
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;

  template <typename U>
  friend class Tensor;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace tlkit
