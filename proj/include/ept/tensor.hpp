// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ept {

/// Dense rank-4 shape (batch, width, height, channels).
struct Shape4 {
  std::uint32_t n = 0;
  std::uint32_t w = 0;
  std::uint32_t h = 0;
  std::uint32_t c = 0;

  std::size_t elems() const {
    return static_cast<std::size_t>(n) * w * h * c;
  }
  std::size_t per_sample() const {
    return static_cast<std::size_t>(w) * h * c;
  }
  bool operator==(const Shape4& o) const {
    return n == o.n && w == o.w && h == o.h && c == o.c;
  }
  bool operator!=(const Shape4& o) const { return !(*this == o); }
  std::string str() const;
};

/// Dense rank-4 float tensor, row-major with the batch dimension outermost:
/// flat index = ((i_n * w + i_w) * h + i_h) * c + i_c.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, float fill = 0.0f)
      : shape_(shape), data_(shape.elems(), fill) {}
  Tensor4(Shape4 shape, std::vector<float> data);

  static Tensor4 uniform(Shape4 shape, float lo, float hi, std::mt19937& rng);

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& at(std::size_t in, std::size_t iw, std::size_t ih, std::size_t ic) {
    return data_[((in * shape_.w + iw) * shape_.h + ih) * shape_.c + ic];
  }
  float at(std::size_t in, std::size_t iw, std::size_t ih, std::size_t ic) const {
    return data_[((in * shape_.w + iw) * shape_.h + ih) * shape_.c + ic];
  }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Reinterprets the per-sample dims; element count and data are unchanged.
  Tensor4 reshaped(Shape4 target) const;

  bool all_finite() const;
  /// Throws std::runtime_error naming `context` if any element is NaN/Inf.
  void ensure_finite(const char* context) const;

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
  void add_scaled(const Tensor4& other, float scale);  // this += scale * other

  double sum() const;
  float max_abs() const;

 private:
  Shape4 shape_{};
  std::vector<float> data_;
};

}  // namespace ept
