// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ept {

std::string Shape4::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(w) + "," +
         std::to_string(h) + "," + std::to_string(c) + ")";
}

Tensor4::Tensor4(Shape4 shape, std::vector<float> data)
    : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.elems()) {
    throw std::invalid_argument("Tensor4: data length " +
                                std::to_string(data_.size()) +
                                " does not match shape " + shape_.str());
  }
}

Tensor4 Tensor4::uniform(Shape4 shape, float lo, float hi, std::mt19937& rng) {
  Tensor4 t(shape);
  std::uniform_real_distribution<float> dist(lo, hi);
  for (float& v : t.data_) v = dist(rng);
  return t;
}

Tensor4 Tensor4::reshaped(Shape4 target) const {
  if (target.elems() != shape_.elems()) {
    throw std::invalid_argument("Tensor4::reshaped: element count mismatch " +
                                shape_.str() + " -> " + target.str());
  }
  Tensor4 out;
  out.shape_ = target;
  out.data_ = data_;
  return out;
}

bool Tensor4::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](float v) { return std::isfinite(v); });
}

void Tensor4::ensure_finite(const char* context) const {
  if (!all_finite()) {
    throw std::runtime_error(std::string("non-finite value in ") + context);
  }
}

void Tensor4::add_scaled(const Tensor4& other, float scale) {
  if (other.shape_ != shape_) {
    throw std::invalid_argument("Tensor4::add_scaled: shape mismatch " +
                                shape_.str() + " vs " + other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    data_[i] += scale * other.data_[i];
  }
}

double Tensor4::sum() const {
  double acc = 0.0;
  for (float v : data_) acc += v;
  return acc;
}

float Tensor4::max_abs() const {
  float m = 0.0f;
  for (float v : data_) m = std::max(m, std::fabs(v));
  return m;
}

}  // namespace ept
