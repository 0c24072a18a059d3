// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ept/tensor.hpp"

namespace ept::nn {

enum class LayerKind : std::uint8_t { dense, conv2d, relu, flatten };

const char* layer_kind_name(LayerKind k);

/// Per-sample activation shape (the batch dim is supplied at run time).
struct SampleShape {
  std::uint32_t w = 1, h = 1, c = 1;
  std::size_t features() const { return static_cast<std::size_t>(w) * h * c; }
  bool operator==(const SampleShape& o) const {
    return w == o.w && h == o.h && c == o.c;
  }
  std::string str() const;
};

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  SampleShape input;
  SampleShape output;
  // dense
  std::uint32_t in_features = 0, out_features = 0;
  // conv2d: 3x3, stride 1, pad 1 (spatial dims preserved)
  std::uint32_t in_channels = 0, out_channels = 0;
  // per-sample multiply-add count * 2, plus elementwise work
  std::uint64_t flop_count = 0;
};

struct Model {
  std::vector<LayerSpec> layers;

  const SampleShape& input_shape() const { return layers.front().input; }
  const SampleShape& output_shape() const { return layers.back().output; }
  std::size_t layer_count() const { return layers.size(); }
  std::uint64_t flops(std::size_t first, std::size_t last) const;  // inclusive
  std::uint64_t total_flops() const;
  /// Sub-model over layers [first, last], inclusive, 0-based.
  Model slice(std::size_t first, std::size_t last) const;
};

/// Declarative layer list for building a model against an input shape.
struct LayerDef {
  LayerKind kind;
  std::uint32_t units = 0;  // dense: out_features; conv2d: out_channels
};

LayerDef dense(std::uint32_t out_features);
LayerDef conv2d(std::uint32_t out_channels);
LayerDef relu();
LayerDef flatten();

/// Resolves shapes layer by layer and computes deterministic flop counts.
Model build_model(SampleShape input, const std::vector<LayerDef>& defs);

/// Immutable once published; the version advances by exactly 1 per sgd_step.
struct VersionedWeights {
  std::uint64_t version = 0;
  // params[layer] is empty for relu/flatten, {W, b} for dense/conv2d.
  std::vector<std::vector<Tensor4>> params;

  std::vector<Tensor4> slice_params(std::size_t first, std::size_t last) const;
};

/// Glorot-uniform init (+-sqrt(6/(fan_in+fan_out))), version 0.
VersionedWeights init_weights(const Model& model, std::uint32_t seed);

struct Gradients {
  std::vector<std::vector<Tensor4>> params;  // same layout as weights
  Tensor4 input;
  bool all_finite() const;
};

/// Autodiff tape for one forward pass; consumed by backward().
struct Tape {
  const Model* model = nullptr;
  std::shared_ptr<const VersionedWeights> weights;
  std::vector<Tensor4> layer_inputs;
  Shape4 output_shape{};
  bool consumed = false;
};

Tensor4 forward(const Model& model, const VersionedWeights& weights,
                const Tensor4& input);
Tensor4 forward(const Model& model,
                std::shared_ptr<const VersionedWeights> weights,
                const Tensor4& input, Tape& tape);

Gradients backward(Tape& tape, const Tensor4& output_grad);

/// Straight-through estimator: the quantize/dequantize pair is treated as
/// identity in the backward pass, so the incoming gradient passes unchanged.
Tensor4 ste_grad(const Tensor4& quantizer_output_grad);

/// w <- w - lr * grad; version + 1. Rejects non-finite grads (version kept).
VersionedWeights sgd_step(const VersionedWeights& weights,
                          const Gradients& grads, float lr);

struct LossGrad {
  double loss = 0.0;
  Tensor4 logit_grad;
};

/// Mean softmax cross-entropy over the batch; labels are class indices.
LossGrad softmax_cross_entropy(const Tensor4& logits,
                               const std::vector<std::uint32_t>& labels);

/// Fraction of argmax(logits) == label.
double accuracy(const Tensor4& logits, const std::vector<std::uint32_t>& labels);

}  // namespace ept::nn
