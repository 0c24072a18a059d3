// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ept::nn {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

std::string SampleShape::str() const {
  return "(" + std::to_string(w) + "," + std::to_string(h) + "," +
         std::to_string(c) + ")";
}

std::uint64_t Model::flops(std::size_t first, std::size_t last) const {
  std::uint64_t total = 0;
  for (std::size_t i = first; i <= last && i < layers.size(); ++i) {
    total += layers[i].flop_count;
  }
  return total;
}

std::uint64_t Model::total_flops() const {
  return layers.empty() ? 0 : flops(0, layers.size() - 1);
}

Model Model::slice(std::size_t first, std::size_t last) const {
  if (first > last || last >= layers.size()) {
    throw std::invalid_argument("Model::slice: bad range [" +
                                std::to_string(first) + "," +
                                std::to_string(last) + "] for " +
                                std::to_string(layers.size()) + " layers");
  }
  Model out;
  out.layers.assign(layers.begin() + first, layers.begin() + last + 1);
  return out;
}

LayerDef dense(std::uint32_t out_features) {
  return {LayerKind::dense, out_features};
}
LayerDef conv2d(std::uint32_t out_channels) {
  return {LayerKind::conv2d, out_channels};
}
LayerDef relu() { return {LayerKind::relu, 0}; }
LayerDef flatten() { return {LayerKind::flatten, 0}; }

Model build_model(SampleShape input, const std::vector<LayerDef>& defs) {
  if (defs.empty()) throw std::invalid_argument("build_model: empty layer list");
  Model model;
  SampleShape cur = input;
  for (const LayerDef& def : defs) {
    LayerSpec spec;
    spec.kind = def.kind;
    spec.input = cur;
    switch (def.kind) {
      case LayerKind::dense: {
        spec.in_features = static_cast<std::uint32_t>(cur.features());
        spec.out_features = def.units;
        if (def.units == 0) throw std::invalid_argument("dense: 0 units");
        spec.output = {def.units, 1, 1};
        spec.flop_count =
            2ull * spec.in_features * spec.out_features + spec.out_features;
        break;
      }
      case LayerKind::conv2d: {
        if (def.units == 0) throw std::invalid_argument("conv2d: 0 channels");
        spec.in_channels = cur.c;
        spec.out_channels = def.units;
        spec.output = {cur.w, cur.h, def.units};
        spec.flop_count = 2ull * 9 * cur.c * def.units * cur.w * cur.h +
                          static_cast<std::uint64_t>(cur.w) * cur.h * def.units;
        break;
      }
      case LayerKind::relu: {
        spec.output = cur;
        spec.flop_count = cur.features();
        break;
      }
      case LayerKind::flatten: {
        spec.output = {static_cast<std::uint32_t>(cur.features()), 1, 1};
        spec.flop_count = 0;
        break;
      }
    }
    cur = spec.output;
    model.layers.push_back(spec);
  }
  return model;
}

std::vector<Tensor4> VersionedWeights::slice_params(std::size_t first,
                                                    std::size_t last) const {
  std::vector<Tensor4> out;
  for (std::size_t i = first; i <= last && i < params.size(); ++i) {
    for (const Tensor4& t : params[i]) out.push_back(t);
  }
  return out;
}

VersionedWeights init_weights(const Model& model, std::uint32_t seed) {
  std::mt19937 rng(seed);
  VersionedWeights w;
  w.version = 0;
  w.params.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& spec = model.layers[i];
    switch (spec.kind) {
      case LayerKind::dense: {
        float bound = std::sqrt(6.0f / (spec.in_features + spec.out_features));
        w.params[i].push_back(Tensor4::uniform(
            {spec.out_features, spec.in_features, 1, 1}, -bound, bound, rng));
        w.params[i].push_back(Tensor4({spec.out_features, 1, 1, 1}));
        break;
      }
      case LayerKind::conv2d: {
        std::uint32_t fan_in = 9 * spec.in_channels;
        std::uint32_t fan_out = 9 * spec.out_channels;
        float bound = std::sqrt(6.0f / (fan_in + fan_out));
        // weight layout: (out_c, 3, 3, in_c)
        w.params[i].push_back(Tensor4::uniform(
            {spec.out_channels, 3, 3, spec.in_channels}, -bound, bound, rng));
        w.params[i].push_back(Tensor4({spec.out_channels, 1, 1, 1}));
        break;
      }
      default:
        break;
    }
  }
  return w;
}

bool Gradients::all_finite() const {
  for (const auto& layer : params) {
    for (const Tensor4& t : layer) {
      if (!t.all_finite()) return false;
    }
  }
  return input.empty() || input.all_finite();
}

namespace {

void check_layer_weights(const Model& model, const VersionedWeights& weights) {
  if (weights.params.size() != model.layers.size()) {
    throw std::invalid_argument(
        "weights cover " + std::to_string(weights.params.size()) +
        " layers, model has " + std::to_string(model.layers.size()));
  }
}

Shape4 with_batch(const SampleShape& s, std::uint32_t n) {
  return {n, s.w, s.h, s.c};
}

Tensor4 dense_forward(const LayerSpec& spec, const Tensor4& x,
                      const Tensor4& W, const Tensor4& b) {
  const std::uint32_t n = x.shape().n;
  const std::size_t in = spec.in_features, out = spec.out_features;
  Tensor4 y(with_batch(spec.output, n));
  const float* xp = x.data();
  const float* wp = W.data();
  float* yp = y.data();
  for (std::uint32_t s = 0; s < n; ++s) {
    const float* xs = xp + s * in;
    float* ys = yp + s * out;
    for (std::size_t o = 0; o < out; ++o) {
      float acc = b[o];
      const float* wr = wp + o * in;
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xs[i];
      ys[o] = acc;
    }
  }
  return y;
}

void dense_backward(const LayerSpec& spec, const Tensor4& x, const Tensor4& W,
                    const Tensor4& dy, Tensor4& dW, Tensor4& db, Tensor4& dx) {
  const std::uint32_t n = x.shape().n;
  const std::size_t in = spec.in_features, out = spec.out_features;
  for (std::uint32_t s = 0; s < n; ++s) {
    const float* xs = x.data() + s * in;
    const float* dys = dy.data() + s * out;
    float* dxs = dx.data() + s * in;
    for (std::size_t o = 0; o < out; ++o) {
      const float g = dys[o];
      db[o] += g;
      float* dwr = dW.data() + o * in;
      const float* wr = W.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        dwr[i] += g * xs[i];
        dxs[i] += g * wr[i];
      }
    }
  }
}

Tensor4 conv_forward(const LayerSpec& spec, const Tensor4& x, const Tensor4& W,
                     const Tensor4& b) {
  const std::uint32_t n = x.shape().n, width = spec.input.w, hei = spec.input.h;
  const std::uint32_t ic = spec.in_channels, oc = spec.out_channels;
  Tensor4 y(with_batch(spec.output, n));
  for (std::uint32_t s = 0; s < n; ++s) {
    for (std::uint32_t px = 0; px < width; ++px) {
      for (std::uint32_t py = 0; py < hei; ++py) {
        for (std::uint32_t o = 0; o < oc; ++o) {
          float acc = b[o];
          for (int dx = -1; dx <= 1; ++dx) {
            const int qx = int(px) + dx;
            if (qx < 0 || qx >= int(width)) continue;
            for (int dy = -1; dy <= 1; ++dy) {
              const int qy = int(py) + dy;
              if (qy < 0 || qy >= int(hei)) continue;
              for (std::uint32_t i = 0; i < ic; ++i) {
                acc += W.at(o, dx + 1, dy + 1, i) * x.at(s, qx, qy, i);
              }
            }
          }
          y.at(s, px, py, o) = acc;
        }
      }
    }
  }
  return y;
}

void conv_backward(const LayerSpec& spec, const Tensor4& x, const Tensor4& W,
                   const Tensor4& dy, Tensor4& dW, Tensor4& db, Tensor4& dx) {
  const std::uint32_t n = x.shape().n, width = spec.input.w, hei = spec.input.h;
  const std::uint32_t ic = spec.in_channels, oc = spec.out_channels;
  for (std::uint32_t s = 0; s < n; ++s) {
    for (std::uint32_t px = 0; px < width; ++px) {
      for (std::uint32_t py = 0; py < hei; ++py) {
        for (std::uint32_t o = 0; o < oc; ++o) {
          const float g = dy.at(s, px, py, o);
          if (g == 0.0f) continue;
          db[o] += g;
          for (int ddx = -1; ddx <= 1; ++ddx) {
            const int qx = int(px) + ddx;
            if (qx < 0 || qx >= int(width)) continue;
            for (int ddy = -1; ddy <= 1; ++ddy) {
              const int qy = int(py) + ddy;
              if (qy < 0 || qy >= int(hei)) continue;
              for (std::uint32_t i = 0; i < ic; ++i) {
                dW.at(o, ddx + 1, ddy + 1, i) += g * x.at(s, qx, qy, i);
                dx.at(s, qx, qy, i) += g * W.at(o, ddx + 1, ddy + 1, i);
              }
            }
          }
        }
      }
    }
  }
}

Tensor4 layer_forward(const LayerSpec& spec, const std::vector<Tensor4>& params,
                      const Tensor4& x) {
  if (!(x.shape().w == spec.input.w && x.shape().h == spec.input.h &&
        x.shape().c == spec.input.c)) {
    throw std::invalid_argument(
        std::string("shape mismatch at ") + layer_kind_name(spec.kind) +
        " layer: input " + x.shape().str() + ", expected per-sample " +
        spec.input.str());
  }
  switch (spec.kind) {
    case LayerKind::dense:
      return dense_forward(spec, x, params[0], params[1]);
    case LayerKind::conv2d:
      return conv_forward(spec, x, params[0], params[1]);
    case LayerKind::relu: {
      Tensor4 y = x;
      for (float& v : y.vec()) v = v > 0.0f ? v : 0.0f;
      return y;
    }
    case LayerKind::flatten:
      return x.reshaped(with_batch(spec.output, x.shape().n));
  }
  throw std::logic_error("unreachable layer kind");
}

}  // namespace

Tensor4 forward(const Model& model, const VersionedWeights& weights,
                const Tensor4& input) {
  check_layer_weights(model, weights);
  input.ensure_finite("forward input");
  Tensor4 cur = input;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    cur = layer_forward(model.layers[i], weights.params[i], cur);
  }
  cur.ensure_finite("forward output");
  return cur;
}

Tensor4 forward(const Model& model,
                std::shared_ptr<const VersionedWeights> weights,
                const Tensor4& input, Tape& tape) {
  check_layer_weights(model, *weights);
  input.ensure_finite("forward input");
  tape.model = &model;
  tape.weights = std::move(weights);
  tape.layer_inputs.clear();
  tape.consumed = false;
  Tensor4 cur = input;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    tape.layer_inputs.push_back(cur);
    cur = layer_forward(model.layers[i], tape.weights->params[i], cur);
  }
  cur.ensure_finite("forward output");
  tape.output_shape = cur.shape();
  return cur;
}

Gradients backward(Tape& tape, const Tensor4& output_grad) {
  if (tape.model == nullptr || tape.consumed) {
    throw std::runtime_error("backward: tape already consumed or empty");
  }
  if (output_grad.shape() != tape.output_shape) {
    throw std::invalid_argument("backward: output_grad shape " +
                                output_grad.shape().str() + " vs forward " +
                                tape.output_shape.str());
  }
  tape.consumed = true;
  const Model& model = *tape.model;
  const VersionedWeights& weights = *tape.weights;

  Gradients grads;
  grads.params.resize(model.layers.size());
  Tensor4 dy = output_grad;
  for (std::size_t idx = model.layers.size(); idx-- > 0;) {
    const LayerSpec& spec = model.layers[idx];
    const Tensor4& x = tape.layer_inputs[idx];
    switch (spec.kind) {
      case LayerKind::dense: {
        Tensor4 dW(weights.params[idx][0].shape());
        Tensor4 db(weights.params[idx][1].shape());
        Tensor4 dx(x.shape());
        dense_backward(spec, x, weights.params[idx][0], dy, dW, db, dx);
        grads.params[idx] = {std::move(dW), std::move(db)};
        dy = std::move(dx);
        break;
      }
      case LayerKind::conv2d: {
        Tensor4 dW(weights.params[idx][0].shape());
        Tensor4 db(weights.params[idx][1].shape());
        Tensor4 dx(x.shape());
        conv_backward(spec, x, weights.params[idx][0], dy, dW, db, dx);
        grads.params[idx] = {std::move(dW), std::move(db)};
        dy = std::move(dx);
        break;
      }
      case LayerKind::relu: {
        Tensor4 dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
          dx[i] = x[i] > 0.0f ? dy[i] : 0.0f;
        }
        dy = std::move(dx);
        break;
      }
      case LayerKind::flatten: {
        dy = dy.reshaped(x.shape());
        break;
      }
    }
  }
  grads.input = std::move(dy);
  return grads;
}

Tensor4 ste_grad(const Tensor4& quantizer_output_grad) {
  return quantizer_output_grad;
}

VersionedWeights sgd_step(const VersionedWeights& weights,
                          const Gradients& grads, float lr) {
  if (lr <= 0.0f) throw std::invalid_argument("sgd_step: lr must be > 0");
  if (grads.params.size() != weights.params.size()) {
    throw std::invalid_argument("sgd_step: gradient/weight layer mismatch");
  }
  if (!grads.all_finite()) {
    throw std::runtime_error("sgd_step: non-finite gradients, step rejected");
  }
  VersionedWeights next = weights;
  next.version = weights.version + 1;
  for (std::size_t i = 0; i < next.params.size(); ++i) {
    if (grads.params[i].size() != next.params[i].size()) {
      throw std::invalid_argument("sgd_step: gradient/param count mismatch at layer " +
                                  std::to_string(i));
    }
    for (std::size_t j = 0; j < next.params[i].size(); ++j) {
      next.params[i][j].add_scaled(grads.params[i][j], -lr);
    }
  }
  return next;
}

LossGrad softmax_cross_entropy(const Tensor4& logits,
                               const std::vector<std::uint32_t>& labels) {
  const std::uint32_t n = logits.shape().n;
  const std::size_t classes = logits.shape().per_sample();
  if (labels.size() != n) {
    throw std::invalid_argument("softmax_cross_entropy: batch/label mismatch");
  }
  LossGrad out;
  out.logit_grad = Tensor4(logits.shape());
  double loss = 0.0;
  for (std::uint32_t s = 0; s < n; ++s) {
    const float* row = logits.data() + s * classes;
    float* grow = out.logit_grad.data() + s * classes;
    float maxv = row[0];
    for (std::size_t k = 1; k < classes; ++k) maxv = std::max(maxv, row[k]);
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(double(row[k]) - maxv);
    const std::uint32_t label = labels[s];
    if (label >= classes) throw std::invalid_argument("label out of range");
    loss += -(double(row[label]) - maxv - std::log(denom));
    for (std::size_t k = 0; k < classes; ++k) {
      const double p = std::exp(double(row[k]) - maxv) / denom;
      grow[k] = static_cast<float>((p - (k == label ? 1.0 : 0.0)) / n);
    }
  }
  out.loss = loss / n;
  return out;
}

double accuracy(const Tensor4& logits, const std::vector<std::uint32_t>& labels) {
  const std::uint32_t n = logits.shape().n;
  const std::size_t classes = logits.shape().per_sample();
  std::size_t hits = 0;
  for (std::uint32_t s = 0; s < n; ++s) {
    const float* row = logits.data() + s * classes;
    std::size_t best = 0;
    for (std::size_t k = 1; k < classes; ++k) {
      if (row[k] > row[best]) best = k;
    }
    if (best == labels[s]) ++hits;
  }
  return n == 0 ? 0.0 : double(hits) / n;
}

}  // namespace ept::nn
