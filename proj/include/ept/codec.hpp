// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "ept/tensor.hpp"

namespace ept::codec {

// ---------------------------------------------------------------------------
// Multi-bit binary-basis quantization of forward activations: x ~= B * alpha
// with B in {-1,+1}^(N x k), plus a scalar bias correction m_q subtracted
// after dequantization. Gradients use stochastic uniform quantization with a
// max-abs scaling factor.
// ---------------------------------------------------------------------------

/// N x k sign matrix; bit 1 encodes +1, bit 0 encodes -1.
struct SignMatrix {
  std::size_t rows = 0;
  int k = 0;
  std::vector<std::uint8_t> bits;  // rows*k entries, row-major, 0/1

  std::uint8_t bit(std::size_t row, int j) const { return bits[row * k + j]; }
  float sign(std::size_t row, int j) const {
    return bits[row * k + j] ? 1.0f : -1.0f;
  }
};

/// Quantizer state carried across batches within one epoch; reset at batch 0.
struct MbqState {
  int k = 2;
  std::uint64_t t = 0;  // batch counter within the epoch
  std::vector<double> alpha;
  std::uint64_t singular_fallbacks = 0;

  explicit MbqState(int bit_width = 2) { reset(bit_width); }
  void reset(int bit_width);
};

struct QuantizedFeatureBlock {
  Shape4 shape;
  int k = 0;
  std::vector<float> alpha;          // length k
  float mq = 0.0f;                   // mean quantization error
  std::vector<std::uint8_t> packed;  // ceil(n/8) * w*h*c * k bytes
};

struct QuantizedGradientBlock {
  Shape4 shape;
  int k = 0;  // 4 or 8
  float s = 0.0f;
  std::vector<std::uint8_t> packed;
};

/// Sender-side reconstruction error of the corrected dequantized tensor.
struct FeatureEncodeStats {
  double residual_l2 = 0.0;
  double max_abs_err = 0.0;
};

struct ForwardQuantizeResult {
  QuantizedFeatureBlock block;
  FeatureEncodeStats stats;
};

// --- forward quantizer -----------------------------------------------------

/// Greedy residue fit: B_j = sign(residue), alpha_j = mean|residue|.
/// Alpha entries come out non-negative and non-increasing. k in [1,4].
std::pair<SignMatrix, std::vector<double>> mbq_init_residue(const Tensor4& x,
                                                            int k);

/// Maps each element to the nearest signed combination of alpha_prev
/// (ties toward the smaller combination value).
SignMatrix mbq_assign_bases(const Tensor4& x,
                            const std::vector<double>& alpha_prev);

/// Least-squares alpha for fixed B, then EMA with
/// beta = min(0.9, (1+t)/(10+t)). Singular normal matrix falls back to
/// alpha_prev and bumps *singular_fallbacks when provided.
std::vector<double> mbq_update_alpha(const SignMatrix& B, const Tensor4& x,
                                     const std::vector<double>& alpha_prev,
                                     std::uint64_t t,
                                     std::uint64_t* singular_fallbacks = nullptr);

/// Full forward path: init at t=0, assign+update at t>=1, bias correction,
/// bit packing. Advances the state.
ForwardQuantizeResult forward_quantize(const Tensor4& x, MbqState& state);

/// Packs signs along the batch dimension, 8 per byte, first element in the
/// most significant bit; -1 maps to 0. Pad bits (n not a multiple of 8) are 0.
std::vector<std::uint8_t> forward_encode(const SignMatrix& B, Shape4 shape);
SignMatrix forward_decode(const std::vector<std::uint8_t>& packed, Shape4 shape,
                          int k);

/// x_hat = B*alpha - m_q.
Tensor4 forward_dequantize(const SignMatrix& B, const std::vector<float>& alpha,
                           float mq, Shape4 shape);
Tensor4 dequantize(const QuantizedFeatureBlock& block);

// --- backward quantizer ----------------------------------------------------

/// Stochastic rounding of g/s with s = max|g| / (2^(k-1)-1); k in {4,8}.
/// All-zero g yields the documented s = 0 sentinel (decodes to zeros).
QuantizedGradientBlock backward_quantize(const Tensor4& g, int k,
                                         std::mt19937& rng);

/// Integer quantization step alone (no packing); s_out receives the factor.
std::vector<std::int8_t> backward_quantize_ints(const Tensor4& g, int k,
                                                float& s_out,
                                                std::mt19937& rng);

/// k=8: pass-through bytes. k=4: +8 shift, two batch-consecutive values per
/// byte, first in the high nibble. Values outside the k-bit range are
/// rejected (internal bug signal).
std::vector<std::uint8_t> backward_encode(const std::vector<std::int8_t>& gq,
                                          Shape4 shape, int k);
std::vector<std::int8_t> backward_decode(const std::vector<std::uint8_t>& packed,
                                         Shape4 shape, int k);

Tensor4 backward_dequantize(const std::vector<std::int8_t>& gq, float s,
                            Shape4 shape);
Tensor4 dequantize(const QuantizedGradientBlock& block);

// --- adaptive bit widths ---------------------------------------------------

/// Forward width starts at 2 and grows by 1 per learning-rate change, capped
/// at 4; backward width starts at 8 and drops to 4 at the first change.
struct BitwidthSchedule {
  int forward_k = 2;
  int backward_k = 8;
  unsigned events = 0;
};

BitwidthSchedule bitwidth_on_lr_change(BitwidthSchedule schedule);

// --- sizes and ratios ------------------------------------------------------

std::size_t packed_feature_bytes(Shape4 shape, int k);
std::size_t packed_gradient_bytes(Shape4 shape, int k);

/// Serialized block layouts (little-endian):
///   u8 kind (0=feature, 1=gradient, 2=raw f32), u8 k, u32 n,w,h,c, then
///   feature:  k*f32 alpha, f32 m_q, packed bytes
///   gradient: f32 s, packed bytes
///   raw:      n*w*h*c f32 payload (k byte holds 32)
constexpr std::size_t kBlockHeaderBytes = 18;

std::size_t feature_block_bytes(Shape4 shape, int k);
std::size_t gradient_block_bytes(Shape4 shape, int k);
std::size_t raw_block_bytes(Shape4 shape);

/// (n*w*h*c*32) / (ceil(n/8)*w*h*c*k*8 + 32(k+1)).
double compression_ratio_forward(Shape4 shape, int k);
/// Uncompressed bits over packed gradient bits + 32-bit scaling factor.
double compression_ratio_backward(Shape4 shape, int k);

// --- block serialization ---------------------------------------------------

enum class BlockKind : std::uint8_t { feature = 0, gradient = 1, raw = 2 };

void serialize(const QuantizedFeatureBlock& block, std::vector<std::uint8_t>& out);
void serialize(const QuantizedGradientBlock& block, std::vector<std::uint8_t>& out);
void serialize_raw(const Tensor4& t, std::vector<std::uint8_t>& out);

/// Sequential reader for payloads holding one or more blocks.
class BlockReader {
 public:
  BlockReader(const std::uint8_t* data, std::size_t size)
      : data_(data), size_(size) {}
  explicit BlockReader(const std::vector<std::uint8_t>& buf)
      : BlockReader(buf.data(), buf.size()) {}

  bool done() const { return pos_ >= size_; }
  std::size_t offset() const { return pos_; }
  BlockKind peek_kind() const;

  QuantizedFeatureBlock read_feature();
  QuantizedGradientBlock read_gradient();
  Tensor4 read_raw();

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;

  void need(std::size_t bytes) const;
  std::uint32_t u32();
  float f32();
  Shape4 shape_header(BlockKind expect, int& k_out);
};

}  // namespace ept::codec
