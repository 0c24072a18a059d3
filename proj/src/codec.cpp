// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>

namespace ept::codec {

namespace {

void check_k_feature(int k) {
  if (k < 1 || k > 4) {
    throw std::invalid_argument("feature bit width k must be in [1,4], got " +
                                std::to_string(k));
  }
}

void check_k_gradient(int k) {
  if (k != 4 && k != 8) {
    throw std::invalid_argument("gradient bit width k must be 4 or 8, got " +
                                std::to_string(k));
  }
}

}  // namespace

void MbqState::reset(int bit_width) {
  if (bit_width < 2 || bit_width > 4) {
    throw std::invalid_argument("MbqState: k must be in {2,3,4}, got " +
                                std::to_string(bit_width));
  }
  k = bit_width;
  t = 0;
  alpha.assign(static_cast<std::size_t>(k), 0.0);
}

std::pair<SignMatrix, std::vector<double>> mbq_init_residue(const Tensor4& x,
                                                            int k) {
  check_k_feature(k);
  x.ensure_finite("mbq_init_residue input");
  const std::size_t n = x.size();
  SignMatrix B;
  B.rows = n;
  B.k = k;
  B.bits.assign(n * k, 0);
  std::vector<double> alpha(k, 0.0);
  std::vector<double> residue(x.vec().begin(), x.vec().end());
  for (int j = 0; j < k; ++j) {
    double abs_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) abs_sum += std::fabs(residue[i]);
    const double a = n == 0 ? 0.0 : abs_sum / double(n);
    alpha[j] = a;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t bit = residue[i] >= 0.0 ? 1 : 0;  // sign(0) := +1
      B.bits[i * k + j] = bit;
      residue[i] -= bit ? a : -a;
    }
  }
  return {std::move(B), std::move(alpha)};
}

namespace {

/// All 2^k signed combinations of alpha; codeword m uses +alpha_j when bit j
/// of m is set. Returned sorted by value, stable in m for equal values.
struct CodewordSet {
  std::vector<double> values;        // sorted
  std::vector<std::uint32_t> order;  // codeword index per sorted slot
  std::vector<double> midpoints;     // between consecutive sorted values
};

CodewordSet enumerate_codewords(const std::vector<double>& alpha) {
  const int k = static_cast<int>(alpha.size());
  const std::uint32_t count = 1u << k;
  CodewordSet set;
  set.values.resize(count);
  set.order.resize(count);
  std::vector<double> raw(count);
  for (std::uint32_t m = 0; m < count; ++m) {
    double v = 0.0;
    for (int j = 0; j < k; ++j) v += (m >> j) & 1u ? alpha[j] : -alpha[j];
    raw[m] = v;
  }
  std::iota(set.order.begin(), set.order.end(), 0u);
  std::stable_sort(set.order.begin(), set.order.end(),
                   [&raw](std::uint32_t a, std::uint32_t b) {
                     return raw[a] < raw[b];
                   });
  for (std::uint32_t i = 0; i < count; ++i) set.values[i] = raw[set.order[i]];
  set.midpoints.resize(count - 1);
  for (std::uint32_t i = 0; i + 1 < count; ++i) {
    set.midpoints[i] = 0.5 * (set.values[i] + set.values[i + 1]);
  }
  return set;
}

}  // namespace

SignMatrix mbq_assign_bases(const Tensor4& x,
                            const std::vector<double>& alpha_prev) {
  const int k = static_cast<int>(alpha_prev.size());
  check_k_feature(k);
  x.ensure_finite("mbq_assign_bases input");
  const CodewordSet set = enumerate_codewords(alpha_prev);
  SignMatrix B;
  B.rows = x.size();
  B.k = k;
  B.bits.assign(B.rows * k, 0);
  for (std::size_t i = 0; i < B.rows; ++i) {
    const double v = x[i];
    // index of the first midpoint >= v == count of midpoints < v; a value
    // exactly on a midpoint therefore lands on the smaller codeword
    const std::size_t slot =
        std::lower_bound(set.midpoints.begin(), set.midpoints.end(), v) -
        set.midpoints.begin();
    const std::uint32_t m = set.order[slot];
    for (int j = 0; j < k; ++j) B.bits[i * k + j] = (m >> j) & 1u;
  }
  return B;
}

std::vector<double> mbq_update_alpha(const SignMatrix& B, const Tensor4& x,
                                     const std::vector<double>& alpha_prev,
                                     std::uint64_t t,
                                     std::uint64_t* singular_fallbacks) {
  const int k = B.k;
  check_k_feature(k);
  if (static_cast<int>(alpha_prev.size()) != k) {
    throw std::invalid_argument("mbq_update_alpha: alpha length != k");
  }
  if (B.rows != x.size()) {
    throw std::invalid_argument("mbq_update_alpha: B rows != elements");
  }
  if (t < 1) throw std::invalid_argument("mbq_update_alpha: t must be >= 1");

  // normal equations: (B^T B) alpha = B^T x
  double btb[4][4] = {};
  double btx[4] = {};
  for (std::size_t i = 0; i < B.rows; ++i) {
    float signs[4];
    for (int j = 0; j < k; ++j) signs[j] = B.sign(i, j);
    const double xi = x[i];
    for (int j = 0; j < k; ++j) {
      btx[j] += signs[j] * xi;
      for (int l = j; l < k; ++l) btb[j][l] += double(signs[j]) * signs[l];
    }
  }
  for (int j = 0; j < k; ++j) {
    for (int l = 0; l < j; ++l) btb[j][l] = btb[l][j];
  }

  // Gaussian elimination with partial pivoting on the k x k system
  std::vector<double> alpha_cur(alpha_prev);
  bool singular = false;
  {
    double a[4][5];
    for (int r = 0; r < k; ++r) {
      for (int c2 = 0; c2 < k; ++c2) a[r][c2] = btb[r][c2];
      a[r][k] = btx[r];
    }
    const double pivot_floor = 1e-8 * std::max<double>(1.0, double(B.rows));
    for (int col = 0; col < k && !singular; ++col) {
      int pivot = col;
      for (int r = col + 1; r < k; ++r) {
        if (std::fabs(a[r][col]) > std::fabs(a[pivot][col])) pivot = r;
      }
      if (std::fabs(a[pivot][col]) < pivot_floor) {
        singular = true;
        break;
      }
      if (pivot != col) {
        for (int c2 = 0; c2 <= k; ++c2) std::swap(a[pivot][c2], a[col][c2]);
      }
      for (int r = 0; r < k; ++r) {
        if (r == col) continue;
        const double f = a[r][col] / a[col][col];
        for (int c2 = col; c2 <= k; ++c2) a[r][c2] -= f * a[col][c2];
      }
    }
    if (!singular) {
      for (int r = 0; r < k; ++r) alpha_cur[r] = a[r][k] / a[r][r];
    }
  }
  if (singular) {
    // happens when two basis columns coincide; keep the previous coefficients
    if (singular_fallbacks != nullptr) ++*singular_fallbacks;
    alpha_cur = alpha_prev;
  }

  const double beta = std::min(0.9, double(1 + t) / double(10 + t));
  std::vector<double> alpha_t(k);
  for (int j = 0; j < k; ++j) {
    alpha_t[j] = beta * alpha_prev[j] + (1.0 - beta) * alpha_cur[j];
  }
  return alpha_t;
}

ForwardQuantizeResult forward_quantize(const Tensor4& x, MbqState& state) {
  if (x.shape().n < 1 || x.size() == 0) {
    throw std::invalid_argument("forward_quantize: empty batch");
  }
  SignMatrix B;
  if (state.t == 0) {
    auto [b, alpha] = mbq_init_residue(x, state.k);
    B = std::move(b);
    state.alpha = std::move(alpha);
  } else {
    B = mbq_assign_bases(x, state.alpha);
    state.alpha = mbq_update_alpha(B, x, state.alpha, state.t,
                                   &state.singular_fallbacks);
  }
  state.t += 1;

  ForwardQuantizeResult res;
  res.block.shape = x.shape();
  res.block.k = state.k;
  res.block.alpha.resize(state.k);
  for (int j = 0; j < state.k; ++j) {
    res.block.alpha[j] = static_cast<float>(state.alpha[j]);
  }

  // m_q over the f32 coefficients actually transmitted, so the receiver-side
  // corrected mean comes out zero
  double err_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    float xhat = 0.0f;
    for (int j = 0; j < state.k; ++j) {
      xhat += B.sign(i, j) * res.block.alpha[j];
    }
    err_sum += double(xhat) - double(x[i]);
  }
  res.block.mq = static_cast<float>(err_sum / double(x.size()));

  double l2 = 0.0, max_abs = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    float xhat = 0.0f;
    for (int j = 0; j < state.k; ++j) {
      xhat += B.sign(i, j) * res.block.alpha[j];
    }
    const double e = double(xhat) - double(res.block.mq) - double(x[i]);
    l2 += e * e;
    max_abs = std::max(max_abs, std::fabs(e));
  }
  res.stats.residual_l2 = std::sqrt(l2);
  res.stats.max_abs_err = max_abs;

  res.block.packed = forward_encode(B, x.shape());
  return res;
}

std::size_t packed_feature_bytes(Shape4 shape, int k) {
  const std::size_t groups = (shape.n + 7) / 8;
  return groups * shape.per_sample() * static_cast<std::size_t>(k);
}

std::vector<std::uint8_t> forward_encode(const SignMatrix& B, Shape4 shape) {
  if (B.rows != shape.elems()) {
    throw std::invalid_argument("forward_encode: sign rows != shape elements");
  }
  const int k = B.k;
  const std::size_t whc = shape.per_sample();
  const std::size_t groups = (shape.n + 7) / 8;
  std::vector<std::uint8_t> packed(packed_feature_bytes(shape, k), 0);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t r = 0; r < whc; ++r) {
      for (int j = 0; j < k; ++j) {
        std::uint8_t byte = 0;
        for (std::size_t u = 0; u < 8; ++u) {
          const std::size_t row = g * 8 + u;
          if (row >= shape.n) break;  // zero pad bits in low positions
          byte |= B.bits[(row * whc + r) * k + j] << (7 - u);
        }
        packed[(g * whc + r) * k + j] = byte;
      }
    }
  }
  return packed;
}

SignMatrix forward_decode(const std::vector<std::uint8_t>& packed, Shape4 shape,
                          int k) {
  check_k_feature(k);
  if (packed.size() != packed_feature_bytes(shape, k)) {
    throw std::invalid_argument(
        "forward_decode: packed length " + std::to_string(packed.size()) +
        " != expected " + std::to_string(packed_feature_bytes(shape, k)) +
        " for shape " + shape.str());
  }
  const std::size_t whc = shape.per_sample();
  SignMatrix B;
  B.rows = shape.elems();
  B.k = k;
  B.bits.assign(B.rows * k, 0);
  for (std::size_t row = 0; row < shape.n; ++row) {
    const std::size_t g = row / 8, u = row % 8;
    for (std::size_t r = 0; r < whc; ++r) {
      for (int j = 0; j < k; ++j) {
        const std::uint8_t byte = packed[(g * whc + r) * k + j];
        B.bits[(row * whc + r) * k + j] = (byte >> (7 - u)) & 1u;
      }
    }
  }
  return B;
}

Tensor4 forward_dequantize(const SignMatrix& B, const std::vector<float>& alpha,
                           float mq, Shape4 shape) {
  if (B.rows != shape.elems() || B.k != static_cast<int>(alpha.size())) {
    throw std::invalid_argument("forward_dequantize: dimension mismatch");
  }
  Tensor4 out(shape);
  for (std::size_t i = 0; i < B.rows; ++i) {
    float v = 0.0f;
    for (int j = 0; j < B.k; ++j) v += B.sign(i, j) * alpha[j];
    out[i] = v - mq;
  }
  return out;
}

Tensor4 dequantize(const QuantizedFeatureBlock& block) {
  SignMatrix B = forward_decode(block.packed, block.shape, block.k);
  return forward_dequantize(B, block.alpha, block.mq, block.shape);
}

std::vector<std::int8_t> backward_quantize_ints(const Tensor4& g, int k,
                                                float& s_out,
                                                std::mt19937& rng) {
  check_k_gradient(k);
  g.ensure_finite("backward_quantize input");
  const float c = g.max_abs();
  const int qmax = (1 << (k - 1)) - 1;
  const int qmin = -(1 << (k - 1));
  std::vector<std::int8_t> gq(g.size(), 0);
  if (c == 0.0f) {
    s_out = 0.0f;  // sentinel: dequantizes to zeros
    return gq;
  }
  const float s = c / float(qmax);
  s_out = s;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double q = double(g[i]) / double(s);
    double low = std::floor(q);
    const double pr = q - low;
    int v = static_cast<int>(low);
    if (pr > 0.0 && unit(rng) < pr) v += 1;
    v = std::clamp(v, qmin, qmax);
    gq[i] = static_cast<std::int8_t>(v);
  }
  return gq;
}

QuantizedGradientBlock backward_quantize(const Tensor4& g, int k,
                                         std::mt19937& rng) {
  QuantizedGradientBlock block;
  block.shape = g.shape();
  block.k = k;
  std::vector<std::int8_t> gq = backward_quantize_ints(g, k, block.s, rng);
  block.packed = backward_encode(gq, g.shape(), k);
  return block;
}

std::size_t packed_gradient_bytes(Shape4 shape, int k) {
  if (k == 8) return shape.elems();
  return ((shape.n + 1) / 2) * shape.per_sample();
}

std::vector<std::uint8_t> backward_encode(const std::vector<std::int8_t>& gq,
                                          Shape4 shape, int k) {
  check_k_gradient(k);
  if (gq.size() != shape.elems()) {
    throw std::invalid_argument("backward_encode: value count != shape");
  }
  const int qmax = (1 << (k - 1)) - 1;
  const int qmin = -(1 << (k - 1));
  for (std::int8_t v : gq) {
    if (v < qmin || v > qmax) {
      throw std::runtime_error("backward_encode: value " + std::to_string(v) +
                               " outside " + std::to_string(k) + "-bit range");
    }
  }
  if (k == 8) {
    std::vector<std::uint8_t> packed(gq.size());
    std::memcpy(packed.data(), gq.data(), gq.size());
    return packed;
  }
  const std::size_t whc = shape.per_sample();
  const std::size_t pairs = (shape.n + 1) / 2;
  std::vector<std::uint8_t> packed(packed_gradient_bytes(shape, k), 0);
  for (std::size_t p = 0; p < pairs; ++p) {
    for (std::size_t r = 0; r < whc; ++r) {
      const std::uint8_t hi =
          static_cast<std::uint8_t>(gq[(2 * p) * whc + r] + 8);
      std::uint8_t lo = 0;
      if (2 * p + 1 < shape.n) {
        lo = static_cast<std::uint8_t>(gq[(2 * p + 1) * whc + r] + 8);
      }
      packed[p * whc + r] = static_cast<std::uint8_t>((hi << 4) | lo);
    }
  }
  return packed;
}

std::vector<std::int8_t> backward_decode(const std::vector<std::uint8_t>& packed,
                                         Shape4 shape, int k) {
  check_k_gradient(k);
  if (packed.size() != packed_gradient_bytes(shape, k)) {
    throw std::invalid_argument(
        "backward_decode: packed length " + std::to_string(packed.size()) +
        " != expected " + std::to_string(packed_gradient_bytes(shape, k)));
  }
  std::vector<std::int8_t> gq(shape.elems(), 0);
  if (k == 8) {
    std::memcpy(gq.data(), packed.data(), packed.size());
    return gq;
  }
  const std::size_t whc = shape.per_sample();
  for (std::size_t row = 0; row < shape.n; ++row) {
    const std::size_t p = row / 2;
    const bool high = (row % 2) == 0;
    for (std::size_t r = 0; r < whc; ++r) {
      const std::uint8_t byte = packed[p * whc + r];
      const std::uint8_t nib = high ? (byte >> 4) : (byte & 0x0f);
      gq[row * whc + r] = static_cast<std::int8_t>(int(nib) - 8);
    }
  }
  return gq;
}

Tensor4 backward_dequantize(const std::vector<std::int8_t>& gq, float s,
                            Shape4 shape) {
  if (gq.size() != shape.elems()) {
    throw std::invalid_argument("backward_dequantize: value count != shape");
  }
  Tensor4 out(shape);
  for (std::size_t i = 0; i < gq.size(); ++i) out[i] = float(gq[i]) * s;
  return out;
}

Tensor4 dequantize(const QuantizedGradientBlock& block) {
  return backward_dequantize(backward_decode(block.packed, block.shape, block.k),
                             block.s, block.shape);
}

BitwidthSchedule bitwidth_on_lr_change(BitwidthSchedule schedule) {
  schedule.forward_k = std::min(schedule.forward_k + 1, 4);
  schedule.backward_k = 4;
  schedule.events += 1;
  return schedule;
}

std::size_t feature_block_bytes(Shape4 shape, int k) {
  return kBlockHeaderBytes + 4u * (k + 1) + packed_feature_bytes(shape, k);
}

std::size_t gradient_block_bytes(Shape4 shape, int k) {
  return kBlockHeaderBytes + 4u + packed_gradient_bytes(shape, k);
}

std::size_t raw_block_bytes(Shape4 shape) {
  return kBlockHeaderBytes + 4u * shape.elems();
}

double compression_ratio_forward(Shape4 shape, int k) {
  const double raw_bits = double(shape.elems()) * 32.0;
  const double packed_bits =
      double(packed_feature_bytes(shape, k)) * 8.0 + 32.0 * (k + 1);
  return raw_bits / packed_bits;
}

double compression_ratio_backward(Shape4 shape, int k) {
  const double raw_bits = double(shape.elems()) * 32.0;
  const double packed_bits = double(packed_gradient_bytes(shape, k)) * 8.0 + 32.0;
  return raw_bits / packed_bits;
}

// --- serialization ----------------------------------------------------------

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 24) & 0xff);
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

void put_shape_header(std::vector<std::uint8_t>& out, BlockKind kind, int k,
                      Shape4 shape) {
  out.push_back(static_cast<std::uint8_t>(kind));
  out.push_back(static_cast<std::uint8_t>(k));
  put_u32(out, shape.n);
  put_u32(out, shape.w);
  put_u32(out, shape.h);
  put_u32(out, shape.c);
}

}  // namespace

void serialize(const QuantizedFeatureBlock& block, std::vector<std::uint8_t>& out) {
  out.reserve(out.size() + feature_block_bytes(block.shape, block.k));
  put_shape_header(out, BlockKind::feature, block.k, block.shape);
  for (float a : block.alpha) put_f32(out, a);
  put_f32(out, block.mq);
  out.insert(out.end(), block.packed.begin(), block.packed.end());
}

void serialize(const QuantizedGradientBlock& block, std::vector<std::uint8_t>& out) {
  out.reserve(out.size() + gradient_block_bytes(block.shape, block.k));
  put_shape_header(out, BlockKind::gradient, block.k, block.shape);
  put_f32(out, block.s);
  out.insert(out.end(), block.packed.begin(), block.packed.end());
}

void serialize_raw(const Tensor4& t, std::vector<std::uint8_t>& out) {
  out.reserve(out.size() + raw_block_bytes(t.shape()));
  put_shape_header(out, BlockKind::raw, 32, t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) put_f32(out, t[i]);
}

void BlockReader::need(std::size_t bytes) const {
  if (pos_ + bytes > size_) {
    throw std::runtime_error("block payload truncated at byte offset " +
                             std::to_string(pos_));
  }
}

std::uint32_t BlockReader::u32() {
  need(4);
  std::uint32_t v = std::uint32_t(data_[pos_]) |
                    (std::uint32_t(data_[pos_ + 1]) << 8) |
                    (std::uint32_t(data_[pos_ + 2]) << 16) |
                    (std::uint32_t(data_[pos_ + 3]) << 24);
  pos_ += 4;
  return v;
}

float BlockReader::f32() {
  std::uint32_t v = u32();
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

BlockKind BlockReader::peek_kind() const {
  need(1);
  const std::uint8_t raw = data_[pos_];
  if (raw > 2) {
    throw std::runtime_error("unknown block kind " + std::to_string(raw) +
                             " at byte offset " + std::to_string(pos_));
  }
  return static_cast<BlockKind>(raw);
}

Shape4 BlockReader::shape_header(BlockKind expect, int& k_out) {
  if (peek_kind() != expect) {
    throw std::runtime_error("unexpected block kind at byte offset " +
                             std::to_string(pos_));
  }
  pos_ += 1;
  need(1);
  k_out = data_[pos_];
  pos_ += 1;
  Shape4 s;
  s.n = u32();
  s.w = u32();
  s.h = u32();
  s.c = u32();
  return s;
}

QuantizedFeatureBlock BlockReader::read_feature() {
  QuantizedFeatureBlock block;
  block.shape = shape_header(BlockKind::feature, block.k);
  check_k_feature(block.k);
  block.alpha.resize(block.k);
  for (int j = 0; j < block.k; ++j) block.alpha[j] = f32();
  block.mq = f32();
  const std::size_t bytes = packed_feature_bytes(block.shape, block.k);
  need(bytes);
  block.packed.assign(data_ + pos_, data_ + pos_ + bytes);
  pos_ += bytes;
  return block;
}

QuantizedGradientBlock BlockReader::read_gradient() {
  QuantizedGradientBlock block;
  block.shape = shape_header(BlockKind::gradient, block.k);
  check_k_gradient(block.k);
  block.s = f32();
  const std::size_t bytes = packed_gradient_bytes(block.shape, block.k);
  need(bytes);
  block.packed.assign(data_ + pos_, data_ + pos_ + bytes);
  pos_ += bytes;
  return block;
}

Tensor4 BlockReader::read_raw() {
  int k = 0;
  Shape4 shape = shape_header(BlockKind::raw, k);
  Tensor4 t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = f32();
  return t;
}

}  // namespace ept::codec
