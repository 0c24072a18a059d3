// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/latency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ept/checkpoint.hpp"

namespace ept::latency {

std::pair<std::size_t, std::size_t> SubModelEncoding::range() const {
  std::size_t start = 0, end = 0;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) {
      if (start == 0) start = i + 1;
      end = i + 1;
    }
  }
  if (start == 0) throw std::runtime_error("encoding has no set bits");
  for (std::size_t i = start - 1; i < end; ++i) {
    if (!bits[i]) throw std::runtime_error("encoding is not a contiguous run");
  }
  return {start, end};
}

SubModelEncoding encode_submodel(std::size_t layers, std::size_t start,
                                 std::size_t end) {
  if (start < 1 || start > end || end > layers) {
    throw std::invalid_argument("encode_submodel: bad range [" +
                                std::to_string(start) + "," +
                                std::to_string(end) + "] for L=" +
                                std::to_string(layers));
  }
  SubModelEncoding enc;
  enc.bits.assign(layers, 0);
  for (std::size_t i = start - 1; i < end; ++i) enc.bits[i] = 1;
  return enc;
}

RepresentativeSet select_representative_submodels(const nn::Model& model) {
  const std::size_t L = model.layer_count();
  const std::size_t M = L * (L + 1) / 2;
  if (M < kProfileSize) {
    throw std::invalid_argument("select_representative_submodels: only " +
                                std::to_string(M) + " sub-models, need 10");
  }
  struct Entry {
    std::uint64_t flops;
    std::size_t start, end;  // 1-based
  };
  std::vector<Entry> entries;
  entries.reserve(M);
  for (std::size_t start = 1; start <= L; ++start) {
    for (std::size_t end = start; end <= L; ++end) {
      entries.push_back({model.flops(start - 1, end - 1), start, end});
    }
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.flops != b.flops) return a.flops < b.flops;
    if (a.start != b.start) return a.start < b.start;
    return a.end < b.end;
  });
  RepresentativeSet reps;
  for (std::size_t k = 0; k < kProfileSize; ++k) {
    const std::size_t idx = k * (M - 1) / 9;
    const Entry& e = entries[idx];
    reps.ranges.emplace_back(e.start, e.end);
    reps.encodings.push_back(encode_submodel(L, e.start, e.end));
  }
  return reps;
}

DriftVerdict drift_check(double predicted_ms, double reported_ms,
                         double epsilon) {
  if (reported_ms <= 0.0) {
    throw std::invalid_argument("drift_check: reported time must be > 0");
  }
  const double rel = std::fabs(reported_ms - predicted_ms) / reported_ms;
  return rel > epsilon ? DriftVerdict::recalibrate : DriftVerdict::stable;
}

// --- LatencyPredictor --------------------------------------------------------

namespace {
constexpr double kLogEps = 1e-9;
}

LatencyPredictor::LatencyPredictor(std::size_t num_layers)
    : num_layers_(num_layers) {
  if (num_layers < 1) throw std::invalid_argument("predictor: need >= 1 layer");
  layers_[0] = {kS1Hidden, num_layers_, {}, {}};
  layers_[1] = {kS1Out, kS1Hidden, {}, {}};
  layers_[2] = {kS2Hidden, kS1Out + kProfileSize, {}, {}};
  layers_[3] = {1, kS2Hidden, {}, {}};
  init_params(0);
}

void LatencyPredictor::init_params(std::uint32_t seed) {
  std::mt19937 rng(seed ^ 0x5eedu);
  for (DenseParam& p : layers_) {
    const float bound = std::sqrt(6.0f / float(p.in + p.out));
    std::uniform_real_distribution<float> dist(-bound, bound);
    p.w.resize(p.out * p.in);
    p.b.assign(p.out, 0.0f);
    for (float& v : p.w) v = dist(rng);
  }
}

std::array<double, kProfileSize> LatencyPredictor::normalize_profile(
    const HardwareProfile& profile) const {
  std::array<double, kProfileSize> out{};
  for (std::size_t i = 0; i < kProfileSize; ++i) {
    const double lg = std::log(std::max(profile.times[i], kLogEps));
    out[i] = (lg - prof_mean_[i]) / prof_std_[i];
  }
  return out;
}

namespace {

/// One forward evaluation with optional activation capture for backprop.
struct Activations {
  std::vector<double> x;     // encoding input
  std::vector<double> pre1, z1;
  std::vector<double> pre2, z2;
  std::vector<double> u;     // concat(z2, prof)
  std::vector<double> pre3, z3;
  double out = 0.0;
};

void dense_eval(const std::vector<float>& w, const std::vector<float>& b,
                std::size_t out_n, std::size_t in_n,
                const std::vector<double>& x, std::vector<double>& pre) {
  pre.assign(out_n, 0.0);
  for (std::size_t o = 0; o < out_n; ++o) {
    double acc = b[o];
    const float* row = w.data() + o * in_n;
    for (std::size_t i = 0; i < in_n; ++i) acc += double(row[i]) * x[i];
    pre[o] = acc;
  }
}

std::vector<double> relu_vec(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  return out;
}

}  // namespace

double LatencyPredictor::forward_log(
    const SubModelEncoding& encoding,
    const std::array<double, kProfileSize>& prof_norm) const {
  Activations a;
  a.x.assign(encoding.bits.begin(), encoding.bits.end());
  dense_eval(layers_[0].w, layers_[0].b, layers_[0].out, layers_[0].in, a.x,
             a.pre1);
  a.z1 = relu_vec(a.pre1);
  dense_eval(layers_[1].w, layers_[1].b, layers_[1].out, layers_[1].in, a.z1,
             a.pre2);
  a.z2 = relu_vec(a.pre2);
  a.u = a.z2;
  a.u.insert(a.u.end(), prof_norm.begin(), prof_norm.end());
  dense_eval(layers_[2].w, layers_[2].b, layers_[2].out, layers_[2].in, a.u,
             a.pre3);
  a.z3 = relu_vec(a.pre3);
  std::vector<double> out;
  dense_eval(layers_[3].w, layers_[3].b, 1, layers_[3].in, a.z3, out);
  return out[0];
}

double LatencyPredictor::predict(const SubModelEncoding& encoding,
                                 const HardwareProfile& profile) const {
  if (!trained_) {
    throw std::runtime_error("latency predictor is untrained; call pretrain()");
  }
  if (encoding.bits.size() != num_layers_) {
    throw std::invalid_argument("predict: encoding length " +
                                std::to_string(encoding.bits.size()) +
                                " != model layers " +
                                std::to_string(num_layers_));
  }
  return std::exp(forward_log(encoding, normalize_profile(profile)));
}

namespace {

struct AdamState {
  std::vector<double> m, v;
  void init(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }
};

void adam_step(std::vector<float>& param, const std::vector<double>& grad,
               AdamState& state, double lr, int t) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * grad[i];
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mh = state.m[i] / c1;
    const double vh = state.v[i] / c2;
    param[i] -= float(lr * mh / (std::sqrt(vh) + eps));
  }
}

}  // namespace

void LatencyPredictor::fit(const std::vector<const LatencySample*>& samples,
                           const TrainOptions& opts, bool reset_params,
                           double lr_scale, std::vector<double>* history) {
  if (samples.empty()) {
    throw std::invalid_argument("latency predictor: empty training set");
  }
  if (reset_params) init_params(opts.seed);

  // cache normalized inputs and log targets
  std::vector<std::array<double, kProfileSize>> prof_norm(samples.size());
  std::vector<double> target(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    prof_norm[i] = normalize_profile(samples[i]->profile);
    target[i] = std::log(std::max(samples[i]->time_ms, kLogEps));
  }

  std::array<AdamState, 8> adam;  // w/b per layer
  for (int l = 0; l < 4; ++l) {
    adam[2 * l].init(layers_[l].w.size());
    adam[2 * l + 1].init(layers_[l].b.size());
  }

  std::mt19937 rng(opts.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);

  const double lr = opts.lr * lr_scale;
  int step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < order.size();
         begin += std::size_t(opts.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + std::size_t(opts.batch_size));
      const double inv = 1.0 / double(end - begin);

      std::array<std::vector<double>, 4> gw, gb;
      for (int l = 0; l < 4; ++l) {
        gw[l].assign(layers_[l].w.size(), 0.0);
        gb[l].assign(layers_[l].b.size(), 0.0);
      }

      for (std::size_t s = begin; s < end; ++s) {
        const LatencySample& sample = *samples[order[s]];
        Activations a;
        a.x.assign(sample.encoding.bits.begin(), sample.encoding.bits.end());
        dense_eval(layers_[0].w, layers_[0].b, layers_[0].out, layers_[0].in,
                   a.x, a.pre1);
        a.z1 = relu_vec(a.pre1);
        dense_eval(layers_[1].w, layers_[1].b, layers_[1].out, layers_[1].in,
                   a.z1, a.pre2);
        a.z2 = relu_vec(a.pre2);
        a.u = a.z2;
        const auto& pn = prof_norm[order[s]];
        a.u.insert(a.u.end(), pn.begin(), pn.end());
        dense_eval(layers_[2].w, layers_[2].b, layers_[2].out, layers_[2].in,
                   a.u, a.pre3);
        a.z3 = relu_vec(a.pre3);
        std::vector<double> outv;
        dense_eval(layers_[3].w, layers_[3].b, 1, layers_[3].in, a.z3, outv);

        const double diff = outv[0] - target[order[s]];
        epoch_loss += diff * diff;
        const double dout = 2.0 * diff * inv;

        // layer 4
        std::vector<double> dz3(layers_[3].in, 0.0);
        for (std::size_t i = 0; i < layers_[3].in; ++i) {
          gw[3][i] += dout * a.z3[i];
          dz3[i] = dout * double(layers_[3].w[i]);
        }
        gb[3][0] += dout;
        for (std::size_t i = 0; i < dz3.size(); ++i) {
          if (a.pre3[i] <= 0.0) dz3[i] = 0.0;
        }
        // layer 3
        std::vector<double> du(layers_[2].in, 0.0);
        for (std::size_t o = 0; o < layers_[2].out; ++o) {
          const double g = dz3[o];
          if (g == 0.0) continue;
          gb[2][o] += g;
          const float* row = layers_[2].w.data() + o * layers_[2].in;
          double* gww = gw[2].data() + o * layers_[2].in;
          for (std::size_t i = 0; i < layers_[2].in; ++i) {
            gww[i] += g * a.u[i];
            du[i] += g * double(row[i]);
          }
        }
        std::vector<double> dz2(du.begin(), du.begin() + kS1Out);
        for (std::size_t i = 0; i < dz2.size(); ++i) {
          if (a.pre2[i] <= 0.0) dz2[i] = 0.0;
        }
        // layer 2
        std::vector<double> dz1(layers_[1].in, 0.0);
        for (std::size_t o = 0; o < layers_[1].out; ++o) {
          const double g = dz2[o];
          if (g == 0.0) continue;
          gb[1][o] += g;
          const float* row = layers_[1].w.data() + o * layers_[1].in;
          double* gww = gw[1].data() + o * layers_[1].in;
          for (std::size_t i = 0; i < layers_[1].in; ++i) {
            gww[i] += g * a.z1[i];
            dz1[i] += g * double(row[i]);
          }
        }
        for (std::size_t i = 0; i < dz1.size(); ++i) {
          if (a.pre1[i] <= 0.0) dz1[i] = 0.0;
        }
        // layer 1
        for (std::size_t o = 0; o < layers_[0].out; ++o) {
          const double g = dz1[o];
          if (g == 0.0) continue;
          gb[0][o] += g;
          double* gww = gw[0].data() + o * layers_[0].in;
          for (std::size_t i = 0; i < layers_[0].in; ++i) {
            gww[i] += g * a.x[i];
          }
        }
      }

      ++step;
      for (int l = 0; l < 4; ++l) {
        adam_step(layers_[l].w, gw[l], adam[2 * l], lr, step);
        adam_step(layers_[l].b, gb[l], adam[2 * l + 1], lr, step);
      }
    }
    epoch_loss /= double(samples.size());
    if (!std::isfinite(epoch_loss)) {
      throw std::runtime_error(
          "latency predictor diverged (loss not finite) at epoch " +
          std::to_string(epoch) + "; seed=" + std::to_string(opts.seed) +
          " lr=" + std::to_string(lr) +
          " batch=" + std::to_string(opts.batch_size));
    }
    if (history != nullptr) history->push_back(epoch_loss);
  }
}

void LatencyPredictor::pretrain(const std::vector<LatencySample>& dataset,
                                const TrainOptions& opts) {
  if (dataset.empty()) {
    throw std::invalid_argument("pretrain: empty dataset");
  }
  // profile normalization stats from the pre-training set
  std::array<double, kProfileSize> mean{}, var{};
  for (const LatencySample& s : dataset) {
    for (std::size_t i = 0; i < kProfileSize; ++i) {
      mean[i] += std::log(std::max(s.profile.times[i], kLogEps));
    }
  }
  for (auto& m : mean) m /= double(dataset.size());
  for (const LatencySample& s : dataset) {
    for (std::size_t i = 0; i < kProfileSize; ++i) {
      const double d = std::log(std::max(s.profile.times[i], kLogEps)) - mean[i];
      var[i] += d * d;
    }
  }
  for (std::size_t i = 0; i < kProfileSize; ++i) {
    prof_mean_[i] = mean[i];
    prof_std_[i] = std::max(std::sqrt(var[i] / double(dataset.size())), 1e-6);
  }

  std::vector<const LatencySample*> ptrs;
  ptrs.reserve(dataset.size());
  for (const LatencySample& s : dataset) ptrs.push_back(&s);

  loss_history_.clear();
  fit(ptrs, opts, /*reset_params=*/true, /*lr_scale=*/1.0, &loss_history_);
  trained_ = true;
}

void LatencyPredictor::adaptive_update(
    const std::vector<LatencySample>& new_samples,
    const std::vector<LatencySample>& pretrain_dataset,
    const TrainOptions& opts) {
  if (!trained_) {
    throw std::runtime_error("adaptive_update: predictor is untrained");
  }
  if (new_samples.empty()) return;  // nothing to learn from

  // oversample the new device so it carries weight against the full set
  std::vector<const LatencySample*> ptrs;
  for (const LatencySample& s : pretrain_dataset) ptrs.push_back(&s);
  const std::size_t repeat = std::max<std::size_t>(
      1, pretrain_dataset.size() / (4 * new_samples.size()));
  for (std::size_t r = 0; r < repeat; ++r) {
    for (const LatencySample& s : new_samples) ptrs.push_back(&s);
  }
  fit(ptrs, opts, /*reset_params=*/false, /*lr_scale=*/0.25, nullptr);
}

void LatencyPredictor::save(const std::string& path) const {
  nn::VersionedWeights w;
  w.params.resize(5);
  for (int l = 0; l < 4; ++l) {
    Tensor4 wt({std::uint32_t(layers_[l].out), std::uint32_t(layers_[l].in), 1, 1},
               layers_[l].w);
    std::vector<float> bias(layers_[l].b);
    Tensor4 bt({std::uint32_t(layers_[l].out), 1, 1, 1}, std::move(bias));
    w.params[l] = {std::move(wt), std::move(bt)};
  }
  Tensor4 stats({2, kProfileSize, 1, 1});
  for (std::size_t i = 0; i < kProfileSize; ++i) {
    stats.at(0, i, 0, 0) = float(prof_mean_[i]);
    stats.at(1, i, 0, 0) = float(prof_std_[i]);
  }
  w.params[4] = {std::move(stats)};
  nn::save_checkpoint(w, path);
}

LatencyPredictor LatencyPredictor::load(const std::string& path) {
  const nn::VersionedWeights w = nn::load_checkpoint(path);
  if (w.params.size() != 5) {
    throw std::runtime_error("latency model checkpoint has wrong layer count");
  }
  const std::size_t L = w.params[0][0].shape().w;
  LatencyPredictor pred(L);
  for (int l = 0; l < 4; ++l) {
    const Tensor4& wt = w.params[l][0];
    const Tensor4& bt = w.params[l][1];
    if (wt.shape().n != pred.layers_[l].out || wt.shape().w != pred.layers_[l].in) {
      throw std::runtime_error("latency model checkpoint shape mismatch");
    }
    pred.layers_[l].w = wt.vec();
    pred.layers_[l].b = bt.vec();
  }
  const Tensor4& stats = w.params[4][0];
  for (std::size_t i = 0; i < kProfileSize; ++i) {
    pred.prof_mean_[i] = stats.at(0, i, 0, 0);
    pred.prof_std_[i] = stats.at(1, i, 0, 0);
  }
  pred.trained_ = true;
  return pred;
}

// --- baseline and helpers ----------------------------------------------------

void FlopLinearBaseline::fit(const std::vector<LatencySample>& dataset,
                             const nn::Model& model) {
  double num = 0.0, den = 0.0;
  for (const LatencySample& s : dataset) {
    const auto [start, end] = s.encoding.range();
    const double f = double(model.flops(start - 1, end - 1));
    num += f * s.time_ms;
    den += f * f;
  }
  if (den <= 0.0) throw std::invalid_argument("flop baseline: zero flops");
  slope = num / den;
}

double FlopLinearBaseline::predict(const nn::Model& model,
                                   const SubModelEncoding& enc) const {
  const auto [start, end] = enc.range();
  return slope * double(model.flops(start - 1, end - 1));
}

double within_bound_accuracy(const std::vector<double>& predicted,
                             const std::vector<double>& truth, double bound) {
  if (predicted.size() != truth.size() || predicted.empty()) {
    throw std::invalid_argument("within_bound_accuracy: size mismatch");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (std::fabs(predicted[i] - truth[i]) / truth[i] <= bound) ++hits;
  }
  return double(hits) / double(predicted.size());
}

void save_samples_csv(const std::string& path,
                      const std::vector<LatencySample>& samples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "encoding_bits";
  for (std::size_t i = 0; i < kProfileSize; ++i) os << ",profile_" << i;
  os << ",time_ms\n";
  for (const LatencySample& s : samples) {
    for (std::uint8_t b : s.encoding.bits) os << (b ? '1' : '0');
    for (double p : s.profile.times) os << ',' << p;
    os << ',' << s.time_ms << '\n';
  }
}

std::vector<LatencySample> load_samples_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("empty csv " + path);
  std::vector<LatencySample> samples;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    if (!std::getline(ss, field, ',')) continue;
    LatencySample s;
    s.encoding.bits.reserve(field.size());
    for (char ch : field) s.encoding.bits.push_back(ch == '1' ? 1 : 0);
    for (std::size_t i = 0; i < kProfileSize; ++i) {
      if (!std::getline(ss, field, ',')) {
        throw std::runtime_error("csv row missing profile column");
      }
      s.profile.times[i] = std::stod(field);
    }
    if (!std::getline(ss, field, ',')) {
      throw std::runtime_error("csv row missing time_ms column");
    }
    s.time_ms = std::stod(field);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace ept::latency
