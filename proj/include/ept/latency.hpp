// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ept/nn.hpp"

namespace ept::latency {

/// Binary presence vector of a contiguous layer range.
struct SubModelEncoding {
  std::vector<std::uint8_t> bits;  // length L, exactly one contiguous run of 1s

  std::size_t num_layers() const { return bits.size(); }
  /// 1-based inclusive range of the set bits.
  std::pair<std::size_t, std::size_t> range() const;
  bool operator==(const SubModelEncoding& o) const { return bits == o.bits; }
};

/// layers/start/end are 1-based, start <= end <= L.
SubModelEncoding encode_submodel(std::size_t layers, std::size_t start,
                                 std::size_t end);

constexpr std::size_t kProfileSize = 10;

/// Execution times (ms) of the ten representative sub-models on one device.
struct HardwareProfile {
  std::array<double, kProfileSize> times{};
};

struct LatencySample {
  SubModelEncoding encoding;
  HardwareProfile profile;
  double time_ms = 0.0;
};

struct RepresentativeSet {
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // 1-based inclusive
  std::vector<SubModelEncoding> encodings;
};

/// Enumerates all M = L(L+1)/2 contiguous sub-models, sorts by flop count
/// (ties by (start, end)), picks indices floor(k(M-1)/9), k = 0..9.
RepresentativeSet select_representative_submodels(const nn::Model& model);

enum class DriftVerdict { stable, recalibrate };

/// recalibrate iff |reported - predicted| / reported > epsilon.
DriftVerdict drift_check(double predicted_ms, double reported_ms, double epsilon);

struct TrainOptions {
  int epochs = 300;
  int batch_size = 32;
  double lr = 3e-3;
  std::uint32_t seed = 1;
};

/// Dual-stream regressor: the encoding passes through two dense layers, the
/// result is concatenated with the hardware profile and passed through two
/// more. Profiles are log-transformed and z-scored against the pre-training
/// set; targets are log-transformed.
class LatencyPredictor {
 public:
  explicit LatencyPredictor(std::size_t num_layers);

  bool trained() const { return trained_; }
  std::size_t num_layers() const { return num_layers_; }

  double predict(const SubModelEncoding& encoding,
                 const HardwareProfile& profile) const;

  void pretrain(const std::vector<LatencySample>& dataset,
                const TrainOptions& opts);

  /// Continuous learning on new_samples combined with the pre-training set;
  /// no-op when new_samples is empty.
  void adaptive_update(const std::vector<LatencySample>& new_samples,
                       const std::vector<LatencySample>& pretrain_dataset,
                       const TrainOptions& opts);

  /// Mean loss per epoch of the last pretrain() call.
  const std::vector<double>& loss_history() const { return loss_history_; }

  void save(const std::string& path) const;
  static LatencyPredictor load(const std::string& path);

 private:
  static constexpr std::size_t kS1Hidden = 32;
  static constexpr std::size_t kS1Out = 16;
  static constexpr std::size_t kS2Hidden = 32;

  struct DenseParam {
    std::size_t out = 0, in = 0;
    std::vector<float> w;  // out x in
    std::vector<float> b;  // out
  };

  std::size_t num_layers_ = 0;
  bool trained_ = false;
  std::array<DenseParam, 4> layers_;
  std::array<double, kProfileSize> prof_mean_{};
  std::array<double, kProfileSize> prof_std_{};
  std::vector<double> loss_history_;

  void init_params(std::uint32_t seed);
  std::array<double, kProfileSize> normalize_profile(
      const HardwareProfile& profile) const;
  double forward_log(const SubModelEncoding& encoding,
                     const std::array<double, kProfileSize>& prof_norm) const;
  void fit(const std::vector<const LatencySample*>& samples,
           const TrainOptions& opts, bool reset_params, double lr_scale,
           std::vector<double>* history);

  friend struct PredictorGradCheck;
};

/// Single-slope flop-proportional baseline: time ~= slope * flops(range).
struct FlopLinearBaseline {
  double slope = 0.0;
  void fit(const std::vector<LatencySample>& dataset, const nn::Model& model);
  double predict(const nn::Model& model, const SubModelEncoding& enc) const;
};

/// Fraction of samples with |pred - truth| / truth <= bound.
double within_bound_accuracy(const std::vector<double>& predicted,
                             const std::vector<double>& truth, double bound);

// CSV: encoding_bits, profile_0..9, time_ms
void save_samples_csv(const std::string& path,
                      const std::vector<LatencySample>& samples);
std::vector<LatencySample> load_samples_csv(const std::string& path);

}  // namespace ept::latency
