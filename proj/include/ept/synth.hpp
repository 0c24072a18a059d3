// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <string>
#include <vector>

#include "ept/latency.hpp"
#include "ept/nn.hpp"

namespace ept::latency {

/// Synthetic device: per-layer base cost (flop-derived plus a fixed dispatch
/// overhead) scaled by a per-layer-kind affinity and divided by a speed
/// factor. Measurements add multiplicative uniform noise.
struct DeviceConfig {
  std::string name;
  double speed = 1.0;
  // indexed by nn::LayerKind: dense, conv2d, relu, flatten
  std::array<double, 4> kind_affinity{1.0, 1.0, 1.0, 1.0};
  double noise = 0.02;
};

/// Cost of one layer at unit speed and unit affinity.
double layer_base_ms(const nn::LayerSpec& spec);

class SynthDevice {
 public:
  SynthDevice(DeviceConfig config, const nn::Model* model)
      : config_(std::move(config)), model_(model) {}

  const DeviceConfig& config() const { return config_; }

  /// Fault injection: multiplies all costs (0.5 halves the device's speed...
  /// factor > 1 slows it down).
  void set_slowdown(double factor) { slowdown_ = factor; }
  double slowdown() const { return slowdown_; }

  double layer_ms(std::size_t layer) const;
  double range_ms(std::size_t first, std::size_t last) const;  // 0-based incl.
  double measured_range_ms(std::size_t first, std::size_t last,
                           std::mt19937& rng) const;

 private:
  DeviceConfig config_;
  const nn::Model* model_;
  double slowdown_ = 1.0;
};

/// Median of `runs` measurements after `warmup` discarded ones.
double measure_submodel_ms(const SynthDevice& device, std::size_t first,
                           std::size_t last, std::mt19937& rng, int warmup = 3,
                           int runs = 20);

HardwareProfile measure_profile(const SynthDevice& device,
                                const RepresentativeSet& reps,
                                std::mt19937& rng);

/// One sample per contiguous sub-model of the device's model.
std::vector<LatencySample> device_samples(const SynthDevice& device,
                                          const RepresentativeSet& reps,
                                          std::mt19937& rng);

/// The 24 stock resource configurations (6 speeds x 4 affinity profiles).
std::vector<DeviceConfig> default_device_family();

}  // namespace ept::latency
