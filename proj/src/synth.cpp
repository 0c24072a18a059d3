// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/synth.hpp"

#include <algorithm>
#include <stdexcept>

namespace ept::latency {

namespace {
constexpr double kFlopsPerMs = 2.0e5;   // unit-speed throughput
constexpr double kDispatchMs = 0.05;    // fixed per-layer overhead
}  // namespace

double layer_base_ms(const nn::LayerSpec& spec) {
  return double(spec.flop_count) / kFlopsPerMs + kDispatchMs;
}

double SynthDevice::layer_ms(std::size_t layer) const {
  const nn::LayerSpec& spec = model_->layers.at(layer);
  const double affinity =
      config_.kind_affinity[static_cast<std::size_t>(spec.kind)];
  return layer_base_ms(spec) * affinity * slowdown_ / config_.speed;
}

double SynthDevice::range_ms(std::size_t first, std::size_t last) const {
  double total = 0.0;
  for (std::size_t j = first; j <= last; ++j) total += layer_ms(j);
  return total;
}

double SynthDevice::measured_range_ms(std::size_t first, std::size_t last,
                                      std::mt19937& rng) const {
  std::uniform_real_distribution<double> jitter(-config_.noise, config_.noise);
  return range_ms(first, last) * (1.0 + jitter(rng));
}

double measure_submodel_ms(const SynthDevice& device, std::size_t first,
                           std::size_t last, std::mt19937& rng, int warmup,
                           int runs) {
  for (int i = 0; i < warmup; ++i) {
    (void)device.measured_range_ms(first, last, rng);
  }
  std::vector<double> samples(runs);
  for (int i = 0; i < runs; ++i) {
    samples[i] = device.measured_range_ms(first, last, rng);
  }
  std::sort(samples.begin(), samples.end());
  const std::size_t mid = samples.size() / 2;
  return samples.size() % 2 == 1
             ? samples[mid]
             : 0.5 * (samples[mid - 1] + samples[mid]);
}

HardwareProfile measure_profile(const SynthDevice& device,
                                const RepresentativeSet& reps,
                                std::mt19937& rng) {
  if (reps.ranges.size() != kProfileSize) {
    throw std::invalid_argument("measure_profile: need 10 representative ranges");
  }
  HardwareProfile profile;
  for (std::size_t i = 0; i < kProfileSize; ++i) {
    const auto [start, end] = reps.ranges[i];  // 1-based inclusive
    profile.times[i] = measure_submodel_ms(device, start - 1, end - 1, rng);
  }
  return profile;
}

std::vector<LatencySample> device_samples(const SynthDevice& device,
                                          const RepresentativeSet& reps,
                                          std::mt19937& rng) {
  const HardwareProfile profile = measure_profile(device, reps, rng);
  const std::size_t layers =
      reps.encodings.empty() ? 0 : reps.encodings.front().num_layers();
  std::vector<LatencySample> samples;
  samples.reserve(layers * (layers + 1) / 2);
  for (std::size_t start = 1; start <= layers; ++start) {
    for (std::size_t end = start; end <= layers; ++end) {
      LatencySample s;
      s.encoding = encode_submodel(layers, start, end);
      s.profile = profile;
      s.time_ms = device.measured_range_ms(start - 1, end - 1, rng);
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

std::vector<DeviceConfig> default_device_family() {
  const double speeds[] = {0.3, 0.6, 1.0, 1.8, 3.2, 5.6};
  struct Profile {
    const char* tag;
    std::array<double, 4> affinity;  // dense, conv2d, relu, flatten
  };
  const Profile profiles[] = {
      {"balanced", {1.0, 1.0, 1.0, 1.0}},
      {"convfast", {1.3, 0.6, 1.0, 1.0}},
      {"densefast", {0.6, 1.4, 1.1, 1.0}},
      {"membound", {1.1, 1.1, 2.0, 1.5}},
  };
  std::vector<DeviceConfig> family;
  for (double speed : speeds) {
    for (const Profile& p : profiles) {
      DeviceConfig cfg;
      cfg.name = std::string(p.tag) + "-x" + std::to_string(speed);
      cfg.speed = speed;
      cfg.kind_affinity = p.affinity;
      cfg.noise = 0.02;
      family.push_back(std::move(cfg));
    }
  }
  return family;
}

}  // namespace ept::latency
