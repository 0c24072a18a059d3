// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ept/latency.hpp"
#include "ept/nn.hpp"
#include "ept/pipeline.hpp"

namespace ept::cli {

/// Model description from config JSON:
///   {"input": {"w":..,"h":..,"c":..},
///    "layers": [{"kind":"dense","units":64}, {"kind":"relu"}, ...]}
nn::Model model_from_json(const nlohmann::json& j);

/// Node roster: [{"name":..,"speed":..,"affinity":[..4..],"noise":..}, ...]
std::vector<latency::DeviceConfig> nodes_from_json(const nlohmann::json& j);

/// Hash of the effective config (including the seed) stamped into every CSV.
std::string config_hash(const nlohmann::json& effective_config,
                        std::uint64_t seed);

struct TrainSummary {
  std::string mode;
  double simulated_ms = 0.0;
  double wall_ms = 0.0;
  double final_test_accuracy = 0.0;
  std::size_t repartitions = 0;
  std::vector<std::size_t> final_cuts;
};

int cmd_bench_codec(const nlohmann::json& config, std::uint64_t seed,
                    const std::string& out_dir);
TrainSummary cmd_train(const nlohmann::json& config, std::uint64_t seed,
                       const std::string& out_dir);
int cmd_partition(const nlohmann::json& config, std::uint64_t seed,
                  const std::string& out_dir);
int cmd_predictor(const nlohmann::json& config, std::uint64_t seed,
                  const std::string& out_dir);

/// Shared by cmd_train and the acceptance suite.
pipeline::TrainRunConfig train_config_from_json(const nlohmann::json& config,
                                                std::uint64_t seed);

}  // namespace ept::cli
