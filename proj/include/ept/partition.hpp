// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ept/tensor.hpp"

namespace ept::partition {

/// Per-node, per-layer execution times in ms (layers 0-based here; ranges in
/// the API are inclusive 0-based layer indices).
struct ExecTimeTable {
  std::size_t nodes = 0;
  std::size_t layers = 0;
  std::vector<double> times;  // nodes x layers, row-major

  ExecTimeTable() = default;
  ExecTimeTable(std::size_t n_nodes, std::size_t n_layers)
      : nodes(n_nodes), layers(n_layers), times(n_nodes * n_layers, 0.0) {}

  double& at(std::size_t node, std::size_t layer) {
    return times[node * layers + layer];
  }
  double at(std::size_t node, std::size_t layer) const {
    return times[node * layers + layer];
  }
  /// Sum over the inclusive layer range [a, b] on one node.
  double range(std::size_t node, std::size_t a, std::size_t b) const;
};

/// comm.at(node, p) = time to send layer p's output from node to node+1.
struct CommTimeTable {
  std::size_t nodes = 0;   // number of sending links = node count - 1 is fine;
  std::size_t layers = 0;  // table is indexed by sender node for generality
  std::vector<double> times;

  CommTimeTable() = default;
  CommTimeTable(std::size_t n_nodes, std::size_t n_layers)
      : nodes(n_nodes), layers(n_layers), times(n_nodes * n_layers, 0.0) {}

  double& at(std::size_t node, std::size_t layer) {
    return times[node * layers + layer];
  }
  double at(std::size_t node, std::size_t layer) const {
    return times[node * layers + layer];
  }
};

/// cuts[i] = last 0-based layer of node i (strictly increasing); empty for a
/// single node. bottleneck_ms = time of the slowest node under the plan.
struct PartitionPlan {
  std::vector<std::size_t> cuts;
  double bottleneck_ms = 0.0;
};

using ExecFn = std::function<double(std::size_t node, std::size_t a, std::size_t b)>;
using CommFn = std::function<double(std::size_t node, std::size_t cut_layer)>;

/// Bottleneck of a specific cut assignment: max over per-node exec times and
/// doubled boundary communication terms.
double plan_bottleneck(std::size_t layers, std::size_t nodes,
                       const std::vector<std::size_t>& cuts, const ExecFn& exec,
                       const CommFn& comm);

/// Optimal bottleneck partition via dynamic programming; the returned cut
/// sequence is the lexicographically smallest argmin. Requires layers >= nodes.
PartitionPlan dp_optimal_partition(std::size_t layers, std::size_t nodes,
                                   const ExecFn& exec, const CommFn& comm);
PartitionPlan dp_optimal_partition(const ExecTimeTable& exec,
                                   const CommTimeTable& comm);

/// Exhaustive oracle over all C(L-1, N-1) cut sets; guarded to L <= 16, N <= 5.
PartitionPlan brute_force_partition(std::size_t layers, std::size_t nodes,
                                    const ExecFn& exec, const CommFn& comm);
PartitionPlan brute_force_partition(const ExecTimeTable& exec,
                                    const CommTimeTable& comm);

/// Equal-count split: cuts at round(i * L / N).
PartitionPlan average_partition(std::size_t layers, std::size_t nodes);

/// Transfer time of one boundary activation: exact wire bytes (compressed
/// feature block when k in [1,4], raw block otherwise, plus the frame header)
/// over the link, plus the base latency.
double comm_time(Shape4 layer_output_shape, int k, double bandwidth_bps,
                 double base_latency_ms);

/// Payload + frame bytes used by comm_time (k = 0 means uncompressed).
std::size_t wire_bytes(Shape4 layer_output_shape, int k);

/// Ratio-based per-layer estimate: scales the central node's layer times by
/// observed / predicted-range-total for one worker.
std::vector<double> ftpipehd_ratio_estimate(
    const std::vector<double>& central_layer_times, double observed_submodel_time,
    std::size_t range_first, std::size_t range_last);

std::string plan_to_json(const PartitionPlan& plan);
PartitionPlan plan_from_json(const std::string& json);

}  // namespace ept::partition
