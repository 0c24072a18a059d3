// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/partition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "ept/codec.hpp"
#include "ept/transport.hpp"

namespace ept::partition {

double ExecTimeTable::range(std::size_t node, std::size_t a, std::size_t b) const {
  double total = 0.0;
  for (std::size_t j = a; j <= b && j < layers; ++j) total += at(node, j);
  return total;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void validate_counts(std::size_t layers, std::size_t nodes) {
  if (nodes < 1) throw std::invalid_argument("partition: need at least 1 node");
  if (layers < nodes) {
    throw std::invalid_argument("partition: " + std::to_string(layers) +
                                " layers cannot cover " + std::to_string(nodes) +
                                " nodes (some node would get zero layers)");
  }
}

void validate_cuts(std::size_t layers, std::size_t nodes,
                   const std::vector<std::size_t>& cuts) {
  if (cuts.size() + 1 != nodes) {
    throw std::invalid_argument("partition: plan has " +
                                std::to_string(cuts.size()) + " cuts for " +
                                std::to_string(nodes) + " nodes");
  }
  std::size_t prev = 0;
  for (std::size_t p : cuts) {
    if (p <= prev || p >= layers) {
      throw std::invalid_argument("partition: invalid cut point " +
                                  std::to_string(p));
    }
    prev = p;
  }
}

}  // namespace

double plan_bottleneck(std::size_t layers, std::size_t nodes,
                       const std::vector<std::size_t>& cuts, const ExecFn& exec,
                       const CommFn& comm) {
  validate_counts(layers, nodes);
  validate_cuts(layers, nodes, cuts);
  double worst = 0.0;
  std::size_t start = 0;  // 0-based first layer of the current node
  for (std::size_t i = 0; i < nodes; ++i) {
    const std::size_t end = i + 1 < nodes ? cuts[i] - 1 : layers - 1;
    worst = std::max(worst, exec(i, start, end));
    if (i + 1 < nodes) worst = std::max(worst, 2.0 * comm(i, end));
    start = end + 1;
  }
  return worst;
}

PartitionPlan dp_optimal_partition(std::size_t layers, std::size_t nodes,
                                   const ExecFn& exec, const CommFn& comm) {
  validate_counts(layers, nodes);
  const std::size_t L = layers, N = nodes;

  // A[l][n]: optimal slowest-node time for the first l layers on n nodes
  // (l, n are 1-based counts). A[l][1] is the node-0 prefix sum.
  std::vector<std::vector<double>> A(L + 1, std::vector<double>(N + 1, kInf));
  for (std::size_t l = 1; l <= L; ++l) A[l][1] = exec(0, 0, l - 1);
  for (std::size_t n = 2; n <= N; ++n) {
    for (std::size_t l = n; l <= L; ++l) {
      double best = kInf;
      for (std::size_t p = n - 1; p < l; ++p) {
        const double cand = std::max({A[p][n - 1], 2.0 * comm(n - 2, p - 1),
                                      exec(n - 1, p, l - 1)});
        best = std::min(best, cand);
      }
      A[l][n] = best;
    }
  }
  const double optimum = A[L][N];

  // Suffix table S[a][m]: optimal time for 0-based layers [a, L-1] spread over
  // the last m nodes. Used to reconstruct the lexicographically smallest cut
  // sequence front to back.
  std::vector<std::vector<double>> S(L + 1, std::vector<double>(N + 1, kInf));
  for (std::size_t a = 0; a < L; ++a) S[a][1] = exec(N - 1, a, L - 1);
  for (std::size_t m = 2; m <= N; ++m) {
    const std::size_t node = N - m;
    for (std::size_t a = 0; a + m <= L; ++a) {
      double best = kInf;
      for (std::size_t q = a; q + m - 1 < L; ++q) {
        const double cand =
            std::max({exec(node, a, q), 2.0 * comm(node, q), S[q + 1][m - 1]});
        best = std::min(best, cand);
      }
      S[a][m] = best;
    }
  }

  PartitionPlan plan;
  plan.bottleneck_ms = optimum;
  std::size_t a = 0;
  for (std::size_t i = 0; i + 1 < N; ++i) {
    const std::size_t remaining = N - 1 - i;
    bool found = false;
    for (std::size_t q = a; q + remaining < L; ++q) {
      const double cand =
          std::max({exec(i, a, q), 2.0 * comm(i, q), S[q + 1][remaining]});
      if (cand <= optimum) {
        plan.cuts.push_back(q + 1);  // 1-based cut point
        a = q + 1;
        found = true;
        break;
      }
    }
    if (!found) {
      throw std::logic_error("partition: backtracking failed to meet optimum");
    }
  }
  return plan;
}

PartitionPlan dp_optimal_partition(const ExecTimeTable& exec,
                                   const CommTimeTable& comm) {
  return dp_optimal_partition(
      exec.layers, exec.nodes,
      [&exec](std::size_t node, std::size_t a, std::size_t b) {
        return exec.range(node, a, b);
      },
      [&comm](std::size_t node, std::size_t layer) {
        return comm.at(node, layer);
      });
}

PartitionPlan brute_force_partition(std::size_t layers, std::size_t nodes,
                                    const ExecFn& exec, const CommFn& comm) {
  validate_counts(layers, nodes);
  if (layers > 16 || nodes > 5) {
    throw std::invalid_argument("brute_force_partition: guard exceeded (L <= 16, N <= 5)");
  }
  PartitionPlan best;
  best.bottleneck_ms = kInf;
  std::vector<std::size_t> cuts(nodes - 1);
  // lexicographic enumeration of 1-based cut points keeps the first optimum
  // the lexicographically smallest one
  for (std::size_t i = 0; i < cuts.size(); ++i) cuts[i] = i + 1;
  const auto advance = [&cuts, layers]() {
    for (std::size_t i = cuts.size(); i-- > 0;) {
      if (cuts[i] < layers - (cuts.size() - i)) {
        ++cuts[i];
        for (std::size_t j = i + 1; j < cuts.size(); ++j) {
          cuts[j] = cuts[j - 1] + 1;
        }
        return true;
      }
    }
    return false;
  };
  while (true) {
    const double b = plan_bottleneck(layers, nodes, cuts, exec, comm);
    if (b < best.bottleneck_ms) {
      best.bottleneck_ms = b;
      best.cuts = cuts;
    }
    if (cuts.empty() || !advance()) break;
  }
  return best;
}

PartitionPlan brute_force_partition(const ExecTimeTable& exec,
                                    const CommTimeTable& comm) {
  return brute_force_partition(
      exec.layers, exec.nodes,
      [&exec](std::size_t node, std::size_t a, std::size_t b) {
        return exec.range(node, a, b);
      },
      [&comm](std::size_t node, std::size_t layer) {
        return comm.at(node, layer);
      });
}

PartitionPlan average_partition(std::size_t layers, std::size_t nodes) {
  validate_counts(layers, nodes);
  PartitionPlan plan;
  for (std::size_t i = 1; i < nodes; ++i) {
    std::size_t p = static_cast<std::size_t>(
        std::llround(double(i) * double(layers) / double(nodes)));
    p = std::max<std::size_t>(p, i);
    p = std::min<std::size_t>(p, layers - (nodes - i));
    if (!plan.cuts.empty()) p = std::max(p, plan.cuts.back() + 1);
    plan.cuts.push_back(p);
  }
  return plan;
}

std::size_t wire_bytes(Shape4 layer_output_shape, int k) {
  if (layer_output_shape.elems() == 0) return 0;
  const std::size_t payload = (k >= 1 && k <= 4)
                                  ? codec::feature_block_bytes(layer_output_shape, k)
                                  : codec::raw_block_bytes(layer_output_shape);
  return payload + transport::kFrameHeaderBytes;
}

double comm_time(Shape4 layer_output_shape, int k, double bandwidth_bps,
                 double base_latency_ms) {
  if (bandwidth_bps <= 0.0) {
    throw std::invalid_argument("comm_time: bandwidth must be positive");
  }
  const std::size_t bytes = wire_bytes(layer_output_shape, k);
  return double(bytes) * 8.0 / bandwidth_bps * 1000.0 + base_latency_ms;
}

std::vector<double> ftpipehd_ratio_estimate(
    const std::vector<double>& central_layer_times, double observed_submodel_time,
    std::size_t range_first, std::size_t range_last) {
  if (observed_submodel_time <= 0.0) {
    throw std::invalid_argument("ratio estimate: observed time must be > 0");
  }
  if (range_last >= central_layer_times.size() || range_first > range_last) {
    throw std::invalid_argument("ratio estimate: bad layer range");
  }
  double central_total = 0.0;
  for (std::size_t j = range_first; j <= range_last; ++j) {
    central_total += central_layer_times[j];
  }
  if (central_total <= 0.0) {
    throw std::invalid_argument("ratio estimate: central-node times sum to zero");
  }
  const double ratio = observed_submodel_time / central_total;
  std::vector<double> row(central_layer_times.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    row[j] = ratio * central_layer_times[j];
  }
  return row;
}

std::string plan_to_json(const PartitionPlan& plan) {
  nlohmann::json j;
  j["cuts"] = plan.cuts;
  j["bottleneck_ms"] = plan.bottleneck_ms;
  return j.dump();
}

PartitionPlan plan_from_json(const std::string& json) {
  const nlohmann::json j = nlohmann::json::parse(json);
  PartitionPlan plan;
  plan.cuts = j.at("cuts").get<std::vector<std::size_t>>();
  plan.bottleneck_ms = j.at("bottleneck_ms").get<double>();
  return plan;
}

}  // namespace ept::partition
