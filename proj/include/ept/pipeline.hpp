// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include "ept/codec.hpp"
#include "ept/latency.hpp"
#include "ept/nn.hpp"
#include "ept/partition.hpp"
#include "ept/synth.hpp"
#include "ept/transport.hpp"

namespace ept::pipeline {

struct BatchTicket {
  std::uint32_t batch_id = 0;
  std::uint64_t weight_version = 0;
  enum class Direction : std::uint8_t { forward, backward } direction =
      Direction::forward;
};

enum class CodecMode { off, fixed_k, adaptive };
enum class EstimatorKind { average, ratio, predictor };

struct LrEvent {
  std::size_t epoch = 0;
  float lr = 0.01f;
};

struct FaultInjection {
  bool enabled = false;
  std::uint32_t at_batch = 0;
  std::size_t node = 0;
  double slowdown = 2.0;  // multiplies the node's execution time
};

struct TrainRunConfig {
  std::size_t epochs = 1;
  std::uint32_t batch_size = 32;
  std::vector<LrEvent> lr_schedule{{0, 0.01f}};  // must start at epoch 0
  std::size_t report_interval = 50;              // batches per latency report
  CodecMode codec = CodecMode::off;
  int fixed_forward_k = 2;
  int fixed_backward_k = 8;
  EstimatorKind estimator = EstimatorKind::average;
  bool repartition_enabled = false;
  double bandwidth_bps = 1e6;
  double base_latency_ms = 0.0;
  bool pipelining = true;  // false: at most one batch in flight end to end
  double epsilon = 0.2;    // drift threshold
  std::uint32_t seed = 1;
  FaultInjection fault;
};

/// forward/backward weight versions observed for one (stage, batch).
struct TicketRecord {
  std::size_t stage = 0;
  std::uint32_t batch_id = 0;
  std::uint64_t forward_version = 0;
  std::uint64_t backward_version = 0;
};

struct ReportEvent {
  double time_ms = 0.0;
  std::size_t stage = 0;
  double reported_ms = 0.0;
  double predicted_ms = 0.0;
  bool recalibrated = false;
};

struct RepartitionEvent {
  double time_ms = 0.0;
  std::vector<std::size_t> old_cuts;
  std::vector<std::size_t> new_cuts;
};

struct BatchMetrics {
  std::size_t epoch = 0;
  std::uint32_t batch_id = 0;
  double loss = 0.0;
  std::vector<double> stage_forward_ms;
  std::vector<double> stage_backward_ms;
  std::size_t comm_bytes = 0;
  double comm_ms = 0.0;
  std::vector<std::size_t> cuts;
  int forward_k = 0;  // 0 when the codec is off
  int backward_k = 0;
};

struct TrainResult {
  double simulated_ms = 0.0;
  double wall_ms = 0.0;
  std::vector<BatchMetrics> metrics;
  std::vector<TicketRecord> audit;
  std::vector<ReportEvent> reports;
  std::vector<RepartitionEvent> repartitions;
  std::vector<std::size_t> final_cuts;
  std::vector<std::size_t> stash_high_water;  // per stage
  nn::VersionedWeights final_weights;         // reassembled full model
};

struct Dataset {
  Tensor4 inputs;  // (num_samples, features, 1, 1)
  std::vector<std::uint32_t> labels;
  std::size_t size() const { return labels.size(); }
};

/// Seeded two-ring binary classification set (deterministic).
Dataset make_two_class_dataset(std::size_t samples, std::uint32_t seed);
/// First `fraction` of the samples (they are generated pre-shuffled).
std::pair<Dataset, Dataset> split_dataset(const Dataset& all, double train_fraction);

/// Sample-index batches per epoch; shared by the pipeline and plain trainers
/// so depth-1 trajectories match bitwise.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t dataset_size,
                                                    std::uint32_t batch_size,
                                                    std::size_t epochs,
                                                    std::uint32_t seed);

Tensor4 gather_batch(const Dataset& data, const std::vector<std::size_t>& idx);
std::vector<std::uint32_t> gather_labels(const Dataset& data,
                                         const std::vector<std::size_t>& idx);

float lr_at_epoch(const std::vector<LrEvent>& schedule, std::size_t epoch);
/// Bit widths in force at `epoch`: one schedule event per LR change before it.
codec::BitwidthSchedule bitwidths_at_epoch(const std::vector<LrEvent>& schedule,
                                           std::size_t epoch);

struct PlainTrainResult {
  std::vector<double> losses;
  nn::VersionedWeights weights;
};

/// Single-process, pipeline-free reference trainer.
PlainTrainResult train_plain(const nn::Model& model,
                             const nn::VersionedWeights& initial,
                             const Dataset& train, const TrainRunConfig& cfg);

double evaluate_accuracy(const nn::Model& model,
                         const nn::VersionedWeights& weights,
                         const Dataset& test);

/// Estimation context for partitioning: the predictor path needs a trained
/// model; the ratio path probes an average partition.
struct EstimatorContext {
  const latency::LatencyPredictor* predictor = nullptr;
  const std::vector<latency::LatencySample>* pretrain_data = nullptr;
  latency::RepresentativeSet reps;
};

/// 1F1B pipeline-parallel training engine over a chain of simulated devices.
/// Runs as a deterministic discrete-event simulation: the virtual clock models
/// per-stage compute and link transfer times while the numerics execute
/// inline, so results are bit-reproducible for a given config and seed.
class PipelineEngine {
 public:
  PipelineEngine(nn::Model model, TrainRunConfig cfg,
                 std::vector<latency::SynthDevice> devices,
                 EstimatorContext estimator = {});

  /// Initial partition per the configured estimator.
  ept::partition::PartitionPlan initial_plan();

  TrainResult run(const Dataset& train);

  /// Exec-table estimate used for partitioning (exposed for reports/tests).
  ept::partition::ExecTimeTable estimate_exec_table();

 private:
  struct Stage;
  struct Message;

  nn::Model model_;
  TrainRunConfig cfg_;
  std::vector<latency::SynthDevice> devices_;
  EstimatorContext estimator_;
  latency::LatencyPredictor predictor_copy_;  // adaptively updated during a run
  bool has_predictor_ = false;

  ept::partition::PartitionPlan plan_from_tables(
      const ept::partition::ExecTimeTable& exec);
  ept::partition::ExecTimeTable exec_table_average();
  ept::partition::ExecTimeTable exec_table_ratio(std::mt19937& rng);
  ept::partition::ExecTimeTable exec_table_predictor(std::mt19937& rng);
};

}  // namespace ept::pipeline
