// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <queue>
#include <stdexcept>

#include <json.hpp>

namespace ept::pipeline {

using nlohmann::json;

// --- datasets and schedules --------------------------------------------------

Dataset make_two_class_dataset(std::size_t samples, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> angle(0.0f, 6.2831853f);
  std::normal_distribution<float> jitter(0.0f, 0.18f);
  Dataset data;
  data.inputs = Tensor4({std::uint32_t(samples), 2, 1, 1});
  data.labels.resize(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    const std::uint32_t label = std::uint32_t(rng() & 1u);
    const float a = angle(rng);
    const float r = (label == 0 ? 1.0f : 2.1f) + jitter(rng);
    data.inputs.at(i, 0, 0, 0) = r * std::cos(a);
    data.inputs.at(i, 1, 0, 0) = r * std::sin(a);
    data.labels[i] = label;
  }
  return data;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& all,
                                          double train_fraction) {
  const std::size_t n_train =
      static_cast<std::size_t>(double(all.size()) * train_fraction);
  const std::size_t features = all.inputs.shape().per_sample();
  Dataset train, test;
  train.inputs = Tensor4({std::uint32_t(n_train), all.inputs.shape().w,
                          all.inputs.shape().h, all.inputs.shape().c});
  test.inputs = Tensor4({std::uint32_t(all.size() - n_train),
                         all.inputs.shape().w, all.inputs.shape().h,
                         all.inputs.shape().c});
  for (std::size_t i = 0; i < all.size(); ++i) {
    Tensor4& dst = i < n_train ? train.inputs : test.inputs;
    const std::size_t row = i < n_train ? i : i - n_train;
    for (std::size_t f = 0; f < features; ++f) {
      dst[row * features + f] = all.inputs[i * features + f];
    }
    (i < n_train ? train.labels : test.labels).push_back(all.labels[i]);
  }
  return {std::move(train), std::move(test)};
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t dataset_size,
                                                    std::uint32_t batch_size,
                                                    std::size_t epochs,
                                                    std::uint32_t seed) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  std::mt19937 rng(seed ^ 0xb5297a4du);
  std::vector<std::size_t> order(dataset_size);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t at = 0; at < dataset_size; at += batch_size) {
      const std::size_t end = std::min(dataset_size, at + batch_size);
      batches.emplace_back(order.begin() + at, order.begin() + end);
    }
  }
  return batches;
}

Tensor4 gather_batch(const Dataset& data, const std::vector<std::size_t>& idx) {
  const std::size_t features = data.inputs.shape().per_sample();
  Tensor4 out({std::uint32_t(idx.size()), data.inputs.shape().w,
               data.inputs.shape().h, data.inputs.shape().c});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (std::size_t f = 0; f < features; ++f) {
      out[r * features + f] = data.inputs[idx[r] * features + f];
    }
  }
  return out;
}

std::vector<std::uint32_t> gather_labels(const Dataset& data,
                                         const std::vector<std::size_t>& idx) {
  std::vector<std::uint32_t> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) out[r] = data.labels[idx[r]];
  return out;
}

float lr_at_epoch(const std::vector<LrEvent>& schedule, std::size_t epoch) {
  if (schedule.empty() || schedule.front().epoch != 0) {
    throw std::invalid_argument("lr schedule must start at epoch 0");
  }
  float lr = schedule.front().lr;
  for (const LrEvent& ev : schedule) {
    if (ev.epoch <= epoch) lr = ev.lr;
  }
  return lr;
}

codec::BitwidthSchedule bitwidths_at_epoch(const std::vector<LrEvent>& schedule,
                                           std::size_t epoch) {
  codec::BitwidthSchedule bw;
  for (std::size_t i = 1; i < schedule.size(); ++i) {
    if (schedule[i].epoch <= epoch) bw = codec::bitwidth_on_lr_change(bw);
  }
  return bw;
}

PlainTrainResult train_plain(const nn::Model& model,
                             const nn::VersionedWeights& initial,
                             const Dataset& train, const TrainRunConfig& cfg) {
  PlainTrainResult res;
  auto weights = std::make_shared<nn::VersionedWeights>(initial);
  const auto batches =
      epoch_batches(train.size(), cfg.batch_size, cfg.epochs, cfg.seed);
  const std::size_t per_epoch =
      (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const Tensor4 x = gather_batch(train, batches[b]);
    const auto labels = gather_labels(train, batches[b]);
    nn::Tape tape;
    const Tensor4 logits = nn::forward(model, weights, x, tape);
    const nn::LossGrad lg = nn::softmax_cross_entropy(logits, labels);
    nn::Gradients grads = nn::backward(tape, lg.logit_grad);
    const float lr = lr_at_epoch(cfg.lr_schedule, b / per_epoch);
    weights = std::make_shared<nn::VersionedWeights>(
        nn::sgd_step(*weights, grads, lr));
    res.losses.push_back(lg.loss);
  }
  res.weights = *weights;
  return res;
}

double evaluate_accuracy(const nn::Model& model,
                         const nn::VersionedWeights& weights,
                         const Dataset& test) {
  const Tensor4 logits = nn::forward(model, weights, test.inputs);
  return nn::accuracy(logits, test.labels);
}

// --- weight slicing across stages ----------------------------------------------

namespace {

struct StageRange {
  std::size_t first = 0, last = 0;  // 0-based inclusive layers
};

std::vector<StageRange> ranges_from_cuts(std::size_t layers,
                                         const std::vector<std::size_t>& cuts) {
  std::vector<StageRange> ranges;
  std::size_t start = 0;
  for (std::size_t c : cuts) {
    if (c <= start || c >= layers) {
      throw std::invalid_argument("invalid cut point " + std::to_string(c));
    }
    ranges.push_back({start, c - 1});
    start = c;
  }
  ranges.push_back({start, layers - 1});
  return ranges;
}

nn::VersionedWeights slice_weights(const nn::VersionedWeights& full,
                                   const StageRange& range) {
  nn::VersionedWeights part;
  part.version = full.version;
  part.params.assign(full.params.begin() + range.first,
                     full.params.begin() + range.last + 1);
  return part;
}

int forward_k_for(const TrainRunConfig& cfg, std::size_t epoch) {
  switch (cfg.codec) {
    case CodecMode::off: return 0;
    case CodecMode::fixed_k: return cfg.fixed_forward_k;
    case CodecMode::adaptive:
      return bitwidths_at_epoch(cfg.lr_schedule, epoch).forward_k;
  }
  return 0;
}

int backward_k_for(const TrainRunConfig& cfg, std::size_t epoch) {
  switch (cfg.codec) {
    case CodecMode::off: return 0;
    case CodecMode::fixed_k: return cfg.fixed_backward_k;
    case CodecMode::adaptive:
      return bitwidths_at_epoch(cfg.lr_schedule, epoch).backward_k;
  }
  return 0;
}

}  // namespace

// --- the engine ------------------------------------------------------------------

struct PipelineEngine::Message {
  std::size_t from = 0, to = 0;
  transport::WireMessage wire;
};

struct PipelineEngine::Stage {
  std::size_t index = 0;
  StageRange range;
  nn::Model sub_model;
  std::shared_ptr<nn::VersionedWeights> weights;
  std::map<std::uint64_t, std::shared_ptr<const nn::VersionedWeights>> stash;

  struct InFlight {
    nn::Tape tape;
    BatchTicket ticket;
    std::vector<std::uint32_t> labels;
  };
  std::map<std::uint32_t, InFlight> in_flight;

  struct PendingInput {
    std::uint32_t batch_id = 0;
    Tensor4 input;
    std::vector<std::uint32_t> labels;
  };
  std::deque<PendingInput> pending_inputs;
  std::map<std::uint32_t, Tensor4> pending_grads;

  bool computing = false;
  std::size_t stash_high_water = 0;

  codec::MbqState mbq{2};
  std::size_t mbq_epoch = static_cast<std::size_t>(-1);
  std::mt19937 grad_rng;

  std::size_t completed_since_report = 0;
  double report_ms_accum = 0.0;
};

PipelineEngine::PipelineEngine(nn::Model model, TrainRunConfig cfg,
                               std::vector<latency::SynthDevice> devices,
                               EstimatorContext estimator)
    : model_(std::move(model)),
      cfg_(std::move(cfg)),
      devices_(std::move(devices)),
      estimator_(std::move(estimator)),
      predictor_copy_(1) {
  if (devices_.empty()) throw std::invalid_argument("pipeline: no devices");
  if (model_.layer_count() < devices_.size()) {
    throw std::invalid_argument("pipeline: fewer layers than devices");
  }
  if (cfg_.estimator == EstimatorKind::predictor) {
    if (estimator_.predictor == nullptr || !estimator_.predictor->trained()) {
      throw std::invalid_argument(
          "pipeline: predictor estimator needs a trained model");
    }
    predictor_copy_ = *estimator_.predictor;
    has_predictor_ = true;
    if (estimator_.reps.ranges.empty()) {
      estimator_.reps = latency::select_representative_submodels(model_);
    }
  }
}

ept::partition::ExecTimeTable PipelineEngine::exec_table_average() {
  // every node assumed identical: unit-speed per-layer costs
  ept::partition::ExecTimeTable table(devices_.size(), model_.layer_count());
  for (std::size_t i = 0; i < devices_.size(); ++i) {
    for (std::size_t j = 0; j < model_.layer_count(); ++j) {
      table.at(i, j) = latency::layer_base_ms(model_.layers[j]);
    }
  }
  return table;
}

ept::partition::ExecTimeTable PipelineEngine::exec_table_ratio(
    std::mt19937& rng) {
  const std::size_t L = model_.layer_count(), N = devices_.size();
  std::vector<double> central(L);
  for (std::size_t j = 0; j < L; ++j) {
    central[j] = latency::measure_submodel_ms(devices_[0], j, j, rng);
  }
  ept::partition::ExecTimeTable table(N, L);
  for (std::size_t j = 0; j < L; ++j) table.at(0, j) = central[j];
  // probe each worker once on the average partition and scale by the ratio
  const auto probe_cuts =
      ept::partition::average_partition(L, N).cuts;
  const auto ranges = ranges_from_cuts(L, probe_cuts);
  for (std::size_t i = 1; i < N; ++i) {
    const double observed = latency::measure_submodel_ms(
        devices_[i], ranges[i].first, ranges[i].last, rng);
    const auto row = ept::partition::ftpipehd_ratio_estimate(
        central, observed, ranges[i].first, ranges[i].last);
    for (std::size_t j = 0; j < L; ++j) table.at(i, j) = row[j];
  }
  return table;
}

ept::partition::ExecTimeTable PipelineEngine::exec_table_predictor(
    std::mt19937& rng) {
  const std::size_t L = model_.layer_count(), N = devices_.size();
  ept::partition::ExecTimeTable table(N, L);
  for (std::size_t j = 0; j < L; ++j) {
    table.at(0, j) = latency::measure_submodel_ms(devices_[0], j, j, rng);
  }
  for (std::size_t i = 1; i < N; ++i) {
    const latency::HardwareProfile h =
        latency::measure_profile(devices_[i], estimator_.reps, rng);
    for (std::size_t j = 0; j < L; ++j) {
      table.at(i, j) = predictor_copy_.predict(
          latency::encode_submodel(L, j + 1, j + 1), h);
    }
  }
  return table;
}

ept::partition::ExecTimeTable PipelineEngine::estimate_exec_table() {
  std::mt19937 rng(cfg_.seed ^ 0x7f4a7c15u);
  switch (cfg_.estimator) {
    case EstimatorKind::average: return exec_table_average();
    case EstimatorKind::ratio: return exec_table_ratio(rng);
    case EstimatorKind::predictor: return exec_table_predictor(rng);
  }
  return exec_table_average();
}

ept::partition::PartitionPlan PipelineEngine::plan_from_tables(
    const ept::partition::ExecTimeTable& exec) {
  const std::size_t L = model_.layer_count(), N = devices_.size();
  const int k_comm = forward_k_for(cfg_, 0);
  const auto comm_fn = [this, k_comm](std::size_t, std::size_t layer) {
    const nn::SampleShape out = model_.layers[layer].output;
    return ept::partition::comm_time({cfg_.batch_size, out.w, out.h, out.c},
                                     k_comm, cfg_.bandwidth_bps,
                                     cfg_.base_latency_ms);
  };
  return ept::partition::dp_optimal_partition(
      L, N,
      [&exec](std::size_t node, std::size_t a, std::size_t b) {
        return exec.range(node, a, b);
      },
      comm_fn);
}

ept::partition::PartitionPlan PipelineEngine::initial_plan() {
  if (cfg_.estimator == EstimatorKind::average || devices_.size() == 1) {
    return ept::partition::average_partition(model_.layer_count(),
                                             devices_.size());
  }
  return plan_from_tables(estimate_exec_table());
}

TrainResult PipelineEngine::run(const Dataset& train) {
  const auto wall_start = std::chrono::steady_clock::now();
  const std::size_t S = devices_.size();
  const std::size_t L = model_.layer_count();

  std::mt19937 setup_rng(cfg_.seed ^ 0x7f4a7c15u);

  const auto batches =
      epoch_batches(train.size(), cfg_.batch_size, cfg_.epochs, cfg_.seed);
  const std::size_t per_epoch =
      (train.size() + cfg_.batch_size - 1) / cfg_.batch_size;
  const auto epoch_of = [per_epoch](std::uint32_t batch) {
    return std::size_t(batch) / per_epoch;
  };

  ept::partition::PartitionPlan plan = initial_plan();
  std::vector<std::size_t> cuts = plan.cuts;
  const nn::VersionedWeights full_init = nn::init_weights(model_, cfg_.seed);

  std::vector<Stage> stages(S);
  std::vector<double> believed_ms(S, 0.0);
  ept::partition::ExecTimeTable belief_table = estimate_exec_table();
  std::vector<latency::HardwareProfile> profiles(S);
  if (has_predictor_) {
    for (std::size_t i = 1; i < S; ++i) {
      profiles[i] =
          latency::measure_profile(devices_[i], estimator_.reps, setup_rng);
    }
  }

  const auto build_stages = [&](const std::vector<std::size_t>& cut_points,
                                const nn::VersionedWeights& full,
                                std::uint32_t rng_salt) {
    const auto ranges = ranges_from_cuts(L, cut_points);
    for (std::size_t i = 0; i < S; ++i) {
      Stage& st = stages[i];
      st.index = i;
      st.range = ranges[i];
      st.sub_model = model_.slice(ranges[i].first, ranges[i].last);
      st.weights = std::make_shared<nn::VersionedWeights>(
          slice_weights(full, ranges[i]));
      st.stash.clear();
      st.in_flight.clear();
      st.pending_inputs.clear();
      st.pending_grads.clear();
      st.computing = false;
      st.mbq = codec::MbqState(2);
      st.mbq_epoch = static_cast<std::size_t>(-1);
      st.grad_rng.seed(cfg_.seed ^ (0x1234567u + std::uint32_t(i) * 0x9e37u) ^
                       rng_salt);
      st.completed_since_report = 0;
      st.report_ms_accum = 0.0;
      believed_ms[i] = belief_table.range(i, ranges[i].first, ranges[i].last);
    }
  };
  build_stages(cuts, full_init, 0);

  transport::LinkModel link_model{cfg_.bandwidth_bps, cfg_.base_latency_ms};
  std::vector<transport::SimLink> fwd_links, bwd_links, ctl_links;
  for (std::size_t i = 0; i + 1 < S; ++i) {
    fwd_links.emplace_back(link_model);
    bwd_links.emplace_back(link_model);
  }
  for (std::size_t i = 0; i < S; ++i) ctl_links.emplace_back(link_model);

  enum class EventKind { wake, completion, delivery };
  struct Event {
    double t = 0.0;
    std::uint64_t seq = 0;
    EventKind kind = EventKind::wake;
    std::size_t stage = 0;
    std::vector<Message> msgs;
    Message delivery;
    double cost = 0.0;
    std::uint32_t batch_id = 0;
    bool is_forward = false;
  };
  struct EventCmp {
    bool operator()(const Event& a, const Event& b) const {
      if (a.t != b.t) return a.t > b.t;
      return a.seq > b.seq;
    }
  };
  std::priority_queue<Event, std::vector<Event>, EventCmp> queue;
  std::uint64_t seq = 0;
  const auto push_wake = [&](std::size_t stage, double t) {
    Event ev;
    ev.t = t;
    ev.seq = seq++;
    ev.kind = EventKind::wake;
    ev.stage = stage;
    queue.push(std::move(ev));
  };

  TrainResult result;
  result.metrics.resize(batches.size());
  for (std::size_t b = 0; b < batches.size(); ++b) {
    result.metrics[b].batch_id = std::uint32_t(b);
    result.metrics[b].epoch = epoch_of(std::uint32_t(b));
    result.metrics[b].stage_forward_ms.assign(S, 0.0);
    result.metrics[b].stage_backward_ms.assign(S, 0.0);
  }
  std::map<std::pair<std::size_t, std::uint32_t>, TicketRecord> audit;

  std::size_t issued = 0;
  std::size_t completed = 0;
  bool draining = false;
  std::vector<std::size_t> pending_cuts;
  bool fault_applied = false;
  double now = 0.0;

  const auto maybe_apply_fault = [&]() {
    if (cfg_.fault.enabled && !fault_applied && issued >= cfg_.fault.at_batch) {
      devices_[cfg_.fault.node].set_slowdown(cfg_.fault.slowdown);
      fault_applied = true;
    }
  };

  const auto stage_cost_ms = [&](std::size_t i) {
    Stage& st = stages[i];
    return devices_[i].range_ms(st.range.first, st.range.last);
  };

  const auto encode_features = [&](Stage& st, std::uint32_t batch,
                                   const Tensor4& activation,
                                   const std::vector<std::uint32_t>& labels)
      -> std::vector<std::uint8_t> {
    std::vector<std::uint8_t> payload;
    const std::size_t epoch = epoch_of(batch);
    const int k = forward_k_for(cfg_, epoch);
    if (k >= 1) {
      // quantizer state is per epoch and per boundary
      if (st.mbq_epoch != epoch) {
        st.mbq.reset(k);
        st.mbq_epoch = epoch;
      }
      const codec::ForwardQuantizeResult q =
          codec::forward_quantize(activation, st.mbq);
      codec::serialize(q.block, payload);
    } else {
      codec::serialize_raw(activation, payload);
    }
    Tensor4 label_tensor({std::uint32_t(labels.size()), 1, 1, 1});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      label_tensor[i] = float(labels[i]);
    }
    codec::serialize_raw(label_tensor, payload);
    return payload;
  };

  const auto encode_grads = [&](Stage& st, std::uint32_t batch,
                                const Tensor4& grad)
      -> std::vector<std::uint8_t> {
    std::vector<std::uint8_t> payload;
    const int k = backward_k_for(cfg_, epoch_of(batch));
    if (k >= 1) {
      const codec::QuantizedGradientBlock block =
          codec::backward_quantize(grad, k, st.grad_rng);
      codec::serialize(block, payload);
    } else {
      codec::serialize_raw(grad, payload);
    }
    return payload;
  };

  // --- stage actions ----------------------------------------------------------

  const auto run_forward = [&](std::size_t i, Event& completion) {
    Stage& st = stages[i];
    Stage::PendingInput in;
    if (i == 0) {
      in.batch_id = std::uint32_t(issued);
      in.input = gather_batch(train, batches[issued]);
      in.labels = gather_labels(train, batches[issued]);
      ++issued;
      maybe_apply_fault();
      BatchMetrics& m = result.metrics[in.batch_id];
      m.cuts = cuts;
      m.forward_k = forward_k_for(cfg_, epoch_of(in.batch_id));
      m.backward_k = backward_k_for(cfg_, epoch_of(in.batch_id));
    } else {
      in = std::move(st.pending_inputs.front());
      st.pending_inputs.pop_front();
    }

    const std::uint64_t version = st.weights->version;
    st.stash[version] = st.weights;
    st.stash_high_water = std::max(st.stash_high_water, st.stash.size());
    if (st.stash.size() > S - i) {
      throw std::runtime_error("stage " + std::to_string(i) +
                               ": stash capacity exceeded (invariant breach)");
    }

    Stage::InFlight fl;
    fl.ticket = {in.batch_id, version, BatchTicket::Direction::forward};
    fl.labels = in.labels;
    const Tensor4 out =
        nn::forward(st.sub_model, st.stash[version], in.input, fl.tape);
    TicketRecord& rec = audit[{i, in.batch_id}];
    rec.stage = i;
    rec.batch_id = in.batch_id;
    rec.forward_version = version;

    if (i + 1 < S) {
      Message msg;
      msg.from = i;
      msg.to = i + 1;
      msg.wire.msg_type = transport::MsgType::FEATURES;
      msg.wire.batch_id = in.batch_id;
      msg.wire.weight_version = std::uint32_t(version);
      msg.wire.payload = encode_features(st, in.batch_id, out, in.labels);
      completion.msgs.push_back(std::move(msg));
    } else {
      // last stage owns the loss; its own gradient becomes pending at once
      const nn::LossGrad lg = nn::softmax_cross_entropy(out, in.labels);
      result.metrics[in.batch_id].loss = lg.loss;
      st.pending_grads.emplace(in.batch_id, lg.logit_grad);
    }
    st.in_flight.emplace(in.batch_id, std::move(fl));

    completion.batch_id = in.batch_id;
    completion.is_forward = true;
    completion.cost = stage_cost_ms(i) / 3.0;
  };

  const auto run_backward = [&](std::size_t i, Event& completion) {
    Stage& st = stages[i];
    const std::uint32_t batch = st.pending_grads.begin()->first;
    Tensor4 out_grad = std::move(st.pending_grads.begin()->second);
    st.pending_grads.erase(st.pending_grads.begin());

    auto it = st.in_flight.find(batch);
    if (it == st.in_flight.end()) {
      throw std::runtime_error("stage " + std::to_string(i) +
                               ": gradient for unknown batch " +
                               std::to_string(batch));
    }
    Stage::InFlight& fl = it->second;
    if (st.stash.find(fl.ticket.weight_version) == st.stash.end()) {
      throw std::runtime_error("stage " + std::to_string(i) +
                               ": stash entry missing for version " +
                               std::to_string(fl.ticket.weight_version));
    }

    nn::Gradients grads = nn::backward(fl.tape, out_grad);
    audit[{i, batch}].backward_version = fl.ticket.weight_version;

    const float lr = lr_at_epoch(cfg_.lr_schedule, epoch_of(batch));
    st.weights = std::make_shared<nn::VersionedWeights>(
        nn::sgd_step(*st.weights, grads, lr));

    const std::uint64_t used_version = fl.ticket.weight_version;
    st.in_flight.erase(it);
    bool version_still_used = false;
    for (const auto& [b, other] : st.in_flight) {
      if (other.ticket.weight_version == used_version) {
        version_still_used = true;
        break;
      }
    }
    if (!version_still_used) st.stash.erase(used_version);

    if (i > 0) {
      Message msg;
      msg.from = i;
      msg.to = i - 1;
      msg.wire.msg_type = transport::MsgType::GRADS;
      msg.wire.batch_id = batch;
      msg.wire.weight_version = std::uint32_t(used_version);
      msg.wire.payload = encode_grads(st, batch, grads.input);
      completion.msgs.push_back(std::move(msg));
    }

    completion.batch_id = batch;
    completion.is_forward = false;
    completion.cost = stage_cost_ms(i) * 2.0 / 3.0;
  };

  // 1F1B gate: prefer a ready backward; forward only while the in-flight count
  // stays below the pipeline-depth cap for this stage.
  const auto schedule_next = [&](std::size_t i) -> int {  // 0 wait 1 fwd 2 bwd
    Stage& st = stages[i];
    if (!st.pending_grads.empty()) return 2;
    const std::size_t cap = cfg_.pipelining ? (S - i) : 1;
    if (st.in_flight.size() >= cap) return 0;
    if (i == 0) return (issued < batches.size() && !draining) ? 1 : 0;
    return st.pending_inputs.empty() ? 0 : 1;
  };

  // --- central-node coordination ----------------------------------------------

  const auto start_drain_or_apply = [&]() {
    const ept::partition::PartitionPlan p = plan_from_tables(belief_table);
    if (p.cuts == cuts) return;  // identical plan is a no-op
    try {
      (void)ranges_from_cuts(L, p.cuts);
    } catch (const std::exception&) {
      return;  // invalid plan rejected, old partition retained
    }
    pending_cuts = p.cuts;
    draining = true;
  };

  const auto finish_repartition = [&]() {
    nn::VersionedWeights full;
    full.version = stages[0].weights->version;
    for (Stage& st : stages) {
      if (st.weights->version != full.version) {
        throw std::runtime_error("repartition: stage versions diverged");
      }
      for (auto& p : st.weights->params) full.params.push_back(p);
    }
    const auto old_ranges = ranges_from_cuts(L, cuts);
    const auto new_ranges = ranges_from_cuts(L, pending_cuts);

    // cost the moved layers hop by hop as WEIGHTS_XFER transfers
    double resume_at = now;
    for (std::size_t hop = 0; hop + 1 < S; ++hop) {
      std::size_t moved_bytes = 0;
      for (std::size_t layer = 0; layer < L; ++layer) {
        std::size_t old_owner = 0, new_owner = 0;
        for (std::size_t i = 0; i < S; ++i) {
          if (layer >= old_ranges[i].first && layer <= old_ranges[i].last)
            old_owner = i;
          if (layer >= new_ranges[i].first && layer <= new_ranges[i].last)
            new_owner = i;
        }
        const bool crosses = (old_owner <= hop && new_owner > hop) ||
                             (new_owner <= hop && old_owner > hop);
        if (!crosses) continue;
        for (const Tensor4& t : full.params[layer]) {
          moved_bytes += codec::raw_block_bytes(t.shape());
        }
      }
      if (moved_bytes == 0) continue;
      transport::WireMessage msg;
      msg.msg_type = transport::MsgType::WEIGHTS_XFER;
      msg.batch_id = std::uint32_t(issued);
      msg.weight_version = std::uint32_t(full.version);
      msg.payload.assign(moved_bytes, 0);  // only the size matters to the clock
      const transport::DeliveryEvent ev = fwd_links[hop].send(msg, now);
      resume_at = std::max(resume_at, ev.time_ms);
    }

    RepartitionEvent rev;
    rev.time_ms = resume_at;
    rev.old_cuts = cuts;
    rev.new_cuts = pending_cuts;
    result.repartitions.push_back(rev);

    cuts = pending_cuts;
    pending_cuts.clear();
    draining = false;
    const std::uint64_t kept = full.version;
    build_stages(cuts, full, std::uint32_t(result.repartitions.size()) *
                                 0x51edu);
    for (Stage& st : stages) st.weights->version = kept;
    for (std::size_t i = 0; i < S; ++i) push_wake(i, resume_at);
  };

  const auto handle_report = [&](const Message& msg) {
    const json body = json::parse(
        std::string(msg.wire.payload.begin(), msg.wire.payload.end()));
    const std::size_t stage_idx = body.at("stage").get<std::size_t>();
    const double reported = body.at("mean_ms").get<double>();
    ReportEvent ev;
    ev.time_ms = now;
    ev.stage = stage_idx;
    ev.reported_ms = reported;
    ev.predicted_ms = believed_ms[stage_idx];
    if (cfg_.estimator == EstimatorKind::predictor) {
      if (latency::drift_check(ev.predicted_ms, reported, cfg_.epsilon) ==
          latency::DriftVerdict::recalibrate) {
        ev.recalibrated = true;
        profiles[stage_idx] = latency::measure_profile(
            devices_[stage_idx], estimator_.reps, setup_rng);
        if (estimator_.pretrain_data != nullptr && has_predictor_) {
          latency::LatencySample sample;
          sample.encoding = latency::encode_submodel(
              L, stages[stage_idx].range.first + 1,
              stages[stage_idx].range.last + 1);
          sample.profile = profiles[stage_idx];
          sample.time_ms = reported;
          latency::TrainOptions opts;
          opts.epochs = 5;
          opts.batch_size = 64;
          opts.lr = 1e-3;
          opts.seed = cfg_.seed ^ 0xada9u;
          predictor_copy_.adaptive_update({sample}, *estimator_.pretrain_data,
                                          opts);
        }
        for (std::size_t j = 0; j < L; ++j) {
          belief_table.at(stage_idx, j) = predictor_copy_.predict(
              latency::encode_submodel(L, j + 1, j + 1), profiles[stage_idx]);
        }
        if (cfg_.repartition_enabled) start_drain_or_apply();
      }
    } else if (cfg_.estimator == EstimatorKind::ratio) {
      // FTPipeHD-style periodic capacity re-estimation
      std::vector<double> central(L);
      for (std::size_t j = 0; j < L; ++j) central[j] = belief_table.at(0, j);
      const auto row = ept::partition::ftpipehd_ratio_estimate(
          central, reported, stages[stage_idx].range.first,
          stages[stage_idx].range.last);
      const double before = believed_ms[stage_idx];
      for (std::size_t j = 0; j < L; ++j) {
        belief_table.at(stage_idx, j) = row[j];
      }
      const double after =
          belief_table.range(stage_idx, stages[stage_idx].range.first,
                             stages[stage_idx].range.last);
      ev.recalibrated =
          std::fabs(after - before) / std::max(after, 1e-9) > cfg_.epsilon;
      if (cfg_.repartition_enabled) start_drain_or_apply();
    }
    believed_ms[stage_idx] = belief_table.range(
        stage_idx, stages[stage_idx].range.first, stages[stage_idx].range.last);
    result.reports.push_back(ev);
  };

  // --- event loop ----------------------------------------------------------------

  for (std::size_t i = 0; i < S; ++i) push_wake(i, 0.0);

  while (!queue.empty()) {
    Event ev = queue.top();
    queue.pop();
    now = ev.t;

    if (ev.kind == EventKind::wake) {
      Stage& st = stages[ev.stage];
      if (st.computing) continue;
      const int action = schedule_next(ev.stage);
      if (action == 0) continue;
      Event completion;
      completion.kind = EventKind::completion;
      completion.stage = ev.stage;
      if (action == 1) {
        run_forward(ev.stage, completion);
      } else {
        run_backward(ev.stage, completion);
      }
      st.computing = true;
      completion.t = now + completion.cost;
      completion.seq = seq++;
      queue.push(std::move(completion));
      continue;
    }

    if (ev.kind == EventKind::completion) {
      Stage& st = stages[ev.stage];
      st.computing = false;
      BatchMetrics& m = result.metrics[ev.batch_id];
      if (ev.is_forward) {
        m.stage_forward_ms[ev.stage] = ev.cost;
      } else {
        m.stage_backward_ms[ev.stage] = ev.cost;
        if (ev.stage > 0) {
          st.report_ms_accum += stage_cost_ms(ev.stage);
          st.completed_since_report += 1;
          if (st.completed_since_report >= cfg_.report_interval) {
            json body;
            body["stage"] = ev.stage;
            body["mean_ms"] =
                st.report_ms_accum / double(st.completed_since_report);
            body["batches"] = st.completed_since_report;
            body["first"] = st.range.first;
            body["last"] = st.range.last;
            Message rmsg;
            rmsg.from = ev.stage;
            rmsg.to = 0;
            rmsg.wire.msg_type = transport::MsgType::LATENCY_REPORT;
            rmsg.wire.batch_id = ev.batch_id;
            rmsg.wire.weight_version =
                std::uint32_t(st.weights->version);
            const std::string s = body.dump();
            rmsg.wire.payload.assign(s.begin(), s.end());
            ev.msgs.push_back(std::move(rmsg));
            st.completed_since_report = 0;
            st.report_ms_accum = 0.0;
          }
        } else {
          ++completed;
        }
      }
      for (Message& msg : ev.msgs) {
        transport::SimLink* link = nullptr;
        if (msg.wire.msg_type == transport::MsgType::FEATURES) {
          link = &fwd_links[msg.from];
        } else if (msg.wire.msg_type == transport::MsgType::GRADS) {
          link = &bwd_links[msg.to];
        } else {
          link = &ctl_links[msg.from];
        }
        const std::size_t bytes = transport::frame_bytes(msg.wire);
        if (msg.wire.msg_type == transport::MsgType::FEATURES ||
            msg.wire.msg_type == transport::MsgType::GRADS) {
          BatchMetrics& bm = result.metrics[msg.wire.batch_id];
          bm.comm_bytes += bytes;
          bm.comm_ms += link->transfer_ms(bytes);
        }
        const transport::DeliveryEvent dev = link->send(msg.wire, now);
        Event del;
        del.kind = EventKind::delivery;
        del.t = dev.time_ms;
        del.seq = seq++;
        del.stage = msg.to;
        del.delivery = std::move(msg);
        queue.push(std::move(del));
      }
      if (draining && completed == issued) {
        finish_repartition();
      }
      push_wake(ev.stage, now);
      continue;
    }

    // delivery
    {
      const Message& msg = ev.delivery;
      Stage& st = stages[ev.stage];
      switch (msg.wire.msg_type) {
        case transport::MsgType::FEATURES: {
          codec::BlockReader reader(msg.wire.payload.data(),
                                    msg.wire.payload.size());
          Tensor4 activation;
          if (reader.peek_kind() == codec::BlockKind::feature) {
            activation = codec::dequantize(reader.read_feature());
          } else {
            activation = reader.read_raw();
          }
          const Tensor4 label_tensor = reader.read_raw();
          Stage::PendingInput in;
          in.batch_id = msg.wire.batch_id;
          in.input = std::move(activation);
          in.labels.resize(label_tensor.size());
          for (std::size_t i = 0; i < label_tensor.size(); ++i) {
            in.labels[i] = std::uint32_t(label_tensor[i]);
          }
          st.pending_inputs.push_back(std::move(in));
          break;
        }
        case transport::MsgType::GRADS: {
          codec::BlockReader reader(msg.wire.payload.data(),
                                    msg.wire.payload.size());
          Tensor4 grad;
          if (reader.peek_kind() == codec::BlockKind::gradient) {
            grad = codec::dequantize(reader.read_gradient());
          } else {
            grad = reader.read_raw();
          }
          // quantize/dequantize acts as identity in the backward pass
          st.pending_grads.emplace(msg.wire.batch_id, nn::ste_grad(grad));
          break;
        }
        case transport::MsgType::LATENCY_REPORT:
          handle_report(msg);
          break;
        default:
          break;
      }
      push_wake(ev.stage, now);
    }
  }

  result.simulated_ms = now;
  result.final_cuts = cuts;
  result.stash_high_water.resize(S);
  for (std::size_t i = 0; i < S; ++i) {
    result.stash_high_water[i] = stages[i].stash_high_water;
  }
  for (const auto& [key, rec] : audit) result.audit.push_back(rec);

  // reassemble the full model weights
  result.final_weights.version = stages[0].weights->version;
  for (Stage& st : stages) {
    for (auto& p : st.weights->params) {
      result.final_weights.params.push_back(p);
    }
  }

  result.wall_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - wall_start)
                       .count();
  return result;
}

}  // namespace ept::pipeline
