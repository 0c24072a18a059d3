// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace ept::transport {

enum class MsgType : std::uint8_t {
  HELLO = 0,
  FEATURES = 1,
  GRADS = 2,
  LATENCY_REPORT = 3,
  REPARTITION = 4,
  WEIGHTS_XFER = 5,
};

const char* msg_type_name(MsgType t);

struct WireMessage {
  MsgType msg_type = MsgType::HELLO;
  std::uint32_t batch_id = 0;
  std::uint32_t weight_version = 0;
  std::vector<std::uint8_t> payload;
};

/// Frame layout, little-endian:
///   magic "EPTW" | u8 type | u32 batch_id | u32 version | u32 length | payload
constexpr std::size_t kFrameHeaderBytes = 17;

std::vector<std::uint8_t> serialize(const WireMessage& msg);
/// Rejects bad magic / truncated frames, reporting the byte offset.
WireMessage deserialize(const std::vector<std::uint8_t>& bytes);

std::size_t frame_bytes(const WireMessage& msg);

/// Reliable in-order link with a serializing transfer resource.
struct LinkModel {
  double bandwidth_bps = 1e6;
  double base_latency_ms = 0.0;
};

struct DeliveryEvent {
  double time_ms = 0.0;
  WireMessage msg;
};

/// Simulated point-to-point link. Send computes the delivery time against the
/// caller's clock; the link never advances time itself. FIFO: back-to-back
/// sends serialize on the transfer resource.
class SimLink {
 public:
  explicit SimLink(LinkModel model) : model_(model) {}

  DeliveryEvent send(const WireMessage& msg, double now_ms);
  /// Transfer component (ms) a payload of `bytes` occupies the link for.
  double transfer_ms(std::size_t bytes) const;
  const LinkModel& model() const { return model_; }
  void reset() { free_at_ms_ = 0.0; }

 private:
  LinkModel model_;
  double free_at_ms_ = 0.0;
};

/// Blocking framed TCP link over a connected socket (loopback or LAN).
/// Optionally paces writes to a configured bandwidth.
class TcpLink {
 public:
  TcpLink() = default;
  ~TcpLink();
  TcpLink(TcpLink&& other) noexcept;
  TcpLink& operator=(TcpLink&& other) noexcept;
  TcpLink(const TcpLink&) = delete;
  TcpLink& operator=(const TcpLink&) = delete;

  static TcpLink listen_and_accept(std::uint16_t port);
  static TcpLink connect_to(const std::string& host, std::uint16_t port);

  /// 0 disables pacing.
  void set_throttle_bps(double bandwidth_bps) { throttle_bps_ = bandwidth_bps; }

  void send(const WireMessage& msg);
  WireMessage recv();
  void close();
  bool is_open() const { return fd_ >= 0; }

 private:
  explicit TcpLink(int fd) : fd_(fd) {}
  int fd_ = -1;
  double throttle_bps_ = 0.0;

  void send_all(const std::uint8_t* data, std::size_t size);
  void recv_all(std::uint8_t* data, std::size_t size);
};

}  // namespace ept::transport
