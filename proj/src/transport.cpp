// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/transport.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <stdexcept>
#include <thread>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

namespace ept::transport {

const char* msg_type_name(MsgType t) {
  switch (t) {
    case MsgType::HELLO: return "HELLO";
    case MsgType::FEATURES: return "FEATURES";
    case MsgType::GRADS: return "GRADS";
    case MsgType::LATENCY_REPORT: return "LATENCY_REPORT";
    case MsgType::REPARTITION: return "REPARTITION";
    case MsgType::WEIGHTS_XFER: return "WEIGHTS_XFER";
  }
  return "?";
}

namespace {

constexpr char kMagic[4] = {'E', 'P', 'T', 'W'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(v & 0xff);
  out.push_back((v >> 8) & 0xff);
  out.push_back((v >> 16) & 0xff);
  out.push_back((v >> 24) & 0xff);
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

}  // namespace

std::size_t frame_bytes(const WireMessage& msg) {
  return kFrameHeaderBytes + msg.payload.size();
}

std::vector<std::uint8_t> serialize(const WireMessage& msg) {
  if (msg.payload.size() > 0xffffffffull) {
    throw std::invalid_argument("wire frame: payload exceeds u32 length");
  }
  std::vector<std::uint8_t> out;
  out.reserve(frame_bytes(msg));
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(msg.msg_type));
  put_u32(out, msg.batch_id);
  put_u32(out, msg.weight_version);
  put_u32(out, static_cast<std::uint32_t>(msg.payload.size()));
  out.insert(out.end(), msg.payload.begin(), msg.payload.end());
  return out;
}

WireMessage deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kFrameHeaderBytes) {
    throw std::runtime_error("wire frame truncated at byte offset " +
                             std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("wire frame: bad magic at byte offset 0");
  }
  const std::uint8_t type_raw = bytes[4];
  if (type_raw > 5) {
    throw std::runtime_error("wire frame: unknown type at byte offset 4");
  }
  WireMessage msg;
  msg.msg_type = static_cast<MsgType>(type_raw);
  msg.batch_id = get_u32(bytes.data() + 5);
  msg.weight_version = get_u32(bytes.data() + 9);
  const std::uint32_t length = get_u32(bytes.data() + 13);
  if (bytes.size() != kFrameHeaderBytes + length) {
    throw std::runtime_error("wire frame: declared payload length " +
                             std::to_string(length) + " but " +
                             std::to_string(bytes.size() - kFrameHeaderBytes) +
                             " bytes follow (offset 13)");
  }
  msg.payload.assign(bytes.begin() + kFrameHeaderBytes, bytes.end());
  return msg;
}

double SimLink::transfer_ms(std::size_t bytes) const {
  return double(bytes) * 8.0 / model_.bandwidth_bps * 1000.0;
}

DeliveryEvent SimLink::send(const WireMessage& msg, double now_ms) {
  const double start = std::max(now_ms, free_at_ms_);
  const double end_of_transfer = start + transfer_ms(frame_bytes(msg));
  free_at_ms_ = end_of_transfer;
  DeliveryEvent ev;
  ev.time_ms = end_of_transfer + model_.base_latency_ms;
  ev.msg = msg;
  return ev;
}

// --- TcpLink -----------------------------------------------------------------

TcpLink::~TcpLink() { close(); }

TcpLink::TcpLink(TcpLink&& other) noexcept
    : fd_(other.fd_), throttle_bps_(other.throttle_bps_) {
  other.fd_ = -1;
}

TcpLink& TcpLink::operator=(TcpLink&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    throttle_bps_ = other.throttle_bps_;
    other.fd_ = -1;
  }
  return *this;
}

void TcpLink::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

TcpLink TcpLink::listen_and_accept(std::uint16_t port) {
  int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener < 0) throw std::runtime_error("socket() failed");
  int yes = 1;
  ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(listener);
    throw std::runtime_error("bind() failed on port " + std::to_string(port));
  }
  if (::listen(listener, 1) != 0) {
    ::close(listener);
    throw std::runtime_error("listen() failed");
  }
  int conn = ::accept(listener, nullptr, nullptr);
  ::close(listener);
  if (conn < 0) throw std::runtime_error("accept() failed");
  int one = 1;
  ::setsockopt(conn, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return TcpLink(conn);
}

TcpLink TcpLink::connect_to(const std::string& host, std::uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw std::runtime_error("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw std::runtime_error("bad host address " + host);
  }
  // retry briefly so a freshly spawned listener thread can come up
  for (int attempt = 0;; ++attempt) {
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) break;
    if (attempt >= 50) {
      ::close(fd);
      throw std::runtime_error("connect() failed to " + host + ":" +
                               std::to_string(port));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return TcpLink(fd);
}

void TcpLink::send_all(const std::uint8_t* data, std::size_t size) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  std::size_t sent = 0;
  const std::size_t chunk = throttle_bps_ > 0.0 ? 16 * 1024 : size;
  while (sent < size) {
    const std::size_t len = std::min(chunk, size - sent);
    const ssize_t n = ::send(fd_, data + sent, len, MSG_NOSIGNAL);
    if (n <= 0) throw std::runtime_error("tcp send failed");
    sent += static_cast<std::size_t>(n);
    if (throttle_bps_ > 0.0) {
      // pace so that `sent` bytes take sent*8/bps seconds from start
      const auto due = start + std::chrono::duration_cast<clock::duration>(
                                   std::chrono::duration<double>(
                                       double(sent) * 8.0 / throttle_bps_));
      std::this_thread::sleep_until(due);
    }
  }
}

void TcpLink::recv_all(std::uint8_t* data, std::size_t size) {
  std::size_t got = 0;
  while (got < size) {
    const ssize_t n = ::recv(fd_, data + got, size - got, 0);
    if (n <= 0) throw std::runtime_error("tcp recv failed or peer closed");
    got += static_cast<std::size_t>(n);
  }
}

void TcpLink::send(const WireMessage& msg) {
  if (fd_ < 0) throw std::runtime_error("tcp send on closed link");
  const std::vector<std::uint8_t> frame = serialize(msg);
  send_all(frame.data(), frame.size());
}

WireMessage TcpLink::recv() {
  if (fd_ < 0) throw std::runtime_error("tcp recv on closed link");
  std::vector<std::uint8_t> frame(kFrameHeaderBytes);
  recv_all(frame.data(), kFrameHeaderBytes);
  if (std::memcmp(frame.data(), kMagic, 4) != 0) {
    throw std::runtime_error("tcp stream: bad magic at byte offset 0");
  }
  const std::uint32_t length = get_u32(frame.data() + 13);
  frame.resize(kFrameHeaderBytes + length);
  recv_all(frame.data() + kFrameHeaderBytes, length);
  return deserialize(frame);
}

}  // namespace ept::transport
