// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#include "ept/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ept::nn {

namespace {

constexpr char kMagic[4] = {'E', 'P', 'T', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("checkpoint: truncated file");
  }
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const VersionedWeights& weights, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  os.write(kMagic, 4);
  write_u32(os, static_cast<std::uint32_t>(weights.params.size()));
  for (const auto& layer : weights.params) {
    write_u32(os, static_cast<std::uint32_t>(layer.size()));
    for (const Tensor4& t : layer) {
      const Shape4& s = t.shape();
      write_u32(os, s.n);
      write_u32(os, s.w);
      write_u32(os, s.h);
      write_u32(os, s.c);
      static_assert(sizeof(float) == 4);
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size() * 4));
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

VersionedWeights load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  VersionedWeights w;
  w.version = 0;
  const std::uint32_t layers = read_u32(is);
  w.params.resize(layers);
  for (std::uint32_t i = 0; i < layers; ++i) {
    const std::uint32_t count = read_u32(is);
    for (std::uint32_t j = 0; j < count; ++j) {
      Shape4 s;
      s.n = read_u32(is);
      s.w = read_u32(is);
      s.h = read_u32(is);
      s.c = read_u32(is);
      Tensor4 t(s);
      if (!is.read(reinterpret_cast<char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * 4))) {
        throw std::runtime_error("checkpoint: truncated payload in " + path);
      }
      w.params[i].push_back(std::move(t));
    }
  }
  return w;
}

}  // namespace ept::nn
