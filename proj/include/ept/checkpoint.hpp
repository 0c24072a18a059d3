// Copyright 2026 the ept authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "ept/nn.hpp"

namespace ept::nn {

// Weights checkpoint, little-endian throughout:
//   magic "EPT1" | u32 layer_count
//   per layer: u32 param_count | per param: u32 n,w,h,c | f32 payload
void save_checkpoint(const VersionedWeights& weights, const std::string& path);
VersionedWeights load_checkpoint(const std::string& path);

}  // namespace ept::nn
