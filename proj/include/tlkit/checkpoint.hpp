#pragma once

#include <string>

#include "tlkit/model.hpp"

namespace tlkit {

// Checkpoint file (little-endian):
//   "TLCK" | u16 version=1 | u32 config byte count | config key=value text |
//   per tensor in declaration order: u32 element count | count x float32
void save_checkpoint(const VitParams<float>& params, const std::string& path);
VitParams<float> load_checkpoint(const std::string& path);

}  // namespace tlkit
