#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fedst/tensor.hpp"

namespace fedst::io {

// Checkpoints are a pair of files: <prefix>.bin holds the concatenated
// 64-bit little-endian float payloads in manifest order, <prefix>.json
// describes name, shape and element offset of every tensor.
void save_checkpoint(
    const std::string& prefix,
    const std::vector<std::pair<std::string, const num::Tensor*>>& tensors);

struct LoadedTensor {
  std::string name;
  num::Tensor tensor;
};

std::vector<LoadedTensor> load_checkpoint(const std::string& prefix);

// Loads into existing tensors by name; shapes must match exactly.
void load_checkpoint_into(
    const std::string& prefix,
    const std::vector<std::pair<std::string, num::Tensor*>>& tensors);

}  // namespace fedst::io
