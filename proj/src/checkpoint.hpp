#pragma once

#include <map>
#include <string>

#include "tensor.hpp"

namespace topiq {

// Named tensors in deterministic (name-sorted) order; values only, no grads.
using TensorMap = std::map<std::string, Tensor>;

// Binary snapshot format "TQT1": magic, u32 version, then per tensor a
// length-prefixed UTF-8 name, u64 rank, u64 dims, f64 values, little-endian,
// until EOF. Identical maps produce byte-identical files.
void save_tensors(const TensorMap& tensors, const std::string& path);
TensorMap load_tensors(const std::string& path);

}  // namespace topiq
