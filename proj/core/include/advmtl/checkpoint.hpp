#pragma once

#include <filesystem>
#include <stdexcept>

#include "advmtl/model.hpp"

namespace advmtl {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Text checkpoint, version 1:
//
//   advmtl-checkpoint 1
//   tensor <name> <rank> <d0> ... <d_{rank-1}>
//   <v0> <v1> ... (all values on one line, %.17g)
//   ...
//   end
//
// Tensors appear in NetworkAssembly::state() order: parameters first, then
// batch-norm running statistics. Values round-trip bit-exactly.
void save_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path);
NamedTensors load_checkpoint(const std::filesystem::path& path);

}  // namespace advmtl
