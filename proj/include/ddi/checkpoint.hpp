#pragma once

// Versioned binary checkpoint container.
//
// Layout (all integers little-endian u32, floats little-endian f32):
//   magic "DDI1" | format version | flags | arch text (length + bytes)
//   | tensor count | tensors...
// Each tensor: name length, UTF-8 name, rank, dims, payload.
// flags bit 0: momentum buffers included (stored as "<name>.momentum").

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ddi/tensor.hpp"

namespace ddi {

struct Checkpoint {
  uint32_t version = 1;
  bool has_momentum = false;
  std::string arch_text;
  // Insertion-ordered names keep the file layout deterministic.
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, const Tensor& t);
  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ddi
