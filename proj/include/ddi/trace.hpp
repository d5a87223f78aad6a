#pragma once

// Per-sample record of what a gated forward pass actually executed.

#include <cstdint>
#include <vector>

namespace ddi {

struct BlockTraceEntry {
  int unit_id = -1;
  bool gated = false;
  // 1 when the unit body ran. Ungated units always execute.
  uint8_t layer_bit = 1;
  // Channel gate is consulted only when the layer gate fired.
  bool channel_gate_evaluated = false;
  // Size k for gated units; all zeros when the layer gate was 0.
  std::vector<uint8_t> channel_bits;
  // Soft values observed before binarization (diagnostics).
  float soft_layer = 1.f;
};

struct SkipTrace {
  std::vector<BlockTraceEntry> blocks;     // one entry per unit, in order
  std::vector<uint8_t> branch_evaluated;   // per branch ordinal
  bool final_head_evaluated = false;

  int gated_count() const {
    int n = 0;
    for (const auto& b : blocks) n += b.gated ? 1 : 0;
    return n;
  }

  // Fraction of gated decision weight that was skipped. Each gated unit
  // carries weight 2: the layer decision (weight 1) plus its channel
  // decisions (weight 1/k each). A closed layer counts its channel
  // decisions as skipped.
  double skip_ratio() const {
    double total = 0.0, skipped = 0.0;
    for (const auto& b : blocks) {
      if (!b.gated) continue;
      total += 2.0;
      if (b.layer_bit == 0) {
        skipped += 2.0;
        continue;
      }
      if (!b.channel_bits.empty()) {
        double closed = 0.0;
        for (uint8_t bit : b.channel_bits) closed += bit ? 0.0 : 1.0;
        skipped += closed / static_cast<double>(b.channel_bits.size());
      }
    }
    return total > 0.0 ? skipped / total : 0.0;
  }
};

}  // namespace ddi
