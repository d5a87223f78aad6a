#pragma once

// Static and dynamic compute accounting: MAC/FLOP counts, an analytic
// weight-stationary memory-access model, the access-weighted energy model,
// the differentiable expected-cost surrogate, and realized-cost evaluation
// of skip traces.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddi/tensor.hpp"
#include "ddi/trace.hpp"

namespace ddi {

class DDINetwork;

struct LayerCost {
  int64_t macs = 0;
  // Convention: 1 MAC = 2 FLOPs for conv/FC; elementwise additions from
  // residual merges and normalization are excluded (dominated).
  int64_t flops = 0;
  // Word (f32 element) accesses per hierarchy level: [dram, cache, regfile].
  std::array<double, 3> acc{0.0, 0.0, 0.0};
  int id = -1;

  LayerCost& operator+=(const LayerCost& o);
};

struct EnergyParams {
  // Normalized per-access energies [e_dram, e_cache, e_rf] and per-MAC
  // energy. Defaults follow the 200:6:1:1 hierarchy ratio; configurable.
  std::array<double, 3> e{200.0, 6.0, 1.0};
  double e_mac = 1.0;

  void validate() const;  // e_dram > e_cache > e_rf > 0, e_mac > 0
};

struct MemModelConfig {
  int64_t cache_bytes = 32 * 1024;
  int64_t regfile_bytes = 1024;
};

struct ConvDimsSpec {
  int64_t cin, cout, kh, kw, hin, win, hout, wout;
};

// MAC/FLOP arithmetic only; memory accesses left zero.
LayerCost conv_cost(int64_t cin, int64_t cout, int64_t kh, int64_t kw,
                    int64_t hout, int64_t wout);
// Full cost including the analytic access model.
LayerCost conv_cost_mem(const ConvDimsSpec& d, const MemModelConfig& mem);

// Weight-stationary tiling model, all counts in f32 words:
//   tile = how many output-channel filters fit in cache;
//   dram = weights once + inputs reloaded per tile + outputs once;
//   cache = one operand fetch per MAC + weight fill + output spill;
//   regfile = 3 per MAC (two reads, one accumulate).
std::array<double, 3> count_mem_accesses(const ConvDimsSpec& d,
                                         const MemModelConfig& mem);

double energy(const LayerCost& cost, const EnergyParams& params);
double energy(const std::array<double, 3>& acc, double macs,
              const EnergyParams& params);

enum class CostMetric { uniform, flops, energy };
CostMetric parse_metric(const std::string& name);
std::string metric_name(CostMetric m);

// Static cost breakdown of one network unit (residual block, dense layer,
// or transition).
struct BlockCost {
  int unit_id = -1;
  int stage = 0;
  bool gated = false;
  int k = 0;               // gated output channels
  LayerCost uncond;        // gated: part executed whenever the layer fires;
                           // ungated: the whole unit
  LayerCost cond;          // gated: part divisible across the k channels
  LayerCost layer_gate;    // gate pipeline overheads (gated units only)
  LayerCost channel_gate;
};

struct CostLedger {
  LayerCost stem;
  LayerCost head;
  std::vector<BlockCost> blocks;
  std::vector<LayerCost> branch;        // ordinal order
  std::vector<int> branch_after_unit;   // unit index each branch attaches after
  EnergyParams eparams;
  MemModelConfig mem;

  // Scalar value of a cost under a metric. Uniform values are defined
  // relative to gated-block FLOPs: a whole gated block is worth 1 (split
  // between uncond and channel shares by FLOP proportion) and everything
  // else is valued against the mean gated-block FLOPs.
  double value(const LayerCost& c, CostMetric m) const;
  double mean_gated_block_flops() const;

  double block_total_value(int unit, CostMetric m) const;
  double block_uncond_value(int unit, CostMetric m) const;
  double block_channel_share_value(int unit, CostMetric m) const;  // per channel
  double layer_gate_value(int unit, CostMetric m) const;
  double channel_gate_value(int unit, CostMetric m) const;
  double branch_value(int i, CostMetric m) const;
  double stem_value(CostMetric m) const;
  double head_value(CostMetric m) const;

  // Full execution, no gate or branch overhead: stem + every unit + head.
  double vanilla_total(CostMetric m) const;
};

CostLedger build_cost_ledger(const DDINetwork& net, const MemModelConfig& mem,
                             const EnergyParams& eparams);

// Soft gate activations collected from one training-mode forward pass.
struct SoftGateValues {
  int unit_id = -1;
  Tensor soft_layer;     // [N,1]
  Tensor soft_channels;  // [N,k]
};

// Differentiable E(W,G): batch mean of
//   sum_b softL_b * uncond_b + sum_{b,c} softL_b * softC_{b,c} * share_{b,c}.
// Gate pipeline overhead is excluded (it is executed unconditionally).
Tensor expected_cost(const std::vector<SoftGateValues>& gates,
                     const CostLedger& ledger, CostMetric metric);

struct DynamicCostBreakdown {
  double stem = 0.0;
  double head = 0.0;
  std::vector<double> per_block;   // executed parts + incurred gate overhead
  std::vector<double> per_branch;  // evaluated branches only
  double total = 0.0;
};

// Realized cost of a trace: executed units plus gate overhead actually
// incurred (layer gate always, channel gate only when the layer fired),
// plus evaluated branches, plus stem/head fixed units.
DynamicCostBreakdown dynamic_cost_breakdown(const SkipTrace& trace,
                                            const CostLedger& ledger,
                                            CostMetric metric);
double dynamic_cost(const SkipTrace& trace, const CostLedger& ledger,
                    CostMetric metric);

enum class GateKind { layer, channel };
enum class CanonicalBlock { resnet34_block, densenet100_layer };
// Gate FLOPs / host-block FLOPs on canonical published dimensions.
double overhead_ratio(GateKind gate, CanonicalBlock block);

nlohmann::json cost_report_json(const CostLedger& ledger, CostMetric metric,
                                const std::vector<double>* executed_fraction);

}  // namespace ddi
