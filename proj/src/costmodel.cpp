#include "ddi/costmodel.hpp"

#include <cmath>

#include "ddi/errors.hpp"
#include "ddi/gating.hpp"
#include "ddi/ops.hpp"

namespace ddi {

LayerCost& LayerCost::operator+=(const LayerCost& o) {
  macs += o.macs;
  flops += o.flops;
  for (int i = 0; i < 3; ++i) acc[i] += o.acc[i];
  return *this;
}

void EnergyParams::validate() const {
  DDI_CHECK_T(ConfigError, e[0] > e[1] && e[1] > e[2] && e[2] > 0.0,
              "energy params must satisfy e_dram > e_cache > e_rf > 0, got [",
              e[0], ", ", e[1], ", ", e[2], "]");
  DDI_CHECK_T(ConfigError, e_mac > 0.0, "e_mac must be positive, got ", e_mac);
}

LayerCost conv_cost(int64_t cin, int64_t cout, int64_t kh, int64_t kw,
                    int64_t hout, int64_t wout) {
  DDI_CHECK_T(ModelError,
              cin > 0 && cout > 0 && kh > 0 && kw > 0 && hout > 0 && wout > 0,
              "conv_cost: dimensions must be positive, got cin=", cin, " cout=",
              cout, " k=", kh, "x", kw, " out=", hout, "x", wout);
  LayerCost c;
  c.macs = cin * cout * kh * kw * hout * wout;
  c.flops = 2 * c.macs;
  return c;
}

std::array<double, 3> count_mem_accesses(const ConvDimsSpec& d,
                                         const MemModelConfig& mem) {
  DDI_CHECK_T(ModelError, mem.cache_bytes > 0 && mem.regfile_bytes > 0,
              "memory model capacities must be positive");
  DDI_CHECK_T(ModelError, mem.regfile_bytes >= 12,
              "register file must hold at least one MAC's operands (12 bytes), got ",
              mem.regfile_bytes);
  int64_t filter_elems = d.cin * d.kh * d.kw;
  int64_t cache_elems = mem.cache_bytes / 4;
  DDI_CHECK_T(ModelError, cache_elems >= filter_elems,
              "cache of ", mem.cache_bytes, " bytes cannot hold one ",
              d.cin, "x", d.kh, "x", d.kw, " filter");

  double weights = static_cast<double>(d.cout) * filter_elems;
  double inputs = static_cast<double>(d.cin) * d.hin * d.win;
  double outputs = static_cast<double>(d.cout) * d.hout * d.wout;
  double macs = static_cast<double>(d.cin) * d.cout * d.kh * d.kw * d.hout * d.wout;

  // Weight-stationary: as many output-channel filters as fit stay resident;
  // the input is streamed once per filter tile; outputs leave once.
  int64_t tile_cout = std::max<int64_t>(1, cache_elems / filter_elems);
  int64_t n_tiles = (d.cout + tile_cout - 1) / tile_cout;

  std::array<double, 3> acc;
  acc[0] = weights + inputs * static_cast<double>(n_tiles) + outputs;  // dram
  acc[1] = macs + weights + outputs;                                   // cache
  acc[2] = 3.0 * macs;                                                 // regfile
  return acc;
}

LayerCost conv_cost_mem(const ConvDimsSpec& d, const MemModelConfig& mem) {
  LayerCost c = conv_cost(d.cin, d.cout, d.kh, d.kw, d.hout, d.wout);
  c.acc = count_mem_accesses(d, mem);
  return c;
}

double energy(const std::array<double, 3>& acc, double macs,
              const EnergyParams& params) {
  params.validate();
  double e = macs * params.e_mac;
  for (int i = 0; i < 3; ++i) e += acc[i] * params.e[i];
  return e;
}

double energy(const LayerCost& cost, const EnergyParams& params) {
  return energy(cost.acc, static_cast<double>(cost.macs), params);
}

CostMetric parse_metric(const std::string& name) {
  if (name == "uniform") return CostMetric::uniform;
  if (name == "flops") return CostMetric::flops;
  if (name == "energy") return CostMetric::energy;
  fail<ConfigError>("unknown cost metric '", name,
                    "' (expected uniform, flops, or energy)");
}

std::string metric_name(CostMetric m) {
  switch (m) {
    case CostMetric::uniform: return "uniform";
    case CostMetric::flops: return "flops";
    case CostMetric::energy: return "energy";
  }
  return "?";
}

double CostLedger::mean_gated_block_flops() const {
  double total = 0.0;
  int n = 0;
  for (const auto& b : blocks) {
    if (!b.gated) continue;
    total += static_cast<double>(b.uncond.flops + b.cond.flops);
    ++n;
  }
  DDI_CHECK_T(ModelError, n > 0, "ledger has no gated units");
  return total / n;
}

double CostLedger::value(const LayerCost& c, CostMetric m) const {
  switch (m) {
    case CostMetric::flops: return static_cast<double>(c.flops);
    case CostMetric::energy: return energy(c, eparams);
    case CostMetric::uniform: return static_cast<double>(c.flops) / mean_gated_block_flops();
  }
  return 0.0;
}

double CostLedger::block_total_value(int unit, CostMetric m) const {
  const BlockCost& b = blocks.at(unit);
  if (m == CostMetric::uniform) {
    if (b.gated) return 1.0;
    return value(b.uncond, m);
  }
  LayerCost sum = b.uncond;
  sum += b.cond;
  return value(sum, m);
}

double CostLedger::block_uncond_value(int unit, CostMetric m) const {
  const BlockCost& b = blocks.at(unit);
  if (m == CostMetric::uniform && b.gated) {
    double total = static_cast<double>(b.uncond.flops + b.cond.flops);
    return total > 0.0 ? static_cast<double>(b.uncond.flops) / total : 0.0;
  }
  return value(b.uncond, m);
}

double CostLedger::block_channel_share_value(int unit, CostMetric m) const {
  const BlockCost& b = blocks.at(unit);
  DDI_CHECK_T(ModelError, b.gated && b.k > 0, "unit ", unit,
              " has no channel-divisible cost");
  if (m == CostMetric::uniform) {
    double total = static_cast<double>(b.uncond.flops + b.cond.flops);
    return total > 0.0
               ? static_cast<double>(b.cond.flops) / total / static_cast<double>(b.k)
               : 0.0;
  }
  return value(b.cond, m) / static_cast<double>(b.k);
}

double CostLedger::layer_gate_value(int unit, CostMetric m) const {
  const BlockCost& b = blocks.at(unit);
  if (m == CostMetric::uniform) {
    // Gate overhead in uniform units is measured against its own block.
    double total = static_cast<double>(b.uncond.flops + b.cond.flops);
    return total > 0.0 ? static_cast<double>(b.layer_gate.flops) / total : 0.0;
  }
  return value(b.layer_gate, m);
}

double CostLedger::channel_gate_value(int unit, CostMetric m) const {
  const BlockCost& b = blocks.at(unit);
  if (m == CostMetric::uniform) {
    double total = static_cast<double>(b.uncond.flops + b.cond.flops);
    return total > 0.0 ? static_cast<double>(b.channel_gate.flops) / total : 0.0;
  }
  return value(b.channel_gate, m);
}

double CostLedger::branch_value(int i, CostMetric m) const {
  return value(branch.at(i), m);
}

double CostLedger::stem_value(CostMetric m) const { return value(stem, m); }
double CostLedger::head_value(CostMetric m) const { return value(head, m); }

double CostLedger::vanilla_total(CostMetric m) const {
  double total = stem_value(m) + head_value(m);
  for (size_t i = 0; i < blocks.size(); ++i)
    total += block_total_value(static_cast<int>(i), m);
  return total;
}

Tensor expected_cost(const std::vector<SoftGateValues>& gates,
                     const CostLedger& ledger, CostMetric metric) {
  std::vector<const BlockCost*> gated;
  for (const auto& b : ledger.blocks)
    if (b.gated) gated.push_back(&b);
  DDI_CHECK_T(ModelError, gates.size() == gated.size(),
              "expected_cost: ", gates.size(), " soft gate entries for ",
              gated.size(), " gated units in the ledger");

  Tensor total;
  for (size_t i = 0; i < gates.size(); ++i) {
    const SoftGateValues& g = gates[i];
    const BlockCost& b = *gated[i];
    DDI_CHECK_T(ModelError, g.unit_id == b.unit_id,
                "expected_cost: gate entry for unit ", g.unit_id,
                " paired with ledger unit ", b.unit_id);
    DDI_CHECK(g.soft_layer.rank() == 2 && g.soft_layer.dim(1) == 1,
              "expected_cost: soft layer values must be [N,1], got ",
              shape_str(g.soft_layer.shape()));
    DDI_CHECK(g.soft_channels.rank() == 2 && g.soft_channels.dim(1) == b.k,
              "expected_cost: unit ", b.unit_id, " expects ", b.k,
              " channel values, got ", shape_str(g.soft_channels.shape()));
    int n = g.soft_layer.dim(0);
    float inv_n = 1.f / static_cast<float>(n);
    double uncond = ledger.block_uncond_value(b.unit_id, metric);
    double share = ledger.block_channel_share_value(b.unit_id, metric);

    Tensor layer_term =
        scale(sum_all(g.soft_layer), static_cast<float>(uncond) * inv_n);
    Tensor joint = mul(broadcast_cols(g.soft_layer, b.k), g.soft_channels);
    Tensor channel_term =
        scale(sum_all(joint), static_cast<float>(share) * inv_n);
    Tensor block_term = add(layer_term, channel_term);
    total = total.defined() ? add(total, block_term) : block_term;
  }
  return total;
}

DynamicCostBreakdown dynamic_cost_breakdown(const SkipTrace& trace,
                                            const CostLedger& ledger,
                                            CostMetric metric) {
  DDI_CHECK_T(ModelError, trace.blocks.size() == ledger.blocks.size(),
              "dynamic_cost: trace has ", trace.blocks.size(),
              " units, ledger has ", ledger.blocks.size());
  DDI_CHECK_T(ModelError, trace.branch_evaluated.size() <= ledger.branch.size(),
              "dynamic_cost: trace refers to more branches than the ledger holds");

  DynamicCostBreakdown out;
  out.stem = ledger.stem_value(metric);
  out.head = trace.final_head_evaluated ? ledger.head_value(metric) : 0.0;
  out.per_block.resize(trace.blocks.size(), 0.0);
  for (size_t i = 0; i < trace.blocks.size(); ++i) {
    const BlockTraceEntry& t = trace.blocks[i];
    const BlockCost& b = ledger.blocks[i];
    DDI_CHECK_T(ModelError, t.gated == b.gated, "dynamic_cost: unit ", i,
                " gating mismatch between trace and ledger");
    double v = 0.0;
    if (!b.gated) {
      v = ledger.block_total_value(static_cast<int>(i), metric);
    } else {
      v += ledger.layer_gate_value(static_cast<int>(i), metric);
      if (t.layer_bit) {
        DDI_CHECK_T(ModelError,
                    static_cast<int>(t.channel_bits.size()) == b.k,
                    "dynamic_cost: unit ", i, " trace has ",
                    t.channel_bits.size(), " channel bits, ledger expects ", b.k);
        v += ledger.channel_gate_value(static_cast<int>(i), metric);
        v += ledger.block_uncond_value(static_cast<int>(i), metric);
        int open = 0;
        for (uint8_t bit : t.channel_bits) open += bit ? 1 : 0;
        v += ledger.block_channel_share_value(static_cast<int>(i), metric) * open;
      }
    }
    out.per_block[i] = v;
  }
  out.per_branch.resize(trace.branch_evaluated.size(), 0.0);
  for (size_t i = 0; i < trace.branch_evaluated.size(); ++i)
    if (trace.branch_evaluated[i])
      out.per_branch[i] = ledger.branch_value(static_cast<int>(i), metric);

  out.total = out.stem + out.head;
  for (double v : out.per_block) out.total += v;
  for (double v : out.per_branch) out.total += v;
  return out;
}

double dynamic_cost(const SkipTrace& trace, const CostLedger& ledger,
                    CostMetric metric) {
  return dynamic_cost_breakdown(trace, ledger, metric).total;
}

double overhead_ratio(GateKind gate, CanonicalBlock block) {
  if (block == CanonicalBlock::resnet34_block) {
    // Canonical stage: 64-channel 3x3 convs over 56x56 maps, two per block.
    int64_t block_flops = 2 * conv_cost(64, 64, 3, 3, 56, 56).flops;
    int64_t g = gate == GateKind::layer
                    ? gate_flops(LayerGateConfig{64, 10})
                    : gate_flops(ChannelGateConfig{
                          ChannelGateConfig::Variant::resnet, 64, 64, 56, 56});
    return static_cast<double>(g) / static_cast<double>(block_flops);
  }
  // Dense canonical: growth 12, bottleneck width 48, first dense layer of the
  // first stage (24 input channels, 32x32 maps).
  int64_t layer_flops =
      conv_cost(24, 48, 1, 1, 32, 32).flops + conv_cost(48, 12, 3, 3, 32, 32).flops;
  int64_t g = gate == GateKind::layer
                  ? gate_flops(LayerGateConfig{24, 10})
                  : gate_flops(ChannelGateConfig{
                        ChannelGateConfig::Variant::densenet, 24, 12, 32, 32});
  return static_cast<double>(g) / static_cast<double>(layer_flops);
}

nlohmann::json cost_report_json(const CostLedger& ledger, CostMetric metric,
                                const std::vector<double>* executed_fraction) {
  nlohmann::json j;
  j["metric"] = metric_name(metric);
  j["energy_params"] = {{"e_dram", ledger.eparams.e[0]},
                        {"e_cache", ledger.eparams.e[1]},
                        {"e_rf", ledger.eparams.e[2]},
                        {"e_mac", ledger.eparams.e_mac}};
  j["memory_model"] = {{"cache_bytes", ledger.mem.cache_bytes},
                       {"regfile_bytes", ledger.mem.regfile_bytes}};
  nlohmann::json blocks = nlohmann::json::array();
  LayerCost net_total;
  for (size_t i = 0; i < ledger.blocks.size(); ++i) {
    const BlockCost& b = ledger.blocks[i];
    LayerCost total = b.uncond;
    total += b.cond;
    nlohmann::json row = {
        {"id", b.unit_id},
        {"stage", b.stage},
        {"gated", b.gated},
        {"macs", total.macs},
        {"flops", total.flops},
        {"acc", {total.acc[0], total.acc[1], total.acc[2]}},
    };
    if (executed_fraction) row["executed_fraction"] = (*executed_fraction)[i];
    blocks.push_back(std::move(row));
    net_total += total;
  }
  net_total += ledger.stem;
  net_total += ledger.head;
  j["blocks"] = std::move(blocks);
  j["totals"] = {{"macs", net_total.macs},
                 {"flops", net_total.flops},
                 {"acc", {net_total.acc[0], net_total.acc[1], net_total.acc[2]}},
                 {"vanilla_metric_value", ledger.vanilla_total(metric)}};
  return j;
}

}  // namespace ddi
