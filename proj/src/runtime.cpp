#include "ddi/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "ddi/errors.hpp"
#include "ddi/gating.hpp"
#include "ddi/ops.hpp"

namespace ddi {

namespace {

// Charge accumulator shaped like the cost model's trace breakdown so that a
// full pass folds to dynamic_cost(trace) bitwise: same slots, same
// accumulation order, same final summation order.
struct ChargeSheet {
  double stem = 0.0, head = 0.0;
  std::vector<double> per_block;
  std::vector<double> per_branch;

  double fold() const {
    double total = stem + head;
    for (double v : per_block) total += v;
    for (double v : per_branch) total += v;
    return total;
  }
};

std::vector<float> logits_row(const Tensor& logits) {
  DDI_CHECK(logits.rank() == 2 && logits.dim(0) == 1,
            "expected single-sample logits, got ", logits.dim(0), " rows");
  DDI_CHECK_T(ModelError, logits.all_finite(),
              "inference aborted: non-finite logits");
  const float* p = logits.data();
  return std::vector<float>(p, p + logits.dim(1));
}

int argmax_of(const std::vector<float>& row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) -
                          row.begin());
}

// One hard-gated single-sample pass under a cost ceiling. Every piece of work
// is charged before it runs; the first piece that does not fit halts the
// walk. stop_after_first_branch turns the pass into a feasibility probe.
InferenceResult run_hard(DDINetwork& net, const Tensor& input,
                         const CostLedger& ledger, CostMetric metric,
                         double limit, bool stop_after_first_branch) {
  const ArchConfig& cfg = net.config();
  DDI_CHECK(input.rank() == 4 && input.dim(0) == 1 &&
                input.dim(1) == cfg.in_channels &&
                input.dim(2) == cfg.image_size &&
                input.dim(3) == cfg.image_size,
            "adaptive inference expects one [1,", cfg.in_channels, ",",
            cfg.image_size, ",", cfg.image_size, "] sample, got ",
            shape_str(input.shape()));
  DDI_CHECK_T(ModelError, input.all_finite(),
              "inference aborted: non-finite input");

  NoGradGuard ng;
  const auto& units = net.units();
  const auto& branches = net.branches();
  int n_branches = static_cast<int>(branches.size());

  InferenceResult res;
  res.exit_logits.assign(n_branches + 1, {});
  res.trace.branch_evaluated.assign(n_branches, 0);

  ChargeSheet sheet;
  sheet.per_block.assign(units.size(), 0.0);
  sheet.per_branch.assign(n_branches, 0.0);

  // Applies `add` to `slot` and keeps it only if the folded total still fits.
  auto charge = [&](double& slot, double add) {
    double saved = slot;
    slot += add;
    if (sheet.fold() > limit) {
      slot = saved;
      return false;
    }
    return true;
  };

  int latest_branch = -1;
  bool halted = !charge(sheet.stem, ledger.stem_value(metric));
  Tensor f;
  LayerGate::State state;
  if (!halted) {
    f = net.stem_forward(input, false);
    state = net.gate_initial_state(1);
  }

  size_t next_branch = 0;
  for (size_t i = 0; i < units.size() && !halted; ++i) {
    const Unit& u = units[i];
    BlockTraceEntry entry;
    entry.unit_id = static_cast<int>(i);
    entry.gated = u.gated();

    if (!u.gated()) {
      if (!charge(sheet.per_block[i], ledger.block_total_value(
                                          static_cast<int>(i), metric))) {
        halted = true;
        break;
      }
      f = net.unit_hard_forward(static_cast<int>(i), f, 1, {});
    } else {
      if (!charge(sheet.per_block[i],
                  ledger.layer_gate_value(static_cast<int>(i), metric))) {
        halted = true;
        break;
      }
      auto stepped = net.gate_step(static_cast<int>(i), f, state);
      state = stepped.second;
      float soft = stepped.first.data()[0];
      entry.layer_bit = binarize(soft);
      entry.soft_layer = soft;
      entry.channel_bits.assign(u.k, 0);
      if (entry.layer_bit) {
        if (!charge(sheet.per_block[i],
                    ledger.channel_gate_value(static_cast<int>(i), metric))) {
          halted = true;
          break;
        }
        Tensor soft_c = net.channel_gate_forward(static_cast<int>(i), f);
        entry.channel_gate_evaluated = true;
        int open = 0;
        for (int c = 0; c < u.k; ++c) {
          entry.channel_bits[c] = binarize(soft_c.data()[c]);
          open += entry.channel_bits[c] ? 1 : 0;
        }
        // Mirror the cost model's per-unit accumulation order exactly:
        // unconditional part, then the per-channel share times open count.
        double saved = sheet.per_block[i];
        sheet.per_block[i] +=
            ledger.block_uncond_value(static_cast<int>(i), metric);
        sheet.per_block[i] +=
            ledger.block_channel_share_value(static_cast<int>(i), metric) *
            open;
        if (sheet.fold() > limit) {
          sheet.per_block[i] = saved;
          halted = true;
          break;
        }
        f = net.unit_hard_forward(static_cast<int>(i), f, 1,
                                  entry.channel_bits);
      } else {
        // Closed layer gate: channel gate short-circuited, body skipped,
        // bitwise passthrough.
        f = net.unit_hard_forward(static_cast<int>(i), f, 0,
                                  entry.channel_bits);
      }
    }
    DDI_CHECK_T(ModelError, f.all_finite(),
                "inference aborted: non-finite features after unit ", i);
    res.trace.blocks.push_back(std::move(entry));

    while (next_branch < branches.size() &&
           branches[next_branch].after_unit == static_cast<int>(i)) {
      int b = static_cast<int>(next_branch);
      if (!charge(sheet.per_branch[b], ledger.branch_value(b, metric))) {
        halted = true;
        break;
      }
      res.exit_logits[b] = logits_row(net.branch_forward(b, f));
      res.trace.branch_evaluated[b] = 1;
      latest_branch = b;
      ++next_branch;
      if (stop_after_first_branch) {
        res.exit_index = b;
        res.predicted = argmax_of(res.exit_logits[b]);
        res.realized_cost = sheet.fold();
        return res;
      }
    }
  }

  if (!halted && charge(sheet.head, ledger.head_value(metric))) {
    res.exit_logits[n_branches] = logits_row(net.head_forward(f));
    res.trace.final_head_evaluated = true;
    res.exit_index = n_branches;
  } else {
    res.exit_index = latest_branch;  // -1 signals infeasible to the caller
  }
  if (res.exit_index >= 0)
    res.predicted = argmax_of(res.exit_logits[res.exit_index]);
  res.realized_cost = sheet.fold();
  return res;
}

}  // namespace

void Budget::validate() const {
  DDI_CHECK_T(ConfigError, metric == CostMetric::flops ||
                               metric == CostMetric::energy,
              "budget metric must be flops or energy, got ",
              metric_name(metric));
  DDI_CHECK_T(ConfigError, limit > 0.0, "budget limit must be positive, got ",
              limit);
}

InferenceResult adaptive_infer(DDINetwork& net, const Tensor& input,
                               const CostLedger& ledger, CostMetric metric) {
  return run_hard(net, input, ledger, metric,
                  std::numeric_limits<double>::infinity(), false);
}

InferenceResult budgeted_infer(DDINetwork& net, const Tensor& input,
                               const CostLedger& ledger, const Budget& budget) {
  budget.validate();
  DDI_CHECK_T(ConfigError, !net.branches().empty(),
              "budgeted inference needs at least one early-exit branch");
  InferenceResult res =
      run_hard(net, input, ledger, budget.metric, budget.limit, false);
  if (res.exit_index >= 0) return res;
  // Not even the first branch fit. Re-walk unconstrained up to that branch;
  // the cost charged through its evaluation is the minimum feasible budget
  // for this sample (gating decisions do not depend on the limit).
  InferenceResult probe =
      run_hard(net, input, ledger, budget.metric,
               std::numeric_limits<double>::infinity(), true);
  std::ostringstream os;
  os << "budget " << budget.limit << " " << metric_name(budget.metric)
     << " cannot reach the first exit; this sample needs at least "
     << probe.realized_cost;
  throw BudgetInfeasible(os.str(), probe.realized_cost);
}

Difficulty classify_difficulty(const InferenceResult& result) {
  DDI_CHECK_T(ConfigError, !result.trace.blocks.empty(),
              "difficulty classification needs a populated trace");
  double ratio = result.trace.skip_ratio();
  if (ratio > 0.60) return Difficulty::easy;
  if (ratio < 0.40) return Difficulty::hard;
  return Difficulty::medium;
}

std::string difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::medium: return "medium";
    case Difficulty::hard: return "hard";
  }
  fail<ConfigError>("unknown difficulty value");
}

std::string SkipReport::to_csv() const {
  std::ostringstream os;
  os << "block_id,stage,frequency\n";
  for (const auto& r : rows) {
    os << r.block_id << ',' << r.stage << ',';
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", r.frequency);
    os << buf << '\n';
  }
  return os.str();
}

std::string SkipReport::summary_json() const {
  nlohmann::json j{{"samples", samples},
                   {"metric", metric_name(metric)},
                   {"mean_skip", mean_skip},
                   {"mean_cost", mean_cost},
                   {"vanilla_cost", vanilla_cost},
                   {"savings", savings},
                   {"easy_count", easy_indices.size()},
                   {"hard_count", hard_indices.size()},
                   {"medium_count", samples - static_cast<int>(easy_indices.size()) -
                                        static_cast<int>(hard_indices.size())}};
  return j.dump(2) + "\n";
}

SkipReport skip_pattern_report(DDINetwork& net, const Dataset& ds,
                               const NormStats& stats, const CostLedger& ledger,
                               CostMetric metric, int batch_size) {
  DDI_CHECK_T(DataError, ds.size() > 0, "skip report over an empty dataset");
  DDI_CHECK_T(ConfigError, batch_size >= 1, "batch size must be positive");

  const auto& units = net.units();
  SkipReport rep;
  rep.metric = metric;
  rep.rows.resize(units.size());
  for (size_t i = 0; i < units.size(); ++i) {
    rep.rows[i].block_id = static_cast<int>(i);
    rep.rows[i].stage = units[i].stage;
    rep.rows[i].gated = units[i].gated();
  }
  std::vector<int64_t> exec_count(units.size(), 0);

  BatchIterator it(ds, stats, std::min<int>(batch_size, static_cast<int>(ds.size())),
                   false, 0, Augment::none);
  Batch batch;
  double cost_sum = 0.0, skip_sum = 0.0;
  rep.per_sample_skip.resize(ds.size(), 0.0);
  while (it.next(batch)) {
    auto res = net.full_forward(batch.images, ForwardMode::hard, false);
    for (size_t s = 0; s < res.traces.size(); ++s) {
      const SkipTrace& t = res.traces[s];
      for (size_t i = 0; i < t.blocks.size(); ++i)
        exec_count[i] += t.blocks[i].gated ? (t.blocks[i].layer_bit ? 1 : 0) : 1;
      double ratio = t.skip_ratio();
      int64_t idx = batch.indices[s];
      rep.per_sample_skip[idx] = ratio;
      skip_sum += ratio;
      cost_sum += dynamic_cost(t, ledger, metric);
      if (ratio > 0.60)
        rep.easy_indices.push_back(static_cast<int>(idx));
      else if (ratio < 0.40)
        rep.hard_indices.push_back(static_cast<int>(idx));
      ++rep.samples;
    }
  }
  std::sort(rep.easy_indices.begin(), rep.easy_indices.end());
  std::sort(rep.hard_indices.begin(), rep.hard_indices.end());
  for (size_t i = 0; i < units.size(); ++i)
    rep.rows[i].frequency =
        static_cast<double>(exec_count[i]) / static_cast<double>(rep.samples);
  rep.mean_skip = skip_sum / rep.samples;
  rep.mean_cost = cost_sum / rep.samples;
  rep.vanilla_cost = ledger.vanilla_total(metric);
  rep.savings = 1.0 - rep.mean_cost / rep.vanilla_cost;
  return rep;
}

}  // namespace ddi
