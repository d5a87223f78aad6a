#include "ddi/runtime.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "ddi/costmodel.hpp"
#include "ddi/data.hpp"
#include "ddi/errors.hpp"
#include "ddi/gating.hpp"

using namespace ddi;

namespace {

void fill_param(const ParamList& ps, const std::string& name, float v) {
  for (const auto& p : ps) {
    if (p->name != name) continue;
    std::fill(p->value.vec().begin(), p->value.vec().end(), v);
    return;
  }
  REQUIRE(false);
}

// Saturate every gate: +bias opens, -bias closes.
void force_all_gates(DDINetwork& net, float bias) {
  fill_param(net.gate_params(), "gate.layer.head.weight", 0.f);
  fill_param(net.gate_params(), "gate.layer.head.bias", bias);
  for (const auto& p : net.gate_params()) {
    if (p->name.rfind("gate.channel.", 0) != 0) continue;
    if (p->name.ends_with(".fc.bias"))
      std::fill(p->value.vec().begin(), p->value.vec().end(), bias);
    if (p->name.ends_with(".fc.weight"))
      std::fill(p->value.vec().begin(), p->value.vec().end(), 0.f);
  }
}

// Two-stage net: units {gated, gated, transition, gated}; one branch per
// stage (after unit 0 and unit 2), so exits are {0, 1, head = 2}.
ArchConfig two_stage_arch() {
  ArchConfig cfg;
  cfg.kind = BackboneKind::resnet;
  cfg.blocks_per_stage = {2, 2};
  cfg.widths = {8, 16};
  cfg.num_classes = 2;
  cfg.in_channels = 1;
  cfg.image_size = 16;
  return cfg;
}

DDINetwork make_net(uint64_t seed = 42) {
  Rng rng(seed);
  return DDINetwork(two_stage_arch(), rng);
}

struct Fixture {
  Dataset ds;
  NormStats stats;
  Fixture() : ds(synthetic_easy_hard(64, 5)), stats(compute_norm_stats(ds)) {}

  // Normalized [1,C,H,W] tensor for sample `idx`.
  Tensor sample(int64_t idx) const {
    Dataset one = subset(ds, {idx});
    BatchIterator it(one, stats, 1, false, 0, Augment::none);
    Batch b;
    REQUIRE(it.next(b));
    return b.images;
  }
};

CostLedger make_ledger(const DDINetwork& net) {
  return build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
}

bool traces_equal(const SkipTrace& a, const SkipTrace& b) {
  if (a.blocks.size() != b.blocks.size()) return false;
  for (size_t i = 0; i < a.blocks.size(); ++i) {
    const auto& x = a.blocks[i];
    const auto& y = b.blocks[i];
    if (x.unit_id != y.unit_id || x.gated != y.gated ||
        x.layer_bit != y.layer_bit ||
        x.channel_gate_evaluated != y.channel_gate_evaluated ||
        x.channel_bits != y.channel_bits)
      return false;
  }
  return a.branch_evaluated == b.branch_evaluated &&
         a.final_head_evaluated == b.final_head_evaluated;
}

// Hand-built full-execution trace with `closed` of 100 gated k=1 units
// layer-closed; skip_ratio is then closed/100 exactly.
InferenceResult synthetic_result(int closed) {
  InferenceResult res;
  for (int i = 0; i < 100; ++i) {
    BlockTraceEntry e;
    e.unit_id = i;
    e.gated = true;
    e.layer_bit = i < closed ? 0 : 1;
    e.channel_gate_evaluated = e.layer_bit != 0;
    e.channel_bits.assign(1, e.layer_bit);
    res.trace.blocks.push_back(std::move(e));
  }
  return res;
}

}  // namespace

TEST_CASE("adaptive inference matches batched hard execution and its price") {
  Fixture fx;
  DDINetwork net = make_net(3);
  force_all_gates(net, 6.f);
  CostLedger ledger = make_ledger(net);
  Tensor x = fx.sample(0);

  InferenceResult res = adaptive_infer(net, x, ledger, CostMetric::flops);

  // All gates open, infinite budget: every unit, branch, and the head ran.
  CHECK(res.exit_index == static_cast<int>(net.branches().size()));
  CHECK(res.trace.blocks.size() == net.units().size());
  CHECK(res.trace.final_head_evaluated);
  for (uint8_t b : res.trace.branch_evaluated) CHECK(b == 1);
  CHECK(static_cast<int>(res.exit_logits.size()) == net.num_exits());
  for (const auto& row : res.exit_logits) CHECK(row.size() == 2);
  CHECK(res.trace.skip_ratio() == 0.0);

  // Realized cost must reproduce the cost model's valuation of the trace
  // bitwise: the runtime charges through the same slots in the same order.
  CHECK(res.realized_cost == dynamic_cost(res.trace, ledger, CostMetric::flops));
  CHECK(res.realized_cost > ledger.vanilla_total(CostMetric::flops));

  // The incremental single-sample walk must agree with the batched hard path.
  auto full = net.full_forward(x, ForwardMode::hard, false);
  REQUIRE(full.traces.size() == 1);
  CHECK(traces_equal(res.trace, full.traces[0]));
  for (size_t e = 0; e < res.exit_logits.size(); ++e) {
    const float* ref = full.exit_logits[e].data();
    for (size_t j = 0; j < res.exit_logits[e].size(); ++j)
      CHECK(res.exit_logits[e][j] == doctest::Approx(ref[j]).epsilon(1e-6));
  }
  CHECK(res.predicted ==
        static_cast<int>(std::max_element(
                             full.exit_logits.back().data(),
                             full.exit_logits.back().data() + 2) -
                         full.exit_logits.back().data()));

  // Deterministic: a second pass is identical in every observable.
  InferenceResult again = adaptive_infer(net, x, ledger, CostMetric::flops);
  CHECK(again.predicted == res.predicted);
  CHECK(again.exit_index == res.exit_index);
  CHECK(again.realized_cost == res.realized_cost);
  CHECK(traces_equal(again.trace, res.trace));
  CHECK(again.exit_logits == res.exit_logits);
}

TEST_CASE("closed gates skip every gated unit and still price exactly") {
  Fixture fx;
  DDINetwork net = make_net(4);
  CostLedger ledger = make_ledger(net);
  Tensor x = fx.sample(1);

  force_all_gates(net, 6.f);
  InferenceResult open = adaptive_infer(net, x, ledger, CostMetric::energy);

  force_all_gates(net, -6.f);
  InferenceResult res = adaptive_infer(net, x, ledger, CostMetric::energy);

  CHECK(res.trace.skip_ratio() == 1.0);
  for (const auto& b : res.trace.blocks) {
    if (!b.gated) continue;
    CHECK(b.layer_bit == 0);
    CHECK_FALSE(b.channel_gate_evaluated);
    CHECK(std::all_of(b.channel_bits.begin(), b.channel_bits.end(),
                      [](uint8_t c) { return c == 0; }));
  }
  CHECK(res.realized_cost ==
        dynamic_cost(res.trace, ledger, CostMetric::energy));
  // Skipping three of four unit bodies must be strictly cheaper.
  CHECK(res.realized_cost < open.realized_cost);
  CHECK(classify_difficulty(res) == Difficulty::easy);
  CHECK(classify_difficulty(open) == Difficulty::hard);
}

TEST_CASE("budget sweep: feasibility, monotone exits, anytime consistency") {
  Fixture fx;
  DDINetwork net = make_net(5);
  force_all_gates(net, 6.f);
  CostLedger ledger = make_ledger(net);
  Tensor x = fx.sample(2);

  InferenceResult adaptive = adaptive_infer(net, x, ledger, CostMetric::flops);
  double full_cost = adaptive.realized_cost;

  // Below the first exit's cost the budget is infeasible, and the error
  // carries the exact minimum.
  double min_b = 0.0;
  try {
    budgeted_infer(net, x, ledger, Budget{CostMetric::flops, 1.0});
    REQUIRE(false);
  } catch (const BudgetInfeasible& e) {
    min_b = e.min_feasible_budget;
    CHECK(std::string(e.what()).find("cannot reach the first exit") !=
          std::string::npos);
  }
  CHECK(min_b > 0.0);
  CHECK(min_b < full_cost);

  // Exactly the minimum feasible budget reaches exit 0 and spends all of it.
  InferenceResult at_min =
      budgeted_infer(net, x, ledger, Budget{CostMetric::flops, min_b});
  CHECK(at_min.exit_index == 0);
  CHECK(at_min.realized_cost == min_b);
  CHECK(at_min.predicted >= 0);
  CHECK(at_min.exit_logits[0].size() == 2);
  CHECK(at_min.exit_logits[1].empty());
  CHECK(at_min.exit_logits[2].empty());
  CHECK_FALSE(at_min.trace.final_head_evaluated);

  // A hair below it: infeasible again, same reported minimum.
  CHECK_THROWS_AS(budgeted_infer(net, x, ledger,
                                 Budget{CostMetric::flops,
                                        min_b * (1.0 - 1e-12)}),
                  BudgetInfeasible);

  // Sweep from the minimum to beyond the full cost: never overspends, exits
  // only move later as the budget grows.
  int prev_exit = -1;
  for (int i = 0; i < 20; ++i) {
    double limit = min_b + (full_cost * 1.01 - min_b) * i / 19.0;
    InferenceResult r =
        budgeted_infer(net, x, ledger, Budget{CostMetric::flops, limit});
    CHECK(r.realized_cost <= limit);
    CHECK(r.exit_index >= prev_exit);
    prev_exit = r.exit_index;
  }
  CHECK(prev_exit == static_cast<int>(net.branches().size()));

  // Anytime consistency: an unconstrained budget reproduces adaptive mode.
  InferenceResult unbounded = budgeted_infer(
      net, x, ledger,
      Budget{CostMetric::flops, std::numeric_limits<double>::infinity()});
  CHECK(unbounded.predicted == adaptive.predicted);
  CHECK(unbounded.exit_index == adaptive.exit_index);
  CHECK(unbounded.realized_cost == adaptive.realized_cost);
  CHECK(traces_equal(unbounded.trace, adaptive.trace));
  CHECK(unbounded.exit_logits == adaptive.exit_logits);
}

TEST_CASE("budget and input validation") {
  Fixture fx;
  DDINetwork net = make_net(6);
  CostLedger ledger = make_ledger(net);
  Tensor x = fx.sample(3);

  CHECK_THROWS_AS((Budget{CostMetric::uniform, 10.0}.validate()), ConfigError);
  CHECK_THROWS_AS((Budget{CostMetric::flops, 0.0}.validate()), ConfigError);
  CHECK_THROWS_AS((Budget{CostMetric::energy, -1.0}.validate()), ConfigError);

  CHECK_THROWS_AS(budgeted_infer(net, x, ledger,
                                 Budget{CostMetric::uniform, 10.0}),
                  ConfigError);

  // Batched input is rejected: the adaptive path is strictly single-sample.
  Tensor batch2(Shape{2, 1, 16, 16});
  CHECK_THROWS_AS(adaptive_infer(net, batch2, ledger, CostMetric::flops),
                  ShapeError);
  Tensor bad_hw(Shape{1, 1, 8, 8});
  CHECK_THROWS_AS(adaptive_infer(net, bad_hw, ledger, CostMetric::flops),
                  ShapeError);

  Tensor poisoned(Shape{1, 1, 16, 16});
  poisoned.data()[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(adaptive_infer(net, poisoned, ledger, CostMetric::flops),
                  ModelError);
}

TEST_CASE("difficulty classification thresholds") {
  CHECK(classify_difficulty(synthetic_result(61)) == Difficulty::easy);
  CHECK(classify_difficulty(synthetic_result(100)) == Difficulty::easy);
  CHECK(classify_difficulty(synthetic_result(39)) == Difficulty::hard);
  CHECK(classify_difficulty(synthetic_result(0)) == Difficulty::hard);
  CHECK(classify_difficulty(synthetic_result(50)) == Difficulty::medium);
  // Both thresholds are exclusive: the boundary values are medium.
  CHECK(classify_difficulty(synthetic_result(60)) == Difficulty::medium);
  CHECK(classify_difficulty(synthetic_result(40)) == Difficulty::medium);

  CHECK_THROWS_AS(classify_difficulty(InferenceResult{}), ConfigError);

  CHECK(difficulty_name(Difficulty::easy) == "easy");
  CHECK(difficulty_name(Difficulty::medium) == "medium");
  CHECK(difficulty_name(Difficulty::hard) == "hard");
}

TEST_CASE("skip report aggregates hard-gate activity over a dataset") {
  Fixture fx;
  DDINetwork net = make_net(7);
  CostLedger ledger = make_ledger(net);

  SkipReport rep =
      skip_pattern_report(net, fx.ds, fx.stats, ledger, CostMetric::flops, 16);

  REQUIRE(rep.rows.size() == net.units().size());
  CHECK(rep.samples == fx.ds.size());
  CHECK(rep.per_sample_skip.size() == static_cast<size_t>(fx.ds.size()));
  CHECK(rep.metric == CostMetric::flops);

  // Recompute every aggregate independently with the batched hard path,
  // walking batches in the same order.
  std::vector<int64_t> exec(net.units().size(), 0);
  double cost_sum = 0.0, skip_sum = 0.0;
  BatchIterator it(fx.ds, fx.stats, 16, false, 0, Augment::none);
  Batch b;
  while (it.next(b)) {
    auto full = net.full_forward(b.images, ForwardMode::hard, false);
    for (size_t s = 0; s < full.traces.size(); ++s) {
      const SkipTrace& t = full.traces[s];
      for (size_t i = 0; i < t.blocks.size(); ++i)
        exec[i] += t.blocks[i].gated ? (t.blocks[i].layer_bit ? 1 : 0) : 1;
      CHECK(rep.per_sample_skip[b.indices[s]] == t.skip_ratio());
      skip_sum += t.skip_ratio();
      cost_sum += dynamic_cost(t, ledger, CostMetric::flops);
    }
  }
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    CHECK(rep.rows[i].block_id == static_cast<int>(i));
    CHECK(rep.rows[i].stage == net.units()[i].stage);
    CHECK(rep.rows[i].gated == net.units()[i].gated());
    CHECK(rep.rows[i].frequency ==
          static_cast<double>(exec[i]) / static_cast<double>(rep.samples));
    CHECK(rep.rows[i].frequency >= 0.0);
    CHECK(rep.rows[i].frequency <= 1.0);
    if (!rep.rows[i].gated) CHECK(rep.rows[i].frequency == 1.0);
  }
  CHECK(rep.mean_skip == skip_sum / rep.samples);
  CHECK(rep.mean_cost == cost_sum / rep.samples);
  CHECK(rep.vanilla_cost == ledger.vanilla_total(CostMetric::flops));
  CHECK(rep.savings == 1.0 - rep.mean_cost / rep.vanilla_cost);

  // Easy/hard partitions: disjoint, sorted, and consistent with the
  // per-sample ratios.
  std::vector<int> overlap;
  std::set_intersection(rep.easy_indices.begin(), rep.easy_indices.end(),
                        rep.hard_indices.begin(), rep.hard_indices.end(),
                        std::back_inserter(overlap));
  CHECK(overlap.empty());
  CHECK(std::is_sorted(rep.easy_indices.begin(), rep.easy_indices.end()));
  CHECK(std::is_sorted(rep.hard_indices.begin(), rep.hard_indices.end()));
  for (int idx : rep.easy_indices) CHECK(rep.per_sample_skip[idx] > 0.60);
  for (int idx : rep.hard_indices) CHECK(rep.per_sample_skip[idx] < 0.40);

  // Serialized forms are stable and shaped as promised.
  std::string csv = rep.to_csv();
  CHECK(csv == rep.to_csv());
  CHECK(rep.summary_json() == rep.summary_json());
  size_t lines = static_cast<size_t>(
      std::count(csv.begin(), csv.end(), '\n'));
  CHECK(lines == rep.rows.size() + 1);
  CHECK(csv.rfind("block_id,stage,frequency\n", 0) == 0);
  auto j = nlohmann::json::parse(rep.summary_json());
  CHECK(j["samples"].get<int>() == rep.samples);
  CHECK(j["metric"].get<std::string>() == "flops");
  CHECK(j["easy_count"].get<int>() + j["hard_count"].get<int>() +
            j["medium_count"].get<int>() ==
        rep.samples);

  // Saturated gates drive the aggregates to their extremes.
  force_all_gates(net, -6.f);
  SkipReport closed =
      skip_pattern_report(net, fx.ds, fx.stats, ledger, CostMetric::flops, 16);
  CHECK(closed.mean_skip == 1.0);
  CHECK(closed.easy_indices.size() == static_cast<size_t>(fx.ds.size()));
  for (const auto& r : closed.rows)
    CHECK(r.frequency == (r.gated ? 0.0 : 1.0));
  CHECK(closed.savings > 0.0);

  Dataset empty;
  CHECK_THROWS_AS(skip_pattern_report(net, empty, fx.stats, ledger,
                                      CostMetric::flops, 16),
                  DataError);
  CHECK_THROWS_AS(skip_pattern_report(net, fx.ds, fx.stats, ledger,
                                      CostMetric::flops, 0),
                  ConfigError);
}
