#include "ddi/training.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "ddi/errors.hpp"
#include "ddi/ops.hpp"
#include "ddi/optim.hpp"

using namespace ddi;

namespace {

std::shared_ptr<Parameter> find_param(const ParamList& ps,
                                      const std::string& name) {
  for (const auto& p : ps)
    if (p->name == name) return p;
  return nullptr;
}

void fill_param(const ParamList& ps, const std::string& name, float v) {
  auto p = find_param(ps, name);
  REQUIRE(p != nullptr);
  std::fill(p->value.vec().begin(), p->value.vec().end(), v);
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

// Single-stage grayscale net sized for the synthetic 16x16 task.
ArchConfig tiny_arch() {
  ArchConfig cfg;
  cfg.kind = BackboneKind::resnet;
  cfg.blocks_per_stage = {2};
  cfg.widths = {8};
  cfg.num_classes = 2;
  cfg.in_channels = 1;
  cfg.image_size = 16;
  return cfg;
}

DDINetwork make_net(uint64_t seed = 42) {
  Rng rng(seed);
  return DDINetwork(tiny_arch(), rng);
}

struct Fixture {
  Dataset train;
  Dataset test;
  NormStats stats;

  Fixture() {
    train = synthetic_easy_hard(512, 11);
    test = synthetic_easy_hard(256, 12);
    stats = compute_norm_stats(train);
  }
};

TrainConfig base_cfg() {
  TrainConfig cfg;
  cfg.lr = 0.05f;
  cfg.momentum = 0.9f;
  cfg.weight_decay = 1e-4f;
  cfg.batch_size = 32;
  cfg.alpha_magnitude = 2e-4f;
  cfg.target_skip_ratio = 0.5f;
  cfg.seed = 7;
  return cfg;
}

std::vector<std::vector<float>> snapshot(const ParamList& ps) {
  std::vector<std::vector<float>> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(p->value.vec());
  return out;
}

bool identical(const ParamList& ps, const std::vector<std::vector<float>>& snap) {
  if (ps.size() != snap.size()) return false;
  for (size_t i = 0; i < ps.size(); ++i)
    if (ps[i]->value.vec() != snap[i]) return false;
  return true;
}

double mean_hard_skip(DDINetwork& net, const Dataset& data,
                      const NormStats& stats) {
  BatchIterator it(data, stats, 64, false, 0, Augment::none);
  Batch b;
  double acc = 0.0;
  int64_t n = 0;
  while (it.next(b)) {
    auto res = net.full_forward(b.images, ForwardMode::hard, false);
    for (const auto& t : res.traces) acc += t.skip_ratio();
    n += static_cast<int64_t>(res.traces.size());
  }
  return acc / static_cast<double>(n);
}

}  // namespace

TEST_CASE("training config validation") {
  TrainConfig cfg = base_cfg();
  cfg.iterations = 10;
  CHECK_NOTHROW(cfg.validate());

  auto bad = cfg;
  bad.lr = 0.f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.momentum = 1.f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.weight_decay = -1e-4f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.alpha_magnitude = -0.1f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.target_skip_ratio = 1.5f;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.iterations = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("alpha controller follows the skip ratio") {
  AlphaController ctrl(0.5f, 0.5f);
  CHECK(ctrl.sign() == 1);
  CHECK(ctrl.current() == doctest::Approx(0.5f));

  // Below target: keep penalizing cost (positive alpha).
  CHECK(ctrl.update(0.40) == doctest::Approx(0.5f));
  CHECK(ctrl.flips() == 0);
  // Above target: reward cost (negative alpha).
  CHECK(ctrl.update(0.60) == doctest::Approx(-0.5f));
  CHECK(ctrl.flips() == 1);
  // Exactly on target: retain the previous sign.
  CHECK(ctrl.update(0.50) == doctest::Approx(-0.5f));
  CHECK(ctrl.flips() == 1);
  CHECK(ctrl.update(0.30) == doctest::Approx(0.5f));
  CHECK(ctrl.flips() == 2);
  CHECK(ctrl.sign() == 1);

  CHECK_THROWS_AS(ctrl.update(1.5), ConfigError);
  CHECK_THROWS_AS(AlphaController(-0.1f, 0.5f), ConfigError);
  CHECK_THROWS_AS(AlphaController(0.1f, 1.5f), ConfigError);
}

TEST_CASE("pretraining learns the task and steps only the backbone") {
  Fixture fx;
  DDINetwork net = make_net();
  TrainConfig cfg = base_cfg();
  cfg.iterations = 48;

  auto gates_before = snapshot(net.gate_params());
  auto branches_before = snapshot(net.branch_params());
  auto backbone_before = snapshot(net.backbone_params());

  std::vector<double> losses;
  auto res = pretrain_phase(net, fx.train, fx.stats, cfg,
                            [&](const nlohmann::json& j) {
                              CHECK(j.at("phase") == "pretrain");
                              losses.push_back(j.at("total").get<double>());
                            });

  CHECK(res.iterations_run == 48);
  CHECK(losses.size() == 48);
  CHECK(res.final_loss == doctest::Approx(losses.back()));

  // The loss trends down on this separable task.
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 8; ++i) {
    early += losses[static_cast<size_t>(i)];
    late += losses[losses.size() - 1 - static_cast<size_t>(i)];
  }
  CHECK(late < early);

  // Gates and branches are untouched; the backbone moved.
  CHECK(identical(net.gate_params(), gates_before));
  CHECK(identical(net.branch_params(), branches_before));
  CHECK_FALSE(identical(net.backbone_params(), backbone_before));
  // Every gradient was cleared after each step.
  for (const auto& p : net.all_params()) CHECK_FALSE(p->value.has_grad());

  // Same seed, fresh net: bitwise-identical trajectory.
  DDINetwork net2 = make_net();
  auto res2 = pretrain_phase(net2, fx.train, fx.stats, cfg);
  CHECK(res2.final_loss == res.final_loss);
  CHECK(identical(net.backbone_params(), snapshot(net2.backbone_params())));
}

TEST_CASE("warm-up holds gates open and freezes the backbone") {
  Fixture fx;
  DDINetwork net = make_net();
  CostLedger ledger = build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
  TrainConfig cfg = base_cfg();
  cfg.iterations = 150;

  auto backbone_before = snapshot(net.backbone_params());
  auto res = warmup_phase(net, fx.train, fx.stats, ledger, cfg);

  // Fresh gates start open, so the under-2% window closes at exactly 100.
  CHECK(res.iterations_run == 100);
  CHECK(res.skip_series.size() == 100);
  CHECK(res.final_running_skip < 0.02);

  // W stays frozen bit-for-bit; gates were the only moving parts.
  CHECK(identical(net.backbone_params(), backbone_before));
  for (const auto& p : net.all_params()) CHECK(p->value.requires_grad());

  CHECK(mean_hard_skip(net, fx.test, fx.stats) < 0.02);
}

TEST_CASE("warm-up failure carries the last ratio") {
  Fixture fx;
  DDINetwork net = make_net();
  CostLedger ledger = build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
  force_all_gates(net, -25.f);  // hard-closed: ratio pins at 1
  TrainConfig cfg = base_cfg();
  cfg.iterations = 5;

  CHECK_THROWS_WITH_AS(
      warmup_phase(net, fx.train, fx.stats, ledger, cfg),
      doctest::Contains("warm-up"), WarmupFailure);
  // The freeze was unwound despite the throw.
  for (const auto& p : net.all_params()) CHECK(p->value.requires_grad());
}

TEST_CASE("joint phase runs the controller and snapshots progress") {
  Fixture fx;
  DDINetwork net = make_net();
  CostLedger ledger = build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
  TrainConfig cfg = base_cfg();
  cfg.iterations = 24;
  pretrain_phase(net, fx.train, fx.stats, cfg);

  cfg.iterations = 30;
  cfg.alpha_magnitude = 1e-3f;
  Checkpoint last_good;
  std::vector<double> alphas;
  auto res = iadi_joint_phase(net, fx.train, fx.stats, ledger, cfg,
                              [&](const nlohmann::json& j) {
                                CHECK(j.at("phase") == "iadi");
                                alphas.push_back(j.at("alpha").get<double>());
                              },
                              &last_good);

  CHECK(res.iterations_run == 30);
  CHECK(res.skip_series.size() == 30);
  CHECK(res.alpha_sign_series.size() == 30);
  for (int s : res.alpha_sign_series) CHECK((s == 1 || s == -1));
  // Fresh-open gates skip ~0 < target 0.5, so the first alpha is positive.
  CHECK(res.alpha_sign_series.front() == 1);
  CHECK(alphas.front() == doctest::Approx(1e-3));
  CHECK(std::isfinite(res.final_loss));
  CHECK(res.final_running_skip >= 0.0);

  // The rescue checkpoint matches the live network.
  Checkpoint now = net.to_checkpoint(true);
  REQUIRE(last_good.tensors.size() == now.tensors.size());
  for (size_t i = 0; i < now.tensors.size(); ++i) {
    CHECK(last_good.tensors[i].first == now.tensors[i].first);
    CHECK(last_good.tensors[i].second.vec() == now.tensors[i].second.vec());
  }
}

TEST_CASE("joint phase moves gates through the task loss alone") {
  Fixture fx;
  DDINetwork net = make_net();
  CostLedger ledger = build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
  TrainConfig cfg = base_cfg();
  cfg.alpha_magnitude = 0.f;  // no resource pressure at all
  cfg.iterations = 1;

  auto gates_before = snapshot(net.gate_params());
  iadi_joint_phase(net, fx.train, fx.stats, ledger, cfg);
  CHECK_FALSE(identical(net.gate_params(), gates_before));
}

TEST_CASE("joint phase reports divergence instead of NaN-poisoned state") {
  Fixture fx;
  DDINetwork net = make_net();
  CostLedger ledger = build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
  fill_param(net.backbone_params(), "head.fc.bias",
             std::numeric_limits<float>::quiet_NaN());
  TrainConfig cfg = base_cfg();
  cfg.iterations = 3;
  CHECK_THROWS_AS(iadi_joint_phase(net, fx.train, fx.stats, ledger, cfg),
                  TrainingDivergence);
}

TEST_CASE("multi-exit fine-tune sums every exit's loss") {
  Fixture fx;
  DDINetwork net = make_net();
  REQUIRE(net.num_exits() == 2);
  TrainConfig cfg = base_cfg();
  cfg.iterations = 24;
  pretrain_phase(net, fx.train, fx.stats, cfg);

  auto branches_before = snapshot(net.branch_params());
  cfg.iterations = 48;
  int steps = 0;
  auto res = ddi_finetune(net, fx.train, fx.stats, cfg,
                          [&](const nlohmann::json& j) {
                            auto per_exit =
                                j.at("per_exit").get<std::vector<double>>();
                            REQUIRE(per_exit.size() == 2);
                            double total = j.at("total").get<double>();
                            double sum = per_exit[0] + per_exit[1];
                            CHECK(std::abs(total - sum) <=
                                  1e-6 * std::max(1.0, std::abs(total)));
                            ++steps;
                          });
  CHECK(steps == 48);
  CHECK(res.iterations_run == 48);
  // Branch heads now receive gradient and move.
  CHECK_FALSE(identical(net.branch_params(), branches_before));

  // The early exit becomes better than chance on this separable task.
  CostLedger ledger = build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
  EvalResult ev = evaluate(net, fx.train, fx.stats, ledger,
                           CostMetric::uniform, 64);
  REQUIRE(ev.per_exit_accuracy.size() == 2);
  CHECK(ev.per_exit_accuracy[0] > 0.6);
  CHECK(ev.accuracy == ev.per_exit_accuracy[1]);
}

TEST_CASE("hard evaluation matches the ledger arithmetic") {
  Fixture fx;
  DDINetwork net = make_net();
  CostLedger ledger = build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
  const CostMetric m = CostMetric::uniform;

  double fixed = ledger.stem_value(m) + ledger.head_value(m);
  for (size_t i = 0; i < ledger.branch.size(); ++i)
    fixed += ledger.branch_value(static_cast<int>(i), m);

  SUBCASE("all gates open") {
    force_all_gates(net, 25.f);
    EvalResult ev = evaluate(net, fx.test, fx.stats, ledger, m, 64);
    CHECK(ev.samples == 256);
    CHECK(ev.mean_skip_ratio == 0.0);
    CHECK(ev.vanilla_cost == doctest::Approx(ledger.vanilla_total(m)));

    double expect = fixed;
    for (const auto& b : ledger.blocks) {
      expect += ledger.block_total_value(b.unit_id, m);
      if (b.gated)
        expect += ledger.layer_gate_value(b.unit_id, m) +
                  ledger.channel_gate_value(b.unit_id, m);
    }
    CHECK(ev.mean_realized_cost == doctest::Approx(expect).epsilon(1e-9));
    // Full execution plus overhead can only cost more than vanilla.
    CHECK(ev.savings < 0.0);

    // Accuracy equals a plain vanilla-mode read of the same batches.
    BatchIterator it(fx.test, fx.stats, 64, false, 0, Augment::none);
    Batch b;
    int64_t hits = 0, n = 0;
    while (it.next(b)) {
      auto r = net.full_forward(b.images, ForwardMode::vanilla, false);
      auto pred = argmax_rows(r.exit_logits.back());
      for (size_t s = 0; s < b.labels.size(); ++s)
        hits += pred[s] == b.labels[s] ? 1 : 0;
      n += static_cast<int64_t>(b.labels.size());
    }
    CHECK(ev.accuracy ==
          doctest::Approx(static_cast<double>(hits) / static_cast<double>(n)));
  }

  SUBCASE("all gates closed") {
    force_all_gates(net, -25.f);
    EvalResult ev = evaluate(net, fx.test, fx.stats, ledger, m, 64);
    CHECK(ev.mean_skip_ratio == 1.0);

    // Only ungated units run; closed layers still pay the layer gate but
    // never evaluate the channel gate.
    double expect = fixed;
    for (const auto& b : ledger.blocks) {
      if (b.gated)
        expect += ledger.layer_gate_value(b.unit_id, m);
      else
        expect += ledger.block_total_value(b.unit_id, m);
    }
    CHECK(ev.mean_realized_cost == doctest::Approx(expect).epsilon(1e-9));
    CHECK(ev.savings > 0.0);
  }
}

TEST_CASE("finite differences confirm the analytic gradients") {
  Fixture fx;
  DDINetwork net = make_net();
  CostLedger ledger = build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
  TrainConfig cfg = base_cfg();
  cfg.iterations = 12;
  pretrain_phase(net, fx.train, fx.stats, cfg);

  BatchIterator it(fx.train, fx.stats, 8, false, 0, Augment::none);
  Batch b;
  REQUIRE(it.next(b));

  auto snap = snapshot(net.all_params());
  FdCheckResult fd = finite_difference_check(net, b.images, b.labels, ledger,
                                             CostMetric::uniform, 0.01f,
                                             200, 3);
  CHECK(fd.coords_checked >= 150);
  CHECK(fd.coords_checked + fd.coords_rejected == 200);
  CHECK(fd.max_rel_err < 1e-3);
  CHECK(fd.max_rel_err > 0.0);
  // The probe perturbs only its own shadow state, never the live weights.
  CHECK(identical(net.all_params(), snap));

  // Binarized gates are piecewise constant: no gradient exists to verify.
  CHECK_THROWS_AS(finite_difference_check(net, b.images, b.labels, ledger,
                                          CostMetric::uniform, 0.01f, 200, 3,
                                          ForwardMode::hard),
                  NonDifferentiableError);
}

TEST_CASE("the full phase pipeline is deterministic") {
  Fixture fx;
  auto run = [&](DDINetwork& net) {
    CostLedger ledger =
        build_cost_ledger(net, MemModelConfig{}, EnergyParams{});
    TrainConfig cfg = base_cfg();
    cfg.iterations = 16;
    pretrain_phase(net, fx.train, fx.stats, cfg);
    cfg.iterations = 120;
    warmup_phase(net, fx.train, fx.stats, ledger, cfg);
    cfg.iterations = 16;
    iadi_joint_phase(net, fx.train, fx.stats, ledger, cfg);
    return net.to_checkpoint(true);
  };
  DDINetwork a = make_net(), bnet = make_net();
  Checkpoint ca = run(a), cb = run(bnet);
  REQUIRE(ca.tensors.size() == cb.tensors.size());
  for (size_t i = 0; i < ca.tensors.size(); ++i) {
    CHECK(ca.tensors[i].first == cb.tensors[i].first);
    CHECK(ca.tensors[i].second.vec() == cb.tensors[i].second.vec());
  }
}
