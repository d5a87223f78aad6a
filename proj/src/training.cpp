#include "ddi/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "ddi/checkpoint.hpp"
#include "ddi/errors.hpp"
#include "ddi/ops.hpp"
#include "ddi/optim.hpp"

namespace ddi {

namespace {

// Endless batch stream: re-shuffles each epoch from a named substream so the
// whole schedule is a pure function of (seed, phase name).
class EpochStream {
 public:
  EpochStream(const Dataset& ds, const NormStats& stats, const TrainConfig& cfg,
              std::string phase)
      : ds_(&ds), stats_(stats), cfg_(cfg), phase_(std::move(phase)) {}

  const Batch& next() {
    while (!it_ || !it_->next(batch_)) {
      it_.emplace(*ds_, stats_, cfg_.batch_size, true,
                  Rng::derive(cfg_.seed, phase_ + "-epoch-" +
                                             std::to_string(epoch_++)),
                  cfg_.augment);
    }
    return batch_;
  }

 private:
  const Dataset* ds_;
  NormStats stats_;
  TrainConfig cfg_;
  std::string phase_;
  std::optional<BatchIterator> it_;
  Batch batch_;
  int epoch_ = 0;
};

double batch_skip_ratio(const ForwardResult& res) {
  double acc = 0.0;
  for (const auto& t : res.traces) acc += t.skip_ratio();
  return res.traces.empty() ? 0.0 : acc / static_cast<double>(res.traces.size());
}

void ensure_finite(double loss, const char* phase, int iter) {
  DDI_CHECK_T(TrainingDivergence, std::isfinite(loss), phase, " diverged at iteration ",
              iter, " (non-finite loss)");
}

// Flips requires_grad off for the given parameters and restores it on exit.
class FreezeGuard {
 public:
  explicit FreezeGuard(const ParamList& params) : params_(params) {
    for (const auto& p : params_) p->value.set_requires_grad(false);
  }
  ~FreezeGuard() {
    for (const auto& p : params_) p->value.set_requires_grad(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamList params_;
};

}  // namespace

void TrainConfig::validate() const {
  DDI_CHECK_T(ConfigError, lr > 0.f, "learning rate must be positive, got ", lr);
  DDI_CHECK_T(ConfigError, momentum >= 0.f && momentum < 1.f,
              "momentum must lie in [0,1), got ", momentum);
  DDI_CHECK_T(ConfigError, weight_decay >= 0.f,
              "weight decay must be non-negative, got ", weight_decay);
  DDI_CHECK_T(ConfigError, batch_size >= 1, "batch size must be positive");
  DDI_CHECK_T(ConfigError, alpha_magnitude >= 0.f,
              "alpha magnitude must be non-negative");
  DDI_CHECK_T(ConfigError,
              target_skip_ratio >= 0.f && target_skip_ratio <= 1.f,
              "target skip ratio must lie in [0,1], got ", target_skip_ratio);
  DDI_CHECK_T(ConfigError, iterations >= 0, "iteration cap must be non-negative");
}

AlphaController::AlphaController(float magnitude, float target)
    : mag_(magnitude), target_(target) {
  DDI_CHECK_T(ConfigError, magnitude >= 0.f, "alpha magnitude must be non-negative");
  DDI_CHECK_T(ConfigError, target >= 0.f && target <= 1.f,
              "target skip ratio must lie in [0,1]");
}

float AlphaController::update(double batch_skip) {
  DDI_CHECK_T(ConfigError, batch_skip >= 0.0 && batch_skip <= 1.0,
              "batch skip ratio must lie in [0,1], got ", batch_skip);
  int next = sign_;
  if (batch_skip < target_) next = 1;        // skip more: penalize cost
  else if (batch_skip > target_) next = -1;  // skip less: reward cost
  if (next != sign_) ++flips_;
  sign_ = next;
  return current();
}

PhaseResult pretrain_phase(DDINetwork& net, const Dataset& train,
                           const NormStats& stats, const TrainConfig& cfg,
                           const StepSink& sink) {
  cfg.validate();
  EpochStream stream(train, stats, cfg, "pretrain");
  PhaseResult out;
  for (int i = 0; i < cfg.iterations; ++i) {
    const Batch& b = stream.next();
    Tape tape;
    TapeScope scope(tape);
    auto res = net.full_forward(b.images, ForwardMode::vanilla, true);
    Tensor loss = softmax_cross_entropy(res.exit_logits.back(), b.labels);
    double lv = loss.item();
    ensure_finite(lv, "pretrain", i);
    tape.backward(loss);
    sgd_step(net.backbone_params(), cfg.lr, cfg.momentum, cfg.weight_decay);
    zero_grads(net.all_params());
    out.final_loss = lv;
    ++out.iterations_run;
    if (sink)
      sink({{"phase", "pretrain"},
            {"iter", i},
            {"task", lv},
            {"total", lv},
            {"lr", cfg.lr}});
  }
  return out;
}

PhaseResult warmup_phase(DDINetwork& net, const Dataset& train,
                         const NormStats& stats, const CostLedger& ledger,
                         const TrainConfig& cfg, const StepSink& sink) {
  cfg.validate();
  constexpr double kOpenRatio = 0.02;
  constexpr int kOpenWindow = 100;
  EpochStream stream(train, stats, cfg, "warmup");
  // W (backbone and branches) is frozen: no optimizer updates, and
  // batch-norm runs in eval mode so running statistics stay fixed.
  FreezeGuard freeze(net.w_params());
  float alpha = -cfg.alpha_magnitude;  // negative: open the gates

  PhaseResult out;
  int consecutive = 0;
  for (int i = 0; i < cfg.iterations; ++i) {
    const Batch& b = stream.next();
    Tape tape;
    TapeScope scope(tape);
    auto res = net.full_forward(b.images, ForwardMode::soft, false);
    Tensor ce = softmax_cross_entropy(res.exit_logits.back(), b.labels);
    Tensor e_cost = expected_cost(res.soft_gates, ledger, cfg.metric);
    Tensor loss = add(ce, scale(e_cost, alpha));
    double lv = loss.item();
    ensure_finite(lv, "warm-up", i);
    tape.backward(loss);
    sgd_step(net.gate_params(), cfg.lr, cfg.momentum, cfg.weight_decay);
    zero_grads(net.all_params());

    double ratio = batch_skip_ratio(res);
    consecutive = ratio < kOpenRatio ? consecutive + 1 : 0;
    out.skip_series.push_back(ratio);
    out.final_loss = lv;
    out.final_running_skip = ratio;
    ++out.iterations_run;
    if (sink)
      sink({{"phase", "warmup"},
            {"iter", i},
            {"task", ce.item()},
            {"resource", e_cost.item()},
            {"alpha", alpha},
            {"total", lv},
            {"skip", ratio},
            {"lr", cfg.lr}});
    if (consecutive >= kOpenWindow) return out;
  }
  fail<WarmupFailure>("warm-up did not hold the batch skip ratio under ",
                      kOpenRatio, " for ", kOpenWindow,
                      " consecutive batches within ", cfg.iterations,
                      " iterations (last ratio ", out.final_running_skip, ")");
}

PhaseResult iadi_joint_phase(DDINetwork& net, const Dataset& train,
                             const NormStats& stats, const CostLedger& ledger,
                             const TrainConfig& cfg, const StepSink& sink,
                             Checkpoint* last_good) {
  cfg.validate();
  constexpr int kSnapshotEvery = 25;
  EpochStream stream(train, stats, cfg, "iadi");
  AlphaController ctrl(cfg.alpha_magnitude, cfg.target_skip_ratio);
  ParamList stepped = net.backbone_params();
  {
    const ParamList& g = net.gate_params();
    stepped.insert(stepped.end(), g.begin(), g.end());
  }

  PhaseResult out;
  for (int i = 0; i < cfg.iterations; ++i) {
    const Batch& b = stream.next();
    double lv, ratio, ce_v, e_v;
    float alpha;
    try {
      Tape tape;
      TapeScope scope(tape);
      auto res = net.full_forward(b.images, ForwardMode::soft, true);
      ratio = batch_skip_ratio(res);
      alpha = ctrl.update(ratio);
      Tensor ce = softmax_cross_entropy(res.exit_logits.back(), b.labels);
      Tensor e_cost = expected_cost(res.soft_gates, ledger, cfg.metric);
      Tensor loss = add(ce, scale(e_cost, alpha));
      lv = loss.item();
      ce_v = ce.item();
      e_v = e_cost.item();
      ensure_finite(lv, "joint phase", i);
      tape.backward(loss);
    } catch (const ModelError& e) {
      // Non-finite activations surface as model errors inside the forward.
      fail<TrainingDivergence>("joint phase diverged at iteration ", i, ": ",
                               e.what());
    }
    sgd_step(stepped, cfg.lr, cfg.momentum, cfg.weight_decay);
    zero_grads(net.all_params());

    out.skip_series.push_back(ratio);
    out.alpha_sign_series.push_back(ctrl.sign());
    out.final_loss = lv;
    ++out.iterations_run;
    if (last_good && (i % kSnapshotEvery == kSnapshotEvery - 1))
      *last_good = net.to_checkpoint(true);
    if (sink)
      sink({{"phase", "iadi"},
            {"iter", i},
            {"task", ce_v},
            {"resource", e_v},
            {"alpha", alpha},
            {"total", lv},
            {"skip", ratio},
            {"lr", cfg.lr}});
  }
  out.alpha_sign_flips = ctrl.flips();
  if (!out.skip_series.empty()) {
    size_t tail = std::max<size_t>(1, out.skip_series.size() / 5);
    double acc = 0.0;
    for (size_t i = out.skip_series.size() - tail; i < out.skip_series.size();
         ++i)
      acc += out.skip_series[i];
    out.final_running_skip = acc / static_cast<double>(tail);
  }
  if (last_good) *last_good = net.to_checkpoint(true);
  return out;
}

PhaseResult ddi_finetune(DDINetwork& net, const Dataset& train,
                         const NormStats& stats, const TrainConfig& cfg,
                         const StepSink& sink, Checkpoint* last_good) {
  cfg.validate();
  constexpr int kSnapshotEvery = 25;
  EpochStream stream(train, stats, cfg, "ddi");
  PhaseResult out;
  for (int i = 0; i < cfg.iterations; ++i) {
    const Batch& b = stream.next();
    double lv;
    std::vector<double> per_exit;
    try {
      Tape tape;
      TapeScope scope(tape);
      auto res = net.full_forward(b.images, ForwardMode::soft, true);
      // Unweighted sum of every exit's cross-entropy (final head included).
      Tensor total = softmax_cross_entropy(res.exit_logits[0], b.labels);
      per_exit.push_back(total.item());
      for (size_t e = 1; e < res.exit_logits.size(); ++e) {
        Tensor le = softmax_cross_entropy(res.exit_logits[e], b.labels);
        per_exit.push_back(le.item());
        total = add(total, le);
      }
      lv = total.item();
      ensure_finite(lv, "multi-exit fine-tune", i);
      tape.backward(total);
    } catch (const ModelError& e) {
      fail<TrainingDivergence>("multi-exit fine-tune diverged at iteration ",
                               i, ": ", e.what());
    }
    sgd_step(net.all_params(), cfg.lr, cfg.momentum, cfg.weight_decay);
    zero_grads(net.all_params());
    out.final_loss = lv;
    ++out.iterations_run;
    if (last_good && (i % kSnapshotEvery == kSnapshotEvery - 1))
      *last_good = net.to_checkpoint(true);
    if (sink) {
      nlohmann::json j{{"phase", "ddi"},
                       {"iter", i},
                       {"total", lv},
                       {"lr", cfg.lr}};
      j["per_exit"] = per_exit;
      sink(j);
    }
  }
  if (last_good) *last_good = net.to_checkpoint(true);
  return out;
}

EvalResult evaluate(DDINetwork& net, const Dataset& data,
                    const NormStats& stats, const CostLedger& ledger,
                    CostMetric metric, int batch_size) {
  EvalResult out;
  out.vanilla_cost = ledger.vanilla_total(metric);
  out.per_exit_accuracy.assign(static_cast<size_t>(net.num_exits()), 0.0);
  BatchIterator it(data, stats, batch_size, false, 0, Augment::none);
  Batch b;
  while (it.next(b)) {
    auto res = net.full_forward(b.images, ForwardMode::hard, false);
    std::vector<std::vector<int>> preds;
    preds.reserve(res.exit_logits.size());
    for (const auto& lg : res.exit_logits) preds.push_back(argmax_rows(lg));
    for (size_t s = 0; s < b.labels.size(); ++s) {
      for (size_t e = 0; e < preds.size(); ++e)
        out.per_exit_accuracy[e] += preds[e][s] == b.labels[s] ? 1.0 : 0.0;
      out.mean_skip_ratio += res.traces[s].skip_ratio();
      out.mean_realized_cost += dynamic_cost(res.traces[s], ledger, metric);
      ++out.samples;
    }
  }
  for (double& a : out.per_exit_accuracy) a /= static_cast<double>(out.samples);
  out.accuracy = out.per_exit_accuracy.back();
  out.mean_skip_ratio /= static_cast<double>(out.samples);
  out.mean_realized_cost /= static_cast<double>(out.samples);
  out.savings = 1.0 - out.mean_realized_cost / out.vanilla_cost;
  return out;
}

namespace {

// ---------------------------------------------------------------------------
// Double-precision shadow of the soft forward pass, used as the finite-
// difference reference. Central differences taken through the engine's own
// f32 arithmetic bottom out near 3e-3 relative error: the loss scalar's ulp
// grid puts a step-inversely-proportional noise floor under small steps while
// ReLU hinge crossings add a step-proportional bias above them, and the two
// regimes never leave a usable window. Re-evaluating the identical map in
// double (same f32 parameter values, probed coordinate overridden in
// unrounded double) drops the noise floor by six orders of magnitude; the
// remaining hinge crossings are then rare and unambiguously detectable with a
// second-difference probe.
// ---------------------------------------------------------------------------

struct Grid {  // NCHW feature map
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;
  Grid() = default;
  Grid(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0) {}
  double* plane(int ni, int ci) {
    return v.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
  }
  const double* plane(int ni, int ci) const {
    return v.data() + (static_cast<size_t>(ni) * c + ci) * h * w;
  }
};

struct Mat {  // [N, C]
  int n = 0, c = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(int n_, int c_) : n(n_), c(c_), v(static_cast<size_t>(n_) * c_, 0.0) {}
  double& at(int i, int j) { return v[static_cast<size_t>(i) * c + j]; }
  double at(int i, int j) const { return v[static_cast<size_t>(i) * c + j]; }
};

// Parameter and running-stat values keyed by state name, with at most one
// coordinate overridden by the probe point (held in unrounded double).
class ShadowParams {
 public:
  explicit ShadowParams(const DDINetwork& net)
      : ck_(net.to_checkpoint(false)) {}

  void set_override(const std::string& name, size_t idx, double val) {
    ov_name_ = name;
    ov_idx_ = idx;
    ov_val_ = val;
  }
  void clear_override() { ov_name_.clear(); }

  std::vector<double> fetch(const std::string& name) const {
    const Tensor* t = ck_.find(name);
    DDI_CHECK_T(ModelError, t != nullptr, "shadow evaluator: no tensor named '",
                name, "' in the network state");
    std::vector<double> out(t->numel());
    const float* src = t->data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = src[i];
    if (!ov_name_.empty() && name == ov_name_) out[ov_idx_] = ov_val_;
    return out;
  }

 private:
  Checkpoint ck_;
  std::string ov_name_;
  size_t ov_idx_ = 0;
  double ov_val_ = 0.0;
};

Grid sh_input(const Tensor& x) {
  Grid g(x.dim(0), x.dim(1), x.dim(2), x.dim(3));
  const float* src = x.data();
  for (size_t i = 0; i < g.v.size(); ++i) g.v[i] = src[i];
  return g;
}

Grid sh_conv(const Grid& x, const std::vector<double>& w,
             const std::vector<double>* bias, int co, int k, int stride,
             int pad) {
  int ho = (x.h + 2 * pad - k) / stride + 1;
  int wo = (x.w + 2 * pad - k) / stride + 1;
  Grid out(x.n, co, ho, wo);
  for (int ni = 0; ni < x.n; ++ni)
    for (int o = 0; o < co; ++o) {
      double* op = out.plane(ni, o);
      double b = bias ? (*bias)[o] : 0.0;
      for (int64_t i = 0; i < static_cast<int64_t>(ho) * wo; ++i) op[i] = b;
      for (int ci = 0; ci < x.c; ++ci) {
        const double* xp = x.plane(ni, ci);
        const double* wp =
            w.data() + (static_cast<size_t>(o) * x.c + ci) * k * k;
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            double acc = 0.0;
            for (int ky = 0; ky < k; ++ky) {
              int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= x.h) continue;
              for (int kx = 0; kx < k; ++kx) {
                int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= x.w) continue;
                acc += wp[ky * k + kx] * xp[static_cast<int64_t>(iy) * x.w + ix];
              }
            }
            op[static_cast<int64_t>(oy) * wo + ox] += acc;
          }
      }
    }
  return out;
}

void sh_relu(Grid& x) {
  for (double& e : x.v) e = e > 0.0 ? e : 0.0;
}

Grid sh_bn_eval(const Grid& x, const std::vector<double>& gamma,
                const std::vector<double>& beta, const std::vector<double>& rm,
                const std::vector<double>& rv) {
  constexpr double kEps = static_cast<double>(1e-5f);  // engine's BN epsilon
  Grid out(x.n, x.c, x.h, x.w);
  int64_t plane = static_cast<int64_t>(x.h) * x.w;
  for (int ni = 0; ni < x.n; ++ni)
    for (int ci = 0; ci < x.c; ++ci) {
      double is = 1.0 / std::sqrt(rv[ci] + kEps);
      double g = gamma[ci], b = beta[ci], mu = rm[ci];
      const double* xp = x.plane(ni, ci);
      double* op = out.plane(ni, ci);
      for (int64_t i = 0; i < plane; ++i) op[i] = (xp[i] - mu) * is * g + b;
    }
  return out;
}

Grid sh_add(const Grid& a, const Grid& b) {
  Grid out = a;
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

Grid sh_pool2(const Grid& x, bool take_max) {
  int ho = (x.h - 2) / 2 + 1, wo = (x.w - 2) / 2 + 1;
  Grid out(x.n, x.c, ho, wo);
  for (int ni = 0; ni < x.n; ++ni)
    for (int ci = 0; ci < x.c; ++ci) {
      const double* xp = x.plane(ni, ci);
      double* op = out.plane(ni, ci);
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double a = xp[(2 * oy) * x.w + 2 * ox];
          double b = xp[(2 * oy) * x.w + 2 * ox + 1];
          double c = xp[(2 * oy + 1) * x.w + 2 * ox];
          double d = xp[(2 * oy + 1) * x.w + 2 * ox + 1];
          op[static_cast<int64_t>(oy) * wo + ox] =
              take_max ? std::max({a, b, c, d}) : (a + b + c + d) * 0.25;
        }
    }
  return out;
}

Mat sh_gap(const Grid& x) {
  Mat m(x.n, x.c);
  int64_t plane = static_cast<int64_t>(x.h) * x.w;
  for (int ni = 0; ni < x.n; ++ni)
    for (int ci = 0; ci < x.c; ++ci) {
      const double* xp = x.plane(ni, ci);
      double acc = 0.0;
      for (int64_t i = 0; i < plane; ++i) acc += xp[i];
      m.at(ni, ci) = acc / static_cast<double>(plane);
    }
  return m;
}

Mat sh_linear(const Mat& x, const std::vector<double>& w,
              const std::vector<double>* bias, int out_f) {
  Mat out(x.n, out_f);
  for (int i = 0; i < x.n; ++i)
    for (int o = 0; o < out_f; ++o) {
      double acc = bias ? (*bias)[o] : 0.0;
      const double* wp = w.data() + static_cast<size_t>(o) * x.c;
      for (int j = 0; j < x.c; ++j) acc += x.at(i, j) * wp[j];
      out.at(i, o) = acc;
    }
  return out;
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void sh_sigmoid(Mat& m) {
  for (double& e : m.v) e = sigmoid_d(e);
}

double sh_ce(const Mat& logits, const std::vector<int>& labels) {
  double acc = 0.0;
  for (int i = 0; i < logits.n; ++i) {
    double mx = logits.at(i, 0);
    for (int j = 1; j < logits.c; ++j) mx = std::max(mx, logits.at(i, j));
    double z = 0.0;
    for (int j = 0; j < logits.c; ++j) z += std::exp(logits.at(i, j) - mx);
    acc += std::log(z) + mx - logits.at(i, labels[i]);
  }
  return acc / logits.n;
}

// Full soft forward + loss (every exit's task term plus alpha * expected
// cost) in double, mirroring the engine's evaluation order exactly:
// batch-norm uses running statistics, gates stay soft, every branch and the
// final head contribute a cross-entropy term.
double shadow_loss(const DDINetwork& net, const ShadowParams& sp,
                   const Tensor& input, const std::vector<int>& labels,
                   const CostLedger& ledger, CostMetric metric, double alpha) {
  const ArchConfig& cfg = net.config();
  const auto& units = net.units();
  const auto& branches = net.branches();
  int n = input.dim(0);
  int hidden = net.layer_gate().hidden();

  auto conv_of = [&](const Grid& x, const std::string& base, int co, int k,
                     int stride, int pad, bool bias) {
    std::vector<double> w = sp.fetch(base + ".weight");
    if (!bias) return sh_conv(x, w, nullptr, co, k, stride, pad);
    std::vector<double> b = sp.fetch(base + ".bias");
    return sh_conv(x, w, &b, co, k, stride, pad);
  };
  auto bn_of = [&](const Grid& x, const std::string& base) {
    return sh_bn_eval(x, sp.fetch(base + ".gamma"), sp.fetch(base + ".beta"),
                      sp.fetch(base + ".running_mean"),
                      sp.fetch(base + ".running_var"));
  };
  auto fc_of = [&](const Mat& x, const std::string& base, int out_f) {
    std::vector<double> w = sp.fetch(base + ".weight");
    std::vector<double> b = sp.fetch(base + ".bias");
    return sh_linear(x, w, &b, out_f);
  };

  int stem_width =
      cfg.kind == BackboneKind::resnet ? cfg.widths[0] : 2 * cfg.growth;
  Grid f = conv_of(sh_input(input), "stem.conv", stem_width, 3, 1, 1, false);
  f = bn_of(f, "stem.bn");
  sh_relu(f);

  std::vector<double> w_ih = sp.fetch("gate.layer.lstm.w_ih");
  std::vector<double> w_hh = sp.fetch("gate.layer.lstm.w_hh");
  std::vector<double> lstm_bias = sp.fetch("gate.layer.lstm.bias");
  Mat hstate(n, hidden), cstate(n, hidden);

  double ce_sum = 0.0, e_cost = 0.0;
  size_t next_branch = 0;

  for (size_t i = 0; i < units.size(); ++i) {
    const Unit& u = units[i];
    std::string base = "unit" + std::to_string(u.unit_id);
    if (u.kind == UnitKind::residual_transition) {
      Grid h = conv_of(f, base + ".conv1", u.out_channels, 3, 2, 1, false);
      h = bn_of(h, base + ".bn1");
      sh_relu(h);
      h = conv_of(h, base + ".conv2", u.out_channels, 3, 1, 1, false);
      h = bn_of(h, base + ".bn2");
      Grid sc = conv_of(f, base + ".proj", u.out_channels, 1, 2, 0, false);
      sc = bn_of(sc, base + ".bn_proj");
      f = sh_add(h, sc);
      sh_relu(f);
    } else if (u.kind == UnitKind::dense_transition) {
      Grid h = conv_of(f, base + ".conv1", u.out_channels, 1, 1, 0, false);
      h = bn_of(h, base + ".bn1");
      sh_relu(h);
      f = sh_pool2(h, /*take_max=*/false);
    } else {
      // Layer gate: pooled input through the per-slot reduction, one LSTM
      // step (gate order i, f, g, o), sigmoid head.
      Mat reduced = fc_of(
          sh_gap(f), "gate.layer.reduce." + std::to_string(u.gate_slot),
          hidden);
      Mat pre = sh_linear(reduced, w_ih, &lstm_bias, 4 * hidden);
      Mat preh = sh_linear(hstate, w_hh, nullptr, 4 * hidden);
      for (size_t e = 0; e < pre.v.size(); ++e) pre.v[e] += preh.v[e];
      Mat cnext(n, hidden), hnext(n, hidden);
      for (int s = 0; s < n; ++s)
        for (int j = 0; j < hidden; ++j) {
          double ig = sigmoid_d(pre.at(s, j));
          double fg = sigmoid_d(pre.at(s, hidden + j));
          double gg = std::tanh(pre.at(s, 2 * hidden + j));
          double og = sigmoid_d(pre.at(s, 3 * hidden + j));
          double cv = fg * cstate.at(s, j) + ig * gg;
          cnext.at(s, j) = cv;
          hnext.at(s, j) = og * std::tanh(cv);
        }
      hstate = std::move(hnext);
      cstate = std::move(cnext);
      Mat soft_l = fc_of(hstate, "gate.layer.head", 1);
      sh_sigmoid(soft_l);

      std::string cg = "gate.channel." + std::to_string(u.unit_id);
      Mat soft_c;
      if (u.kind == UnitKind::residual_gated) {
        Grid hh = conv_of(f, cg + ".conv", u.in_channels, 3, 2, 1, true);
        soft_c = fc_of(sh_gap(hh), cg + ".fc", u.k);
      } else {
        Grid hh = conv_of(f, cg + ".conv1", 2 * u.k, 1, 2, 0, true);
        sh_relu(hh);
        hh = conv_of(hh, cg + ".conv2", u.k, 3, 1, 1, true);
        soft_c = fc_of(sh_gap(hh), cg + ".fc", u.k);
      }
      sh_sigmoid(soft_c);

      Grid body;
      if (u.kind == UnitKind::residual_gated) {
        Grid h = conv_of(f, base + ".conv1", u.out_channels, 3, 1, 1, false);
        h = bn_of(h, base + ".bn1");
        sh_relu(h);
        h = conv_of(h, base + ".conv2", u.out_channels, 3, 1, 1, false);
        h = bn_of(h, base + ".bn2");
        body = sh_add(h, f);
        sh_relu(body);
      } else {
        Grid h = conv_of(f, base + ".conv1", 4 * cfg.growth, 1, 1, 0, false);
        h = bn_of(h, base + ".bn1");
        sh_relu(h);
        h = conv_of(h, base + ".conv2", u.k, 3, 1, 1, false);
        h = bn_of(h, base + ".bn2");
        sh_relu(h);
        body = std::move(h);
      }

      double sum_l = 0.0, sum_lc = 0.0;
      for (int s = 0; s < n; ++s) {
        sum_l += soft_l.at(s, 0);
        for (int cc = 0; cc < u.k; ++cc)
          sum_lc += soft_l.at(s, 0) * soft_c.at(s, cc);
      }
      e_cost += ledger.block_uncond_value(u.unit_id, metric) * sum_l / n +
                ledger.block_channel_share_value(u.unit_id, metric) * sum_lc / n;

      int64_t plane = static_cast<int64_t>(f.h) * f.w;
      if (u.kind == UnitKind::residual_gated) {
        for (int s = 0; s < n; ++s)
          for (int cc = 0; cc < u.k; ++cc) {
            double g = soft_l.at(s, 0) * soft_c.at(s, cc);
            double* fp = f.plane(s, cc);
            const double* bp = body.plane(s, cc);
            for (int64_t e = 0; e < plane; ++e)
              fp[e] = g * bp[e] + (1.0 - g) * fp[e];
          }
      } else {
        Grid widened(n, u.in_channels + u.k, f.h, f.w);
        for (int s = 0; s < n; ++s) {
          for (int cc = 0; cc < u.in_channels; ++cc)
            std::copy_n(f.plane(s, cc), plane, widened.plane(s, cc));
          for (int cc = 0; cc < u.k; ++cc) {
            double g = soft_l.at(s, 0) * soft_c.at(s, cc);
            const double* bp = body.plane(s, cc);
            const double* fb = f.plane(s, u.in_channels - u.k + cc);
            double* wp = widened.plane(s, u.in_channels + cc);
            for (int64_t e = 0; e < plane; ++e)
              wp[e] = g * bp[e] + (1.0 - g) * fb[e];
          }
        }
        f = std::move(widened);
      }
    }

    while (next_branch < branches.size() &&
           branches[next_branch].after_unit == static_cast<int>(i)) {
      const Branch& br = branches[next_branch];
      std::string bb = "branch" + std::to_string(br.index);
      Grid h = f;
      for (int p = 0; p < br.pools; ++p) {
        h = sh_pool2(h, /*take_max=*/true);
        h = conv_of(h, bb + ".conv" + std::to_string(p), br.width, 3, 1, 1,
                    true);
        sh_relu(h);
      }
      ce_sum += sh_ce(fc_of(sh_gap(h), bb + ".fc", cfg.num_classes), labels);
      ++next_branch;
    }
  }

  ce_sum += sh_ce(fc_of(sh_gap(f), "head.fc", cfg.num_classes), labels);
  return ce_sum + alpha * e_cost;
}

}  // namespace

FdCheckResult finite_difference_check(DDINetwork& net, const Tensor& input,
                                      const std::vector<int>& labels,
                                      const CostLedger& ledger,
                                      CostMetric metric, float alpha,
                                      int n_coords, uint64_t seed,
                                      ForwardMode mode, float fd_eps,
                                      float min_grad) {
  DDI_CHECK_T(NonDifferentiableError, mode != ForwardMode::hard,
              "hard-gated execution is piecewise constant in the parameters; "
              "no gradient exists to verify (use soft mode)");
  DDI_CHECK_T(ConfigError, mode == ForwardMode::soft,
              "the gradient check covers the soft relaxation only");
  DDI_CHECK_T(ConfigError, n_coords >= 1 && fd_eps > 0.f && min_grad > 0.f,
              "bad finite-difference settings");

  // Analytic side: the engine's own f32 tape on the full training loss.
  ParamList params = net.all_params();
  zero_grads(params);
  std::vector<std::vector<float>> analytic(params.size());
  {
    Tape tape;
    TapeScope scope(tape);
    auto res = net.full_forward(input, ForwardMode::soft, false);
    Tensor loss;
    for (const Tensor& logits : res.exit_logits) {
      Tensor ce = softmax_cross_entropy(logits, labels);
      loss = loss.defined() ? add(loss, ce) : ce;
    }
    if (!res.soft_gates.empty())
      loss =
          add(loss, scale(expected_cost(res.soft_gates, ledger, metric), alpha));
    tape.backward(loss);
    for (size_t p = 0; p < params.size(); ++p) {
      Tensor& t = params[p]->value;
      analytic[p] =
          t.has_grad() ? t.grad() : std::vector<float>(t.numel(), 0.f);
    }
  }
  zero_grads(params);

  // Candidate coordinates: gradient magnitude high enough that the relative
  // comparison is conditioned.
  std::vector<std::pair<size_t, size_t>> pool;
  for (size_t p = 0; p < params.size(); ++p)
    for (size_t j = 0; j < analytic[p].size(); ++j)
      if (std::abs(analytic[p][j]) >= min_grad) pool.emplace_back(p, j);
  DDI_CHECK_T(ModelError, !pool.empty(),
              "no parameter coordinate has |gradient| >= ", min_grad);
  Rng rng(seed);
  for (size_t i = pool.size() - 1; i > 0; --i)
    std::swap(pool[i], pool[rng.uniform_int(0, static_cast<int64_t>(i))]);
  if (pool.size() > static_cast<size_t>(n_coords)) pool.resize(n_coords);

  // Reference side: double-precision shadow of the same map. The unperturbed
  // loss anchors the hinge probe for every coordinate.
  ShadowParams sp(net);
  const double alpha_d = static_cast<double>(alpha);
  const double l0 = shadow_loss(net, sp, input, labels, ledger, metric, alpha_d);
  // A hinge crossing inside the stencil biases the central difference by up
  // to |l+ - 2*l0 + l-| / (2*eps); coordinates where that bound is not
  // negligible against the gradient scale are rejected, not verified. The
  // bound is a property of the loss surface alone, so rejection can hide a
  // non-smooth stencil but never a wrong analytic gradient.
  constexpr double kKinkShare = 2e-4;

  FdCheckResult out;
  for (auto [p, j] : pool) {
    const double orig = params[p]->value.data()[j];
    const double eps =
        static_cast<double>(fd_eps) * std::max(1.0, std::abs(orig));
    sp.set_override(params[p]->name, j, orig + eps);
    const double lp = shadow_loss(net, sp, input, labels, ledger, metric, alpha_d);
    sp.set_override(params[p]->name, j, orig - eps);
    const double lm = shadow_loss(net, sp, input, labels, ledger, metric, alpha_d);
    sp.clear_override();

    const double a = analytic[p][j];
    if (!std::isfinite(lp) || !std::isfinite(lm)) {
      out.max_rel_err = std::numeric_limits<double>::infinity();
      ++out.coords_checked;
      continue;
    }
    const double fd = (lp - lm) / (2.0 * eps);
    const double bias_bound = std::abs(lp - 2.0 * l0 + lm) / (2.0 * eps);
    const double scale_ref =
        std::max({std::abs(a), std::abs(fd), static_cast<double>(min_grad)});
    if (bias_bound > kKinkShare * scale_ref) {
      ++out.coords_rejected;
      continue;
    }
    const double rel =
        std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
    out.max_rel_err = std::max(out.max_rel_err, rel);
    ++out.coords_checked;
  }
  DDI_CHECK_T(ModelError, out.coords_checked >= 1,
              "every sampled coordinate sat on a hinge; nothing verified");
  return out;
}

}  // namespace ddi
