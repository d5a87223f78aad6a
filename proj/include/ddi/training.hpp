#pragma once

// Phased training: plain backbone pretraining, gate-only warm-up to zero
// skipping, joint input-adaptive training under task loss + signed-alpha
// resource loss with the sign-flipping controller, and multi-exit
// fine-tuning with the summed per-exit loss. Plus hard-mode evaluation and
// a finite-difference gradient checker.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddi/backbone.hpp"
#include "ddi/costmodel.hpp"
#include "ddi/data.hpp"

namespace ddi {

struct TrainConfig {
  float lr = 5e-2f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  int batch_size = 128;
  float alpha_magnitude = 2e-4f;      // |alpha|
  float target_skip_ratio = 0.f;      // controller setpoint, in [0,1]
  int iterations = 0;                 // per-phase batch cap
  uint64_t seed = 0;
  CostMetric metric = CostMetric::uniform;
  Augment augment = Augment::none;

  void validate() const;
};

// Emits alpha in {+|a|, -|a|}: ratio below target -> positive (penalize
// cost, skip more); above -> negative (skip less); equal -> retain sign.
class AlphaController {
 public:
  AlphaController(float magnitude, float target);

  float update(double batch_skip_ratio);
  float current() const { return sign_ * mag_; }
  int sign() const { return sign_; }
  int flips() const { return flips_; }

 private:
  float mag_;
  float target_;
  int sign_ = 1;
  int flips_ = 0;
};

struct LossBreakdown {
  double task = 0.0;               // cross-entropy at the final head
  double resource = 0.0;           // expected-cost E
  float alpha = 0.f;
  double total = 0.0;
  std::vector<double> per_exit;    // multi-exit phase: branches..., head
  double batch_skip_ratio = 0.0;
};

// Receives one JSON object per training step (line-oriented log contract).
using StepSink = std::function<void(const nlohmann::json&)>;

struct PhaseResult {
  int iterations_run = 0;
  double final_loss = 0.0;
  double final_running_skip = 0.0;
  int alpha_sign_flips = 0;
  // Per-batch series (empty for phases that do not track them).
  std::vector<double> skip_series;
  std::vector<int> alpha_sign_series;
};

// Phase 0: plain training of the backbone (vanilla forward, batch-norm in
// training mode, final-head cross-entropy). Gates and branches untouched.
PhaseResult pretrain_phase(DDINetwork& net, const Dataset& train,
                           const NormStats& stats, const TrainConfig& cfg,
                           const StepSink& sink = {});

// Gate-only warm-up: backbone and branches frozen (batch-norm running stats
// in eval mode), loss = task + (-|alpha|) * E pushing gates open. Terminates
// once the batch skip ratio stays below 2% for 100 consecutive batches;
// exceeding the iteration cap first raises WarmupFailure with the ratio.
PhaseResult warmup_phase(DDINetwork& net, const Dataset& train,
                         const NormStats& stats, const CostLedger& ledger,
                         const TrainConfig& cfg, const StepSink& sink = {});

// Joint phase: soft forward, loss = CE + alpha * E with controller-signed
// alpha, SGD over backbone + gates. Non-finite loss raises
// TrainingDivergence; `last_good` (when given) receives a usable checkpoint
// snapshot updated periodically and on success.
PhaseResult iadi_joint_phase(DDINetwork& net, const Dataset& train,
                             const NormStats& stats, const CostLedger& ledger,
                             const TrainConfig& cfg, const StepSink& sink = {},
                             Checkpoint* last_good = nullptr);

// Multi-exit fine-tune: loss = sum of cross-entropies over every exit
// (branches and final head, unweighted), soft gating retained, SGD over
// all parameters.
PhaseResult ddi_finetune(DDINetwork& net, const Dataset& train,
                         const NormStats& stats, const TrainConfig& cfg,
                         const StepSink& sink = {},
                         Checkpoint* last_good = nullptr);

struct EvalResult {
  int64_t samples = 0;
  double accuracy = 0.0;                  // final head
  double mean_skip_ratio = 0.0;
  double mean_realized_cost = 0.0;        // full hard pass incl. gate/branch overhead
  double vanilla_cost = 0.0;              // static full-execution reference
  double savings = 0.0;                   // 1 - realized / vanilla
  std::vector<double> per_exit_accuracy;  // branches..., head
};

// Deterministic hard-mode pass over the dataset (storage order, no
// augmentation, batch-norm eval).
EvalResult evaluate(DDINetwork& net, const Dataset& data,
                    const NormStats& stats, const CostLedger& ledger,
                    CostMetric metric, int batch_size);

struct FdCheckResult {
  double max_rel_err = 0.0;
  int coords_checked = 0;
  // Coordinates skipped because a ReLU/maxpool kink sits inside the finite-
  // difference stencil (the loss is not twice differentiable there, so the
  // central difference does not estimate the one-point derivative).
  int coords_rejected = 0;
};

// Central-difference check of the full training-loss gradient (every exit's
// task term plus alpha * expected cost; soft mode, batch-norm eval). The
// analytic side is the engine's own f32 tape; the reference side re-evaluates
// the identical forward map in double precision with the probed coordinate
// perturbed in unrounded double, so the comparison measures the tape against
// the true mathematical derivative instead of the f32 rounding grid. Samples
// up to n_coords parameter coordinates whose analytic gradient magnitude is
// at least min_grad (relative error is ill-conditioned for near-zero
// gradients); per-coordinate step is fd_eps * max(1, |w|). A second-
// difference probe rejects coordinates whose stencil straddles a hinge
// (counted in coords_rejected, never verified). Hard mode raises
// NonDifferentiableError: binarized gates are piecewise constant. Non-finite
// losses at the probe points count as checked with infinite error.
FdCheckResult finite_difference_check(DDINetwork& net, const Tensor& input,
                                      const std::vector<int>& labels,
                                      const CostLedger& ledger,
                                      CostMetric metric, float alpha,
                                      int n_coords, uint64_t seed,
                                      ForwardMode mode = ForwardMode::soft,
                                      float fd_eps = 1e-5f,
                                      float min_grad = 1e-2f);

}  // namespace ddi
