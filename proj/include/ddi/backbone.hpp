#pragma once

// Residual-chain and dense-chain network builders with multi-grained
// (layer + channel) skipping wired into every shape-preserving unit, plus
// early-exit branch classifiers at roughly 1/4 and 3/4 depth of each stage.

#include <string>
#include <utility>
#include <vector>

#include "ddi/checkpoint.hpp"
#include "ddi/costmodel.hpp"
#include "ddi/gating.hpp"
#include "ddi/nn.hpp"
#include "ddi/trace.hpp"

namespace ddi {

enum class BackboneKind { resnet, densenet };

// vanilla: gates bypassed entirely (plain network, pretraining).
// soft:    gates produce values in (0,1); outputs blend executed and skipped
//          paths per-channel (training relaxation).
// hard:    gates binarize; skipped work is genuinely not used, outputs are
//          assembled bitwise from the executed parts (inference).
enum class ForwardMode { vanilla, soft, hard };

struct ArchConfig {
  BackboneKind kind = BackboneKind::resnet;
  std::vector<int> blocks_per_stage{2, 2, 2};
  std::vector<int> widths{16, 32, 64};  // residual backbones, one per stage
  int growth = 12;                      // dense backbones
  int num_classes = 10;
  int in_channels = 3;
  int image_size = 32;
  int lstm_hidden = 10;

  void validate() const;
  // Lossless key=value text, one key per line; embedded in checkpoints.
  std::string to_text() const;
  static ArchConfig from_text(const std::string& text);
};

// Published layouts: depth must satisfy the 6n+2 residual-chain pattern.
ArchConfig resnet_arch(int depth, int num_classes);
// Bottleneck dense-chain pattern: (depth - 4) divisible by 6.
ArchConfig densenet_arch(int depth, int growth, int num_classes);

enum class UnitKind {
  residual_gated,
  residual_transition,  // stride-2, width change; never gated
  dense_gated,
  dense_transition,     // 1x1 halving conv + 2x2 average pool; never gated
};

struct Unit {
  UnitKind kind{};
  int stage = 0;
  int unit_id = 0;
  int in_channels = 0;
  int out_channels = 0;
  int k = 0;          // channels under gate control (0 for ungated units)
  int gate_slot = -1; // layer-gate slot (gated units)
  int hin = 0, win = 0;  // spatial size at unit input

  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;
  Conv2d proj;          // residual transitions: 1x1 stride-2 shortcut
  BatchNorm2d bn_proj;
  ChannelGate cgate;

  bool gated() const {
    return kind == UnitKind::residual_gated || kind == UnitKind::dense_gated;
  }
};

struct Branch {
  int index = 0;       // exit ordinal - 1
  int stage = 0;
  int after_unit = 0;  // global unit index the branch taps after
  int width = 0;       // channel width at the tap
  int pools = 0;       // stride-2 max pools in the trunk
  int hin = 0, win = 0;
  std::vector<Conv2d> convs;  // one 3x3 conv (with bias + relu) per pool
  Linear fc;
};

struct ForwardResult {
  // Branch logits in exit order, final head last: size = branches + 1.
  std::vector<Tensor> exit_logits;
  // One trace per sample; entries cover every unit in execution order.
  std::vector<SkipTrace> traces;
  // Per gated unit, soft gate activations (soft mode only).
  std::vector<SoftGateValues> soft_gates;
};

class DDINetwork {
 public:
  DDINetwork() = default;
  DDINetwork(const ArchConfig& cfg, Rng& rng);

  // Runs the whole network, evaluating every branch and the final head.
  // bn_training selects batch statistics (and running-stat updates); hard
  // mode requires bn_training = false.
  ForwardResult full_forward(const Tensor& input, ForwardMode mode,
                             bool bn_training);

  const ArchConfig& config() const { return cfg_; }
  const std::vector<Unit>& units() const { return units_; }
  const std::vector<Branch>& branches() const { return branches_; }
  const std::vector<std::string>& build_warnings() const { return warnings_; }
  int num_exits() const { return static_cast<int>(branches_.size()) + 1; }
  int gated_units() const;
  int head_width() const { return head_width_; }

  // Parameter registries: W = backbone + branches, G = gates.
  const ParamList& backbone_params() const { return backbone_params_; }
  const ParamList& gate_params() const { return gate_params_; }
  const ParamList& branch_params() const { return branch_params_; }
  ParamList w_params() const;
  ParamList all_params() const;

  Checkpoint to_checkpoint(bool include_momentum) const;
  // Copies values (and momentum, when stored) from the checkpoint into this
  // network; tensors unknown to the network are ignored so callers may store
  // extra state (e.g. input normalization) alongside.
  void load_state(const Checkpoint& ckpt);
  static DDINetwork from_checkpoint(const Checkpoint& ckpt);

  // ---- Incremental single-batch pieces (used by the adaptive runtime) ----
  Tensor stem_forward(const Tensor& x, bool bn_training);
  LayerGate::State gate_initial_state(int batch) const;
  std::pair<Tensor, LayerGate::State> gate_step(int unit, const Tensor& x,
                                                const LayerGate::State& st);
  Tensor channel_gate_forward(int unit, const Tensor& x);
  // The unit's computational body on the full channel set: residual C(x),
  // dense produced slice, or transition output.
  Tensor unit_body(int unit, const Tensor& x, bool bn_training);
  // Single-sample hard execution honoring the given bits, computing only the
  // open conditional channels. Returns the unit output (residual blend or
  // widened concatenation). Adds the MACs actually performed to *macs if
  // given. Gate pipelines are NOT included (callers run them explicitly).
  Tensor unit_hard_forward(int unit, const Tensor& x, uint8_t layer_bit,
                           const std::vector<uint8_t>& channel_bits,
                           int64_t* macs = nullptr);
  Tensor branch_forward(int branch, const Tensor& x);
  Tensor head_forward(const Tensor& x);

  const LayerGate& layer_gate() const { return lgate_; }

 private:
  void build_resnet(Rng& rng);
  void build_densenet(Rng& rng);
  void place_branches(Rng& rng);

  ArchConfig cfg_;
  std::vector<Unit> units_;
  std::vector<Branch> branches_;
  std::vector<std::string> warnings_;

  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  Linear head_fc_;
  int head_width_ = 0;
  int final_h_ = 0, final_w_ = 0;

  LayerGate lgate_;

  ParamList backbone_params_;
  ParamList gate_params_;
  ParamList branch_params_;
};

}  // namespace ddi
