#pragma once

// Execute/skip controllers: a recurrent layer gate shared across all gated
// units of a network, and per-unit convolutional channel gates. Soft values
// drive training; binarized bits drive inference.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ddi/nn.hpp"

namespace ddi {

struct GateDecision {
  std::vector<float> soft;    // length 1 (layer) or k (channel)
  std::vector<uint8_t> hard;  // same length
};

constexpr float kBinarizeThreshold = 0.5f;

// hard = 1 iff soft >= threshold.
uint8_t binarize(float soft, float threshold = kBinarizeThreshold);
std::vector<uint8_t> binarize(const std::vector<float>& soft,
                              float threshold = kBinarizeThreshold);
GateDecision make_decision(std::vector<float> soft,
                           float threshold = kBinarizeThreshold);

struct LayerGateConfig {
  int input_channels = 0;
  int lstm_hidden = 10;  // also the width of the per-unit reduction
};

struct ChannelGateConfig {
  enum class Variant { resnet, densenet };
  Variant variant = Variant::resnet;
  int input_channels = 0;
  int out_channels = 0;  // k: channels the gate controls
  int hin = 0, win = 0;  // feature spatial size at the gate's input
};

// Exact MAC-based FLOP counts of the gate pipelines (pooling and
// element-wise stages carry no MACs and are excluded by convention).
int64_t gate_macs(const LayerGateConfig& cfg);
int64_t gate_macs(const ChannelGateConfig& cfg);
int64_t gate_flops(const LayerGateConfig& cfg);
int64_t gate_flops(const ChannelGateConfig& cfg);

// Recurrent layer gate: per-unit 1x1 reduction (as a linear map on the
// pooled feature vector) feeding a single LSTM and scalar head shared by
// every gated unit. Recurrent state is caller-owned, one per forward pass,
// carried across units so earlier skip decisions condition later ones.
class LayerGate {
 public:
  LayerGate() = default;
  LayerGate(ParamList& params, int lstm_hidden, Rng& rng);

  // Registers a gated unit with the given input channel count; returns the
  // slot index to pass to step().
  int register_unit(ParamList& params, int channels, Rng& rng);

  using State = LSTMCell::State;
  State initial_state(int batch) const;

  // feature = the would-be input of the gated unit, NCHW.
  // Returns soft gate values [N,1] and the advanced recurrent state.
  std::pair<Tensor, State> step(const Tensor& feature, int slot,
                                const State& state) const;

  int hidden() const { return hidden_; }
  int units() const { return static_cast<int>(reduce_.size()); }

 private:
  LSTMCell cell_;
  Linear head_;
  std::vector<Linear> reduce_;
  int hidden_ = 10;
};

// Convolutional channel gate. The resnet variant is a strided 3x3 conv over
// the unit input followed by pooling and a c-by-k linear map; the densenet
// variant mirrors a bottleneck denselayer with a strided 1x1 conv at half
// width, a 3x3 conv down to k channels, pooling, and a k-by-k linear map.
class ChannelGate {
 public:
  ChannelGate() = default;
  ChannelGate(ParamList& params, const std::string& name,
              const ChannelGateConfig& cfg, Rng& rng);

  // Soft gate vector [N,k] in (0,1).
  Tensor forward(const Tensor& feature) const;

  const ChannelGateConfig& config() const { return cfg_; }

 private:
  Conv2d conv1_;
  Conv2d conv2_;  // densenet variant only
  Linear fc_;
  ChannelGateConfig cfg_;
};

}  // namespace ddi
