#include "ddi/gating.hpp"

#include "ddi/errors.hpp"

namespace ddi {

namespace {
constexpr float kGateWeightStddev = 0.01f;
// Final-layer bias of every gate pipeline starts positive so initial soft
// values sit near sigmoid(2) = 0.88: gates open, warm-up short.
constexpr float kGateBiasInit = 2.0f;

int strided_out(int extent, int k, int stride, int pad) {
  return (extent + 2 * pad - k) / stride + 1;
}
}  // namespace

uint8_t binarize(float soft, float threshold) {
  return soft >= threshold ? 1 : 0;
}

std::vector<uint8_t> binarize(const std::vector<float>& soft, float threshold) {
  std::vector<uint8_t> hard(soft.size());
  for (size_t i = 0; i < soft.size(); ++i) hard[i] = binarize(soft[i], threshold);
  return hard;
}

GateDecision make_decision(std::vector<float> soft, float threshold) {
  GateDecision d;
  d.hard = binarize(soft, threshold);
  d.soft = std::move(soft);
  return d;
}

int64_t gate_macs(const LayerGateConfig& cfg) {
  DDI_CHECK_T(ModelError, cfg.input_channels > 0 && cfg.lstm_hidden > 0,
              "layer gate config with non-positive dimensions");
  int64_t h = cfg.lstm_hidden;
  int64_t reduce = static_cast<int64_t>(cfg.input_channels) * h;  // 1x1 conv on pooled map
  int64_t lstm = 4 * h * (h + h);  // input width equals hidden width
  int64_t head = h;                // h -> 1 projection
  return reduce + lstm + head;
}

int64_t gate_macs(const ChannelGateConfig& cfg) {
  DDI_CHECK_T(ModelError,
              cfg.input_channels > 0 && cfg.out_channels > 0 && cfg.hin > 0 &&
                  cfg.win > 0,
              "channel gate config with non-positive dimensions");
  int64_t c = cfg.input_channels, k = cfg.out_channels;
  if (cfg.variant == ChannelGateConfig::Variant::resnet) {
    int64_t ho = strided_out(cfg.hin, 3, 2, 1), wo = strided_out(cfg.win, 3, 2, 1);
    return c * c * 9 * ho * wo + c * k;
  }
  // densenet: 1x1 stride 2 at half the denselayer's bottleneck width (2k),
  // then 3x3 down to k, then k-by-k linear.
  int64_t ho = strided_out(cfg.hin, 1, 2, 0), wo = strided_out(cfg.win, 1, 2, 0);
  int64_t mid = 2 * k;
  return c * mid * ho * wo + mid * k * 9 * ho * wo + k * k;
}

int64_t gate_flops(const LayerGateConfig& cfg) { return 2 * gate_macs(cfg); }
int64_t gate_flops(const ChannelGateConfig& cfg) { return 2 * gate_macs(cfg); }

LayerGate::LayerGate(ParamList& params, int lstm_hidden, Rng& rng)
    : hidden_(lstm_hidden) {
  cell_ = LSTMCell(params, "gate.layer.lstm", lstm_hidden, lstm_hidden,
                   kGateWeightStddev, rng);
  head_ = Linear(params, "gate.layer.head", lstm_hidden, 1, kGateWeightStddev,
                 kGateBiasInit, rng);
}

int LayerGate::register_unit(ParamList& params, int channels, Rng& rng) {
  int slot = static_cast<int>(reduce_.size());
  reduce_.emplace_back(params, "gate.layer.reduce." + std::to_string(slot),
                       channels, hidden_, kGateWeightStddev, 0.f, rng);
  return slot;
}

LayerGate::State LayerGate::initial_state(int batch) const {
  return cell_.initial_state(batch);
}

std::pair<Tensor, LayerGate::State> LayerGate::step(const Tensor& feature,
                                                    int slot,
                                                    const State& state) const {
  DDI_CHECK_T(ModelError, slot >= 0 && slot < units(), "layer gate slot ", slot,
              " out of range (", units(), " registered)");
  DDI_CHECK(feature.rank() == 4 && feature.dim(1) == reduce_[slot].in_features(),
            "layer gate: feature ", shape_str(feature.shape()),
            " does not match slot expecting ", reduce_[slot].in_features(),
            " channels");
  Tensor pooled = flatten2d(global_avg_pool(feature));          // [N,c]
  Tensor reduced = reduce_[slot].forward(pooled);               // [N,h]
  State next = cell_.step(reduced, state);
  Tensor soft = sigmoid(head_.forward(next.h));                 // [N,1]
  return {soft, next};
}

ChannelGate::ChannelGate(ParamList& params, const std::string& name,
                         const ChannelGateConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  DDI_CHECK_T(ModelError, cfg.input_channels > 0 && cfg.out_channels > 0,
              "channel gate '", name, "' with non-positive channel counts");
  if (cfg.variant == ChannelGateConfig::Variant::resnet) {
    conv1_ = Conv2d(params, name + ".conv", cfg.input_channels,
                    cfg.input_channels, 3, 2, 1, true, kGateWeightStddev, rng);
    fc_ = Linear(params, name + ".fc", cfg.input_channels, cfg.out_channels,
                 kGateWeightStddev, kGateBiasInit, rng);
  } else {
    int mid = 2 * cfg.out_channels;
    conv1_ = Conv2d(params, name + ".conv1", cfg.input_channels, mid, 1, 2, 0,
                    true, kGateWeightStddev, rng);
    conv2_ = Conv2d(params, name + ".conv2", mid, cfg.out_channels, 3, 1, 1,
                    true, kGateWeightStddev, rng);
    fc_ = Linear(params, name + ".fc", cfg.out_channels, cfg.out_channels,
                 kGateWeightStddev, kGateBiasInit, rng);
  }
}

Tensor ChannelGate::forward(const Tensor& feature) const {
  DDI_CHECK(feature.rank() == 4 && feature.dim(1) == cfg_.input_channels,
            "channel gate: feature ", shape_str(feature.shape()),
            " does not match config expecting ", cfg_.input_channels, " channels");
  Tensor h;
  if (cfg_.variant == ChannelGateConfig::Variant::resnet) {
    h = conv1_.forward(feature);
  } else {
    h = conv2_.forward(relu(conv1_.forward(feature)));
  }
  Tensor pooled = flatten2d(global_avg_pool(h));
  return sigmoid(fc_.forward(pooled));
}

}  // namespace ddi
