#pragma once

// Small parameterized layers composed from the tape ops. Each layer registers
// its parameters with a parent list so optimizers and checkpoints can walk the
// whole model as flat name -> tensor pairs.

#include <memory>
#include <string>
#include <vector>

#include "ddi/ops.hpp"
#include "ddi/rng.hpp"
#include "ddi/tensor.hpp"

namespace ddi {

using ParamList = std::vector<std::shared_ptr<Parameter>>;

std::shared_ptr<Parameter> add_param(ParamList& params, std::string name,
                                     Tensor value);

// He-normal fan-in init for conv / fc weights feeding relu.
void init_he_normal(Tensor& w, int fan_in, Rng& rng);
// Plain gaussian init, used by the gate heads.
void init_gaussian(Tensor& w, float stddev, Rng& rng);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamList& params, const std::string& name, int in_ch, int out_ch,
         int ksize, int stride, int padding, bool bias, Rng& rng);
  // Gaussian-initialized variant (gate trunks); biases start at zero.
  Conv2d(ParamList& params, const std::string& name, int in_ch, int out_ch,
         int ksize, int stride, int padding, bool bias, float weight_stddev,
         Rng& rng);

  Tensor forward(const Tensor& x) const;
  Tensor forward_masked(const Tensor& x, const std::vector<uint8_t>& open) const;

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  int ksize() const { return ksize_; }
  int stride() const { return stride_; }
  int padding() const { return padding_; }
  bool has_bias() const { return bias_ != nullptr; }
  const Tensor& weight_tensor() const { return weight_->value; }

 private:
  std::shared_ptr<Parameter> weight_;
  std::shared_ptr<Parameter> bias_;
  int in_ch_ = 0, out_ch_ = 0, ksize_ = 0, stride_ = 1, padding_ = 0;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParamList& params, const std::string& name, int channels);

  // `training` selects batch statistics (and updates the running ones) versus
  // the stored running statistics.
  Tensor forward(const Tensor& x, bool training);

  int channels() const { return channels_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }
  const std::string& stats_name() const { return stats_name_; }

 private:
  std::shared_ptr<Parameter> gamma_;
  std::shared_ptr<Parameter> beta_;
  Tensor running_mean_;
  Tensor running_var_;
  std::string stats_name_;
  int channels_ = 0;
  float momentum_ = 0.1f;
  float eps_ = 1e-5f;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamList& params, const std::string& name, int in_features,
         int out_features, Rng& rng);
  // Gaussian-initialized variant for gate heads; bias starts at `bias_init`.
  Linear(ParamList& params, const std::string& name, int in_features,
         int out_features, float weight_stddev, float bias_init, Rng& rng);

  Tensor forward(const Tensor& x) const;

  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  std::shared_ptr<Parameter> weight_;
  std::shared_ptr<Parameter> bias_;
  int in_ = 0, out_ = 0;
};

// Single LSTM cell built from the primitive ops so gradients flow through the
// tape. Gate layout in the packed weight matrices is [i, f, g, o].
class LSTMCell {
 public:
  LSTMCell() = default;
  LSTMCell(ParamList& params, const std::string& name, int input_size,
           int hidden_size, float weight_stddev, Rng& rng);

  struct State {
    Tensor h;  // [N, hidden]
    Tensor c;  // [N, hidden]
  };

  State initial_state(int batch) const;
  State step(const Tensor& x, const State& prev) const;

  int input_size() const { return input_; }
  int hidden_size() const { return hidden_; }

 private:
  std::shared_ptr<Parameter> w_ih_;  // [4H, input]
  std::shared_ptr<Parameter> w_hh_;  // [4H, hidden]
  std::shared_ptr<Parameter> bias_;  // [4H]
  int input_ = 0, hidden_ = 0;
};

}  // namespace ddi
