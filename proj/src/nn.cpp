#include "ddi/nn.hpp"

#include <cmath>

#include "ddi/errors.hpp"

namespace ddi {

std::shared_ptr<Parameter> add_param(ParamList& params, std::string name,
                                     Tensor value) {
  auto p = std::make_shared<Parameter>(std::move(name), std::move(value));
  params.push_back(p);
  return p;
}

void init_he_normal(Tensor& w, int fan_in, Rng& rng) {
  DDI_CHECK_T(ModelError, fan_in > 0, "init_he_normal: fan_in must be positive");
  float stddev = std::sqrt(2.f / static_cast<float>(fan_in));
  for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal(0.f, stddev);
}

void init_gaussian(Tensor& w, float stddev, Rng& rng) {
  for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.normal(0.f, stddev);
}

Conv2d::Conv2d(ParamList& params, const std::string& name, int in_ch, int out_ch,
               int ksize, int stride, int padding, bool bias, Rng& rng)
    : in_ch_(in_ch), out_ch_(out_ch), ksize_(ksize), stride_(stride), padding_(padding) {
  Tensor w({out_ch, in_ch, ksize, ksize});
  init_he_normal(w, in_ch * ksize * ksize, rng);
  weight_ = add_param(params, name + ".weight", std::move(w));
  if (bias) {
    Tensor b({out_ch}, 0.f);
    bias_ = add_param(params, name + ".bias", std::move(b));
  }
}

Conv2d::Conv2d(ParamList& params, const std::string& name, int in_ch, int out_ch,
               int ksize, int stride, int padding, bool bias, float weight_stddev,
               Rng& rng)
    : in_ch_(in_ch), out_ch_(out_ch), ksize_(ksize), stride_(stride), padding_(padding) {
  Tensor w({out_ch, in_ch, ksize, ksize});
  init_gaussian(w, weight_stddev, rng);
  weight_ = add_param(params, name + ".weight", std::move(w));
  if (bias) {
    Tensor b({out_ch}, 0.f);
    bias_ = add_param(params, name + ".bias", std::move(b));
  }
}

Tensor Conv2d::forward(const Tensor& x) const {
  return conv2d(x, weight_->value, bias_ ? bias_->value : Tensor(), stride_, padding_);
}

Tensor Conv2d::forward_masked(const Tensor& x,
                              const std::vector<uint8_t>& open) const {
  return conv2d_masked(x, weight_->value, bias_ ? bias_->value : Tensor(), stride_,
                       padding_, open);
}

BatchNorm2d::BatchNorm2d(ParamList& params, const std::string& name, int channels)
    : running_mean_({channels}, 0.f),
      running_var_({channels}, 1.f),
      stats_name_(name),
      channels_(channels) {
  gamma_ = add_param(params, name + ".gamma", Tensor({channels}, 1.f));
  beta_ = add_param(params, name + ".beta", Tensor({channels}, 0.f));
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  return batch_norm2d(x, gamma_->value, beta_->value, running_mean_, running_var_,
                      training, momentum_, eps_);
}

Linear::Linear(ParamList& params, const std::string& name, int in_features,
               int out_features, Rng& rng)
    : in_(in_features), out_(out_features) {
  Tensor w({out_features, in_features});
  init_he_normal(w, in_features, rng);
  weight_ = add_param(params, name + ".weight", std::move(w));
  bias_ = add_param(params, name + ".bias", Tensor({out_features}, 0.f));
}

Linear::Linear(ParamList& params, const std::string& name, int in_features,
               int out_features, float weight_stddev, float bias_init, Rng& rng)
    : in_(in_features), out_(out_features) {
  Tensor w({out_features, in_features});
  init_gaussian(w, weight_stddev, rng);
  weight_ = add_param(params, name + ".weight", std::move(w));
  bias_ = add_param(params, name + ".bias", Tensor({out_features}, bias_init));
}

Tensor Linear::forward(const Tensor& x) const {
  return linear(x, weight_->value, bias_->value);
}

LSTMCell::LSTMCell(ParamList& params, const std::string& name, int input_size,
                   int hidden_size, float weight_stddev, Rng& rng)
    : input_(input_size), hidden_(hidden_size) {
  Tensor wih({4 * hidden_size, input_size});
  Tensor whh({4 * hidden_size, hidden_size});
  init_gaussian(wih, weight_stddev, rng);
  init_gaussian(whh, weight_stddev, rng);
  w_ih_ = add_param(params, name + ".w_ih", std::move(wih));
  w_hh_ = add_param(params, name + ".w_hh", std::move(whh));
  bias_ = add_param(params, name + ".bias", Tensor({4 * hidden_size}, 0.f));
}

LSTMCell::State LSTMCell::initial_state(int batch) const {
  return {Tensor({batch, hidden_}, 0.f), Tensor({batch, hidden_}, 0.f)};
}

LSTMCell::State LSTMCell::step(const Tensor& x, const State& prev) const {
  DDI_CHECK(x.rank() == 2 && x.dim(1) == input_, "lstm step: input ",
            shape_str(x.shape()), " vs expected width ", input_);
  Tensor pre = add(linear(x, w_ih_->value, bias_->value),
                   linear(prev.h, w_hh_->value, Tensor()));
  Tensor i = sigmoid(slice_cols(pre, 0, hidden_));
  Tensor f = sigmoid(slice_cols(pre, hidden_, hidden_));
  Tensor g = tanh_act(slice_cols(pre, 2 * hidden_, hidden_));
  Tensor o = sigmoid(slice_cols(pre, 3 * hidden_, hidden_));
  Tensor c = add(mul(f, prev.c), mul(i, g));
  Tensor h = mul(o, tanh_act(c));
  return {h, c};
}

}  // namespace ddi
