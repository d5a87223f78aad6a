#ifndef DDI_OPS_HPP
#define DDI_OPS_HPP

#include <cstdint>
#include <vector>

#include "ddi/tensor.hpp"

namespace ddi {

// Elementwise. Shapes must match exactly; no implicit broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor one_minus(const Tensor& a);  // 1 - a
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_act(const Tensor& x);

// Shape ops (copying views; backward routes grads to the source).
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor flatten2d(const Tensor& x);  // [N, ...] -> [N, rest]
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int start, int len);
Tensor slice_cols(const Tensor& x, int start, int len);
// Repeats a [N,1] column k times to [N,k]; gradient sums back per row.
Tensor broadcast_cols(const Tensor& x, int k);

// x: [N, in], w: [out, in], b: [out] (optional, pass Tensor() for none).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// x: NCHW, w: OIHW. Output spatial = floor((H + 2p - K)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
              int padding);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

// Inference-path conv: computes only output channels with open[c] != 0,
// leaves the rest zero. Not differentiable; rejects recording contexts.
Tensor conv2d_masked(const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride, int padding, const std::vector<uint8_t>& open);

Tensor avg_pool2d(const Tensor& x, int window, int stride);
Tensor max_pool2d(const Tensor& x, int window, int stride);
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C,1,1]

// Train mode normalizes by batch statistics and folds them into the
// running buffers (momentum update); eval mode reads the running buffers.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    float momentum, float eps);

// Per-sample per-channel scaling. x: [N,C,H,W]; g: [N,C] or [N,1]
// (a [N,1] gate broadcasts across channels).
Tensor scale_channels(const Tensor& x, const Tensor& g);

// Reductions.
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// sum_i x_i * w_i with constant weights; the gradient is w.
Tensor dot_const(const Tensor& x, const std::vector<float>& w);

// logits: [N,K]; labels in [0,K). Mean over the batch.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Plain helpers (no autograd).
std::vector<int> argmax_rows(const Tensor& logits);
std::vector<float> softmax_row(const Tensor& logits, int row);

}  // namespace ddi

#endif  // DDI_OPS_HPP
