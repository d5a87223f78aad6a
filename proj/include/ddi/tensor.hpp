#ifndef DDI_TENSOR_HPP
#define DDI_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ddi/errors.hpp"

namespace ddi {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until touched; same size as data afterwards

  std::vector<float>& grad_buf() {
    if (grad.empty()) grad.assign(data.size(), 0.f);
    return grad;
  }
};

// Dense row-major f32 tensor. Value handle over shared storage; ops
// participate in the active Tape when gradients are enabled.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.f, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  bool defined() const { return p_ != nullptr; }
  const Shape& shape() const { return p_->shape; }
  int dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(p_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(p_->data.size()); }

  const float* data() const { return p_->data.data(); }
  float* data() { return p_->data.data(); }
  const std::vector<float>& vec() const { return p_->data; }
  std::vector<float>& vec() { return p_->data; }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool v) { p_->requires_grad = v; }
  bool has_grad() const { return !p_->grad.empty(); }
  std::vector<float>& grad() { return p_->grad_buf(); }
  const std::vector<float>& grad_const() const { return p_->grad; }
  void zero_grad() { p_->grad.clear(); }

  std::shared_ptr<TensorData> impl() const { return p_; }

  // Deep copy; the copy is a leaf (no tape history) and keeps requires_grad.
  Tensor clone() const;

  bool all_finite() const;
  float item() const {
    DDI_CHECK(numel() == 1, "item() on tensor of ", numel(), " elements");
    return p_->data[0];
  }

 private:
  std::shared_ptr<TensorData> p_;
};

// Reverse-mode tape: entries are appended in forward execution order and
// replayed strictly in reverse, so traversal order is a reverse topological
// order of the forward graph. Gradients accumulate additively at fan-out.
class Tape {
 public:
  void record(std::shared_ptr<TensorData> out, std::function<void()> backward_fn);
  void backward(const Tensor& loss);
  size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<TensorData> out;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

Tape* active_tape();
bool grad_enabled();

// Installs a tape as the active recording target for the current scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// True when the op must record: grads enabled, a tape is active, and at
// least one input carries grad.
bool should_record(std::initializer_list<const Tensor*> inputs);

// Trainable tensor with its SGD momentum buffer. Names are unique
// dot-paths within a network, e.g. "stage1.block3.conv1.weight".
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<float> momentum;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), momentum(value.numel(), 0.f) {
    value.set_requires_grad(true);
  }
};

}  // namespace ddi

#endif  // DDI_TENSOR_HPP
