#include "ddi/tensor.hpp"

#include <cmath>
#include <sstream>

namespace ddi {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, float fill, bool requires_grad) {
  p_ = std::make_shared<TensorData>();
  p_->shape = std::move(shape);
  p_->data.assign(static_cast<size_t>(shape_numel(p_->shape)), fill);
  p_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) {
  DDI_CHECK(shape_numel(shape) == static_cast<int64_t>(values.size()),
            "shape ", shape_str(shape), " does not match ", values.size(), " values");
  p_ = std::make_shared<TensorData>();
  p_->shape = std::move(shape);
  p_->data = std::move(values);
  p_->requires_grad = requires_grad;
}

Tensor Tensor::clone() const {
  Tensor out(p_->shape, p_->data, p_->requires_grad);
  return out;
}

bool Tensor::all_finite() const {
  for (float v : p_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
}  // namespace

Tape* active_tape() { return g_active_tape; }
bool grad_enabled() { return g_grad_enabled; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled || g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void Tape::record(std::shared_ptr<TensorData> out, std::function<void()> backward_fn) {
  entries_.push_back(Entry{std::move(out), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  DDI_CHECK(loss.numel() == 1, "backward() requires a scalar loss, got ",
            shape_str(loss.shape()));
  loss.impl()->grad_buf()[0] = 1.f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    // Nodes whose grad was never touched have no downstream path.
    if (it->out->grad.empty()) continue;
    it->fn();
  }
}

}  // namespace ddi
