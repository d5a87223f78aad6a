#include "ddi/optim.hpp"

#include "ddi/errors.hpp"

namespace ddi {

void sgd_step(const ParamList& params, float lr, float momentum,
              float weight_decay) {
  for (const auto& p : params) {
    auto& impl = *p->value.impl();
    DDI_CHECK_T(ModelError, !impl.grad.empty(),
                "sgd_step: parameter '", p->name,
                "' has no gradient; it never reached the loss");
    float* w = impl.data.data();
    const float* g = impl.grad.data();
    float* v = p->momentum.data();
    int64_t n = p->value.numel();
    for (int64_t i = 0; i < n; ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
      w[i] -= lr * v[i];
    }
  }
  zero_grads(params);
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) p->value.zero_grad();
}

}  // namespace ddi
