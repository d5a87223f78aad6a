#pragma once

#include "ddi/nn.hpp"

namespace ddi {

// Momentum SGD with coupled weight decay:
//   v <- momentum * v + grad + weight_decay * w
//   w <- w - lr * v
// Gradients are cleared afterwards. Every parameter in the set must have a
// populated gradient (a missing one means the graph silently detached it).
void sgd_step(const ParamList& params, float lr, float momentum,
              float weight_decay);

void zero_grads(const ParamList& params);

}  // namespace ddi
