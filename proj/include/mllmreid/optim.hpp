#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mllmreid/tensor.hpp"

namespace mllmreid::ad {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

struct OptimizerState {
  AdamConfig hp;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  explicit OptimizerState(AdamConfig config = {}) : hp(config) {}
};

/// One bias-corrected Adam update over `params`, then zeroes their grads.
/// The moment buffers are created on the first call and bound to the order
/// of `params`; later calls must pass the same parameter list.
void adam_step(std::span<Tensor> params, OptimizerState& state);

/// Scales all gradients so that their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace mllmreid::ad
