#include "mllmreid/optim.hpp"

#include <cmath>

#include "mllmreid/error.hpp"

namespace mllmreid::ad {

void adam_step(std::span<Tensor> params, OptimizerState& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      const std::string& n = params[i].name();
      throw ValueError("adam_step: parameter '" + (n.empty() ? "#" + std::to_string(i) : n) + "' has no gradient");
    }
  }
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ValueError("adam_step: parameter list changed between steps");

  ++state.step;
  const AdamConfig& hp = state.hp;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto data = p.mutable_data();
    auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) throw ShapeError("adam_step: moment buffer does not match '" + p.name() + "'");
    for (std::size_t k = 0; k < data.size(); ++k) {
      m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * grad[k];
      v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * grad[k] * grad[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      if (hp.weight_decay != 0.0) data[k] -= hp.lr * hp.weight_decay * data[k];
      data[k] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
    p.zero_grad();
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (Tensor& p : params) {
      auto& g = p.impl()->grad;
      for (double& x : g) x *= f;
    }
  }
  return norm;
}

}  // namespace mllmreid::ad
