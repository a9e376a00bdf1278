#pragma once

#include <functional>
#include <span>
#include <string>

#include "mllmreid/tensor.hpp"

namespace mllmreid::ad {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_input;  // name of the input holding the worst element
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares backward() against central differences for every element of
/// `inputs` (trainable leaves that `f` reads). The relative error of one
/// element is |analytic - numeric| / max(1, |analytic|, |numeric|).
/// Throws ValueError if eps is outside [1e-7, 1e-3] or if two evaluations of
/// `f` disagree.
GradCheckReport grad_check_report(const std::function<Tensor()>& f, std::span<Tensor> inputs, double eps = 1e-5);

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double eps = 1e-5);

}  // namespace mllmreid::ad
