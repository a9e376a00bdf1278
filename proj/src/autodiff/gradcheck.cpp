#include "mllmreid/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mllmreid/error.hpp"

namespace mllmreid::ad {

GradCheckReport grad_check_report(const std::function<Tensor()>& f, std::span<Tensor> inputs, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ValueError("grad_check: eps must lie in [1e-7, 1e-3]");
  for (Tensor& t : inputs) {
    if (!t.trainable()) throw ValueError("grad_check: inputs must be trainable leaves");
    t.zero_grad();
  }

  const Tensor loss = f();
  double again;
  {
    NoGradGuard guard;
    again = f().item();
  }
  const double first = loss.item();
  if (std::memcmp(&first, &again, sizeof(double)) != 0) {
    throw ValueError("grad_check: function is not deterministic (two forward passes disagree)");
  }
  backward(loss);

  GradCheckReport report;
  bool any = false;
  NoGradGuard guard;
  for (Tensor& t : inputs) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = f().item();
      data[i] = orig - eps;
      const double down = f().item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (!any || err > report.max_rel_error) {
        any = true;
        report.max_rel_error = err;
        report.worst_input = t.name();
        report.worst_index = i;
        report.analytic = analytic[i];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double eps) {
  return grad_check_report(f, inputs, eps).max_rel_error;
}

}  // namespace mllmreid::ad
