#include "mllmreid/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mllmreid/error.hpp"

namespace mllmreid::ad {
namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  if (ad::numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = ad::numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data, std::string name) {
  Tensor t = constant(std::move(shape), std::move(data));
  t.impl_->trainable = true;
  t.impl_->requires_grad = true;
  t.impl_->name = std::move(name);
  return t;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (ndim() != 2) throw ShapeError("at(r,c) on tensor of shape " + shape_str(shape()));
  return impl_->data.at(r * impl_->shape[1] + c);
}

Tensor Tensor::detach() const { return constant(impl_->shape, impl_->data); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_op(std::string op, std::vector<Tensor> inputs, Shape shape, std::vector<double> data,
               BackwardFn backward) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(op + " produced a non-finite value");
  }
  Tensor out = Tensor::constant(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

Tape Tape::record(const Tensor& loss) {
  if (!loss.defined()) throw ValueError("backward on an undefined tensor");
  if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ValueError("backward on a detached tensor (no tape recorded)");
  if (loss.impl()->node && loss.impl()->node->consumed) throw ValueError("tape already consumed by a previous backward");

  Tape tape;
  tape.loss_ = loss.impl();
  // Iterative post-order DFS over producers gives a topological order.
  std::unordered_set<const TensorImpl*> seen;
  std::vector<std::pair<ImplPtr, std::size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  seen.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const Node* node = impl->node.get();
    if (node && next < node->inputs.size()) {
      const ImplPtr& in = node->inputs[next++];
      if (in->requires_grad && !seen.count(in.get())) {
        seen.insert(in.get());
        stack.emplace_back(in, 0);
      }
      continue;
    }
    if (impl->node) {
      if (impl->node->consumed) throw ValueError("tape already consumed by a previous backward");
      tape.order_.push_back(impl);
      tape.nodes_.push_back(impl->node);
    }
    stack.pop_back();
  }
  return tape;
}

void Tape::replay() {
  if (replayed_) throw ValueError("tape already consumed by a previous backward");
  replayed_ = true;
  auto& g = loss_->ensure_grad();
  g[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    TensorImpl& out = **it;
    Node& node = *out.node;
    out.ensure_grad();
    for (const ImplPtr& in : node.inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    node.backward(out);
  }
  // Release the graph: closures and input references go, leaves keep grads.
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node& node = *(*it)->node;
    node.consumed = true;
    node.backward = nullptr;
    node.inputs.clear();
  }
  order_.clear();
}

void backward(const Tensor& loss) { Tape::record(loss).replay(); }

}  // namespace mllmreid::ad
