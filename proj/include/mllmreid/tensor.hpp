#pragma once
// Reverse-mode autodiff core: tensors, the dynamic tape and backward.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mllmreid::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches it
  bool trainable = false;
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // producing op; null for leaves
  std::string name;

  std::vector<double>& ensure_grad();
};

using ImplPtr = std::shared_ptr<TensorImpl>;

/// Backward closure: receives the output's gradient and accumulates into the
/// inputs' gradients (each input grad buffer is sized before the call for
/// inputs that require grad).
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct Node {
  std::string op;
  std::vector<ImplPtr> inputs;
  BackwardFn backward;
  bool consumed = false;
};

/// Handle with shared ownership of a TensorImpl. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double v);
  /// Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<double> data, std::string name);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Writable storage; intended for leaves (optimizer updates, checkpoint loads).
  std::span<double> mutable_data() { return impl_->data; }
  std::span<const double> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t r, std::size_t c) const;

  bool trainable() const { return impl_->trainable; }
  bool requires_grad() const { return impl_->requires_grad; }
  const std::string& name() const { return impl_->name; }

  /// New constant leaf sharing no storage or history with this tensor.
  Tensor detach() const;

  const ImplPtr& impl() const { return impl_; }

 private:
  ImplPtr impl_;
};

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Creates the output of an operation and, when any input requires grad and
/// recording is enabled, links it into the tape. Throws NumericError when the
/// output contains NaN/Inf.
Tensor make_op(std::string op, std::vector<Tensor> inputs, Shape shape, std::vector<double> data,
               BackwardFn backward);

/// Topologically ordered record of the ops that produced a scalar loss.
/// Replaying runs every backward closure once; afterwards the tape is
/// consumed and the graph released.
class Tape {
 public:
  static Tape record(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<Node>>& nodes() const { return nodes_; }
  void replay();

 private:
  ImplPtr loss_;
  std::vector<ImplPtr> order_;  // outputs in topological order
  std::vector<std::shared_ptr<Node>> nodes_;
  bool replayed_ = false;
};

/// Accumulates d(loss)/d(param) into every trainable tensor reachable from
/// `loss`. Throws for non-scalar losses, detached tensors and tapes that have
/// already been consumed.
void backward(const Tensor& loss);

}  // namespace mllmreid::ad
