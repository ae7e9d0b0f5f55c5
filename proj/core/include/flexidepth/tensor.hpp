#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace flexidepth {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves

  std::vector<double>& grad_buffer();
};

// Backward closure for one op. `inputs` keeps parents alive and gives the
// traversal its edges; the closure reads out.grad and accumulates into inputs.
struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

}  // namespace detail

// Dense row-major float64 array with an optional gradient slot.
//
// Tensor is a handle: copies share storage, which is how parameters are
// referenced from layers, optimizers and checkpoints. Ops never mutate their
// inputs; only backward() writes into grad buffers.
class Tensor {
 public:
  Tensor() = default;
  // Zero-length dimensions are allowed (e.g. a branch that received no rows).
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Row/column view for 2-D tensors; a 1-D tensor is one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Write access for leaves (initialization, optimizer updates, loading).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Zeros when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  bool is_leaf() const;
  // Leaf copy of the values, cut from the graph.
  Tensor detach() const;

  // Reverse-mode pass from a scalar. Seeds d(self)/d(self) = seed.
  void backward(double seed = 1.0) const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Graph recording switch. Inference paths disable it to skip node allocation.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace flexidepth
