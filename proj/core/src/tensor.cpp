#include "flexidepth/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "flexidepth/errors.hpp"

namespace flexidepth {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::vector<double>& detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw InvalidArgument("tensor: data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_string(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw StateError("tensor: use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw InvalidArgument("tensor: axis out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 1 ? 1 : s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() > 2) throw InvalidArgument("tensor: rows/cols on rank " + std::to_string(s.size()));
  return s.back();
}

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw InvalidArgument("tensor: item() on " + shape_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw StateError("tensor: requires_grad can only be set on leaves");
  impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  shape();
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  shape();
  return impl_->grad_buffer();
}

void Tensor::zero_grad() {
  shape();
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::is_leaf() const {
  shape();
  return impl_->node == nullptr;
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

void Tensor::backward(double seed) const {
  if (numel() != 1) throw InvalidArgument("backward: loss must be a scalar, got " + shape_string(shape()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order without recursion depth limits.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node_impl, next] = stack.back();
    const auto* node = node_impl->node.get();
    if (node && next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child->requires_grad && child->node && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node_impl);
    stack.pop_back();
  }

  impl_->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = *it;
    if (t->node && !t->grad.empty()) t->node->backward(*t);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace flexidepth
