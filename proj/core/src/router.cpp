#include "flexidepth/router.hpp"

#include <string>

#include "flexidepth/errors.hpp"

namespace flexidepth {

namespace {

GateVector finish_gates(const Tensor& logits, const Tensor& head_bias, double tau) {
  const Tensor z = head_bias.defined() ? add_scalar(logits, head_bias) : logits;
  GateVector gates;
  gates.scores = sigmoid(z);
  const auto g = gates.scores.data();
  gates.decisions.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) gates.decisions[i] = g[i] > tau ? 1 : 0;
  return gates;
}

}  // namespace

std::vector<Tensor> RouterParams::tensors() const {
  std::vector<Tensor> out{w_down, w_up, w_head, pre_norm, inner_norm};
  if (head_bias.defined()) out.push_back(head_bias);
  return out;
}

GateVector compute_gates(const Tensor& x, const RouterParams& params, const RouterOptions& options) {
  if (x.rank() != 2 || x.cols() != params.w_down.cols()) {
    throw InvalidArgument("compute_gates: input " + shape_string(x.shape()) + " vs router width " +
                          std::to_string(params.w_down.cols()));
  }
  Tensor z = rmsnorm(x, params.pre_norm, options.norm_eps);
  z = tanh(linear(z, params.w_down));
  z = rmsnorm(z, params.inner_norm, options.norm_eps);
  z = linear(linear(z, params.w_up), params.w_head);  // [T x 1]
  return finish_gates(z, params.head_bias, options.tau);
}

GateVector compute_gates_linear(const Tensor& x, const Tensor& w_head, const Tensor& pre_norm,
                                const RouterOptions& options, const Tensor& head_bias) {
  if (x.rank() != 2 || x.cols() != w_head.cols()) {
    throw InvalidArgument("compute_gates_linear: input " + shape_string(x.shape()) + " vs head " +
                          shape_string(w_head.shape()));
  }
  Tensor z = linear(rmsnorm(x, pre_norm, options.norm_eps), w_head);
  return finish_gates(z, head_bias, options.tau);
}

RoutePartition route(std::span<const double> scores, double tau) {
  RoutePartition part;
  for (std::size_t i = 0; i < scores.size(); ++i) (scores[i] > tau ? part.full : part.skip).push_back(i);
  return part;
}

RoutePartition route(const GateVector& gates, double tau) { return route(gates.scores.data(), tau); }

}  // namespace flexidepth
