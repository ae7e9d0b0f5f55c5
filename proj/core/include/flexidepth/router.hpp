#pragma once

#include <cstddef>
#include <vector>

#include "flexidepth/ops.hpp"
#include "flexidepth/tensor.hpp"

namespace flexidepth {

inline constexpr double kDefaultTau = 0.5;
inline constexpr double kRouterNormEps = 1e-6;

// Bottlenecked MLP router: sigmoid(w_head . (w_up . Norm(tanh(w_down . Norm(x))))).
// `head_bias` is optional; when undefined the head is bias-free.
struct RouterParams {
  Tensor w_down;      // [d_r x d]
  Tensor w_up;        // [d x d_r]
  Tensor w_head;      // [1 x d]
  Tensor pre_norm;    // [d]
  Tensor inner_norm;  // [d_r]
  Tensor head_bias;   // [1] or undefined

  std::vector<Tensor> tensors() const;
};

struct RouterOptions {
  double tau = kDefaultTau;
  double norm_eps = kRouterNormEps;
};

// Per-token gate scores (a [T] tensor that stays on the graph) and the
// threshold decisions derived from them: decisions[i] <=> scores[i] > tau.
struct GateVector {
  Tensor scores;
  std::vector<char> decisions;

  std::size_t size() const { return decisions.size(); }
  double score(std::size_t i) const { return scores.data()[i]; }
};

struct RoutePartition {
  IndexList full;
  IndexList skip;
};

GateVector compute_gates(const Tensor& x, const RouterParams& params, const RouterOptions& options = {});

// Linear-router ablation: sigmoid(w_head . Norm(x)), using the router's pre-norm.
GateVector compute_gates_linear(const Tensor& x, const Tensor& w_head, const Tensor& pre_norm,
                                const RouterOptions& options = {}, const Tensor& head_bias = {});

// Strict threshold: score > tau goes to the full path, ties go to skip.
// Both lists keep ascending token order.
RoutePartition route(std::span<const double> scores, double tau);
RoutePartition route(const GateVector& gates, double tau);

}  // namespace flexidepth
