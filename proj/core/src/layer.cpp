#include "flexidepth/layer.hpp"

#include <string>

#include "flexidepth/errors.hpp"

namespace flexidepth {

std::vector<Tensor> AdapterParams::tensors() const { return {w_gate, w_up, w_down}; }

Ablation parse_ablation(std::string_view name) {
  if (name == "linear_router") return Ablation::linear_router;
  if (name == "no_kv_cache") return Ablation::no_kv_cache;
  if (name == "no_adapter") return Ablation::no_adapter;
  throw InvalidArgument("unknown ablation flag '" + std::string(name) + "'");
}

std::string_view to_string(Ablation flag) {
  switch (flag) {
    case Ablation::linear_router: return "linear_router";
    case Ablation::no_kv_cache: return "no_kv_cache";
    case Ablation::no_adapter: return "no_adapter";
  }
  return "unknown";
}

FlexiLayer apply_ablation(FlexiLayer layer, Ablation flag) {
  switch (flag) {
    case Ablation::linear_router: layer.flags.linear_router = true; break;
    case Ablation::no_kv_cache: layer.flags.no_kv_cache = true; break;
    case Ablation::no_adapter: layer.flags.no_adapter = true; break;
    default: throw InvalidArgument("apply_ablation: unknown flag");
  }
  return layer;
}

Tensor adapter_forward(const Tensor& x_normed, const AdapterParams& adapter) {
  return gated_ffn(x_normed, adapter.w_gate, adapter.w_up, adapter.w_down);
}

LayerResult layer_forward(const Tensor& x, const FlexiLayer& layer, LayerKV& cache, const BlockConfig& config,
                          const LayerOptions& options) {
  if (x.rank() != 2) throw InvalidArgument("layer_forward: expected [T x d] input");
  const std::size_t T = x.rows();
  if (!options.forced_skip.empty() && options.forced_skip.size() != T) {
    throw InvalidArgument("layer_forward: forced_skip needs one entry per token");
  }
  const RouterOptions router_options{options.tau, kRouterNormEps};

  LayerResult result;
  if (options.gate_override) {
    result.gates.scores = Tensor::full({T, 1}, *options.gate_override);
    result.gates.decisions.assign(T, *options.gate_override > options.tau ? 1 : 0);
  } else if (layer.flags.linear_router) {
    result.gates = compute_gates_linear(x, layer.router.w_head, layer.router.pre_norm, router_options,
                                        layer.router.head_bias);
  } else {
    result.gates = compute_gates(x, layer.router, router_options);
  }

  result.full = result.gates.decisions;
  if (!options.forced_skip.empty()) {
    for (std::size_t i = 0; i < T; ++i)
      if (options.forced_skip[i]) result.full[i] = 0;
  }
  IndexList full_rows, skip_rows;
  for (std::size_t i = 0; i < T; ++i) (result.full[i] ? full_rows : skip_rows).push_back(i);

  const Tensor xn = rmsnorm(x, layer.frozen.attn_norm, config.norm_eps);
  const Tensor attn = causal_attention(xn, layer.frozen, cache, result.full, config, !layer.flags.no_kv_cache,
                                       options.attention_weights);

  std::vector<std::pair<Tensor, IndexList>> parts;
  if (!full_rows.empty()) {
    const bool all_full = full_rows.size() == T;
    const Tensor x_full = all_full ? x : gather_rows(x, full_rows);
    const Tensor g_full = all_full ? result.gates.scores : gather_rows(result.gates.scores, full_rows);
    const Tensor h = add(x_full, attn);
    const Tensor ffn = gated_ffn(rmsnorm(h, layer.frozen.ffn_norm, config.norm_eps), layer.frozen.w_gate,
                                 layer.frozen.w_up, layer.frozen.w_down);
    parts.emplace_back(add(scale_rows(ffn, g_full), h), full_rows);
  }
  if (!skip_rows.empty()) {
    const bool all_skip = skip_rows.size() == T;
    const Tensor x_skip = all_skip ? x : gather_rows(x, skip_rows);
    if (layer.flags.no_adapter) {
      parts.emplace_back(x_skip, skip_rows);
    } else {
      const Tensor g_skip = all_skip ? result.gates.scores : gather_rows(result.gates.scores, skip_rows);
      const Tensor adapted =
          adapter_forward(rmsnorm(x_skip, layer.frozen.ffn_norm, config.norm_eps), layer.adapter);
      parts.emplace_back(add(scale_rows(adapted, affine(g_skip, -1.0, 1.0)), x_skip), skip_rows);
    }
  }
  result.output = parts.size() == 1 && parts.front().second.size() == T ? parts.front().first
                                                                        : scatter_rows(T, parts);
  return result;
}

}  // namespace flexidepth
