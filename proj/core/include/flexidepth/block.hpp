#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flexidepth/kv_cache.hpp"
#include "flexidepth/ops.hpp"
#include "flexidepth/tensor.hpp"

namespace flexidepth {

enum class PositionEncoding { rope, none };

struct BlockConfig {
  std::size_t n_heads = 4;
  PositionEncoding position_encoding = PositionEncoding::rope;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
};

// Weights of one pre-trained decoder layer. Frozen during adapter training.
struct FrozenBlockParams {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv, wo;  // [d x d]
  Tensor ffn_norm;  // [d]
  Tensor w_gate, w_up;  // [d_ff x d]
  Tensor w_down;  // [d x d_ff]

  std::vector<Tensor> tensors() const;
};

// Attention sublayer on already-normalized rows. Only tokens with
// active[i] != 0 issue queries; the returned rows follow their order.
// Keys/values are appended to `cache` for every token when
// `retain_inactive_kv`, otherwise only for the active ones.
Tensor causal_attention(const Tensor& x_normed, const FrozenBlockParams& params, LayerKV& cache,
                        std::span<const char> active, const BlockConfig& config, bool retain_inactive_kv = true,
                        AttentionWeights* weights = nullptr);

// Standard pre-norm layer: h = x + Attn(Norm(x)); out = h + FFN(Norm(h)).
Tensor block_forward(const Tensor& x, const FrozenBlockParams& params, LayerKV& cache, const BlockConfig& config,
                     AttentionWeights* weights = nullptr);

}  // namespace flexidepth
