#include "flexidepth/block.hpp"

#include <algorithm>
#include <numeric>

#include "flexidepth/errors.hpp"

namespace flexidepth {

std::vector<Tensor> FrozenBlockParams::tensors() const {
  return {attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down};
}

namespace {

Tensor maybe_rope(const Tensor& x, std::span<const Index> positions, const BlockConfig& config) {
  if (config.position_encoding == PositionEncoding::none) return x;
  return rope(x, positions, config.n_heads, config.rope_base);
}

}  // namespace

Tensor causal_attention(const Tensor& x_normed, const FrozenBlockParams& params, LayerKV& cache,
                        std::span<const char> active, const BlockConfig& config, bool retain_inactive_kv,
                        AttentionWeights* weights) {
  const std::size_t T = x_normed.rows(), d = x_normed.cols();
  if (active.size() != T) throw InvalidArgument("causal_attention: need one mask entry per token");
  if (cache.width() != d) throw StateError("causal_attention: cache width does not match the layer");
  const std::size_t start = cache.next_position();

  IndexList active_rows, all_rows(T);
  std::iota(all_rows.begin(), all_rows.end(), Index{0});
  for (std::size_t i = 0; i < T; ++i)
    if (active[i]) active_rows.push_back(i);
  const bool all_active = active_rows.size() == T;
  const IndexList& kv_rows = retain_inactive_kv ? all_rows : active_rows;

  auto absolute = [start](const IndexList& rows) {
    IndexList pos(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) pos[i] = start + rows[i];
    return pos;
  };

  Tensor k_new, v_new;
  const IndexList kv_pos = absolute(kv_rows);
  if (!kv_rows.empty()) {
    const Tensor src = kv_rows.size() == T ? x_normed : gather_rows(x_normed, kv_rows);
    k_new = maybe_rope(linear(src, params.wk), kv_pos, config);
    v_new = linear(src, params.wv);
  }

  Tensor out;
  if (active_rows.empty()) {
    out = Tensor::zeros({0, d});
  } else {
    const IndexList q_pos = absolute(active_rows);
    const Tensor q_src = all_active ? x_normed : gather_rows(x_normed, active_rows);
    const Tensor q = maybe_rope(linear(q_src, params.wq), q_pos, config);

    Tensor keys = k_new, values = v_new;
    IndexList key_pos = kv_pos;
    if (cache.rows() > 0) {
      keys = kv_rows.empty() ? cache.keys() : concat_rows(cache.keys(), k_new);
      values = kv_rows.empty() ? cache.values() : concat_rows(cache.values(), v_new);
      key_pos = cache.positions();
      key_pos.insert(key_pos.end(), kv_pos.begin(), kv_pos.end());
    }
    out = linear(attention(q, keys, values, q_pos, key_pos, config.n_heads, weights), params.wo);
  }

  if (kv_rows.empty()) {
    cache.append(T, {}, {}, {});
  } else {
    cache.append(T, kv_rows, k_new.data(), v_new.data());
  }
  return out;
}

Tensor block_forward(const Tensor& x, const FrozenBlockParams& params, LayerKV& cache, const BlockConfig& config,
                     AttentionWeights* weights) {
  const std::vector<char> all(x.rows(), 1);
  const Tensor h = add(x, causal_attention(rmsnorm(x, params.attn_norm, config.norm_eps), params, cache, all,
                                           config, true, weights));
  return add(h, gated_ffn(rmsnorm(h, params.ffn_norm, config.norm_eps), params.w_gate, params.w_up,
                          params.w_down));
}

}  // namespace flexidepth
