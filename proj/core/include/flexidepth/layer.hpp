#pragma once

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "flexidepth/block.hpp"
#include "flexidepth/kv_cache.hpp"
#include "flexidepth/router.hpp"

namespace flexidepth {

// Reduced-width gated FFN placed where the skipped FFN would sit.
struct AdapterParams {
  Tensor w_gate;  // [d_a x d]
  Tensor w_up;    // [d_a x d]
  Tensor w_down;  // [d x d_a]

  std::vector<Tensor> tensors() const;
};

enum class Ablation { linear_router, no_kv_cache, no_adapter };

struct AblationFlags {
  bool linear_router = false;
  bool no_kv_cache = false;
  bool no_adapter = false;

  bool operator==(const AblationFlags&) const = default;
};

// Throws InvalidArgument for names other than linear_router / no_kv_cache / no_adapter.
Ablation parse_ablation(std::string_view name);
std::string_view to_string(Ablation flag);

// Decoder layer with a router and an adapter. Tensor members are handles, so
// copies share weights with the model they came from.
struct FlexiLayer {
  FrozenBlockParams frozen;
  RouterParams router;
  AdapterParams adapter;
  AblationFlags flags;
};

FlexiLayer apply_ablation(FlexiLayer layer, Ablation flag);

Tensor adapter_forward(const Tensor& x_normed, const AdapterParams& adapter);

struct LayerOptions {
  double tau = kDefaultTau;
  // Replaces every router score with this constant (no router gradient).
  std::optional<double> gate_override;
  // Tokens whose entry is non-zero are forced onto the skip path (early-exit latch).
  std::span<const char> forced_skip;
  AttentionWeights* attention_weights = nullptr;
};

struct LayerResult {
  Tensor output;             // [T x d], original token order
  GateVector gates;          // raw router scores and threshold decisions
  std::vector<char> full;    // effective path per token after any forced skip
};

// Full path:  h = x + Attn(Norm(x));  out = g * FFN(Norm(h)) + h
// Skip path:  out = (1 - g) * Adapter(Norm(x)) + x     (out = x under no_adapter)
// Keys/values are computed for skipped tokens too, unless no_kv_cache.
LayerResult layer_forward(const Tensor& x, const FlexiLayer& layer, LayerKV& cache, const BlockConfig& config,
                          const LayerOptions& options = {});

}  // namespace flexidepth
