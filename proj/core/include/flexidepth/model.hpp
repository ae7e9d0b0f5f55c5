#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flexidepth/block.hpp"
#include "flexidepth/kv_cache.hpp"
#include "flexidepth/layer.hpp"

namespace flexidepth {

enum class Mode { flexidepth, flexiexit, vanilla };

Mode parse_mode(std::string_view name);
std::string_view to_string(Mode mode);
PositionEncoding parse_position_encoding(std::string_view name);
std::string_view to_string(PositionEncoding encoding);

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t flexi_start = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab = 64;
  std::size_t max_seq = 128;
  // 0 selects the default ratios: d_model / 16 and d_ff / 16, at least 1.
  std::size_t router_dim = 0;
  std::size_t adapter_dim = 0;
  double tau = kDefaultTau;
  Mode mode = Mode::flexidepth;
  AblationFlags ablation;
  PositionEncoding position_encoding = PositionEncoding::rope;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  // Initial router head bias; undefined (no bias parameter) when unset.
  std::optional<double> router_bias_init;

  std::size_t resolved_router_dim() const;
  std::size_t resolved_adapter_dim() const;
  std::size_t n_flexi() const { return n_layers - flexi_start; }
  BlockConfig block_config() const;
  // Throws InvalidArgument on inconsistent dimensions.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Model {
  ModelConfig config;
  Tensor embedding;   // [vocab x d]; also the output head
  Tensor final_norm;  // [d]
  std::vector<FrozenBlockParams> blocks;  // one per layer
  std::vector<RouterParams> routers;      // one per FlexiDepth layer
  std::vector<AdapterParams> adapters;

  // Random base weights, router heads at zero, adapter down-projections at zero.
  static Model create(const ModelConfig& config, std::uint64_t seed);

  // Fresh routers/adapters over this model's base weights (shared, not copied).
  Model with_fresh_flexi(std::uint64_t seed) const;
  // Independent copy of every tensor.
  Model clone() const;

  FlexiLayer flexi_layer(std::size_t flexi_index) const;

  // Stable order, used by checkpoints and optimizers.
  std::vector<NamedTensor> named_tensors() const;
  std::vector<Tensor> base_parameters() const;
  std::vector<Tensor> flexi_parameters() const;
  void set_base_trainable(bool on);
  void set_flexi_trainable(bool on);
};

KVCache make_cache(const Model& model);

// Per-token routing record. `full[l]` is the effective path at FlexiDepth
// layer l; `gates` is empty in vanilla mode.
struct TokenTrace {
  int token = 0;
  std::size_t position = 0;
  std::size_t flexi_start = 0;
  std::size_t layers_used = 0;
  std::vector<double> gates;
  std::vector<char> full;

  bool operator==(const TokenTrace&) const = default;
};

// flexi_start + number of FlexiDepth layers on the full path.
std::size_t count_layers(const TokenTrace& trace);
std::size_t count_layers(std::span<const double> gates, std::size_t flexi_start, double tau);

struct ForwardOptions {
  std::optional<double> gate_override;
  // When set, resized to n_layers and filled with per-layer attention weights.
  std::vector<AttentionWeights>* attention_weights = nullptr;
};

struct ForwardResult {
  Tensor logits;                   // [T x vocab]
  std::vector<Tensor> gate_scores; // one [T x 1] column per FlexiDepth layer (graph tensors)
  std::vector<TokenTrace> traces;  // one per input token
};

// Runs `tokens` at positions cache.tokens_processed() onwards and extends the cache.
ForwardResult forward(const Model& model, std::span<const int> tokens, KVCache& cache,
                      const ForwardOptions& options = {});
// Same as forward(), but requires mode == flexiexit.
ForwardResult flexiexit_forward(const Model& model, std::span<const int> tokens, KVCache& cache,
                                const ForwardOptions& options = {});

struct GenerateOptions {
  std::size_t max_new = 32;
  std::optional<int> eos;
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::optional<double> gate_override;
};

struct GenerateResult {
  std::vector<int> tokens;         // prompt followed by generated tokens
  std::vector<TokenTrace> traces;  // one per generated token
};

// Autoregressive decoding with KV caches. The trace of a generated token is
// the routing of the forward step that produced it.
GenerateResult generate(const Model& model, std::span<const int> prompt, const GenerateOptions& options = {});

int argmax_row(const Tensor& logits, std::size_t row);

}  // namespace flexidepth
