#include "flexidepth/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flexidepth/errors.hpp"
#include "flexidepth/rng.hpp"

namespace flexidepth {

Mode parse_mode(std::string_view name) {
  if (name == "flexidepth") return Mode::flexidepth;
  if (name == "flexiexit") return Mode::flexiexit;
  if (name == "vanilla") return Mode::vanilla;
  throw InvalidArgument("unknown mode '" + std::string(name) + "'");
}

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::flexidepth: return "flexidepth";
    case Mode::flexiexit: return "flexiexit";
    case Mode::vanilla: return "vanilla";
  }
  return "unknown";
}

PositionEncoding parse_position_encoding(std::string_view name) {
  if (name == "rope") return PositionEncoding::rope;
  if (name == "none") return PositionEncoding::none;
  throw InvalidArgument("unknown position encoding '" + std::string(name) + "'");
}

std::string_view to_string(PositionEncoding encoding) {
  return encoding == PositionEncoding::rope ? "rope" : "none";
}

std::size_t ModelConfig::resolved_router_dim() const {
  return router_dim ? router_dim : std::max<std::size_t>(1, d_model / 16);
}

std::size_t ModelConfig::resolved_adapter_dim() const {
  return adapter_dim ? adapter_dim : std::max<std::size_t>(1, d_ff / 16);
}

BlockConfig ModelConfig::block_config() const {
  return BlockConfig{n_heads, position_encoding, rope_base, norm_eps};
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw InvalidArgument("model config: " + what); };
  if (n_layers == 0 || d_model == 0 || d_ff == 0 || vocab == 0 || max_seq == 0) fail("sizes must be positive");
  if (flexi_start > n_layers) fail("flexi_start exceeds n_layers");
  if (n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (position_encoding == PositionEncoding::rope && (d_model / n_heads) % 2 != 0) fail("rope needs even head width");
  if (!(tau > 0.0 && tau < 1.0)) fail("tau must lie in (0, 1)");
  if (norm_eps <= 0.0) fail("norm_eps must be positive");
}

namespace {

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor normal_tensor(Rng& rng, Shape shape, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_data()) v = stddev * rng.normal();
  return t;
}

void init_flexi(Model& model, Rng& rng) {
  const auto& c = model.config;
  const std::size_t d = c.d_model, dr = c.resolved_router_dim(), da = c.resolved_adapter_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  model.routers.clear();
  model.adapters.clear();
  for (std::size_t l = 0; l < c.n_flexi(); ++l) {
    RouterParams r;
    r.w_down = uniform_tensor(rng, {dr, d}, bound);
    r.w_up = uniform_tensor(rng, {d, dr}, bound);
    r.w_head = Tensor::zeros({1, d});
    r.pre_norm = Tensor::full({d}, 1.0);
    r.inner_norm = Tensor::full({dr}, 1.0);
    if (c.router_bias_init) r.head_bias = Tensor::full({1}, *c.router_bias_init);
    AdapterParams a;
    a.w_gate = uniform_tensor(rng, {da, d}, bound);
    a.w_up = uniform_tensor(rng, {da, d}, bound);
    a.w_down = Tensor::zeros({d, da});
    model.routers.push_back(std::move(r));
    model.adapters.push_back(std::move(a));
  }
  model.set_flexi_trainable(true);
}

Tensor deep_copy(const Tensor& t) {
  if (!t.defined()) return {};
  return Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
}

}  // namespace

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  Rng rng(seed);
  const std::size_t d = config.d_model, f = config.d_ff;
  m.embedding = normal_tensor(rng, {config.vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  m.final_norm = Tensor::full({d}, 1.0);
  const double bd = 1.0 / std::sqrt(static_cast<double>(d)), bf = 1.0 / std::sqrt(static_cast<double>(f));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    FrozenBlockParams b;
    b.attn_norm = Tensor::full({d}, 1.0);
    b.wq = uniform_tensor(rng, {d, d}, bd);
    b.wk = uniform_tensor(rng, {d, d}, bd);
    b.wv = uniform_tensor(rng, {d, d}, bd);
    b.wo = uniform_tensor(rng, {d, d}, bd);
    b.ffn_norm = Tensor::full({d}, 1.0);
    b.w_gate = uniform_tensor(rng, {f, d}, bd);
    b.w_up = uniform_tensor(rng, {f, d}, bd);
    b.w_down = uniform_tensor(rng, {d, f}, bf);
    m.blocks.push_back(std::move(b));
  }
  init_flexi(m, rng);
  return m;
}

Model Model::with_fresh_flexi(std::uint64_t seed) const {
  Model m;
  m.config = config;
  m.embedding = embedding;
  m.final_norm = final_norm;
  m.blocks = blocks;
  Rng rng(seed);
  init_flexi(m, rng);
  return m;
}

Model Model::clone() const {
  Model m;
  m.config = config;
  m.embedding = deep_copy(embedding);
  m.final_norm = deep_copy(final_norm);
  for (const auto& b : blocks) {
    m.blocks.push_back({deep_copy(b.attn_norm), deep_copy(b.wq), deep_copy(b.wk), deep_copy(b.wv), deep_copy(b.wo),
                        deep_copy(b.ffn_norm), deep_copy(b.w_gate), deep_copy(b.w_up), deep_copy(b.w_down)});
  }
  for (const auto& r : routers) {
    m.routers.push_back({deep_copy(r.w_down), deep_copy(r.w_up), deep_copy(r.w_head), deep_copy(r.pre_norm),
                         deep_copy(r.inner_norm), deep_copy(r.head_bias)});
  }
  for (const auto& a : adapters) {
    m.adapters.push_back({deep_copy(a.w_gate), deep_copy(a.w_up), deep_copy(a.w_down)});
  }
  return m;
}

FlexiLayer Model::flexi_layer(std::size_t flexi_index) const {
  if (flexi_index >= routers.size()) throw InvalidArgument("flexi_layer: index out of range");
  return FlexiLayer{blocks[config.flexi_start + flexi_index], routers[flexi_index], adapters[flexi_index],
                    config.ablation};
}

std::vector<NamedTensor> Model::named_tensors() const {
  std::vector<NamedTensor> out;
  out.push_back({"embedding", embedding});
  out.push_back({"final_norm", final_norm});
  static constexpr const char* kBlockNames[] = {"attn_norm", "wq",     "wk",   "wv",    "wo",
                                                "ffn_norm",  "w_gate", "w_up", "w_down"};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto ts = blocks[l].tensors();
    for (std::size_t i = 0; i < ts.size(); ++i)
      out.push_back({"blocks." + std::to_string(l) + "." + kBlockNames[i], ts[i]});
  }
  for (std::size_t l = 0; l < routers.size(); ++l) {
    const auto p = "routers." + std::to_string(l) + ".";
    const auto& r = routers[l];
    out.push_back({p + "w_down", r.w_down});
    out.push_back({p + "w_up", r.w_up});
    out.push_back({p + "w_head", r.w_head});
    out.push_back({p + "pre_norm", r.pre_norm});
    out.push_back({p + "inner_norm", r.inner_norm});
    if (r.head_bias.defined()) out.push_back({p + "head_bias", r.head_bias});
  }
  for (std::size_t l = 0; l < adapters.size(); ++l) {
    const auto p = "adapters." + std::to_string(l) + ".";
    out.push_back({p + "w_gate", adapters[l].w_gate});
    out.push_back({p + "w_up", adapters[l].w_up});
    out.push_back({p + "w_down", adapters[l].w_down});
  }
  return out;
}

std::vector<Tensor> Model::base_parameters() const {
  std::vector<Tensor> out{embedding, final_norm};
  for (const auto& b : blocks) {
    auto ts = b.tensors();
    out.insert(out.end(), ts.begin(), ts.end());
  }
  return out;
}

std::vector<Tensor> Model::flexi_parameters() const {
  std::vector<Tensor> out;
  for (const auto& r : routers) {
    auto ts = r.tensors();
    out.insert(out.end(), ts.begin(), ts.end());
  }
  for (const auto& a : adapters) {
    auto ts = a.tensors();
    out.insert(out.end(), ts.begin(), ts.end());
  }
  return out;
}

void Model::set_base_trainable(bool on) {
  for (auto& t : base_parameters()) t.set_requires_grad(on);
}

void Model::set_flexi_trainable(bool on) {
  for (auto& t : flexi_parameters()) t.set_requires_grad(on);
}

KVCache make_cache(const Model& model) { return KVCache(model.config.n_layers, model.config.d_model); }

std::size_t count_layers(const TokenTrace& trace) {
  return trace.flexi_start + static_cast<std::size_t>(std::count(trace.full.begin(), trace.full.end(), 1));
}

std::size_t count_layers(std::span<const double> gates, std::size_t flexi_start, double tau) {
  return flexi_start + static_cast<std::size_t>(std::count_if(gates.begin(), gates.end(),
                                                              [tau](double g) { return g > tau; }));
}

namespace {

ForwardResult run_forward(const Model& model, std::span<const int> tokens, KVCache& cache,
                          const ForwardOptions& options) {
  const auto& c = model.config;
  if (tokens.empty()) throw InvalidArgument("forward: empty token sequence");
  if (cache.n_layers() != c.n_layers) throw StateError("forward: cache was built for a different model");
  const std::size_t start = cache.tokens_processed();
  const std::size_t T = tokens.size();
  if (start + T > c.max_seq) {
    throw InvalidArgument("forward: sequence length " + std::to_string(start + T) + " exceeds max_seq " +
                          std::to_string(c.max_seq));
  }
  const BlockConfig block_config = c.block_config();
  if (options.attention_weights) options.attention_weights->assign(c.n_layers, {});
  auto weights_for = [&](std::size_t l) -> AttentionWeights* {
    return options.attention_weights ? &(*options.attention_weights)[l] : nullptr;
  };

  ForwardResult result;
  result.traces.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    auto& tr = result.traces[t];
    tr.token = tokens[t];
    tr.position = start + t;
    tr.flexi_start = c.flexi_start;
  }

  Tensor x = embedding(model.embedding, tokens);
  const bool routed = c.mode != Mode::vanilla;
  std::vector<char> latched(c.mode == Mode::flexiexit ? T : 0, 0);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    if (!routed || l < c.flexi_start) {
      x = block_forward(x, model.blocks[l], cache.layer(l), block_config, weights_for(l));
      continue;
    }
    LayerOptions lo;
    lo.tau = c.tau;
    lo.gate_override = options.gate_override;
    lo.forced_skip = latched;
    lo.attention_weights = weights_for(l);
    LayerResult lr = layer_forward(x, model.flexi_layer(l - c.flexi_start), cache.layer(l), block_config, lo);
    x = lr.output;
    const auto g = lr.gates.scores.data();
    for (std::size_t t = 0; t < T; ++t) {
      result.traces[t].gates.push_back(g[t]);
      result.traces[t].full.push_back(lr.full[t]);
      if (!latched.empty() && !lr.full[t]) latched[t] = 1;
    }
    result.gate_scores.push_back(std::move(lr.gates.scores));
  }
  for (auto& tr : result.traces) {
    if (!routed) tr.full.assign(c.n_flexi(), 1);
    tr.layers_used = count_layers(tr);
  }
  result.logits = linear(rmsnorm(x, model.final_norm, c.norm_eps), model.embedding);
  return result;
}

}  // namespace

ForwardResult forward(const Model& model, std::span<const int> tokens, KVCache& cache,
                      const ForwardOptions& options) {
  return run_forward(model, tokens, cache, options);
}

ForwardResult flexiexit_forward(const Model& model, std::span<const int> tokens, KVCache& cache,
                                const ForwardOptions& options) {
  if (model.config.mode != Mode::flexiexit) throw InvalidArgument("flexiexit_forward: model is not in flexiexit mode");
  return run_forward(model, tokens, cache, options);
}

int argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t V = logits.cols();
  const auto d = logits.data().subspan(row * V, V);
  return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

namespace {

int sample_row(const Tensor& logits, std::size_t row, double temperature, Rng& rng) {
  const std::size_t V = logits.cols();
  const auto d = logits.data().subspan(row * V, V);
  const double mx = *std::max_element(d.begin(), d.end());
  std::vector<double> p(V);
  double z = 0.0;
  for (std::size_t i = 0; i < V; ++i) z += p[i] = std::exp((d[i] - mx) / temperature);
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < V; ++i) {
    u -= p[i];
    if (u < 0) return static_cast<int>(i);
  }
  return static_cast<int>(V - 1);
}

}  // namespace

GenerateResult generate(const Model& model, std::span<const int> prompt, const GenerateOptions& options) {
  if (prompt.empty()) throw InvalidArgument("generate: empty prompt");
  if (!options.greedy && options.temperature <= 0.0) throw InvalidArgument("generate: temperature must be positive");
  NoGradGuard no_grad;
  GenerateResult out;
  out.tokens.assign(prompt.begin(), prompt.end());
  if (options.max_new == 0) return out;

  Rng rng(options.seed);
  KVCache cache = make_cache(model);
  ForwardOptions fo;
  fo.gate_override = options.gate_override;
  ForwardResult step = forward(model, prompt, cache, fo);
  for (std::size_t n = 0; n < options.max_new; ++n) {
    const std::size_t last = step.traces.size() - 1;
    const int next = options.greedy ? argmax_row(step.logits, last)
                                    : sample_row(step.logits, last, options.temperature, rng);
    TokenTrace trace = step.traces[last];
    trace.token = next;
    trace.position += 1;
    out.tokens.push_back(next);
    out.traces.push_back(std::move(trace));
    if (options.eos && next == *options.eos) break;
    if (n + 1 == options.max_new || out.tokens.size() >= model.config.max_seq) break;
    const int input[] = {next};
    step = forward(model, input, cache, fo);
  }
  return out;
}

}  // namespace flexidepth
