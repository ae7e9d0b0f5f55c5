#include "flexidepth/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "flexidepth/errors.hpp"
#include "flexidepth/rng.hpp"

namespace flexidepth {

Schedule parse_schedule(std::string_view name) {
  if (name == "constant") return Schedule::constant;
  if (name == "cosine") return Schedule::cosine;
  throw InvalidArgument("unknown schedule '" + std::string(name) + "'");
}

std::string_view to_string(Schedule schedule) { return schedule == Schedule::cosine ? "cosine" : "constant"; }

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw InvalidArgument("train config: " + what); };
  if (!(alpha >= 0.0)) fail("alpha must be >= 0");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must lie in [0, 1)");
  if (batch == 0) fail("batch must be positive");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be >= 0");
}

LossBreakdown total_loss(double lm, double skip, double alpha) { return {lm, skip, alpha * skip + lm}; }

double skip_loss(std::span<const double> gates, std::size_t T, std::size_t L) {
  if (T == 0) throw InvalidArgument("skip_loss: no tokens");
  if (gates.size() != T * L) throw InvalidArgument("skip_loss: gate matrix is not T x L");
  double acc = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t l = 0; l < L; ++l) s += gates[t * L + l];
    acc += s * s;
  }
  return acc * (1.0 / static_cast<double>(T));
}

Tensor skip_loss(const std::vector<Tensor>& gate_columns, std::span<const Index> rows) {
  if (rows.empty()) throw InvalidArgument("skip_loss: no tokens");
  if (gate_columns.empty()) return Tensor::scalar(0.0);
  return mean(square(row_sum(gather_rows(stack_columns(gate_columns), rows))));
}

Example make_example(const ProbeSample& sample) {
  Example ex;
  ex.tokens = sample.prompt_tokens();
  ex.prompt_len = ex.tokens.size();
  const auto target = sample.target_tokens();
  ex.tokens.insert(ex.tokens.end(), target.begin(), target.end());
  return ex;
}

std::vector<Example> make_examples(const std::vector<ProbeSample>& samples) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(make_example(s));
  return out;
}

namespace {

void check_example(const Example& ex) {
  if (ex.prompt_len == 0 || ex.prompt_len >= ex.tokens.size())
    throw InvalidArgument("example: prompt must be non-empty and shorter than the sequence");
}

}  // namespace

SequenceLoss sequence_loss(const Model& model, const Example& example, double alpha, bool skip_all_tokens) {
  check_example(example);
  const std::size_t T = example.tokens.size();
  KVCache cache = make_cache(model);
  const ForwardResult fr = forward(model, example.tokens, cache);

  IndexList rows;
  std::vector<int> targets;
  for (std::size_t t = example.prompt_len - 1; t + 1 < T; ++t) {
    rows.push_back(t);
    targets.push_back(example.tokens[t + 1]);
  }
  SequenceLoss out;
  out.lm = cross_entropy(gather_rows(fr.logits, rows), targets);

  IndexList skip_rows = rows;
  if (skip_all_tokens) {
    skip_rows.resize(T);
    std::iota(skip_rows.begin(), skip_rows.end(), Index{0});
  }
  out.skip = skip_loss(fr.gate_scores, skip_rows);
  out.total = add(scale(out.skip, alpha), out.lm);

  std::size_t used = 0;
  for (Index r : rows) used += fr.traces[r].layers_used;
  out.mean_layers_used = static_cast<double>(used) / static_cast<double>(rows.size());
  return out;
}

double eval_lm_loss(const Model& model, const std::vector<Example>& examples) {
  if (examples.empty()) throw InvalidArgument("eval_lm_loss: no examples");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& ex : examples) total += sequence_loss(model, ex, 0.0).lm.item();
  return total / static_cast<double>(examples.size());
}

double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  const auto warmup = static_cast<std::size_t>(std::ceil(config.warmup_ratio * static_cast<double>(total_steps)));
  if (step < warmup) return config.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (config.schedule == Schedule::constant) return config.lr;
  const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return config.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.impl()->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-12);
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.impl()->grad) g *= factor;
    }
  }
  return norm;
}

AdamW::AdamW(std::vector<Tensor> params, const AdamWOptions& options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    const auto& grad = p.impl()->grad;
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = p.rank() == 2 ? 1.0 - lr * options_.weight_decay : 1.0;
    for (std::size_t k = 0; k < data.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
      v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
      data[k] *= decay;
      data[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + options_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

MetricsSink jsonl_sink(std::ostream& out) {
  return [&out](const StepRecord& r) {
    nlohmann::json j{{"step", r.step},
                     {"lm", r.loss.lm},
                     {"skip", r.loss.skip},
                     {"total", r.loss.total},
                     {"mean_layers_used", r.mean_layers_used},
                     {"grad_norm", r.grad_norm},
                     {"lr", r.lr}};
    out << j.dump() << '\n';
  };
}

namespace {

std::vector<Tensor> select_params(Model& model, Phase phase) {
  if (phase == Phase::base) {
    if (model.config.mode != Mode::vanilla) throw InvalidArgument("base phase needs a vanilla-mode model");
    model.set_flexi_trainable(false);
    model.set_base_trainable(true);
    return model.base_parameters();
  }
  if (model.config.mode == Mode::vanilla) throw InvalidArgument("flexidepth phase needs a routed model");
  model.set_base_trainable(false);
  model.set_flexi_trainable(true);
  return model.flexi_parameters();
}

}  // namespace

Trainer::Trainer(Model& model, const TrainConfig& config, Phase phase, std::size_t total_steps)
    : model_(model),
      config_(config),
      phase_(phase),
      total_steps_(total_steps),
      optimizer_(select_params(model, phase),
                 AdamWOptions{config.beta1, config.beta2, config.eps, config.weight_decay}) {
  config_.validate();
}

StepRecord Trainer::train_step(const std::vector<Example>& batch) {
  if (batch.empty()) throw InvalidArgument("train_step: empty batch");
  StepRecord rec;
  rec.step = optimizer_.steps_taken() + 1;
  optimizer_.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const SequenceLoss sl = sequence_loss(model_, ex, config_.alpha, config_.skip_loss_all_tokens);
    const double total = sl.total.item();
    if (!std::isfinite(total)) {
      throw NumericError("step " + std::to_string(rec.step) + ": non-finite loss");
    }
    sl.total.backward(inv_b);
    rec.loss.lm += sl.lm.item() * inv_b;
    rec.loss.skip += sl.skip.item() * inv_b;
    rec.mean_layers_used += sl.mean_layers_used * inv_b;
  }
  rec.loss.total = config_.alpha * rec.loss.skip + rec.loss.lm;
  rec.grad_norm = clip_grad_norm(optimizer_.params(), config_.clip_norm);
  if (!std::isfinite(rec.grad_norm)) {
    throw NumericError("step " + std::to_string(rec.step) + ": non-finite gradient");
  }
  rec.lr = learning_rate(config_, rec.step - 1, total_steps_);
  optimizer_.step(rec.lr);
  return rec;
}

std::vector<StepRecord> train(Model& model, const TrainConfig& config, Phase phase,
                              const std::vector<Example>& data, const MetricsSink& sink) {
  config.validate();
  if (data.empty()) throw InvalidArgument("train: no data");
  const std::size_t per_epoch = (data.size() + config.batch - 1) / config.batch;
  const std::size_t total = config.steps ? config.steps : config.epochs * per_epoch;
  Trainer trainer(model, config, phase, total);

  Rng rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  std::vector<StepRecord> history;
  history.reserve(total);
  std::vector<Example> batch;
  for (std::size_t s = 0; s < total; ++s) {
    batch.clear();
    while (batch.size() < config.batch) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }
    history.push_back(trainer.train_step(batch));
    if (sink) sink(history.back());
  }
  return history;
}

std::vector<SweepRow> alpha_sweep(const Model& base, const std::vector<double>& alphas, const TrainConfig& config,
                                  const std::vector<Example>& train_data, const std::vector<ProbeSample>& eval) {
  std::vector<SweepRow> rows;
  for (double a : alphas) {
    Model m = base.with_fresh_flexi(config.seed);
    if (m.config.mode == Mode::vanilla) m.config.mode = Mode::flexidepth;
    TrainConfig c = config;
    c.alpha = a;
    train(m, c, Phase::flexidepth, train_data);
    const EvalReport report = eval_task(m, eval);
    SweepRow row;
    row.alpha = a;
    row.exact_match = report.exact_match;
    row.stats = report.stats;
    std::size_t n = 0, used = 0;
    for (const auto& r : report.results) {
      for (const auto& t : r.traces) used += t.layers_used;
      n += r.traces.size();
    }
    row.mean_layers_used = n ? static_cast<double>(used) / static_cast<double>(n) : 0.0;
    row.final_lm = eval_lm_loss(m, make_examples(eval));
    rows.push_back(std::move(row));
  }
  return rows;
}

RunConfig default_run_config() {
  RunConfig rc;
  rc.base.steps = 0;
  rc.base.epochs = 0;
  rc.base.alpha = 0.0;
  return rc;
}

std::vector<ProbeSample> train_samples(const RunConfig& rc) {
  return gen_mix(rc.tasks, rc.n_train, rc.data_seed, rc.task_options);
}

std::vector<ProbeSample> eval_samples(const RunConfig& rc) {
  std::vector<ProbeSample> out;
  for (Task task : rc.tasks) {
    auto part = gen_task(task, rc.n_eval, ~rc.data_seed, rc.task_options);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

Model attach_flexi(const Model& base, const ModelConfig& target, std::uint64_t seed) {
  const ModelConfig& b = base.config;
  if (b.n_layers != target.n_layers || b.d_model != target.d_model || b.n_heads != target.n_heads ||
      b.d_ff != target.d_ff || b.vocab != target.vocab || b.max_seq != target.max_seq ||
      b.position_encoding != target.position_encoding || b.rope_base != target.rope_base ||
      b.norm_eps != target.norm_eps) {
    throw InvalidArgument("attach_flexi: base model dimensions differ from the target config");
  }
  Model m = base;
  m.config = target;
  m.config.validate();
  return m.with_fresh_flexi(seed);
}

RunResult run_training(const RunConfig& rc, const std::optional<Model>& base, const MetricsSink& base_sink,
                       const MetricsSink& flexi_sink) {
  rc.model.validate();
  const auto data = make_examples(train_samples(rc));
  RunResult out{base ? *base : Model{}, {}, {}};
  if (!base) {
    ModelConfig vanilla = rc.model;
    vanilla.mode = Mode::vanilla;
    out.model = Model::create(vanilla, rc.model_seed);
    if (rc.base.steps > 0 || rc.base.epochs > 0) {
      out.base_log = train(out.model, rc.base, Phase::base, data, base_sink);
    }
  }
  out.model = attach_flexi(out.model, rc.model, rc.model_seed);
  if (rc.model.mode != Mode::vanilla && (rc.train.steps > 0 || rc.train.epochs > 0)) {
    out.flexi_log = train(out.model, rc.train, Phase::flexidepth, data, flexi_sink);
  }
  return out;
}

namespace {

namespace pt = boost::property_tree;

template <typename T>
T get_as(const pt::ptree& node, const std::string& key) {
  const auto text = node.get_value<std::string>();
  std::istringstream in(text);
  T value{};
  in >> std::boolalpha >> value;
  if (!in || !(in >> std::ws).eof()) throw InvalidArgument("config: bad value '" + text + "' for " + key);
  return value;
}

std::size_t get_count(const pt::ptree& node, const std::string& key) {
  const auto v = get_as<long long>(node, key);
  if (v < 0) throw InvalidArgument("config: " + key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

void apply_train_key(TrainConfig& c, const std::string& k, const pt::ptree& v, const std::string& full) {
  if (k == "alpha") c.alpha = get_as<double>(v, full);
  else if (k == "lr") c.lr = get_as<double>(v, full);
  else if (k == "beta1") c.beta1 = get_as<double>(v, full);
  else if (k == "beta2") c.beta2 = get_as<double>(v, full);
  else if (k == "eps") c.eps = get_as<double>(v, full);
  else if (k == "weight_decay") c.weight_decay = get_as<double>(v, full);
  else if (k == "warmup_ratio") c.warmup_ratio = get_as<double>(v, full);
  else if (k == "schedule") c.schedule = parse_schedule(v.get_value<std::string>());
  else if (k == "steps") c.steps = get_count(v, full);
  else if (k == "epochs") c.epochs = get_count(v, full);
  else if (k == "batch") c.batch = get_count(v, full);
  else if (k == "seed") c.seed = get_count(v, full);
  else if (k == "clip_norm") c.clip_norm = get_as<double>(v, full);
  else if (k == "skip_loss_all_tokens") c.skip_loss_all_tokens = get_as<bool>(v, full);
  else throw InvalidArgument("config: unknown key " + full);
}

void apply_model_key(RunConfig& rc, const std::string& k, const pt::ptree& v, const std::string& full) {
  auto& m = rc.model;
  if (k == "n_layers") m.n_layers = get_count(v, full);
  else if (k == "flexi_start") m.flexi_start = get_count(v, full);
  else if (k == "d_model") m.d_model = get_count(v, full);
  else if (k == "n_heads") m.n_heads = get_count(v, full);
  else if (k == "d_ff") m.d_ff = get_count(v, full);
  else if (k == "vocab") m.vocab = get_count(v, full);
  else if (k == "max_seq") m.max_seq = get_count(v, full);
  else if (k == "router_dim") m.router_dim = get_count(v, full);
  else if (k == "adapter_dim") m.adapter_dim = get_count(v, full);
  else if (k == "tau") m.tau = get_as<double>(v, full);
  else if (k == "mode") m.mode = parse_mode(v.get_value<std::string>());
  else if (k == "position_encoding") m.position_encoding = parse_position_encoding(v.get_value<std::string>());
  else if (k == "rope_base") m.rope_base = get_as<double>(v, full);
  else if (k == "norm_eps") m.norm_eps = get_as<double>(v, full);
  else if (k == "seed") rc.model_seed = get_count(v, full);
  else if (k == "router_bias_init") {
    const auto text = v.get_value<std::string>();
    if (text == "none") m.router_bias_init.reset();
    else m.router_bias_init = get_as<double>(v, full);
  } else if (k == "ablation") {
    m.ablation = {};
    for (const auto& name : split_list(v.get_value<std::string>())) {
      if (name == "none") continue;
      switch (parse_ablation(name)) {
        case Ablation::linear_router: m.ablation.linear_router = true; break;
        case Ablation::no_kv_cache: m.ablation.no_kv_cache = true; break;
        case Ablation::no_adapter: m.ablation.no_adapter = true; break;
      }
    }
  } else {
    throw InvalidArgument("config: unknown key " + full);
  }
}

void apply_data_key(RunConfig& rc, const std::string& k, const pt::ptree& v, const std::string& full) {
  if (k == "tasks") {
    rc.tasks.clear();
    for (const auto& name : split_list(v.get_value<std::string>())) rc.tasks.push_back(parse_task(name));
    if (rc.tasks.empty()) throw InvalidArgument("config: data.tasks is empty");
  } else if (k == "n_train") rc.n_train = get_count(v, full);
  else if (k == "n_eval") rc.n_eval = get_count(v, full);
  else if (k == "seed") rc.data_seed = get_count(v, full);
  else if (k == "wide_operands") rc.task_options.wide_operands = get_as<bool>(v, full);
  else if (k == "repeat_count") rc.task_options.repeat_count = get_count(v, full);
  else throw InvalidArgument("config: unknown key " + full);
}

}  // namespace

RunConfig parse_run_config(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(e.line(), e.message());
  }
  RunConfig rc = default_run_config();
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw InvalidArgument("config: key '" + section + "' must sit inside a section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      if (section == "model") apply_model_key(rc, key, value, full);
      else if (section == "train") apply_train_key(rc.train, key, value, full);
      else if (section == "base") apply_train_key(rc.base, key, value, full);
      else if (section == "data") apply_data_key(rc, key, value, full);
      else throw InvalidArgument("config: unknown section [" + section + "]");
    }
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file '" + path + "'");
  return parse_run_config(in);
}

}  // namespace flexidepth
