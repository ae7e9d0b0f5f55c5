#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexidepth/checkpoint.hpp"
#include "flexidepth/dataset.hpp"
#include "flexidepth/depthmap.hpp"
#include "flexidepth/errors.hpp"
#include "flexidepth/tasks.hpp"
#include "flexidepth/throughput.hpp"
#include "flexidepth/training.hpp"

using namespace flexidepth;
using nlohmann::json;

namespace {

constexpr const char* kSeedEnv = "FLEXI_SEED";

std::optional<std::uint64_t> seed_override() {
  const char* text = std::getenv(kSeedEnv);
  if (!text || !*text) return std::nullopt;
  std::size_t used = 0;
  std::uint64_t value = 0;
  try {
    value = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != std::string(text).size()) throw InvalidArgument(std::string(kSeedEnv) + " must be an unsigned integer");
  return value;
}

RunConfig load_config(const std::string& path) {
  RunConfig rc = load_run_config(path);
  if (auto s = seed_override()) {
    rc.model_seed = rc.data_seed = rc.train.seed = rc.base.seed = *s;
  }
  return rc;
}

std::uint64_t pick_seed(std::uint64_t flag) { return seed_override().value_or(flag); }

std::optional<Model> load_base(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path);
}

json stats_json(const TaskStats& s) {
  return {{"n_tokens", s.n_tokens}, {"mean", s.mean},          {"variance", s.variance},
          {"lhs_mean", s.lhs_mean}, {"rhs_mean", s.rhs_mean}};
}

json report_json(const Model& model, const std::vector<ProbeSample>& samples, const EvalReport& report) {
  std::size_t used = 0, n = 0;
  for (const auto& r : report.results) {
    for (const auto& t : r.traces) used += t.layers_used;
    n += r.traces.size();
  }
  json tasks = json::object();
  for (const auto& [task, s] : report.stats) tasks[std::string(to_string(task))] = stats_json(s);
  return {{"exact_match", report.exact_match},
          {"mean_layers_used", n ? static_cast<double>(used) / static_cast<double>(n) : 0.0},
          {"eval_lm", eval_lm_loss(model, make_examples(samples))},
          {"tasks", tasks}};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open '" + path + "' for writing");
  out << text;
}

std::vector<double> parse_alphas(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw InvalidArgument("bad alpha value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw InvalidArgument("no alpha values given");
  return out;
}

struct TrainArgs {
  std::string config, out, metrics, base;
};

int cmd_train(const TrainArgs& a) {
  const RunConfig rc = load_config(a.config);
  std::ofstream metrics;
  MetricsSink sink;
  if (!a.metrics.empty()) {
    metrics.open(a.metrics);
    if (!metrics) throw InvalidArgument("cannot open '" + a.metrics + "' for writing");
    sink = jsonl_sink(metrics);
  }
  const RunResult run = run_training(rc, load_base(a.base), {}, sink);
  save_checkpoint(run.model, a.out);
  const auto eval = eval_samples(rc);
  json j = report_json(run.model, eval, eval_task(run.model, eval));
  j["checkpoint"] = a.out;
  j["base_steps"] = run.base_log.size();
  j["flexi_steps"] = run.flexi_log.size();
  std::cout << j.dump() << '\n';
  return 0;
}

struct GenerateArgs {
  std::string ckpt, prompt, mode;
  std::size_t max_new = 32;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  bool depthmap = false, as_json = false;
};

int cmd_generate(const GenerateArgs& a) {
  Model model = load_checkpoint(a.ckpt);
  if (!a.mode.empty()) model.config.mode = parse_mode(a.mode);
  std::vector<int> prompt{vocab::kBos};
  const auto body = vocab::encode(a.prompt);
  prompt.insert(prompt.end(), body.begin(), body.end());
  GenerateOptions o;
  o.max_new = a.max_new;
  o.eos = vocab::kEos;
  o.greedy = a.temperature <= 0.0;
  o.temperature = o.greedy ? 1.0 : a.temperature;
  o.seed = pick_seed(a.seed);
  const auto result = generate(model, prompt, o);
  const std::vector<int> generated(result.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                   result.tokens.end());
  if (a.as_json) {
    json tokens = json::array();
    for (const auto& t : result.traces)
      tokens.push_back({{"text", vocab::token_text(t.token)}, {"layers", t.layers_used}, {"gates", t.gates}});
    std::cout << json{{"prompt", a.prompt}, {"output", vocab::decode(generated)}, {"tokens", tokens}}.dump() << '\n';
  } else if (a.depthmap) {
    std::vector<DepthMapRecord> records;
    for (const auto& t : result.traces)
      records.push_back({vocab::token_text(t.token), t.layers_used, t.gates, t.position, 0, "prompt"});
    if (records.empty()) throw InvalidArgument("nothing was generated");
    std::cout << render_depthmap(records, {model.config.flexi_start, model.config.n_layers});
  } else {
    std::cout << vocab::decode(generated) << '\n';
  }
  return 0;
}

struct TraceArgs {
  std::string ckpt, task, out, dataset, mode;
  std::size_t n = 20;
  std::uint64_t seed = 1;
  bool html = false, full_precision = false;
};

int cmd_trace(const TraceArgs& a) {
  Model model = load_checkpoint(a.ckpt);
  if (!a.mode.empty()) model.config.mode = parse_mode(a.mode);
  const std::uint64_t seed = pick_seed(a.seed);
  const auto samples = gen_task(parse_task(a.task), a.n, seed);
  const auto report = eval_task(model, samples);
  const auto ds = build_dataset(model, seed, samples, report);
  const auto records = to_records(ds);
  if (records.empty()) throw InvalidArgument("no tokens were generated");
  DepthMapOptions o{model.config.flexi_start, model.config.n_layers};
  o.format = a.html ? DepthMapFormat::html : DepthMapFormat::terminal;
  write_text(a.out, render_depthmap(records, o));
  if (!a.dataset.empty()) export_dataset(ds, a.dataset, {a.full_precision});
  json j = report_json(model, samples, report);
  j["depthmap"] = a.out;
  if (!a.dataset.empty()) j["dataset"] = a.dataset;
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_stats(const std::string& path) {
  const auto ds = import_dataset(path);
  json tasks = json::object();
  for (const auto& [task, s] : dataset_stats(ds)) tasks[std::string(to_string(task))] = stats_json(s);
  std::cout << json{{"config_hash", ds.header.config_hash},
                    {"mode", ds.header.mode},
                    {"n_samples", ds.samples.size()},
                    {"tasks", tasks}}
                   .dump()
            << '\n';
  return 0;
}

// Trains (or loads) the base once so that every variant starts from the same weights.
Model shared_base(const RunConfig& rc, const std::string& base_path) {
  if (auto b = load_base(base_path)) return *b;
  RunConfig base_only = rc;
  base_only.model.mode = Mode::vanilla;
  return run_training(base_only).model;
}

int cmd_ablate(const std::string& flag, const std::string& config, const std::string& base_path) {
  const RunConfig rc = load_config(config);
  const Ablation ablation = parse_ablation(flag);
  const Model base = shared_base(rc, base_path);
  const auto eval = eval_samples(rc);
  json variants = json::object();
  RunConfig variant = rc;
  if (variant.model.mode == Mode::vanilla) variant.model.mode = Mode::flexidepth;
  for (bool ablated : {false, true}) {
    RunConfig c = variant;
    if (ablated) {
      FlexiLayer flags_only;
      flags_only.flags = c.model.ablation;
      c.model.ablation = apply_ablation(flags_only, ablation).flags;
    }
    const Model m = run_training(c, base).model;
    variants[ablated ? std::string(to_string(ablation)) : "full"] = report_json(m, eval, eval_task(m, eval));
  }
  std::cout << json{{"flag", flag}, {"variants", variants}}.dump() << '\n';
  return 0;
}

int cmd_sweep(const std::string& alphas_text, const std::string& config, const std::string& base_path) {
  const RunConfig rc = load_config(config);
  const auto alphas = parse_alphas(alphas_text);
  ModelConfig target = rc.model;
  if (target.mode == Mode::vanilla) target.mode = Mode::flexidepth;
  const Model base = attach_flexi(shared_base(rc, base_path), target, rc.model_seed);
  const auto rows = alpha_sweep(base, alphas, rc.train, make_examples(train_samples(rc)), eval_samples(rc));
  json out = json::array();
  for (const auto& r : rows) {
    json tasks = json::object();
    for (const auto& [task, s] : r.stats) tasks[std::string(to_string(task))] = stats_json(s);
    out.push_back({{"alpha", r.alpha},
                   {"mean_layers_used", r.mean_layers_used},
                   {"exact_match", r.exact_match},
                   {"eval_lm", r.final_lm},
                   {"tasks", tasks}});
  }
  std::cout << json{{"rows", out}}.dump() << '\n';
  return 0;
}

int cmd_bench(const std::string& ckpt, const BenchOptions& options) {
  const Model model = load_checkpoint(ckpt);
  BenchOptions o = options;
  o.seed = pick_seed(o.seed);
  const auto r = bench_throughput(model, o);
  json modes = json::object();
  for (const auto& m : r.modes) {
    modes[std::string(to_string(m.mode))] = {{"iters_per_second", m.timing.mean},
                                             {"stddev", m.timing.stddev},
                                             {"per_repeat", m.timing.per_repeat}};
  }
  std::cout << json{{"modes", modes}, {"ratio", r.ratio}}.dump() << '\n';
  return 0;
}

int fail(const std::string& kind, const std::string& message, int code, std::size_t line = 0) {
  json j{{"error", kind}, {"message", message}};
  if (line) j["line"] = line;
  std::cerr << j.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FlexiDepth toy transformer: training, generation, tracing and benchmarks"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model from a config file and save a checkpoint");
  train->add_option("--config", train_args.config, "INI config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_args.out, "Checkpoint path")->default_val("model.ckpt");
  train->add_option("--metrics", train_args.metrics, "JSONL metrics log for the FlexiDepth phase");
  train->add_option("--base", train_args.base, "Start from this checkpoint instead of the base phase");

  GenerateArgs gen_args;
  auto* gen = app.add_subcommand("generate", "Decode from a prompt");
  gen->add_option("--ckpt", gen_args.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--prompt", gen_args.prompt, "Prompt text (BOS is prepended)")->required();
  gen->add_option("--mode", gen_args.mode, "flexidepth|flexiexit|vanilla");
  gen->add_option("--max-new", gen_args.max_new, "Maximum generated tokens")->default_val(32);
  gen->add_option("--temperature", gen_args.temperature, "Sampling temperature; 0 is greedy")->default_val(0.0);
  gen->add_option("--seed", gen_args.seed, "Sampling seed")->default_val(0);
  gen->add_flag("--depthmap", gen_args.depthmap, "Print a terminal depth map of the output");
  gen->add_flag("--json", gen_args.as_json, "Print tokens with layer counts as JSON");

  TraceArgs trace_args;
  auto* trace = app.add_subcommand("trace", "Render a depth map over generated task samples");
  trace->add_option("--ckpt", trace_args.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  trace->add_option("--task", trace_args.task, "copy|repeat_list|sum|product|lm")->required();
  trace->add_option("--out", trace_args.out, "Depth map output file")->required();
  trace->add_flag("--html", trace_args.html, "Write HTML instead of ANSI text");
  trace->add_option("--n", trace_args.n, "Number of samples")->default_val(20);
  trace->add_option("--seed", trace_args.seed, "Sample seed")->default_val(1);
  trace->add_option("--mode", trace_args.mode, "Override the checkpoint's mode");
  trace->add_option("--dataset", trace_args.dataset, "Also export the allocation dataset here");
  trace->add_flag("--full-precision", trace_args.full_precision, "Keep gate scores unrounded in the dataset");

  std::string stats_path;
  auto* stats = app.add_subcommand("stats", "Per-task layer statistics of an allocation dataset");
  stats->add_option("--dataset", stats_path, "Dataset file")->required()->check(CLI::ExistingFile);

  std::string ablate_flag, ablate_config, ablate_base;
  auto* ablate = app.add_subcommand("ablate", "Train full and ablated variants with identical budgets");
  ablate->add_option("--flag", ablate_flag, "linear_router|no_kv_cache|no_adapter")->required();
  ablate->add_option("--config", ablate_config, "INI config file")->required()->check(CLI::ExistingFile);
  ablate->add_option("--base", ablate_base, "Pretrained base checkpoint");

  std::string sweep_alphas, sweep_config, sweep_base;
  auto* sweep = app.add_subcommand("sweep-alpha", "Train one router/adapter set per alpha over a shared base");
  sweep->add_option("--alphas", sweep_alphas, "Comma-separated alpha values")->required();
  sweep->add_option("--config", sweep_config, "INI config file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--base", sweep_base, "Pretrained base checkpoint");

  std::string bench_ckpt;
  BenchOptions bench_opts;
  auto* bench = app.add_subcommand("bench", "Decoding throughput, vanilla vs FlexiDepth");
  bench->add_option("--ckpt", bench_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  bench->add_option("--iters", bench_opts.timing.n_iters, "Timed iterations per repeat")->default_val(10);
  bench->add_option("--repeats", bench_opts.timing.repeats, "Repeats")->default_val(5);
  bench->add_option("--warmup", bench_opts.timing.warmup, "Untimed warmup iterations")->default_val(2);
  bench->add_option("--batch", bench_opts.batch, "Prompts per iteration")->default_val(4);
  bench->add_option("--prompt-len", bench_opts.prompt_len, "Prompt length")->default_val(16);
  bench->add_option("--new-tokens", bench_opts.new_tokens, "Generated tokens per prompt")->default_val(16);
  bench->add_option("--seed", bench_opts.seed, "Prompt seed")->default_val(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*train) return cmd_train(train_args);
    if (*gen) return cmd_generate(gen_args);
    if (*trace) return cmd_trace(trace_args);
    if (*stats) return cmd_stats(stats_path);
    if (*ablate) return cmd_ablate(ablate_flag, ablate_config, ablate_base);
    if (*sweep) return cmd_sweep(sweep_alphas, sweep_config, sweep_base);
    if (*bench) return cmd_bench(bench_ckpt, bench_opts);
  } catch (const ParseError& e) {
    return fail("parse_error", e.what(), 4, e.line());
  } catch (const FormatError& e) {
    return fail("format_error", e.what(), 5);
  } catch (const NumericError& e) {
    return fail("numeric_error", e.what(), 6);
  } catch (const StateError& e) {
    return fail("state_error", e.what(), 7);
  } catch (const InvalidArgument& e) {
    return fail("invalid_argument", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("error", e.what(), 1);
  }
  return 0;
}
