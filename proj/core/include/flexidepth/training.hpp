#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flexidepth/model.hpp"
#include "flexidepth/tasks.hpp"

namespace flexidepth {

enum class Schedule { constant, cosine };
Schedule parse_schedule(std::string_view name);
std::string_view to_string(Schedule schedule);

struct TrainConfig {
  double alpha = 1e-2;
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double warmup_ratio = 0.03;
  Schedule schedule = Schedule::constant;
  // Total optimizer steps; when 0, epochs * ceil(n_samples / batch) is used.
  std::size_t steps = 1000;
  std::size_t epochs = 1;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  // Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 1.0;
  // Skip loss over every position instead of the response region only.
  bool skip_loss_all_tokens = false;

  // Throws InvalidArgument on a negative alpha, warmup_ratio outside [0, 1), etc.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct LossBreakdown {
  double lm = 0.0;
  double skip = 0.0;
  double total = 0.0;
};

LossBreakdown total_loss(double lm, double skip, double alpha);

// (1/T) * sum_t (sum_l G[t][l])^2 over a row-major [T x L] matrix. Row sums
// run left to right from 0.0, the squares accumulate over t ascending from
// 0.0, and the total is multiplied by 1/T. Throws on T == 0.
double skip_loss(std::span<const double> gates, std::size_t T, std::size_t L);
// Differentiable version over one [T x 1] gate column per FlexiDepth layer,
// restricted to `rows`; same summation order.
Tensor skip_loss(const std::vector<Tensor>& gate_columns, std::span<const Index> rows);

// A training sequence: the loss covers predictions of tokens[prompt_len..].
struct Example {
  std::vector<int> tokens;
  std::size_t prompt_len = 1;
};

Example make_example(const ProbeSample& sample);
std::vector<Example> make_examples(const std::vector<ProbeSample>& samples);

struct SequenceLoss {
  Tensor lm;
  Tensor skip;   // scalar zero when the model has no gates
  Tensor total;
  double mean_layers_used = 0.0;  // over the loss positions
};

// Builds the loss graph for one sequence from a fresh cache.
SequenceLoss sequence_loss(const Model& model, const Example& example, double alpha, bool skip_all_tokens = false);

// Mean response-region cross-entropy, no graph.
double eval_lm_loss(const Model& model, const std::vector<Example>& examples);

// Warmup then constant or cosine decay to zero; `step` is 0-based.
double learning_rate(const TrainConfig& config, std::size_t step, std::size_t total_steps);

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay, applied to matrices only (norm scales and biases
// are exempt). Parameters without a gradient are left untouched.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const AdamWOptions& options);
  void step(double lr);
  void zero_grad();
  std::size_t steps_taken() const noexcept { return t_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Which weights a run updates: the frozen-base FlexiDepth phase trains routers
// and adapters; the base phase trains everything else in vanilla mode.
enum class Phase { flexidepth, base };

struct StepRecord {
  std::size_t step = 0;  // 1-based
  LossBreakdown loss;
  double mean_layers_used = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

using MetricsSink = std::function<void(const StepRecord&)>;
// Writes one JSON object per step: {step, lm, skip, total, mean_layers_used, grad_norm, lr}.
MetricsSink jsonl_sink(std::ostream& out);

class Trainer {
 public:
  // Sets requires_grad on the model according to `phase`. The model must
  // outlive the trainer.
  Trainer(Model& model, const TrainConfig& config, Phase phase, std::size_t total_steps);

  // One optimizer update on `batch`. Throws NumericError (naming the step)
  // when the loss is not finite.
  StepRecord train_step(const std::vector<Example>& batch);
  std::size_t steps_taken() const noexcept { return optimizer_.steps_taken(); }

 private:
  Model& model_;
  TrainConfig config_;
  Phase phase_;
  std::size_t total_steps_;
  AdamW optimizer_;
};

// Runs config.steps (or the epoch-derived count) steps over shuffled batches.
std::vector<StepRecord> train(Model& model, const TrainConfig& config, Phase phase,
                              const std::vector<Example>& data, const MetricsSink& sink = {});

struct SweepRow {
  double alpha = 0.0;
  double mean_layers_used = 0.0;
  double exact_match = 0.0;
  double final_lm = 0.0;
  std::map<Task, TaskStats> stats;
};

// Trains fresh routers/adapters (same seed) over `base` for each alpha and
// evaluates on `eval`.
std::vector<SweepRow> alpha_sweep(const Model& base, const std::vector<double>& alphas, const TrainConfig& config,
                                  const std::vector<Example>& train_data, const std::vector<ProbeSample>& eval);

// File-level settings: key = value lines, optionally grouped under [model],
// [train], [base] and [data] sections.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  // Base pretraining in vanilla mode before the FlexiDepth phase; skipped
  // when both steps and epochs are 0.
  TrainConfig base;
  std::vector<Task> tasks{Task::copy};
  TaskOptions task_options;
  std::size_t n_train = 2000;
  std::size_t n_eval = 100;
  std::uint64_t data_seed = 7;
  std::uint64_t model_seed = 1;
};

RunConfig default_run_config();

std::vector<ProbeSample> train_samples(const RunConfig& rc);
// Held-out samples: n_eval per task from a stream disjoint from the training one.
std::vector<ProbeSample> eval_samples(const RunConfig& rc);

// Copies `base` (sharing its base weights) with the mode, ablation and tau of
// `target` and freshly initialized routers and adapters.
Model attach_flexi(const Model& base, const ModelConfig& target, std::uint64_t seed);

struct RunResult {
  Model model;
  std::vector<StepRecord> base_log;
  std::vector<StepRecord> flexi_log;
};

// Creates the model described by `rc`, runs the base phase when configured,
// then the FlexiDepth phase unless the mode is vanilla. `base` replaces the
// created model and the base phase when given.
RunResult run_training(const RunConfig& rc, const std::optional<Model>& base = std::nullopt,
                       const MetricsSink& base_sink = {}, const MetricsSink& flexi_sink = {});

// Throws ParseError (with line numbers where available) or InvalidArgument.
RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::string& path);

}  // namespace flexidepth
