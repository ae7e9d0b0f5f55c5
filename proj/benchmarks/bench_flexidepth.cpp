#include <benchmark/benchmark.h>

#include "flexidepth/model.hpp"
#include "flexidepth/rng.hpp"
#include "flexidepth/tasks.hpp"
#include "flexidepth/training.hpp"

using namespace flexidepth;

namespace {

Model toy_model(Mode mode) {
  ModelConfig c;
  c.mode = mode;
  return Model::create(c, 1);
}

std::vector<int> random_prompt(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> out(n);
  for (auto& t : out) t = 2 + static_cast<int>(rng.below(vocab::kSize - 2));
  return out;
}

Tensor random_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({rows, cols});
  for (auto& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Prefill of a T-token prompt.
void BM_Prefill(benchmark::State& state, Mode mode) {
  const Model m = toy_model(mode);
  const auto prompt = random_prompt(static_cast<std::size_t>(state.range(0)), 3);
  NoGradGuard no_grad;
  for (auto _ : state) {
    KVCache cache = make_cache(m);
    benchmark::DoNotOptimize(forward(m, prompt, cache).logits);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

// Greedy decoding of 16 tokens after a 16-token prompt.
void BM_Decode(benchmark::State& state, Mode mode) {
  const Model m = toy_model(mode);
  const auto prompt = random_prompt(16, 4);
  GenerateOptions o;
  o.max_new = 16;
  for (auto _ : state) benchmark::DoNotOptimize(generate(m, prompt, o).tokens);
  state.SetItemsProcessed(state.iterations() * 16);
}

// One FlexiDepth layer with a fixed fraction of tokens on the full path.
void BM_LayerForward(benchmark::State& state) {
  Model m = toy_model(Mode::flexidepth);
  const std::size_t T = 32;
  const double gate = state.range(0) ? 0.9 : 0.1;
  const Tensor x = random_rows(T, m.config.d_model, 5);
  const FlexiLayer layer = m.flexi_layer(0);
  LayerOptions o;
  o.gate_override = gate;
  NoGradGuard no_grad;
  for (auto _ : state) {
    LayerKV cache(m.config.d_model);
    benchmark::DoNotOptimize(layer_forward(x, layer, cache, m.config.block_config(), o).output);
  }
}

void BM_TrainStep(benchmark::State& state) {
  Model m = toy_model(Mode::flexidepth);
  const auto batch = make_examples(gen_task(Task::sum, 8, 6));
  TrainConfig c;
  c.steps = 1000000;
  Trainer trainer(m, c, Phase::flexidepth, c.steps);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(batch).loss.total);
}

void BM_SkipLoss(benchmark::State& state) {
  const std::size_t T = static_cast<std::size_t>(state.range(0)), L = 4;
  Rng rng(7);
  std::vector<double> g(T * L);
  for (auto& v : g) v = rng.uniform(0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(skip_loss(g, T, L));
}

}  // namespace

BENCHMARK_CAPTURE(BM_Prefill, vanilla, Mode::vanilla)->Arg(16)->Arg(64);
BENCHMARK_CAPTURE(BM_Prefill, flexidepth, Mode::flexidepth)->Arg(16)->Arg(64);
BENCHMARK_CAPTURE(BM_Decode, vanilla, Mode::vanilla)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Decode, flexidepth, Mode::flexidepth)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Decode, flexiexit, Mode::flexiexit)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LayerForward)->Arg(0)->Arg(1);
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SkipLoss)->Arg(64)->Arg(1024);
BENCHMARK_MAIN();
