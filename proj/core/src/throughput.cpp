#include "flexidepth/throughput.hpp"

#include <chrono>
#include <cmath>

#include "flexidepth/errors.hpp"
#include "flexidepth/rng.hpp"

namespace flexidepth {

Timing measure(const std::function<void()>& iteration, const TimingOptions& options) {
  if (options.n_iters == 0) throw InvalidArgument("measure: n_iters must be positive");
  if (options.repeats == 0) throw InvalidArgument("measure: repeats must be positive");
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < options.warmup; ++i) iteration();
  Timing t;
  t.min_seconds = INFINITY;
  for (std::size_t r = 0; r < options.repeats; ++r) {
    const auto start = clock::now();
    for (std::size_t i = 0; i < options.n_iters; ++i) iteration();
    const double seconds = std::chrono::duration<double>(clock::now() - start).count();
    t.min_seconds = std::min(t.min_seconds, seconds);
    t.per_repeat.push_back(static_cast<double>(options.n_iters) / seconds);
  }
  double sum = 0.0;
  for (double v : t.per_repeat) sum += v;
  t.mean = sum / static_cast<double>(t.per_repeat.size());
  double sq = 0.0;
  for (double v : t.per_repeat) sq += (v - t.mean) * (v - t.mean);
  t.stddev = std::sqrt(sq / static_cast<double>(t.per_repeat.size()));
  return t;
}

ThroughputReport bench_throughput(const Model& model, const BenchOptions& options) {
  if (options.timing.n_iters == 0) throw InvalidArgument("bench_throughput: n_iters must be positive");
  if (options.batch == 0 || options.prompt_len == 0) throw InvalidArgument("bench_throughput: empty workload");
  if (options.prompt_len + options.new_tokens > model.config.max_seq)
    throw InvalidArgument("bench_throughput: prompt_len + new_tokens exceeds max_seq");

  Rng rng(options.seed);
  std::vector<std::vector<int>> prompts(options.batch);
  for (auto& p : prompts) {
    p.push_back(0);
    while (p.size() < options.prompt_len) p.push_back(static_cast<int>(2 + rng.below(model.config.vocab - 2)));
  }

  ThroughputReport report;
  for (Mode mode : {Mode::vanilla, Mode::flexidepth}) {
    Model m = model;
    m.config.mode = mode;
    GenerateOptions go;
    go.max_new = options.new_tokens;
    auto iteration = [&] {
      for (const auto& p : prompts) generate(m, p, go);
    };
    report.modes.push_back({mode, measure(iteration, options.timing)});
  }
  report.ratio = report.modes[1].timing.mean / report.modes[0].timing.mean;
  return report;
}

}  // namespace flexidepth
