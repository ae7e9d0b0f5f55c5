#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "flexidepth/model.hpp"

namespace flexidepth {

struct TimingOptions {
  std::size_t n_iters = 10;  // timed iterations per repeat
  std::size_t repeats = 5;
  std::size_t warmup = 2;    // untimed iterations before the first repeat
};

struct Timing {
  std::vector<double> per_repeat;  // iterations per second
  double mean = 0.0;
  double stddev = 0.0;             // population
  double min_seconds = 0.0;        // fastest repeat's wall time
};

// Times `iteration` with a monotonic clock. Throws InvalidArgument when
// n_iters or repeats is 0.
Timing measure(const std::function<void()>& iteration, const TimingOptions& options);

struct BenchOptions {
  TimingOptions timing;
  std::size_t batch = 4;       // prompts per iteration
  std::size_t prompt_len = 16;
  std::size_t new_tokens = 16;
  std::uint64_t seed = 1;
};

struct ModeThroughput {
  Mode mode = Mode::vanilla;
  Timing timing;
};

struct ThroughputReport {
  std::vector<ModeThroughput> modes;  // vanilla, then flexidepth
  double ratio = 0.0;                 // flexidepth / vanilla mean
};

// One iteration greedily decodes `new_tokens` for each of `batch` random
// prompts, identical across modes.
ThroughputReport bench_throughput(const Model& model, const BenchOptions& options);

}  // namespace flexidepth
