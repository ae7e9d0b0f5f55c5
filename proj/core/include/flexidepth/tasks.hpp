#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "flexidepth/model.hpp"

namespace flexidepth {

// Character-level vocabulary. Ids 0 and 1 are BOS and EOS; the remaining
// symbols follow kAlphabet in order. Ids past the alphabet are unused padding.
namespace vocab {

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr std::size_t kSize = 64;
inline constexpr std::string_view kAlphabet = "0123456789abcdefghijklmnopqrstuvwxyz .,;:'!?-=+*[]()CRSPL";

int id(char c);  // throws InvalidArgument for characters outside the alphabet
char symbol(int id);
std::vector<int> encode(std::string_view text);
// BOS/EOS render as '^' and '$'.
std::string decode(const std::vector<int>& ids);
std::string token_text(int id);

}  // namespace vocab

enum class Task { copy, repeat_list, sum, product, lm };

Task parse_task(std::string_view name);
std::string_view to_string(Task task);
inline constexpr Task kAllTasks[] = {Task::copy, Task::repeat_list, Task::sum, Task::product, Task::lm};

struct TaskOptions {
  // 5-10 values in 10-99 instead of the short toy lists.
  bool wide_operands = false;
  std::size_t repeat_count = 2;

  bool operator==(const TaskOptions&) const = default;
};

struct ProbeSample {
  Task task = Task::copy;
  std::string prompt;                 // without BOS
  std::string target;                 // without EOS
  std::vector<std::int64_t> values;   // list operands for list tasks

  // BOS + prompt, and target + EOS.
  std::vector<int> prompt_tokens() const;
  std::vector<int> target_tokens() const;
  bool operator==(const ProbeSample&) const = default;
};

// Deterministic in (task, n, seed, options).
std::vector<ProbeSample> gen_task(Task task, std::size_t n, std::uint64_t seed, const TaskOptions& options = {});
// Round-robin over `tasks`, each drawn from its own seeded stream.
std::vector<ProbeSample> gen_mix(const std::vector<Task>& tasks, std::size_t n, std::uint64_t seed,
                                 const TaskOptions& options = {});

// Decimal results, kept in 128 bits so wide-operand products do not overflow.
__extension__ typedef unsigned __int128 u128;
std::string format_u128(u128 value);
std::string sum_steps(const std::vector<std::int64_t>& values);
std::string product_steps(const std::vector<std::int64_t>& values);
std::string format_list(const std::vector<std::int64_t>& values);

// Bundled public-domain passage used by the lm task, already lowercased.
std::string_view lm_passage();

// Corpus files: one JSON object per line, {"task","prompt","target","metadata":{"values":[...]}}.
void write_corpus(std::ostream& out, const std::vector<ProbeSample>& samples);
std::vector<ProbeSample> read_corpus(std::istream& in);

struct TaskStats {
  Task task = Task::copy;
  std::size_t n_tokens = 0;
  double mean = 0.0;
  double variance = 0.0;  // population variance
  // Math tasks: tokens inside an equation's left side vs after its '='.
  std::size_t lhs_tokens = 0;
  double lhs_mean = 0.0;
  std::size_t rhs_tokens = 0;
  double rhs_mean = 0.0;
};

enum class Side { none, lhs, rhs };

// Per-token side labels for a generated sequence (EOS gets `none`).
std::vector<Side> equation_sides(const std::vector<int>& generated);

// Aggregates layers_used over `traces`; `sides` may be empty.
TaskStats task_stats(Task task, const std::vector<TokenTrace>& traces, const std::vector<Side>& sides);

struct SampleResult {
  std::vector<int> generated;  // without the prompt
  std::vector<TokenTrace> traces;
  bool correct = false;
};

struct EvalReport {
  double exact_match = 0.0;
  std::map<Task, TaskStats> stats;
  std::vector<SampleResult> results;  // aligned with the samples
};

struct EvalOptions {
  std::optional<double> gate_override;
  // Decoding budget beyond the target length.
  std::size_t slack = 0;
};

EvalReport eval_task(const Model& model, const std::vector<ProbeSample>& samples, const EvalOptions& options = {});

// Fraction of tokens on the full path at each FlexiDepth layer.
std::vector<double> layer_utilization(const std::vector<TokenTrace>& traces);

}  // namespace flexidepth
