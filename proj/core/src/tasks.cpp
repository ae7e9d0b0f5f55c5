#include "flexidepth/tasks.hpp"

#include <algorithm>
#include <array>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "flexidepth/errors.hpp"
#include "flexidepth/rng.hpp"

namespace flexidepth {

namespace vocab {

namespace {

constexpr int kFirstSymbol = 2;

constexpr std::array<int, 256> build_table() {
  std::array<int, 256> table{};
  for (auto& v : table) v = -1;
  for (std::size_t i = 0; i < kAlphabet.size(); ++i)
    table[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i) + kFirstSymbol;
  return table;
}

constexpr auto kTable = build_table();
static_assert(kAlphabet.size() + kFirstSymbol <= kSize);

}  // namespace

int id(char c) {
  const int v = kTable[static_cast<unsigned char>(c)];
  if (v < 0) throw InvalidArgument(std::string("character '") + c + "' is not in the vocabulary");
  return v;
}

char symbol(int token) {
  if (token == kBos) return '^';
  if (token == kEos) return '$';
  const int i = token - kFirstSymbol;
  if (i < 0 || static_cast<std::size_t>(i) >= kAlphabet.size()) return '?';
  return kAlphabet[static_cast<std::size_t>(i)];
}

std::vector<int> encode(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(id(c));
  return out;
}

std::string decode(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int t : ids) out.push_back(symbol(t));
  return out;
}

std::string token_text(int token) { return std::string(1, symbol(token)); }

}  // namespace vocab

Task parse_task(std::string_view name) {
  if (name == "copy") return Task::copy;
  if (name == "repeat_list") return Task::repeat_list;
  if (name == "sum") return Task::sum;
  if (name == "product") return Task::product;
  if (name == "lm") return Task::lm;
  throw InvalidArgument("unknown task '" + std::string(name) + "'");
}

std::string_view to_string(Task task) {
  switch (task) {
    case Task::copy: return "copy";
    case Task::repeat_list: return "repeat_list";
    case Task::sum: return "sum";
    case Task::product: return "product";
    case Task::lm: return "lm";
  }
  return "unknown";
}

std::vector<int> ProbeSample::prompt_tokens() const {
  std::vector<int> out{vocab::kBos};
  const auto body = vocab::encode(prompt);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

std::vector<int> ProbeSample::target_tokens() const {
  auto out = vocab::encode(target);
  out.push_back(vocab::kEos);
  return out;
}

std::string format_u128(u128 value) {
  if (value == 0) return "0";
  std::string digits;
  while (value) {
    digits.push_back(static_cast<char>('0' + static_cast<int>(value % 10)));
    value /= 10;
  }
  std::reverse(digits.begin(), digits.end());
  return digits;
}

std::string format_list(const std::vector<std::int64_t>& values) {
  std::string out = "[";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out + "]";
}

namespace {

// "a<op>b=r,r<op>c=s,..." with a running accumulator.
template <typename Combine>
std::string chain_steps(const std::vector<std::int64_t>& values, char op, Combine combine) {
  if (values.size() < 2) throw InvalidArgument("arithmetic tasks need at least two values");
  for (auto v : values)
    if (v < 0) throw InvalidArgument("arithmetic tasks take non-negative values");
  u128 acc = static_cast<u128>(values[0]);
  std::string out;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const auto next = combine(acc, static_cast<u128>(values[i]));
    if (i > 1) out += ',';
    out += format_u128(acc);
    out += op;
    out += std::to_string(values[i]);
    out += '=';
    out += format_u128(next);
    acc = next;
  }
  return out;
}

}  // namespace

std::string sum_steps(const std::vector<std::int64_t>& values) {
  return chain_steps(values, '+', [](auto a, auto b) { return a + b; });
}

std::string product_steps(const std::vector<std::int64_t>& values) {
  return chain_steps(values, '*', [](auto a, auto b) { return a * b; });
}

std::string_view lm_passage() {
  // Opening of Alice's Adventures in Wonderland (1865).
  static constexpr std::string_view kText =
      "alice was beginning to get very tired of sitting by her sister on the bank, and of having nothing "
      "to do: once or twice she had peeped into the book her sister was reading, but it had no pictures or "
      "conversations in it, and what is the use of a book, thought alice, without pictures or conversations? "
      "so she was considering in her own mind (as well as she could, for the hot day made her feel very "
      "sleepy and stupid), whether the pleasure of making a daisy-chain would be worth the trouble of "
      "getting up and picking the daisies, when suddenly a white rabbit with pink eyes ran close by her. "
      "there was nothing so very remarkable in that; nor did alice think it so very much out of the way to "
      "hear the rabbit say to itself, oh dear! oh dear! i shall be late! but when the rabbit actually took "
      "a watch out of its waistcoat-pocket, and looked at it, and then hurried on, alice started to her "
      "feet, for it flashed across her mind that she had never before seen a rabbit with either a "
      "waistcoat-pocket, or a watch to take out of it, and burning with curiosity, she ran across the field "
      "after it, and fortunately was just in time to see it pop down a large rabbit-hole under the hedge.";
  return kText;
}

namespace {

constexpr std::size_t kLmContext = 16;
constexpr std::size_t kLmContinuation = 12;

std::vector<std::int64_t> draw_list(Rng& rng, const TaskOptions& options) {
  const std::int64_t n = options.wide_operands ? rng.range(5, 10) : rng.range(3, 5);
  const std::int64_t lo = options.wide_operands ? 10 : 1;
  const std::int64_t hi = options.wide_operands ? 99 : 20;
  std::vector<std::int64_t> values(static_cast<std::size_t>(n));
  for (auto& v : values) v = rng.range(lo, hi);
  return values;
}

ProbeSample draw_sample(Task task, Rng& rng, const TaskOptions& options) {
  ProbeSample s;
  s.task = task;
  switch (task) {
    case Task::copy: {
      const auto n = rng.range(5, 10);
      std::string src;
      for (std::int64_t i = 0; i < n; ++i) src.push_back(static_cast<char>('a' + rng.below(26)));
      s.prompt = "C" + src + "=";
      s.target = src;
      break;
    }
    case Task::repeat_list: {
      s.values = draw_list(rng, options);
      const auto list = format_list(s.values);
      s.prompt = "R" + list + "=";
      for (std::size_t i = 0; i < options.repeat_count; ++i) s.target += list;
      break;
    }
    case Task::sum:
      s.values = draw_list(rng, options);
      s.prompt = "S" + format_list(s.values) + "=";
      s.target = sum_steps(s.values);
      break;
    case Task::product:
      s.values = draw_list(rng, options);
      s.prompt = "P" + format_list(s.values) + "=";
      s.target = product_steps(s.values);
      break;
    case Task::lm: {
      const auto text = lm_passage();
      const auto start = rng.below(text.size() - kLmContext - kLmContinuation + 1);
      s.prompt = "L" + std::string(text.substr(start, kLmContext));
      s.target = std::string(text.substr(start + kLmContext, kLmContinuation));
      break;
    }
  }
  return s;
}

std::uint64_t task_stream(std::uint64_t seed, Task task) {
  return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(task) + 1;
}

}  // namespace

std::vector<ProbeSample> gen_task(Task task, std::size_t n, std::uint64_t seed, const TaskOptions& options) {
  if (options.repeat_count == 0) throw InvalidArgument("repeat_count must be positive");
  Rng rng(task_stream(seed, task));
  std::vector<ProbeSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(draw_sample(task, rng, options));
  return out;
}

std::vector<ProbeSample> gen_mix(const std::vector<Task>& tasks, std::size_t n, std::uint64_t seed,
                                 const TaskOptions& options) {
  if (tasks.empty()) throw InvalidArgument("gen_mix: no tasks");
  std::vector<Rng> streams;
  for (Task t : tasks) streams.emplace_back(task_stream(seed, t));
  std::vector<ProbeSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % tasks.size();
    out.push_back(draw_sample(tasks[k], streams[k], options));
  }
  return out;
}

void write_corpus(std::ostream& out, const std::vector<ProbeSample>& samples) {
  for (const auto& s : samples) {
    nlohmann::json j;
    j["task"] = to_string(s.task);
    j["prompt"] = s.prompt;
    j["target"] = s.target;
    j["metadata"] = {{"values", s.values}};
    out << j.dump() << '\n';
  }
}

std::vector<ProbeSample> read_corpus(std::istream& in) {
  std::vector<ProbeSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ProbeSample s;
      s.task = parse_task(j.at("task").get<std::string>());
      s.prompt = j.at("prompt").get<std::string>();
      s.target = j.at("target").get<std::string>();
      if (j.contains("metadata") && j["metadata"].contains("values"))
        s.values = j["metadata"]["values"].get<std::vector<std::int64_t>>();
      vocab::encode(s.prompt);
      vocab::encode(s.target);
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    } catch (const InvalidArgument& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return out;
}

std::vector<Side> equation_sides(const std::vector<int>& generated) {
  static const int kEquals = vocab::id('=');
  static const int kComma = vocab::id(',');
  std::vector<Side> out;
  out.reserve(generated.size());
  bool rhs = false;
  for (int t : generated) {
    if (t == vocab::kEos || t == vocab::kBos) {
      out.push_back(Side::none);
    } else if (t == kEquals) {
      out.push_back(Side::lhs);
      rhs = true;
    } else if (t == kComma) {
      out.push_back(Side::lhs);
      rhs = false;
    } else {
      out.push_back(rhs ? Side::rhs : Side::lhs);
    }
  }
  return out;
}

namespace {

__extension__ typedef __int128 i128;

// Exact integer moments, so the result does not depend on trace order.
struct Moments {
  std::uint64_t n = 0, sum = 0, sum_sq = 0;
  void add(std::size_t x) {
    ++n;
    sum += x;
    sum_sq += static_cast<std::uint64_t>(x) * x;
  }
  double mean() const { return n ? static_cast<double>(sum) / static_cast<double>(n) : 0.0; }
  double variance() const {
    if (!n) return 0.0;
    const auto num = static_cast<i128>(n) * sum_sq - static_cast<i128>(sum) * sum;
    return static_cast<double>(num) / (static_cast<double>(n) * static_cast<double>(n));
  }
};

}  // namespace

TaskStats task_stats(Task task, const std::vector<TokenTrace>& traces, const std::vector<Side>& sides) {
  if (!sides.empty() && sides.size() != traces.size())
    throw InvalidArgument("task_stats: sides must align with traces");
  Moments all, lhs, rhs;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto used = traces[i].layers_used;
    all.add(used);
    if (sides.empty()) continue;
    if (sides[i] == Side::lhs) lhs.add(used);
    if (sides[i] == Side::rhs) rhs.add(used);
  }
  TaskStats s;
  s.task = task;
  s.n_tokens = all.n;
  s.mean = all.mean();
  s.variance = all.variance();
  s.lhs_tokens = lhs.n;
  s.lhs_mean = lhs.mean();
  s.rhs_tokens = rhs.n;
  s.rhs_mean = rhs.mean();
  return s;
}

EvalReport eval_task(const Model& model, const std::vector<ProbeSample>& samples, const EvalOptions& options) {
  EvalReport report;
  std::map<Task, std::vector<TokenTrace>> traces_by_task;
  std::map<Task, std::vector<Side>> sides_by_task;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    const auto prompt = s.prompt_tokens();
    const auto target = s.target_tokens();
    GenerateOptions go;
    go.max_new = target.size() + options.slack;
    go.eos = vocab::kEos;
    go.gate_override = options.gate_override;
    SampleResult r;
    if (prompt.size() < model.config.max_seq) {
      auto gen = generate(model, prompt, go);
      r.generated.assign(gen.tokens.begin() + static_cast<std::ptrdiff_t>(prompt.size()), gen.tokens.end());
      r.traces = std::move(gen.traces);
    }
    r.correct = r.generated == target;
    correct += r.correct;
    auto& tt = traces_by_task[s.task];
    tt.insert(tt.end(), r.traces.begin(), r.traces.end());
    const auto sides = equation_sides(r.generated);
    auto& ss = sides_by_task[s.task];
    ss.insert(ss.end(), sides.begin(), sides.end());
    report.results.push_back(std::move(r));
  }
  report.exact_match = samples.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(samples.size());
  for (const auto& [task, traces] : traces_by_task) report.stats[task] = task_stats(task, traces, sides_by_task[task]);
  return report;
}

std::vector<double> layer_utilization(const std::vector<TokenTrace>& traces) {
  if (traces.empty()) throw InvalidArgument("layer_utilization: no traces");
  const std::size_t n_flexi = traces.front().full.size();
  std::vector<std::size_t> counts(n_flexi, 0);
  for (const auto& t : traces) {
    if (t.full.size() != n_flexi) throw InvalidArgument("layer_utilization: traces disagree on layer count");
    for (std::size_t l = 0; l < n_flexi; ++l) counts[l] += t.full[l] ? 1 : 0;
  }
  std::vector<double> out(n_flexi);
  for (std::size_t l = 0; l < n_flexi; ++l)
    out[l] = static_cast<double>(counts[l]) / static_cast<double>(traces.size());
  return out;
}

}  // namespace flexidepth
