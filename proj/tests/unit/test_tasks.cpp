#include <gtest/gtest.h>
#include <gmpxx.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "flexidepth/errors.hpp"
#include "flexidepth/rng.hpp"
#include "flexidepth/tasks.hpp"

using namespace flexidepth;

namespace {

// Independent evaluation of the chained target with arbitrary precision.
std::string big_steps(const std::vector<std::int64_t>& values, char op) {
  mpz_class acc = values[0];
  std::string out;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const mpz_class next = op == '+' ? mpz_class(acc + values[i]) : mpz_class(acc * values[i]);
    if (i > 1) out += ',';
    out += acc.get_str() + op + std::to_string(values[i]) + '=' + next.get_str();
    acc = next;
  }
  return out;
}

std::vector<std::int64_t> parse_list(const std::string& prompt) {
  std::vector<std::int64_t> out;
  std::istringstream in(prompt.substr(2, prompt.size() - 4));
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(std::stoll(item));
  return out;
}

TokenTrace trace_with(std::size_t layers) {
  TokenTrace t;
  t.layers_used = layers;
  return t;
}

}  // namespace

TEST(Vocab, RoundTripAndSpecialTokens) {
  const std::string text = "S[63,15]=63+15=78";
  EXPECT_EQ(vocab::decode(vocab::encode(text)), text);
  EXPECT_EQ(vocab::decode({vocab::kBos, vocab::id('a'), vocab::kEos}), "^a$");
  EXPECT_LT(static_cast<std::size_t>(vocab::id('L')), vocab::kSize);
  EXPECT_THROW(vocab::id('#'), InvalidArgument);
  EXPECT_THROW(parse_task("summarize"), InvalidArgument);
}

TEST(Arithmetic, ListExamples) {
  EXPECT_EQ(sum_steps({63, 15}), "63+15=78");
  EXPECT_EQ(product_steps({63, 15}), "63*15=945");
  EXPECT_EQ(product_steps({2, 3, 4}), "2*3=6,6*4=24");
  EXPECT_EQ(product_steps(std::vector<std::int64_t>(10, 99)).substr(product_steps(std::vector<std::int64_t>(10, 99)).rfind('=') + 1),
            "90438207500880449001");
  EXPECT_THROW(sum_steps({5}), InvalidArgument);
}

TEST(GenTask, TargetsMatchBigIntegerEvaluation) {
  for (bool wide : {false, true}) {
    TaskOptions o;
    o.wide_operands = wide;
    for (Task task : {Task::sum, Task::product}) {
      for (const auto& s : gen_task(task, 500, 11, o)) {
        EXPECT_EQ(parse_list(s.prompt), s.values);
        EXPECT_EQ(s.target, big_steps(s.values, task == Task::sum ? '+' : '*')) << s.prompt;
        const std::size_t lo = wide ? 5 : 3, hi = wide ? 10 : 5;
        EXPECT_GE(s.values.size(), lo);
        EXPECT_LE(s.values.size(), hi);
        for (auto v : s.values) {
          EXPECT_GE(v, wide ? 10 : 1);
          EXPECT_LE(v, wide ? 99 : 20);
        }
      }
    }
  }
}

TEST(GenTask, TemplatesForTextTasks) {
  for (const auto& s : gen_task(Task::copy, 50, 3)) {
    EXPECT_EQ(s.prompt, "C" + s.target + "=");
    EXPECT_GE(s.target.size(), 5u);
    EXPECT_LE(s.target.size(), 10u);
  }
  for (const auto& s : gen_task(Task::repeat_list, 50, 3)) {
    const std::string list = format_list(s.values);
    EXPECT_EQ(s.prompt, "R" + list + "=");
    EXPECT_EQ(s.target, list + list);
  }
  const auto passage = lm_passage();
  for (const auto& s : gen_task(Task::lm, 50, 3)) {
    EXPECT_EQ(s.prompt[0], 'L');
    EXPECT_NE(passage.find(s.prompt.substr(1) + s.target), std::string_view::npos);
  }
  const auto s = gen_task(Task::copy, 1, 4)[0];
  EXPECT_EQ(s.prompt_tokens().front(), vocab::kBos);
  EXPECT_EQ(s.target_tokens().back(), vocab::kEos);
}

TEST(GenTask, PureFunctionOfSeed) {
  for (Task task : kAllTasks) {
    EXPECT_EQ(gen_task(task, 40, 5), gen_task(task, 40, 5));
    EXPECT_NE(gen_task(task, 40, 5), gen_task(task, 40, 6));
  }
  const auto mix = gen_mix({Task::copy, Task::sum}, 10, 5);
  EXPECT_EQ(mix, gen_mix({Task::copy, Task::sum}, 10, 5));
  for (std::size_t i = 0; i < mix.size(); ++i) EXPECT_EQ(mix[i].task, i % 2 ? Task::sum : Task::copy);
}

TEST(GenTask, FrozenFirstSamples) {
  // Pins the generator so corpora stay bit-identical across builds.
  const std::pair<Task, std::string> expected[] = {
      {Task::copy, "Cqponnhkj=|qponnhkj"},
      {Task::repeat_list, "R[13,17,8,5,12]=|[13,17,8,5,12][13,17,8,5,12]"},
      {Task::sum, "S[12,8,4,12]=|12+8=20,20+4=24,24+12=36"},
      {Task::product, "P[20,1,17,7]=|20*1=20,20*17=340,340*7=2380"},
      {Task::lm, "L late! but when |the rabbit a"},
  };
  for (const auto& [task, text] : expected) {
    const auto s = gen_task(task, 1, 1)[0];
    EXPECT_EQ(s.prompt + "|" + s.target, text);
  }
}

TEST(Corpus, RoundTripAndErrors) {
  const auto samples = gen_mix({Task::copy, Task::repeat_list, Task::sum, Task::product, Task::lm}, 25, 9);
  std::stringstream buf;
  write_corpus(buf, samples);
  EXPECT_EQ(read_corpus(buf), samples);

  std::istringstream bad("{\"task\":\"copy\",\"prompt\":\"Cab=\",\"target\":\"ab\",\"metadata\":{\"values\":[]}}\n{oops\n");
  try {
    read_corpus(bad);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(EquationSides, LabelsEachChainStep) {
  auto tokens = vocab::encode("2*3=6,6*4=24");
  tokens.push_back(vocab::kEos);
  const auto sides = equation_sides(tokens);
  const std::string expected = "LLLLRLLLLLRRN";
  ASSERT_EQ(sides.size(), expected.size());
  for (std::size_t i = 0; i < sides.size(); ++i) {
    const Side want = expected[i] == 'L' ? Side::lhs : expected[i] == 'R' ? Side::rhs : Side::none;
    EXPECT_EQ(sides[i], want) << i;
  }
}

TEST(TaskStats, MatchesBruteForceAndIsOrderIndependent) {
  Rng rng(21);
  std::vector<TokenTrace> traces;
  std::vector<Side> sides;
  for (int i = 0; i < 257; ++i) {
    traces.push_back(trace_with(4 + rng.below(5)));
    sides.push_back(static_cast<Side>(rng.below(3)));
  }
  const auto s = task_stats(Task::sum, traces, sides);
  double mean = 0.0, lhs = 0.0;
  std::size_t n_lhs = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    mean += static_cast<double>(traces[i].layers_used);
    if (sides[i] == Side::lhs) {
      lhs += static_cast<double>(traces[i].layers_used);
      ++n_lhs;
    }
  }
  mean /= static_cast<double>(traces.size());
  double var = 0.0;
  for (const auto& t : traces) var += (static_cast<double>(t.layers_used) - mean) * (static_cast<double>(t.layers_used) - mean);
  var /= static_cast<double>(traces.size());
  EXPECT_NEAR(s.mean, mean, 1e-12);
  EXPECT_NEAR(s.variance, var, 1e-12);
  EXPECT_EQ(s.lhs_tokens, n_lhs);
  EXPECT_NEAR(s.lhs_mean, lhs / static_cast<double>(n_lhs), 1e-12);

  std::vector<std::size_t> order(traces.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937(5));
  std::vector<TokenTrace> t2;
  std::vector<Side> s2;
  for (auto i : order) {
    t2.push_back(traces[i]);
    s2.push_back(sides[i]);
  }
  const auto shuffled = task_stats(Task::sum, t2, s2);
  EXPECT_EQ(shuffled.mean, s.mean);
  EXPECT_EQ(shuffled.variance, s.variance);
  EXPECT_EQ(shuffled.lhs_mean, s.lhs_mean);
  EXPECT_EQ(shuffled.rhs_mean, s.rhs_mean);
}

TEST(EvalTask, UntrainedModelRarelyMatches) {
  const Model m = Model::create(ModelConfig{}, 3);
  const auto report = eval_task(m, gen_mix({Task::copy, Task::sum}, 100, 2));
  EXPECT_LT(report.exact_match, 0.05);
}

TEST(EvalTask, VanillaUsesEveryLayerWithZeroVariance) {
  ModelConfig c;
  c.mode = Mode::vanilla;
  const Model m = Model::create(c, 4);
  const auto report = eval_task(m, gen_task(Task::copy, 10, 2));
  const auto& s = report.stats.at(Task::copy);
  EXPECT_GT(s.n_tokens, 0u);
  EXPECT_EQ(s.mean, 8.0);
  EXPECT_EQ(s.variance, 0.0);
  std::vector<TokenTrace> all;
  for (const auto& r : report.results) all.insert(all.end(), r.traces.begin(), r.traces.end());
  for (double u : layer_utilization(all)) EXPECT_EQ(u, 1.0);
}

TEST(LayerUtilization, AllSkipOverrideAndErrors) {
  const Model m = Model::create(ModelConfig{}, 5);
  EvalOptions o;
  o.gate_override = 0.0;
  const auto report = eval_task(m, gen_task(Task::copy, 5, 2), o);
  std::vector<TokenTrace> all;
  for (const auto& r : report.results) all.insert(all.end(), r.traces.begin(), r.traces.end());
  for (double u : layer_utilization(all)) EXPECT_EQ(u, 0.0);
  EXPECT_EQ(report.stats.at(Task::copy).mean, 4.0);
  EXPECT_THROW(layer_utilization({}), InvalidArgument);
}
