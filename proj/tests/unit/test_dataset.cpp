#include <gtest/gtest.h>

#include <sstream>

#include "flexidepth/checkpoint.hpp"
#include "flexidepth/dataset.hpp"
#include "flexidepth/errors.hpp"
#include "test_util.hpp"

using namespace flexidepth;

namespace {

AllocationDataset generated(std::size_t n) {
  ModelConfig c;
  c.n_layers = 4;
  c.flexi_start = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  Model m = Model::create(c, 3);
  testing_util::randomize(m, 4, 0.3);
  const auto samples = gen_mix({Task::copy, Task::sum, Task::product}, n, 5);
  return build_dataset(m, 5, samples, eval_task(m, samples));
}

std::string dump(const AllocationDataset& d, ExportOptions o = {}) {
  std::ostringstream out;
  export_dataset(d, out, o);
  return out.str();
}

AllocationDataset parse(const std::string& text) {
  std::istringstream in(text);
  return import_dataset(in);
}

// Minimal file written by hand from the documented schema.
constexpr const char* kFixture =
    R"({"format":"flexidepth-allocation","version":1,"config_hash":"00000000deadbeef","tau":0.5,"mode":"flexidepth","seed":7,"flexi_start":4,"n_layers":8,"n_samples":1}
{"id":0,"task":"sum","prompt":"S[2,3]=","config_hash":"00000000deadbeef","tokens":[{"text":"2","layers":6,"gates":[0.9,0.1,0.7,0.2]},{"text":"$","layers":4,"gates":[0.3,0.1,0.2,0.4]}]}
)";

}  // namespace

TEST(Dataset, EmptyTraceListGivesHeaderOnly) {
  AllocationDataset d;
  d.header.config_hash = "0123456789abcdef";
  d.header.mode = "flexidepth";
  const std::string text = dump(d);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  EXPECT_EQ(parse(text), d);
}

TEST(Dataset, RoundTripOfHundredSamplesIsExact) {
  const auto d = generated(100);
  ASSERT_EQ(d.samples.size(), 100u);
  EXPECT_EQ(parse(dump(d, {true})), d);
  // The default rounds gates but keeps every other field.
  const auto rounded = parse(dump(d));
  EXPECT_EQ(rounded.header, d.header);
  EXPECT_EQ(rounded.samples[0].tokens.size(), d.samples[0].tokens.size());
}

TEST(Dataset, ReserializationIsIdempotent) {
  const std::string once = dump(generated(12));
  EXPECT_EQ(dump(parse(once)), once);
}

TEST(Dataset, HandWrittenFixtureParses) {
  const auto d = parse(kFixture);
  EXPECT_EQ(d.header.seed, 7u);
  EXPECT_EQ(d.header.n_layers, 8u);
  ASSERT_EQ(d.samples.size(), 1u);
  const DatasetSample expected{0, "sum", "S[2,3]=", "00000000deadbeef",
                               {{"2", 6, {0.9, 0.1, 0.7, 0.2}}, {"$", 4, {0.3, 0.1, 0.2, 0.4}}}};
  EXPECT_EQ(d.samples[0], expected);
  const auto records = to_records(d);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[1].layers_used, 4u);
  EXPECT_EQ(records[1].position, 1u);
  EXPECT_EQ(records[1].task, "sum");
  EXPECT_EQ(dataset_stats(d).at(Task::sum).mean, 5.0);
}

TEST(Dataset, VersionAndHashMismatchAreFormatErrors) {
  std::string v = kFixture;
  v.replace(v.find("\"version\":1"), 11, "\"version\":2");
  EXPECT_THROW(parse(v), FormatError);
  std::string f = kFixture;
  f.replace(f.find("flexidepth-allocation"), 21, "something-else-entire");
  EXPECT_THROW(parse(f), FormatError);
  std::string h = kFixture;
  h.replace(h.rfind("deadbeef"), 8, "feedbeef");
  EXPECT_THROW(parse(h), FormatError);
}

TEST(Dataset, TruncationReportsLineNumber) {
  const std::string text = dump(generated(3));
  const auto second_nl = text.find('\n', text.find('\n') + 1);
  // Cut inside the third line.
  try {
    parse(text.substr(0, second_nl + 10));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  // Drop the last sample line entirely.
  const auto last = text.rfind('\n', text.size() - 2);
  try {
    parse(text.substr(0, last + 1));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
  EXPECT_THROW(parse(""), ParseError);
}
