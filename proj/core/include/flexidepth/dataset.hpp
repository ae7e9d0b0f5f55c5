#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "flexidepth/depthmap.hpp"
#include "flexidepth/model.hpp"
#include "flexidepth/tasks.hpp"

namespace flexidepth {

inline constexpr std::string_view kDatasetFormat = "flexidepth-allocation";
inline constexpr int kDatasetVersion = 1;

struct DatasetHeader {
  std::string format{kDatasetFormat};
  int version = kDatasetVersion;
  std::string config_hash;
  double tau = 0.5;
  std::string mode;
  std::uint64_t seed = 0;
  std::size_t flexi_start = 0;
  std::size_t n_layers = 0;
  std::size_t n_samples = 0;

  bool operator==(const DatasetHeader&) const = default;
};

struct DatasetToken {
  std::string text;
  std::size_t layers = 0;
  std::vector<double> gates;

  bool operator==(const DatasetToken&) const = default;
};

struct DatasetSample {
  std::size_t id = 0;
  std::string task;
  std::string prompt;
  std::string config_hash;
  std::vector<DatasetToken> tokens;  // generated tokens only

  bool operator==(const DatasetSample&) const = default;
};

struct AllocationDataset {
  DatasetHeader header;
  std::vector<DatasetSample> samples;

  bool operator==(const AllocationDataset&) const = default;
};

// Pairs each sample with its generation result.
AllocationDataset build_dataset(const Model& model, std::uint64_t seed, const std::vector<ProbeSample>& samples,
                                const EvalReport& report);

struct ExportOptions {
  // Gate scores are rounded to 4 decimals unless set.
  bool full_precision = false;
};

// Line 1 is the header object; each further line is one sample:
//   {"id","task","prompt","config_hash","tokens":[{"text","layers","gates":[...]}]}
// header.n_samples is rewritten to the sample count.
void export_dataset(const AllocationDataset& dataset, std::ostream& out, const ExportOptions& options = {});
void export_dataset(const AllocationDataset& dataset, const std::string& path, const ExportOptions& options = {});
// Throws FormatError on an unknown format/version or a sample whose config
// hash differs from the header, ParseError (1-based line) on malformed or
// missing lines.
AllocationDataset import_dataset(std::istream& in);
AllocationDataset import_dataset(const std::string& path);

std::vector<DepthMapRecord> to_records(const AllocationDataset& dataset);

// Per-task layer statistics over every token in the dataset.
std::map<Task, TaskStats> dataset_stats(const AllocationDataset& dataset);

}  // namespace flexidepth
