#include "flexidepth/dataset.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "flexidepth/checkpoint.hpp"
#include "flexidepth/errors.hpp"

namespace flexidepth {

AllocationDataset build_dataset(const Model& model, std::uint64_t seed, const std::vector<ProbeSample>& samples,
                                const EvalReport& report) {
  if (report.results.size() != samples.size()) throw InvalidArgument("build_dataset: report does not match samples");
  AllocationDataset ds;
  auto& h = ds.header;
  h.config_hash = hash_string(config_hash(model.config));
  h.tau = model.config.tau;
  h.mode = std::string(to_string(model.config.mode));
  h.seed = seed;
  h.flexi_start = model.config.flexi_start;
  h.n_layers = model.config.n_layers;
  h.n_samples = samples.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    DatasetSample s;
    s.id = i;
    s.task = std::string(to_string(samples[i].task));
    s.prompt = samples[i].prompt;
    s.config_hash = h.config_hash;
    const auto& r = report.results[i];
    for (std::size_t k = 0; k < r.traces.size(); ++k) {
      s.tokens.push_back({vocab::token_text(r.generated[k]), r.traces[k].layers_used, r.traces[k].gates});
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

namespace {

double round4(double g) { return std::round(g * 1e4) / 1e4; }

}  // namespace

void export_dataset(const AllocationDataset& dataset, std::ostream& out, const ExportOptions& options) {
  const auto& h = dataset.header;
  nlohmann::json header{{"format", h.format},
                        {"version", h.version},
                        {"config_hash", h.config_hash},
                        {"tau", h.tau},
                        {"mode", h.mode},
                        {"seed", h.seed},
                        {"flexi_start", h.flexi_start},
                        {"n_layers", h.n_layers},
                        {"n_samples", dataset.samples.size()}};
  out << header.dump() << '\n';
  for (const auto& s : dataset.samples) {
    nlohmann::json tokens = nlohmann::json::array();
    for (const auto& t : s.tokens) {
      nlohmann::json gates = nlohmann::json::array();
      for (double g : t.gates) gates.push_back(options.full_precision ? g : round4(g));
      tokens.push_back({{"text", t.text}, {"layers", t.layers}, {"gates", std::move(gates)}});
    }
    nlohmann::json line{{"id", s.id},
                        {"task", s.task},
                        {"prompt", s.prompt},
                        {"config_hash", s.config_hash},
                        {"tokens", std::move(tokens)}};
    out << line.dump() << '\n';
  }
  if (!out) throw std::runtime_error("export_dataset: write failed");
}

void export_dataset(const AllocationDataset& dataset, const std::string& path, const ExportOptions& options) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot open '" + path + "' for writing");
  export_dataset(dataset, out, options);
}

AllocationDataset import_dataset(std::istream& in) {
  AllocationDataset ds;
  std::string line;
  std::size_t line_no = 0;
  auto parse_line = [&](const std::string& text) {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed record: ") + e.what());
    }
  };

  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  ++line_no;
  const auto header = parse_line(line);
  try {
    auto& h = ds.header;
    h.format = header.at("format").get<std::string>();
    h.version = header.at("version").get<int>();
    if (h.format != kDatasetFormat) throw FormatError("dataset: unknown format '" + h.format + "'");
    if (h.version != kDatasetVersion)
      throw FormatError("dataset: unsupported version " + std::to_string(h.version));
    h.config_hash = header.at("config_hash").get<std::string>();
    h.tau = header.at("tau").get<double>();
    h.mode = header.at("mode").get<std::string>();
    h.seed = header.at("seed").get<std::uint64_t>();
    h.flexi_start = header.at("flexi_start").get<std::size_t>();
    h.n_layers = header.at("n_layers").get<std::size_t>();
    h.n_samples = header.at("n_samples").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(line_no, std::string("bad header: ") + e.what());
  }

  while (ds.samples.size() < ds.header.n_samples) {
    if (!std::getline(in, line)) {
      throw ParseError(line_no + 1, "truncated: expected " + std::to_string(ds.header.n_samples) + " samples, got " +
                                        std::to_string(ds.samples.size()));
    }
    ++line_no;
    const auto j = parse_line(line);
    DatasetSample s;
    try {
      s.id = j.at("id").get<std::size_t>();
      s.task = j.at("task").get<std::string>();
      s.prompt = j.at("prompt").get<std::string>();
      s.config_hash = j.at("config_hash").get<std::string>();
      for (const auto& t : j.at("tokens")) {
        s.tokens.push_back(
            {t.at("text").get<std::string>(), t.at("layers").get<std::size_t>(), t.at("gates").get<std::vector<double>>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad sample: ") + e.what());
    }
    if (s.config_hash != ds.header.config_hash) {
      throw FormatError("dataset: line " + std::to_string(line_no) + ": config hash differs from the header");
    }
    ds.samples.push_back(std::move(s));
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty()) throw ParseError(line_no, "unexpected content after the last sample");
  }
  return ds;
}

AllocationDataset import_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open dataset '" + path + "'");
  return import_dataset(in);
}

std::vector<DepthMapRecord> to_records(const AllocationDataset& dataset) {
  std::vector<DepthMapRecord> out;
  for (const auto& s : dataset.samples) {
    for (std::size_t k = 0; k < s.tokens.size(); ++k) {
      const auto& t = s.tokens[k];
      out.push_back({t.text, t.layers, t.gates, k, s.id, s.task});
    }
  }
  return out;
}

namespace {

int text_id(const std::string& text) {
  if (text == "^") return vocab::kBos;
  if (text == "$") return vocab::kEos;
  if (text.size() != 1) throw InvalidArgument("dataset: token text '" + text + "' is not a single symbol");
  return vocab::id(text[0]);
}

}  // namespace

std::map<Task, TaskStats> dataset_stats(const AllocationDataset& dataset) {
  std::map<Task, std::vector<TokenTrace>> traces;
  std::map<Task, std::vector<Side>> sides;
  for (const auto& s : dataset.samples) {
    const Task task = parse_task(s.task);
    std::vector<int> ids;
    for (const auto& t : s.tokens) {
      ids.push_back(text_id(t.text));
      TokenTrace tr;
      tr.layers_used = t.layers;
      traces[task].push_back(std::move(tr));
    }
    const auto sd = equation_sides(ids);
    sides[task].insert(sides[task].end(), sd.begin(), sd.end());
  }
  std::map<Task, TaskStats> out;
  for (const auto& [task, tr] : traces) out[task] = task_stats(task, tr, sides[task]);
  return out;
}

}  // namespace flexidepth
