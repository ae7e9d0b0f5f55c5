#include "flexidepth/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "flexidepth/errors.hpp"

namespace flexidepth {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j{{"n_layers", c.n_layers},
                   {"flexi_start", c.flexi_start},
                   {"d_model", c.d_model},
                   {"n_heads", c.n_heads},
                   {"d_ff", c.d_ff},
                   {"vocab", c.vocab},
                   {"max_seq", c.max_seq},
                   {"router_dim", c.router_dim},
                   {"adapter_dim", c.adapter_dim},
                   {"tau", c.tau},
                   {"mode", to_string(c.mode)},
                   {"ablation",
                    {{"linear_router", c.ablation.linear_router},
                     {"no_kv_cache", c.ablation.no_kv_cache},
                     {"no_adapter", c.ablation.no_adapter}}},
                   {"position_encoding", to_string(c.position_encoding)},
                   {"rope_base", c.rope_base},
                   {"norm_eps", c.norm_eps}};
  j["router_bias_init"] = c.router_bias_init ? nlohmann::json(*c.router_bias_init) : nlohmann::json(nullptr);
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto read = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  try {
    read("n_layers", c.n_layers);
    read("flexi_start", c.flexi_start);
    read("d_model", c.d_model);
    read("n_heads", c.n_heads);
    read("d_ff", c.d_ff);
    read("vocab", c.vocab);
    read("max_seq", c.max_seq);
    read("router_dim", c.router_dim);
    read("adapter_dim", c.adapter_dim);
    read("tau", c.tau);
    read("rope_base", c.rope_base);
    read("norm_eps", c.norm_eps);
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    if (j.contains("position_encoding"))
      c.position_encoding = parse_position_encoding(j.at("position_encoding").get<std::string>());
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      c.ablation.linear_router = a.value("linear_router", false);
      c.ablation.no_kv_cache = a.value("no_kv_cache", false);
      c.ablation.no_adapter = a.value("no_adapter", false);
    }
    if (j.contains("router_bias_init") && !j.at("router_bias_init").is_null())
      c.router_bias_init = j.at("router_bias_init").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("model config: ") + e.what());
  }
  return c;
}

std::uint64_t config_hash(const ModelConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(config).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_string(std::uint64_t hash) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, hash >>= 4) out[static_cast<std::size_t>(i)] = kHex[hash & 0xf];
  return out;
}

namespace {

constexpr char kMagic[8] = {'F', 'L', 'X', 'D', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ParseError(0, "checkpoint: truncated file");
  return value;
}

std::string take_bytes(std::istream& in, std::size_t n) {
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw ParseError(0, "checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const Model& model, std::ostream& out) {
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string config = to_json(model.config).dump();
  put<std::uint64_t>(out, config.size());
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  const auto tensors = model.named_tensors();
  put<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    const auto data = t.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open '" + path + "' for writing");
  save_checkpoint(model, out);
}

Model load_checkpoint(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic)) throw ParseError(0, "checkpoint: truncated file");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError("checkpoint: bad magic");
  const auto version = take<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto config_len = take<std::uint64_t>(in);
  nlohmann::json config_json;
  try {
    config_json = nlohmann::json::parse(take_bytes(in, config_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, std::string("checkpoint: config: ") + e.what());
  }
  Model model = Model::create(model_config_from_json(config_json), 0);
  const auto expected = model.named_tensors();
  const auto count = take<std::uint64_t>(in);
  if (count != expected.size()) throw InvalidArgument("checkpoint: tensor count does not match the config");
  for (const auto& [name, t] : expected) {
    const auto got_name = take_bytes(in, take<std::uint32_t>(in));
    if (got_name != name) throw InvalidArgument("checkpoint: expected tensor '" + name + "', found '" + got_name + "'");
    const auto rank = take<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(in);
    if (shape != t.shape()) throw InvalidArgument("checkpoint: shape mismatch for '" + name + "'");
    Tensor dst = t;
    auto data = dst.mutable_data();
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size_bytes())))
      throw ParseError(0, "checkpoint: truncated file");
  }
  return model;
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace flexidepth
