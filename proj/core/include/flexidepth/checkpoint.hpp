#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "flexidepth/model.hpp"

namespace flexidepth {

nlohmann::json to_json(const ModelConfig& config);
// Missing keys keep their defaults; unknown enum names throw InvalidArgument.
ModelConfig model_config_from_json(const nlohmann::json& j);
// FNV-1a over the compact JSON form of the config.
std::uint64_t config_hash(const ModelConfig& config);
std::string hash_string(std::uint64_t hash);

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian):
//   "FLXDCKPT" | u32 version | u64 n | n bytes of config JSON | u64 count |
//   count x { u32 name_len | name | u32 rank | rank x u64 dim | numel x f64 }
// Values are stored as raw IEEE-754 doubles, so a round trip is bit-exact.
void save_checkpoint(const Model& model, std::ostream& out);
void save_checkpoint(const Model& model, const std::string& path);
// Throws FormatError on a bad magic or version, ParseError on truncation, and
// InvalidArgument when tensor names or shapes disagree with the config.
Model load_checkpoint(std::istream& in);
Model load_checkpoint(const std::string& path);

}  // namespace flexidepth
