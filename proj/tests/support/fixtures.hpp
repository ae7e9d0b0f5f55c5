#pragma once

#include <vector>

#include "flexidepth/depthmap.hpp"

namespace fixtures {

// Records behind the depth-map golden files, rendered with flexi_start 4 and 8 layers.
inline std::vector<flexidepth::DepthMapRecord> golden_depthmap_records() {
  return {{"6", 4, {0.1, 0.2, 0.3, 0.4}, 0, 0, "sum"},
          {"3", 6, {0.9, 0.2, 0.8, 0.1}, 1, 0, "sum"},
          {"<", 8, {0.9, 0.9, 0.9, 0.9}, 0, 1, "copy"}};
}

inline constexpr const char* kGoldenAnsi = "depthmap_three_tokens.ansi";
inline constexpr const char* kGoldenHtml = "depthmap_three_tokens.html";

}  // namespace fixtures
