#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace flexidepth {

struct DepthMapRecord {
  std::string text;
  std::size_t layers_used = 0;
  std::vector<double> gates;
  std::size_t position = 0;
  std::size_t sample_id = 0;
  std::string task;

  bool operator==(const DepthMapRecord&) const = default;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

// Light end is used for flexi_start layers, dark end for all layers.
struct Palette {
  Rgb light{222, 235, 247};
  Rgb dark{8, 48, 107};
};

enum class DepthMapFormat { terminal, html };

struct DepthMapOptions {
  std::size_t flexi_start = 0;
  std::size_t n_layers = 0;
  Palette palette;
  DepthMapFormat format = DepthMapFormat::terminal;
};

// Position in [0, 1] of `layers_used` within [flexi_start, n_layers], clamped.
double depth_position(std::size_t layers_used, std::size_t flexi_start, std::size_t n_layers);
Rgb depth_color(std::size_t layers_used, std::size_t flexi_start, std::size_t n_layers, const Palette& palette);
// Nearest entry of the 6x6x6 cube in the xterm 256-colour table.
int xterm256(Rgb color);

// Tokens are laid out in record order; a change of sample_id starts a new line.
// Throws InvalidArgument on empty records or n_layers < flexi_start.
std::string render_depthmap(const std::vector<DepthMapRecord>& records, const DepthMapOptions& options);

}  // namespace flexidepth
