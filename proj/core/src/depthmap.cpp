#include "flexidepth/depthmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "flexidepth/errors.hpp"

namespace flexidepth {

double depth_position(std::size_t layers_used, std::size_t flexi_start, std::size_t n_layers) {
  if (n_layers <= flexi_start) return 1.0;
  const double t = (static_cast<double>(layers_used) - static_cast<double>(flexi_start)) /
                   static_cast<double>(n_layers - flexi_start);
  return std::clamp(t, 0.0, 1.0);
}

Rgb depth_color(std::size_t layers_used, std::size_t flexi_start, std::size_t n_layers, const Palette& palette) {
  const double t = depth_position(layers_used, flexi_start, n_layers);
  auto mix = [t](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround(static_cast<double>(a) + t * (static_cast<double>(b) - a)));
  };
  return {mix(palette.light.r, palette.dark.r), mix(palette.light.g, palette.dark.g),
          mix(palette.light.b, palette.dark.b)};
}

int xterm256(Rgb c) {
  auto level = [](std::uint8_t v) { return static_cast<int>(std::lround(v / 255.0 * 5.0)); };
  return 16 + 36 * level(c.r) + 6 * level(c.g) + level(c.b);
}

namespace {

bool is_dark(Rgb c) { return 0.299 * c.r + 0.587 * c.g + 0.114 * c.b < 128.0; }

std::string hex(Rgb c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

std::string html_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string render_terminal(const std::vector<DepthMapRecord>& records, const DepthMapOptions& o) {
  std::string out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (i && r.sample_id != records[i - 1].sample_id) out += '\n';
    const Rgb c = depth_color(r.layers_used, o.flexi_start, o.n_layers, o.palette);
    out += "\x1b[48;5;" + std::to_string(xterm256(c)) + "m\x1b[38;5;" + (is_dark(c) ? "231" : "16") + "m";
    out += r.text;
    out += "\x1b[0m";
  }
  out += '\n';
  return out;
}

std::string render_html(const std::vector<DepthMapRecord>& records, const DepthMapOptions& o) {
  std::string out =
      "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>DepthMap</title>\n</head>\n"
      "<body style=\"font-family:monospace;white-space:pre;background:#ffffff\">\n<div>";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (i && r.sample_id != records[i - 1].sample_id) out += "</div>\n<div>";
    const Rgb c = depth_color(r.layers_used, o.flexi_start, o.n_layers, o.palette);
    out += "<span style=\"background:" + hex(c) + ";color:" + (is_dark(c) ? "#ffffff" : "#000000") +
           "\" title=\"layers " + std::to_string(r.layers_used) + "\">" + html_escape(r.text) + "</span>";
  }
  out += "</div>\n</body>\n</html>\n";
  return out;
}

}  // namespace

std::string render_depthmap(const std::vector<DepthMapRecord>& records, const DepthMapOptions& options) {
  if (records.empty()) throw InvalidArgument("render_depthmap: no records");
  if (options.n_layers < options.flexi_start) throw InvalidArgument("render_depthmap: n_layers < flexi_start");
  return options.format == DepthMapFormat::html ? render_html(records, options) : render_terminal(records, options);
}

}  // namespace flexidepth
