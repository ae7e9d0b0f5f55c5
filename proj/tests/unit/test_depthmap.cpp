#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "flexidepth/depthmap.hpp"
#include "fixtures.hpp"
#include "flexidepth/errors.hpp"

using namespace flexidepth;

namespace {

std::vector<DepthMapRecord> three_tokens() { return fixtures::golden_depthmap_records(); }

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void check_golden(const std::string& name, const std::string& actual) {
  const std::string path = std::string(FLEXIDEPTH_GOLDEN_DIR) + "/" + name;
  if (std::getenv("FLEXIDEPTH_UPDATE_GOLDEN")) {
    std::ofstream(path, std::ios::binary) << actual;
    GTEST_SKIP() << "rewrote " << path;
  }
  const std::string expected = read_file(path);
  ASSERT_FALSE(expected.empty()) << "missing golden file " << path;
  EXPECT_EQ(actual, expected);
}

}  // namespace

TEST(DepthColor, EndpointsAndMidpoint) {
  const Palette p;
  EXPECT_EQ(depth_color(8, 4, 8, p), p.dark);
  EXPECT_EQ(depth_color(4, 4, 8, p), p.light);
  EXPECT_EQ(depth_color(6, 4, 8, p), (Rgb{115, 142, 177}));
  EXPECT_EQ(depth_color(2, 4, 8, p), p.light);
  EXPECT_EQ(depth_position(5, 4, 4), 1.0);
}

TEST(DepthColor, MonotoneInLayersUsed) {
  const Palette p;
  for (std::size_t L = 2; L <= 32; L += 3)
    for (std::size_t start = 0; start < L; start += 2)
      for (std::size_t u = start; u < L; ++u) {
        EXPECT_LE(depth_position(u, start, L), depth_position(u + 1, start, L));
        const Rgb a = depth_color(u, start, L, p), b = depth_color(u + 1, start, L, p);
        // The palette darkens along every channel.
        EXPECT_GE(a.r, b.r);
        EXPECT_GE(a.g, b.g);
        EXPECT_GE(a.b, b.b);
      }
}

TEST(Xterm256, CubeCorners) {
  EXPECT_EQ(xterm256({0, 0, 0}), 16);
  EXPECT_EQ(xterm256({255, 255, 255}), 231);
  EXPECT_EQ(xterm256({255, 0, 0}), 196);
}

TEST(RenderDepthmap, SingleTokenEndpoints) {
  DepthMapOptions o{4, 8, Palette{}, DepthMapFormat::html};
  const std::string dark = render_depthmap({{"x", 8, {}, 0, 0, "copy"}}, o);
  EXPECT_NE(dark.find("background:#08306b"), std::string::npos);
  const std::string light = render_depthmap({{"x", 4, {}, 0, 0, "copy"}}, o);
  EXPECT_NE(light.find("background:#deebf7"), std::string::npos);
}

TEST(RenderDepthmap, EscapesHtml) {
  DepthMapOptions o{4, 8, Palette{}, DepthMapFormat::html};
  const std::string doc = render_depthmap({{"<&>", 5, {}, 0, 0, "copy"}}, o);
  EXPECT_NE(doc.find("&lt;&amp;&gt;"), std::string::npos);
  EXPECT_EQ(doc.find("<&>"), std::string::npos);
}

TEST(RenderDepthmap, Errors) {
  EXPECT_THROW(render_depthmap({}, DepthMapOptions{4, 8}), InvalidArgument);
  EXPECT_THROW(render_depthmap(three_tokens(), DepthMapOptions{9, 8}), InvalidArgument);
}

TEST(RenderDepthmap, TerminalGolden) {
  const auto out = render_depthmap(three_tokens(), DepthMapOptions{4, 8, Palette{}, DepthMapFormat::terminal});
  EXPECT_EQ(out, render_depthmap(three_tokens(), DepthMapOptions{4, 8, Palette{}, DepthMapFormat::terminal}));
  check_golden(fixtures::kGoldenAnsi, out);
}

TEST(RenderDepthmap, HtmlGolden) {
  check_golden(fixtures::kGoldenHtml,
               render_depthmap(three_tokens(), DepthMapOptions{4, 8, Palette{}, DepthMapFormat::html}));
}
