#include <doctest.h>

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtvision/errors.hpp"
#include "mtvision/render.hpp"
#include "mtvision/types.hpp"

using namespace mtv;
using render::Color;

namespace {

Detection det(const Box& b, double score, int cat) {
  Detection d;
  d.box = b;
  d.score = score;
  d.category = cat;
  return d;
}

}  // namespace

TEST_SUITE("render") {
  TEST_CASE("palette wraps by modulus") {
    CHECK(render::color_for_category(0) == render::kPalette[0]);
    CHECK(render::color_for_category(19) == render::kPalette[19]);
    CHECK(render::color_for_category(20) == render::kPalette[0]);
    CHECK(render::color_for_category(25) == render::kPalette[5]);
    CHECK(render::color_for_category(171) == render::kPalette[171 % 20]);
    CHECK(render::color_for_category(-1) == render::kPalette[19]);
  }

  TEST_CASE("no annotations reproduce the base image") {
    const Image base(16, 16, 100);
    const Image out = render::render_overlay(base, {}, {}, nullptr, "");
    CHECK(out == base);

    // Fully unlabeled semantic raster: every pixel untinted.
    const SemanticMask unlabeled(16, 16, kUnlabeledId);
    CHECK(render::render_overlay(base, {}, {}, &unlabeled, "") == base);
  }

  TEST_CASE("semantic tint uses the documented alpha blend") {
    const Image base(8, 8, 100);
    SemanticMask sem(8, 8, kUnlabeledId);
    sem.at(2, 3) = 4;  // one labeled pixel
    const Image out = render::render_overlay(base, {}, {}, &sem, "");
    const Color c = render::color_for_category(4);
    for (int ch = 0; ch < 3; ++ch)
      CHECK(out.at(2, 3, ch) == static_cast<std::uint8_t>((3 * 100 + 2 * c[ch]) / 5));
    CHECK(out.at(0, 0, 0) == 100);  // neighbors untouched
  }

  TEST_CASE("instance masks blend at half strength over the semantic layer") {
    const Image base(8, 8, 100);
    Mask m(8, 8);
    m.at(5, 5) = 1;
    // Far from (5,5) so the box outline and label do not touch the probe pixel.
    const Detection d = det({0, 0, 2, 2}, 0.5, 7);
    const Image out = render::render_overlay(base, {d}, {m}, nullptr, "");
    const Color c = render::color_for_category(7);
    for (int ch = 0; ch < 3; ++ch)
      CHECK(out.at(5, 5, ch) == static_cast<std::uint8_t>((100 + c[ch]) / 2));
  }

  TEST_CASE("box outlines are one pixel and clipped") {
    Image img(10, 10, 0);
    const Color c{9, 8, 7};
    render::draw_box(img, {2, 3, 6, 8}, c);
    // Corners of the outline.
    CHECK(img.at(3, 2, 0) == 9);
    CHECK(img.at(3, 5, 0) == 9);
    CHECK(img.at(7, 2, 0) == 9);
    CHECK(img.at(7, 5, 0) == 9);
    // Edge midpoints.
    CHECK(img.at(3, 4, 0) == 9);
    CHECK(img.at(5, 2, 0) == 9);
    // Interior and exterior untouched.
    CHECK(img.at(5, 4, 0) == 0);
    CHECK(img.at(0, 0, 0) == 0);
    CHECK(img.at(9, 9, 0) == 0);

    // A box exceeding the canvas must clip, not crash.
    Image big(10, 10, 0);
    render::draw_box(big, {-5, -5, 100, 100}, c);
    CHECK(big.at(0, 0, 0) == 9);
    CHECK(big.at(9, 9, 0) == 9);
    CHECK(big.at(5, 5, 0) == 0);
  }

  TEST_CASE("text rendering") {
    Image img(12, 40, 0);
    const Color c{255, 0, 0};
    render::draw_text(img, 0, 0, "1", c);
    CHECK(img.at(0, 2, 0) == 255);  // glyph row 0 of '1' sets only column 2
    CHECK(img.at(0, 0, 0) == 0);
    CHECK(img.at(0, 4, 0) == 0);

    // Unknown characters render as a filled 5x7 block.
    Image blk(12, 12, 0);
    render::draw_text(blk, 1, 1, "!", c);
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 5; ++x) CHECK(blk.at(1 + y, 1 + x, 0) == 255);

    // Off-canvas text is clipped silently.
    Image off(8, 8, 0);
    render::draw_text(off, -3, -3, "xy", c);
    render::draw_text(off, 6, 6, "xy", c);
  }

  TEST_CASE("rendering is deterministic") {
    Image base(32, 32, 60);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) base.at(y, x, 1) = static_cast<std::uint8_t>((x * 7 + y) % 251);
    SemanticMask sem(32, 32, kUnlabeledId);
    for (int y = 16; y < 32; ++y)
      for (int x = 0; x < 32; ++x) sem.at(y, x) = 85;
    Mask m(32, 32);
    for (int y = 4; y < 12; ++y)
      for (int x = 4; x < 12; ++x) m.at(y, x) = 1;
    const std::vector<Detection> dets = {det({4, 4, 12, 12}, 0.75, 2)};

    const Image a = render::render_overlay(base, dets, {m}, &sem, "a red box");
    const Image b = render::render_overlay(base, dets, {m}, &sem, "a red box");
    CHECK(a == b);
    CHECK(!(a == base));

    // The caption strip paints white pixels near the bottom edge.
    bool white_found = false;
    for (int y = a.h - 9; y < a.h && !white_found; ++y)
      for (int x = 0; x < a.w && !white_found; ++x)
        white_found = a.at(y, x, 0) == 255 && a.at(y, x, 1) == 255 && a.at(y, x, 2) == 255;
    CHECK(white_found);
  }

  TEST_CASE("mismatched annotation shapes are rejected") {
    const Image base(8, 8, 0);
    const std::vector<Detection> dets = {det({0, 0, 4, 4}, 0.5, 0)};
    CHECK_THROWS_AS(render::render_overlay(base, dets, {Mask(8, 8), Mask(8, 8)}, nullptr, ""),
                    ShapeError);
    CHECK_THROWS_AS(render::render_overlay(base, dets, {Mask(4, 8)}, nullptr, ""), ShapeError);
    const SemanticMask bad(4, 4);
    CHECK_THROWS_AS(render::render_overlay(base, {}, {}, &bad, ""), ShapeError);
  }

  TEST_CASE("sidecar serializes exact values on one line") {
    Mask m(8, 8);
    m.at(1, 1) = m.at(1, 2) = m.at(2, 1) = 1;
    const std::vector<Detection> dets = {det({0.125, 2.5, 6.75, 7.0}, 0.8125, 17),
                                         det({1, 1, 3, 3}, 0.5, 3)};
    const std::string js = render::sidecar_json(dets, {m, Mask(8, 8)}, "two boxes");
    CHECK(js.find('\n') == std::string::npos);

    auto j = nlohmann::json::parse(js);
    CHECK(j["caption"].get<std::string>() == "two boxes");
    REQUIRE(j["detections"].size() == 2);
    const auto& d0 = j["detections"][0];
    CHECK(d0["box"][0].get<double>() == 0.125);
    CHECK(d0["box"][1].get<double>() == 2.5);
    CHECK(d0["box"][2].get<double>() == 6.75);
    CHECK(d0["box"][3].get<double>() == 7.0);
    CHECK(d0["score"].get<double>() == 0.8125);
    CHECK(d0["category"].get<int>() == 17);
    CHECK(d0["mask_area"].get<long>() == 3);
    CHECK(j["detections"][1]["mask_area"].get<long>() == 0);

    // Without masks the area field is absent.
    auto j2 = nlohmann::json::parse(render::sidecar_json(dets, {}, ""));
    CHECK(!j2["detections"][0].contains("mask_area"));
    CHECK(j2["caption"].get<std::string>().empty());
  }
}
