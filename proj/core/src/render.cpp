#include "mtvision/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "mtvision/errors.hpp"

namespace mtv::render {

const std::array<Color, 20> kPalette = {{
    {230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},   {245, 130, 48},
    {145, 30, 180},  {70, 240, 240},  {240, 50, 230}, {210, 245, 60},  {250, 190, 212},
    {0, 128, 128},   {220, 190, 255}, {170, 110, 40}, {255, 250, 200}, {128, 0, 0},
    {170, 255, 195}, {128, 128, 0},   {255, 215, 180}, {0, 0, 128},    {128, 128, 128},
}};

Color color_for_category(int category) {
  const int n = static_cast<int>(kPalette.size());
  int i = category % n;
  if (i < 0) i += n;
  return kPalette[static_cast<size_t>(i)];
}

namespace {

// 5x7 glyphs, one byte per row, bit 4 = leftmost pixel
const std::uint8_t* glyph(char c) {
  static const std::uint8_t digits[10][7] = {
      {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};
  static const std::uint8_t lower[26][7] = {
      {0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F}, {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E},
      {0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E}, {0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F},
      {0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E}, {0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08},
      {0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E}, {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11},
      {0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E}, {0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C},
      {0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12}, {0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E},
      {0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11}, {0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11},
      {0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E}, {0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10},
      {0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01}, {0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10},
      {0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E}, {0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06},
      {0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D}, {0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04},
      {0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A}, {0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11},
      {0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E}, {0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F}};
  static const std::uint8_t dot[7] = {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C};
  static const std::uint8_t colon[7] = {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00};
  static const std::uint8_t dash[7] = {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00};
  static const std::uint8_t under[7] = {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F};
  static const std::uint8_t space[7] = {0, 0, 0, 0, 0, 0, 0};
  static const std::uint8_t lt[7] = {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02};
  static const std::uint8_t gt[7] = {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08};
  static const std::uint8_t block[7] = {0x1F, 0x1F, 0x1F, 0x1F, 0x1F, 0x1F, 0x1F};

  if (c >= '0' && c <= '9') return digits[c - '0'];
  if (c >= 'a' && c <= 'z') return lower[c - 'a'];
  if (c >= 'A' && c <= 'Z') return lower[c - 'A'];
  switch (c) {
    case '.': return dot;
    case ':': return colon;
    case '-': return dash;
    case '_': return under;
    case ' ': return space;
    case '<': return lt;
    case '>': return gt;
    default: return block;
  }
}

void put_px(Image& img, int x, int y, const Color& c) {
  if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
  for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[static_cast<size_t>(ch)];
}

}  // namespace

void draw_text(Image& img, int x, int y, const std::string& text, const Color& color) {
  int cx = x;
  for (char c : text) {
    const std::uint8_t* g = glyph(c);
    for (int row = 0; row < 7; ++row)
      for (int col = 0; col < 5; ++col)
        if (g[row] & (0x10 >> col)) put_px(img, cx + col, y + row, color);
    cx += 6;
  }
}

void draw_box(Image& img, const Box& b, const Color& color) {
  const int x1 = std::clamp(static_cast<int>(std::lround(b.x1)), 0, img.w - 1);
  const int y1 = std::clamp(static_cast<int>(std::lround(b.y1)), 0, img.h - 1);
  const int x2 = std::clamp(static_cast<int>(std::lround(b.x2)) - 1, 0, img.w - 1);
  const int y2 = std::clamp(static_cast<int>(std::lround(b.y2)) - 1, 0, img.h - 1);
  for (int x = x1; x <= x2; ++x) {
    put_px(img, x, y1, color);
    put_px(img, x, y2, color);
  }
  for (int y = y1; y <= y2; ++y) {
    put_px(img, x1, y, color);
    put_px(img, x2, y, color);
  }
}

Image render_overlay(const Image& base, const std::vector<Detection>& detections,
                     const std::vector<Mask>& masks, const SemanticMask* semantic,
                     const std::string& caption) {
  if (!masks.empty() && masks.size() != detections.size())
    throw ShapeError("render_overlay: need one mask per detection (or none)");

  Image out = base;
  if (semantic) {
    if (semantic->h != base.h || semantic->w != base.w)
      throw ShapeError("render_overlay: semantic raster size mismatch");
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) {
        const int id = semantic->at(y, x);
        if (id == kUnlabeledId) continue;
        const Color c = color_for_category(id);
        for (int ch = 0; ch < 3; ++ch)
          out.at(y, x, ch) = static_cast<std::uint8_t>(
              (3 * out.at(y, x, ch) + 2 * c[static_cast<size_t>(ch)]) / 5);
      }
  }

  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].h != base.h || masks[i].w != base.w)
      throw ShapeError("render_overlay: instance mask size mismatch");
    const Color c = color_for_category(detections[i].category);
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) {
        if (!masks[i].at(y, x)) continue;
        for (int ch = 0; ch < 3; ++ch)
          out.at(y, x, ch) =
              static_cast<std::uint8_t>((out.at(y, x, ch) + c[static_cast<size_t>(ch)]) / 2);
      }
  }

  const Color white{255, 255, 255};
  for (const auto& d : detections) {
    draw_box(out, d.box, color_for_category(d.category));
    char label[48];
    std::snprintf(label, sizeof label, "c%d %.2f", d.category, d.score);
    draw_text(out, static_cast<int>(std::lround(d.box.x1)) + 2,
              static_cast<int>(std::lround(d.box.y1)) + 2, label, white);
  }

  if (!caption.empty()) draw_text(out, 2, out.h - 9, caption, white);
  return out;
}

std::string sidecar_json(const std::vector<Detection>& detections,
                         const std::vector<Mask>& masks, const std::string& caption) {
  nlohmann::json j;
  j["caption"] = caption;
  nlohmann::json dets = nlohmann::json::array();
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const auto& d = detections[i];
    nlohmann::json e;
    e["box"] = {d.box.x1, d.box.y1, d.box.x2, d.box.y2};
    e["score"] = d.score;
    e["category"] = d.category;
    if (i < masks.size()) e["mask_area"] = masks[i].area();
    dets.push_back(e);
  }
  j["detections"] = dets;
  return j.dump();
}

}  // namespace mtv::render
