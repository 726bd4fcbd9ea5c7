#pragma once

#include <array>
#include <string>
#include <vector>

#include "mtvision/types.hpp"

namespace mtv::render {

using Color = std::array<std::uint8_t, 3>;

/// Fixed palette; category color = kPalette[id % kPalette.size()].
extern const std::array<Color, 20> kPalette;
Color color_for_category(int category);

/// Draw a 5x7 bitmap string (lowercase letters, digits, and basic punctuation;
/// unknown characters render as a filled block). Pixels outside the image are skipped.
void draw_text(Image& img, int x, int y, const std::string& text, const Color& color);

/// 1-pixel box outline, clipped to the image.
void draw_box(Image& img, const Box& b, const Color& color);

/// Deterministic composite: semantic overlay (alpha 0.4) under instance masks
/// (alpha 0.5), box outlines, per-box "c<id> <score>" labels, caption at the bottom.
/// Unlabeled semantic pixels (id 171) are left untinted. `masks` must either be empty
/// or have one raster per detection.
Image render_overlay(const Image& base, const std::vector<Detection>& detections,
                     const std::vector<Mask>& masks, const SemanticMask* semantic,
                     const std::string& caption);

/// Machine-readable sidecar for a rendered overlay: exact box/score/category values,
/// caption, and mask areas, so tests never parse pixels.
std::string sidecar_json(const std::vector<Detection>& detections,
                         const std::vector<Mask>& masks, const std::string& caption);

}  // namespace mtv::render
