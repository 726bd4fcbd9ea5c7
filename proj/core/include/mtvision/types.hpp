#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtvision/errors.hpp"

namespace mtv {

// Merged COCO category space: 80 instance ids, 91 stuff ids, 1 unlabeled id.
inline constexpr int kInstanceCategories = 80;
inline constexpr int kStuffCategories = 91;
inline constexpr int kMergedCategories = kInstanceCategories + kStuffCategories + 1;  // 172
inline constexpr int kUnlabeledId = kMergedCategories - 1;                            // 171

/// Axis-aligned box in absolute pixel corner form, x1<=x2, y1<=y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const;

  bool operator==(const Box& o) const = default;
};

struct LabeledBox {
  Box box;
  int category = 0;  // instance category id in [0, kInstanceCategories)
};

/// RGB8 raster, row-major, packed.
struct Image {
  int h = 0, w = 0;
  std::vector<std::uint8_t> px;  // h*w*3

  Image() = default;
  Image(int height, int width, std::uint8_t fill = 0)
      : h(height), w(width), px(static_cast<size_t>(height) * width * 3, fill) {}

  std::uint8_t& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  bool empty() const { return px.empty(); }
  bool operator==(const Image& o) const = default;
};

/// Binary raster (0/1 values), row-major.
struct Mask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> px;  // h*w

  Mask() = default;
  Mask(int height, int width, std::uint8_t fill = 0)
      : h(height), w(width), px(static_cast<size_t>(height) * width, fill) {}

  std::uint8_t& at(int y, int x) { return px[static_cast<size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return px[static_cast<size_t>(y) * w + x]; }
  long area() const;
  bool empty() const { return px.empty(); }
  bool operator==(const Mask& o) const = default;
};

/// Per-pixel category-id raster over the merged space, ids < kMergedCategories.
struct SemanticMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> px;  // h*w, each < kMergedCategories

  SemanticMask() = default;
  SemanticMask(int height, int width, std::uint8_t fill = kUnlabeledId)
      : h(height), w(width), px(static_cast<size_t>(height) * width, fill) {}

  std::uint8_t& at(int y, int x) { return px[static_cast<size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return px[static_cast<size_t>(y) * w + x]; }
  bool empty() const { return px.empty(); }
  bool operator==(const SemanticMask& o) const = default;
};

struct InstanceAnnotation {
  LabeledBox labeled_box;
  Mask mask;  // image-resolution binary mask
};

/// One scored model detection; mask_coefficients has length K when present.
struct Detection {
  Box box;
  double score = 0;
  int category = 0;
  std::vector<double> mask_coefficients;
};

/// The unit every pipeline consumes: one image plus all task annotations.
struct Sample {
  std::int64_t id = 0;
  Image image;
  std::vector<InstanceAnnotation> instances;
  SemanticMask semantic;
  std::vector<std::string> captions;
};

}  // namespace mtv
