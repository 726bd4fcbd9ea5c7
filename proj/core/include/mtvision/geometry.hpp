#pragma once

#include <optional>
#include <vector>

#include "mtvision/types.hpp"

namespace mtv {

/// Intersection-over-union of two boxes. Degenerate (zero-area) overlap-free
/// inputs yield 0; never divides by zero.
double box_iou(const Box& a, const Box& b);

/// Greedy per-category non-maximum suppression. Output sorted by descending
/// score (ties keep input order). iou_threshold must be in (0, 1].
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

/// Tight axis-aligned bounding box of the set pixels. Throws EmptyMaskError on
/// an all-zero mask.
Box mask_to_bbox(const Mask& mask);

/// Intersection of b with the canvas [0,width]x[0,height]; nullopt when empty.
std::optional<Box> clip_box(const Box& b, double width, double height);

}  // namespace mtv
