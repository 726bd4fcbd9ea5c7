#include "mtvision/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mtv {

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
         x2 >= x1 && y2 >= y1;
}

long Mask::area() const {
  long n = 0;
  for (auto v : px) n += v != 0;
  return n;
}

double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });

  std::vector<char> suppressed(dets.size(), 0);
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (size_t i = 0; i < order.size(); ++i) {
    const size_t a = order[i];
    if (suppressed[a]) continue;
    kept.push_back(dets[a]);
    for (size_t j = i + 1; j < order.size(); ++j) {
      const size_t b = order[j];
      if (suppressed[b] || dets[b].category != dets[a].category) continue;
      if (box_iou(dets[a].box, dets[b].box) > iou_threshold) suppressed[b] = 1;
    }
  }
  return kept;
}

Box mask_to_bbox(const Mask& mask) {
  int min_x = mask.w, min_y = mask.h, max_x = -1, max_y = -1;
  for (int y = 0; y < mask.h; ++y) {
    const std::uint8_t* row = mask.px.data() + static_cast<size_t>(y) * mask.w;
    for (int x = 0; x < mask.w; ++x) {
      if (!row[x]) continue;
      min_x = std::min(min_x, x);
      min_y = std::min(min_y, y);
      max_x = std::max(max_x, x);
      max_y = std::max(max_y, y);
    }
  }
  if (max_x < 0) throw EmptyMaskError("mask_to_bbox: mask has no set pixels");
  // pixel (x, y) covers [x, x+1) x [y, y+1)
  return Box{static_cast<double>(min_x), static_cast<double>(min_y),
             static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
}

std::optional<Box> clip_box(const Box& b, double width, double height) {
  Box c{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
        std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
  if (c.x2 - c.x1 <= 0 || c.y2 - c.y1 <= 0) return std::nullopt;
  return c;
}

}  // namespace mtv
