#include "mtvision/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mtvision/errors.hpp"
#include "mtvision/geometry.hpp"

namespace mtv::aug {

namespace {

constexpr std::uint8_t kFillGray = 114;
constexpr double kPi = 3.14159265358979323846;
constexpr double kDropAreaFrac = 0.10;

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0))
    throw ConfigError(std::string(name) + " must be in [0,1]");
}

}  // namespace

void AugConfig::validate() const {
  check_prob(mosaic_prob, "mosaic_prob");
  check_prob(mixup_prob, "mixup_prob");
  check_prob(cutout_prob, "cutout_prob");
  check_prob(copy_paste_prob, "copy_paste_prob");
  if (target_size <= 0) throw ConfigError("target_size must be > 0");
  if (!(scale_min > 0.0) || scale_max < scale_min)
    throw ConfigError("scale range must satisfy 0 < scale_min <= scale_max");
  if (degrees < 0 || translate < 0 || shear < 0 || perspective < 0)
    throw ConfigError("perspective parameter ranges must be >= 0");
  if (!(mixup_alpha > 0.0) || !(mixup_beta > 0.0))
    throw ConfigError("mixup beta parameters must be > 0");
  if (cutout_holes < 0) throw ConfigError("cutout_holes must be >= 0");
}

// ---- Homography ----

Homography Homography::translation(double tx, double ty) {
  Homography h;
  h.m[2] = tx;
  h.m[5] = ty;
  return h;
}

Homography Homography::scaling(double sx, double sy) {
  Homography h;
  h.m[0] = sx;
  h.m[4] = sy;
  return h;
}

Homography Homography::operator*(const Homography& rhs) const {
  Homography r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * rhs.m[k * 3 + j];
      r.m[i * 3 + j] = acc;
    }
  return r;
}

Homography Homography::inverse() const {
  const double a = m[0], b = m[1], c = m[2];
  const double d = m[3], e = m[4], f = m[5];
  const double g = m[6], h = m[7], i = m[8];
  const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
  if (std::abs(det) < 1e-12) throw ShapeError("homography is singular");
  const double inv = 1.0 / det;
  Homography r;
  r.m[0] = (e * i - f * h) * inv;
  r.m[1] = (c * h - b * i) * inv;
  r.m[2] = (b * f - c * e) * inv;
  r.m[3] = (f * g - d * i) * inv;
  r.m[4] = (a * i - c * g) * inv;
  r.m[5] = (c * d - a * f) * inv;
  r.m[6] = (d * h - e * g) * inv;
  r.m[7] = (b * g - a * h) * inv;
  r.m[8] = (a * e - b * d) * inv;
  return r;
}

void Homography::apply(double x, double y, double& ox, double& oy) const {
  const double w = m[6] * x + m[7] * y + m[8];
  ox = (m[0] * x + m[1] * y + m[2]) / w;
  oy = (m[3] * x + m[4] * y + m[5]) / w;
}

// ---- warps ----

Image warp_image(const Image& img, const Homography& h, int oh, int ow, std::uint8_t fill) {
  Image out(oh, ow, fill);
  const Homography inv = h.inverse();
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double sx, sy;
      inv.apply(x + 0.5, y + 0.5, sx, sy);
      const double fx = sx - 0.5, fy = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(fx));
      const int y0 = static_cast<int>(std::floor(fy));
      const double wx = fx - x0, wy = fy - y0;
      if (x0 < -1 || x0 >= img.w || y0 < -1 || y0 >= img.h) continue;  // fully outside
      auto tap = [&](int yy, int xx, int c) -> double {
        if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) return fill;
        return img.at(yy, xx, c);
      };
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - wy) * ((1 - wx) * tap(y0, x0, c) + wx * tap(y0, x0 + 1, c)) +
                         wy * ((1 - wx) * tap(y0 + 1, x0, c) + wx * tap(y0 + 1, x0 + 1, c));
        const long r = std::lround(v);
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(r, 0L, 255L));
      }
    }
  }
  return out;
}

namespace {

template <class RasterT>
RasterT warp_nearest(const RasterT& src, const Homography& h, int oh, int ow,
                     std::uint8_t fill) {
  RasterT out(oh, ow, fill);
  const Homography inv = h.inverse();
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double sx, sy;
      inv.apply(x + 0.5, y + 0.5, sx, sy);
      const int ix = static_cast<int>(std::floor(sx));
      const int iy = static_cast<int>(std::floor(sy));
      if (ix < 0 || ix >= src.w || iy < 0 || iy >= src.h) continue;
      out.at(y, x) = src.at(iy, ix);
    }
  }
  return out;
}

}  // namespace

Mask warp_mask(const Mask& mask, const Homography& h, int oh, int ow) {
  return warp_nearest(mask, h, oh, ow, 0);
}

SemanticMask warp_semantic(const SemanticMask& sem, const Homography& h, int oh, int ow) {
  return warp_nearest(sem, h, oh, ow, static_cast<std::uint8_t>(kUnlabeledId));
}

Sample warp_sample(const Sample& s, const Homography& h, int oh, int ow, double drop_area_frac) {
  Sample out;
  out.id = s.id;
  out.captions = s.captions;
  out.image = warp_image(s.image, h, oh, ow, kFillGray);
  if (!s.semantic.empty())
    out.semantic = warp_semantic(s.semantic, h, oh, ow);
  else
    out.semantic = SemanticMask(oh, ow);

  for (const auto& inst : s.instances) {
    Mask warped = warp_mask(inst.mask, h, oh, ow);
    const long area = warped.area();
    if (area == 0) continue;
    const long src_area = inst.mask.area();
    if (src_area > 0 && static_cast<double>(area) < drop_area_frac * src_area) continue;
    InstanceAnnotation kept;
    kept.labeled_box.category = inst.labeled_box.category;
    kept.labeled_box.box = mask_to_bbox(warped);
    kept.mask = std::move(warped);
    out.instances.push_back(std::move(kept));
  }
  return out;
}

Homography letterbox_matrix(int in_h, int in_w, int target, double* scale_out) {
  const double scale = std::min(static_cast<double>(target) / in_w,
                                static_cast<double>(target) / in_h);
  if (scale_out) *scale_out = scale;
  const double out_w = in_w * scale, out_h = in_h * scale;
  const double pad_x = std::floor((target - out_w) / 2.0);
  const double pad_y = std::floor((target - out_h) / 2.0);
  return Homography::translation(pad_x, pad_y) * Homography::scaling(scale, scale);
}

Sample weak_transform(const Sample& s, int target_size) {
  if (target_size <= 0) throw ConfigError("target_size must be > 0");
  const Homography h = letterbox_matrix(s.image.h, s.image.w, target_size);
  // drop only instances that vanish entirely; captions pass through untouched
  return warp_sample(s, h, target_size, target_size, 0.0);
}

Sample random_perspective(const Sample& s, const AugConfig& cfg, Rng& rng, double base_scale) {
  const int out = cfg.target_size;
  const int in_h = s.image.h, in_w = s.image.w;

  // draw order is part of the determinism contract:
  // angle, scale, shear_x, shear_y, persp_x, persp_y, translate_x, translate_y
  const double angle = rng.uniform(-cfg.degrees, cfg.degrees) * kPi / 180.0;
  const double scale = base_scale * rng.uniform(cfg.scale_min, cfg.scale_max);
  const double shear_x = std::tan(rng.uniform(-cfg.shear, cfg.shear) * kPi / 180.0);
  const double shear_y = std::tan(rng.uniform(-cfg.shear, cfg.shear) * kPi / 180.0);
  const double persp_x = rng.uniform(-cfg.perspective, cfg.perspective);
  const double persp_y = rng.uniform(-cfg.perspective, cfg.perspective);
  const double tx = rng.uniform(0.5 - cfg.translate, 0.5 + cfg.translate) * out;
  const double ty = rng.uniform(0.5 - cfg.translate, 0.5 + cfg.translate) * out;

  Homography center = Homography::translation(-in_w / 2.0, -in_h / 2.0);
  Homography persp;
  persp.m[6] = persp_x;
  persp.m[7] = persp_y;
  Homography rot;
  const double ca = std::cos(angle) * scale, sa = std::sin(angle) * scale;
  rot.m[0] = ca;
  rot.m[1] = -sa;
  rot.m[3] = sa;
  rot.m[4] = ca;
  Homography shear;
  shear.m[1] = shear_x;
  shear.m[3] = shear_y;
  Homography trans = Homography::translation(tx, ty);

  const Homography h = trans * shear * rot * persp * center;
  return warp_sample(s, h, out, out, kDropAreaFrac);
}

// ---- mosaic ----

namespace {

// paste src's rect onto dst at offset (ox,oy), clipped
template <class PixelCopy>
void paste_clipped(int src_h, int src_w, int dst_h, int dst_w, int ox, int oy, PixelCopy copy) {
  const int y0 = std::max(0, oy), y1 = std::min(dst_h, oy + src_h);
  const int x0 = std::max(0, ox), x1 = std::min(dst_w, ox + src_w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) copy(y - oy, x - ox, y, x);
}

}  // namespace

Sample mosaic_compose(const std::vector<Sample>& four, int cx, int cy, int target) {
  if (four.size() != 4) throw ArityError("mosaic_compose: need exactly 4 samples");
  for (const auto& s : four)
    if (s.image.h != target || s.image.w != target)
      throw ShapeError("mosaic_compose: inputs must be target-size");

  const int canvas = 2 * target;
  Sample out;
  out.id = four[0].id;
  out.image = Image(canvas, canvas, kFillGray);
  out.semantic = SemanticMask(canvas, canvas);

  const int offs[4][2] = {{cx - target, cy - target},  // top-left
                          {cx, cy - target},           // top-right
                          {cx - target, cy},           // bottom-left
                          {cx, cy}};                   // bottom-right

  for (int q = 0; q < 4; ++q) {
    const Sample& s = four[static_cast<std::size_t>(q)];
    const int ox = offs[q][0], oy = offs[q][1];

    paste_clipped(target, target, canvas, canvas, ox, oy, [&](int sy, int sx, int dy, int dx) {
      for (int c = 0; c < 3; ++c) out.image.at(dy, dx, c) = s.image.at(sy, sx, c);
      if (!s.semantic.empty()) out.semantic.at(dy, dx) = s.semantic.at(sy, sx);
    });

    for (const auto& inst : s.instances) {
      Mask shifted(canvas, canvas, 0);
      bool any = false;
      paste_clipped(target, target, canvas, canvas, ox, oy, [&](int sy, int sx, int dy, int dx) {
        if (inst.mask.at(sy, sx)) {
          shifted.at(dy, dx) = 1;
          any = true;
        }
      });
      if (!any) continue;
      InstanceAnnotation kept;
      kept.labeled_box.category = inst.labeled_box.category;
      kept.labeled_box.box = mask_to_bbox(shifted);
      kept.mask = std::move(shifted);
      out.instances.push_back(std::move(kept));
    }
    for (const auto& cap : s.captions) out.captions.push_back(cap);
  }
  return out;
}

Sample mosaic4(const std::vector<Sample>& samples, const AugConfig& cfg, Rng& rng) {
  if (samples.size() != 4) throw ArityError("mosaic4: need exactly 4 samples");
  const int t = cfg.target_size;
  std::vector<Sample> boxed;
  boxed.reserve(4);
  for (const auto& s : samples) boxed.push_back(weak_transform(s, t));
  const int cx = static_cast<int>(std::floor(rng.uniform(0.5 * t, 1.5 * t)));
  const int cy = static_cast<int>(std::floor(rng.uniform(0.5 * t, 1.5 * t)));
  Sample canvas = mosaic_compose(boxed, cx, cy, t);
  return random_perspective(canvas, cfg, rng, /*base_scale=*/0.5);
}

// ---- mixup ----

Sample mixup(const Sample& a, const Sample& b, double alpha, double beta, Rng& rng) {
  if (a.image.h != b.image.h || a.image.w != b.image.w)
    throw ShapeError("mixup: resolution mismatch");
  const double r = rng.beta(alpha, beta);

  Sample out;
  out.id = a.id;
  out.image = Image(a.image.h, a.image.w);
  for (std::size_t i = 0; i < out.image.px.size(); ++i) {
    const double v = r * a.image.px[i] + (1.0 - r) * b.image.px[i];
    out.image.px[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  out.instances = a.instances;
  out.instances.insert(out.instances.end(), b.instances.begin(), b.instances.end());
  out.semantic = r >= 0.5 ? a.semantic : b.semantic;
  out.captions = a.captions;
  out.captions.insert(out.captions.end(), b.captions.begin(), b.captions.end());
  return out;
}

// ---- cutout ----

Sample cutout(const Sample& s, const AugConfig& cfg, Rng& rng) {
  Sample out = s;
  const int h = out.image.h, w = out.image.w;
  for (int k = 0; k < cfg.cutout_holes; ++k) {
    // draw order: height frac, width frac, center y, center x
    const double fh = rng.uniform(0.0625, 0.25);
    const double fw = rng.uniform(0.0625, 0.25);
    const int hh = std::max(1, static_cast<int>(fh * h));
    const int ww = std::max(1, static_cast<int>(fw * w));
    const int cy = rng.uniform_int(h);
    const int cx = rng.uniform_int(w);
    const int y0 = std::max(0, cy - hh / 2), y1 = std::min(h, y0 + hh);
    const int x0 = std::max(0, cx - ww / 2), x1 = std::min(w, x0 + ww);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = kFillGray;
  }
  return out;
}

// ---- copy-paste ----

Sample copy_paste(const Sample& dst, const Sample& src, Rng& rng) {
  bool src_has_mask = false;
  for (const auto& inst : src.instances)
    if (inst.mask.area() > 0) src_has_mask = true;
  if (!src_has_mask) {
    std::fprintf(stderr, "warning: copy_paste source has no instance masks; skipping\n");
    return dst;
  }
  if (dst.image.h != src.image.h || dst.image.w != src.image.w)
    throw ShapeError("copy_paste: resolution mismatch");

  // one selection draw per source instance, whether or not it has a mask
  std::vector<const InstanceAnnotation*> chosen;
  for (const auto& inst : src.instances) {
    const bool pick = rng.uniform() < 0.5;
    if (pick && inst.mask.area() > 0) chosen.push_back(&inst);
  }

  Sample out = dst;
  if (chosen.empty()) return out;

  Mask pasted(out.image.h, out.image.w, 0);
  for (const auto* inst : chosen)
    for (std::size_t i = 0; i < inst->mask.px.size(); ++i)
      if (inst->mask.px[i]) pasted.px[i] = 1;

  // composite pixels and semantic labels
  for (std::size_t i = 0; i < pasted.px.size(); ++i) {
    if (!pasted.px[i]) continue;
    out.image.px[i * 3 + 0] = src.image.px[i * 3 + 0];
    out.image.px[i * 3 + 1] = src.image.px[i * 3 + 1];
    out.image.px[i * 3 + 2] = src.image.px[i * 3 + 2];
  }
  if (out.semantic.empty()) out.semantic = SemanticMask(out.image.h, out.image.w);
  for (const auto* inst : chosen)
    for (std::size_t i = 0; i < inst->mask.px.size(); ++i)
      if (inst->mask.px[i])
        out.semantic.px[i] = static_cast<std::uint8_t>(inst->labeled_box.category);

  // occluded destination instances lose the pasted region
  std::vector<InstanceAnnotation> survivors;
  for (auto& inst : out.instances) {
    bool any = false;
    for (std::size_t i = 0; i < inst.mask.px.size(); ++i) {
      if (inst.mask.px[i] && pasted.px[i]) inst.mask.px[i] = 0;
      any = any || inst.mask.px[i];
    }
    if (!any) continue;
    inst.labeled_box.box = mask_to_bbox(inst.mask);
    survivors.push_back(std::move(inst));
  }
  out.instances = std::move(survivors);

  for (const auto* inst : chosen) {
    InstanceAnnotation added;
    added.labeled_box.category = inst->labeled_box.category;
    added.mask = inst->mask;
    added.labeled_box.box = mask_to_bbox(added.mask);
    out.instances.push_back(std::move(added));
  }
  return out;
}

// ---- router ----

AugmentedViews make_views(const std::vector<Sample>& batch, const AugConfig& cfg, Rng& rng) {
  if (batch.empty()) throw ArityError("make_views: empty batch");
  cfg.validate();

  AugmentedViews views;
  for (const auto& s : batch) {
    views.weak.push_back(weak_transform(s, cfg.target_size));
    views.weak_sources.push_back(s.id);
  }

  // partition into mosaic groups of four and singles
  std::size_t i = 0;
  while (i < batch.size()) {
    if (batch.size() - i >= 4 && rng.uniform() < cfg.mosaic_prob) {
      std::vector<Sample> group(batch.begin() + static_cast<long>(i),
                                batch.begin() + static_cast<long>(i) + 4);
      views.strong.push_back(mosaic4(group, cfg, rng));
      views.strong_sources.push_back(
          {batch[i].id, batch[i + 1].id, batch[i + 2].id, batch[i + 3].id});
      i += 4;
    } else {
      views.strong.push_back(
          random_perspective(weak_transform(batch[i], cfg.target_size), cfg, rng));
      views.strong_sources.push_back({batch[i].id});
      i += 1;
    }
  }

  // mixup merges adjacent slots
  {
    std::vector<Sample> merged;
    std::vector<std::vector<std::int64_t>> merged_src;
    std::size_t j = 0;
    while (j < views.strong.size()) {
      if (j + 1 < views.strong.size() && rng.uniform() < cfg.mixup_prob) {
        merged.push_back(
            mixup(views.strong[j], views.strong[j + 1], cfg.mixup_alpha, cfg.mixup_beta, rng));
        auto src = views.strong_sources[j];
        src.insert(src.end(), views.strong_sources[j + 1].begin(),
                   views.strong_sources[j + 1].end());
        merged_src.push_back(std::move(src));
        j += 2;
      } else {
        merged.push_back(std::move(views.strong[j]));
        merged_src.push_back(std::move(views.strong_sources[j]));
        j += 1;
      }
    }
    views.strong = std::move(merged);
    views.strong_sources = std::move(merged_src);
  }

  // copy-paste from the next slot (cyclic), then cutout
  for (std::size_t k = 0; k < views.strong.size(); ++k) {
    if (views.strong.size() > 1 && rng.uniform() < cfg.copy_paste_prob) {
      const std::size_t donor = (k + 1) % views.strong.size();
      views.strong[k] = copy_paste(views.strong[k], views.strong[donor], rng);
    }
  }
  for (auto& s : views.strong)
    if (rng.uniform() < cfg.cutout_prob) s = cutout(s, cfg, rng);

  return views;
}

}  // namespace mtv::aug
