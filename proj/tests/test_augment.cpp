#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "mtvision/augment.hpp"
#include "mtvision/errors.hpp"
#include "mtvision/geometry.hpp"
#include "mtvision/rng.hpp"
#include "mtvision/types.hpp"
#include "testutil.hpp"

using namespace mtv;
using aug::AugConfig;
using aug::Homography;

namespace {

// One gray sample with a single solid rect instance and a semantic band.
Sample rect_sample(int h, int w, int x, int y, int rw, int rh, int cat,
                   std::int64_t id = 1) {
  Sample s;
  s.id = id;
  s.image = Image(h, w, 160);
  s.semantic = SemanticMask(h, w);
  Mask m(h, w);
  for (int yy = y; yy < y + rh; ++yy)
    for (int xx = x; xx < x + rw; ++xx) {
      m.at(yy, xx) = 1;
      s.semantic.at(yy, xx) = static_cast<std::uint8_t>(cat);
      for (int c = 0; c < 3; ++c) s.image.at(yy, xx, c) = static_cast<std::uint8_t>(40 + 20 * c);
    }
  InstanceAnnotation inst;
  inst.labeled_box.box = Box{double(x), double(y), double(x + rw), double(y + rh)};
  inst.labeled_box.category = cat;
  inst.mask = m;
  s.instances = {inst};
  s.captions = {"a rect sample"};
  return s;
}

AugConfig quiet_config(int target) {
  AugConfig cfg;
  cfg.mosaic_prob = 0;
  cfg.mixup_prob = 0;
  cfg.cutout_prob = 0;
  cfg.copy_paste_prob = 0;
  cfg.degrees = 0;
  cfg.translate = 0;
  cfg.scale_min = 1.0;
  cfg.scale_max = 1.0;
  cfg.shear = 0;
  cfg.perspective = 0;
  cfg.target_size = target;
  return cfg;
}

bool sample_equal(const Sample& a, const Sample& b) {
  if (!(a.image == b.image) || !(a.semantic == b.semantic)) return false;
  if (a.instances.size() != b.instances.size()) return false;
  for (std::size_t i = 0; i < a.instances.size(); ++i) {
    if (!(a.instances[i].mask == b.instances[i].mask)) return false;
    if (!(a.instances[i].labeled_box.box == b.instances[i].labeled_box.box)) return false;
    if (a.instances[i].labeled_box.category != b.instances[i].labeled_box.category) return false;
  }
  return a.captions == b.captions;
}

void check_box_mask_consistency(const Sample& s) {
  for (const auto& inst : s.instances) {
    REQUIRE(inst.mask.area() > 0);
    Box tight = mask_to_bbox(inst.mask);
    CHECK(std::abs(tight.x1 - inst.labeled_box.box.x1) <= 1.0);
    CHECK(std::abs(tight.y1 - inst.labeled_box.box.y1) <= 1.0);
    CHECK(std::abs(tight.x2 - inst.labeled_box.box.x2) <= 1.0);
    CHECK(std::abs(tight.y2 - inst.labeled_box.box.y2) <= 1.0);
  }
}

}  // namespace

TEST_SUITE("augment") {
  TEST_CASE("identity warp is the identity") {
    Sample s = rect_sample(32, 32, 4, 6, 10, 8, 3);
    Sample out = aug::warp_sample(s, Homography::identity(), 32, 32, 0.1);
    CHECK(sample_equal(out, s));
  }

  TEST_CASE("pure translation moves the box exactly") {
    Sample s = rect_sample(32, 32, 0, 0, 5, 5, 3);
    Sample out = aug::warp_sample(s, Homography::translation(10, 10), 32, 32, 0.1);
    REQUIRE(out.instances.size() == 1);
    CHECK(out.instances[0].labeled_box.box == Box{10, 10, 15, 15});
    CHECK(out.instances[0].mask.area() == 25);
    check_box_mask_consistency(out);
  }

  TEST_CASE("translation fully off-canvas drops the instance") {
    Sample s = rect_sample(32, 32, 0, 0, 5, 5, 3);
    Sample out = aug::warp_sample(s, Homography::translation(40, 0), 32, 32, 0.1);
    CHECK(out.instances.empty());
  }

  TEST_CASE("visible-area drop threshold") {
    Sample s = rect_sample(32, 32, 0, 0, 10, 10, 3);
    // 1x5 = 5 of 100 pixels visible: below 10%, dropped.
    CHECK(aug::warp_sample(s, Homography::translation(-9, -5), 32, 32, 0.1).instances.empty());
    // 5x10 = 50 visible: kept, area shrinks monotonically.
    Sample kept = aug::warp_sample(s, Homography::translation(-5, 0), 32, 32, 0.1);
    REQUIRE(kept.instances.size() == 1);
    CHECK(kept.instances[0].mask.area() == 50);
    CHECK(kept.instances[0].mask.area() <= s.instances[0].mask.area());
    check_box_mask_consistency(kept);
  }

  TEST_CASE("semantic and caption survive warps") {
    Sample s = rect_sample(32, 32, 4, 6, 10, 8, 3);
    Sample out = aug::warp_sample(s, Homography::translation(2, 1), 32, 32, 0.1);
    CHECK(out.captions == s.captions);
    std::set<int> values;
    for (auto v : out.semantic.px) values.insert(v);
    for (int v : values) CHECK((v == 3 || v == kUnlabeledId));
    CHECK(out.semantic.at(7, 6) == 3);  // (4,6) translated by (2,1)
  }

  TEST_CASE("mosaic_compose at the canvas midpoint keeps the anchor quadrant fixed") {
    const int T = 32;
    std::vector<Sample> four = {rect_sample(T, T, 2, 3, 6, 5, 1, 1),
                                rect_sample(T, T, 4, 4, 8, 6, 2, 2),
                                rect_sample(T, T, 0, 0, 5, 5, 3, 3),
                                rect_sample(T, T, 10, 12, 6, 4, 4, 4)};
    Sample canvas = aug::mosaic_compose(four, T, T, T);
    CHECK(canvas.image.h == 2 * T);
    CHECK(canvas.image.w == 2 * T);
    REQUIRE(canvas.instances.size() == 4);
    // Top-left input box unchanged; bottom-right offset by (T, T).
    CHECK(canvas.instances[0].labeled_box.box == Box{2, 3, 8, 8});
    CHECK(canvas.instances[3].labeled_box.box ==
          Box{10 + T, 12 + T, 16 + T, 16 + T});
    // Quadrant pixels come from their sources.
    CHECK(canvas.image.at(3, 2, 0) == four[0].image.at(3, 2, 0));
    CHECK(canvas.image.at(T + 12, T + 10, 0) == four[3].image.at(12, 10, 0));
    // Semantic composition follows the same placement.
    CHECK(canvas.semantic.at(3, 2) == 1);
    CHECK(canvas.semantic.at(T + 12, T + 10) == 4);
    check_box_mask_consistency(canvas);
  }

  TEST_CASE("mosaic_compose drops instances outside the visible window") {
    const int T = 32;
    // Center near the top-left: only the bottom-right 8x8 of the TL sample is
    // visible, so its instance at (2,3)-(8,8) vanishes.
    std::vector<Sample> four = {rect_sample(T, T, 2, 3, 6, 5, 1, 1),
                                rect_sample(T, T, 4, 4, 8, 6, 2, 2),
                                rect_sample(T, T, 0, 0, 5, 5, 3, 3),
                                rect_sample(T, T, 10, 12, 6, 4, 4, 4)};
    Sample canvas = aug::mosaic_compose(four, 8, 8, T);
    for (const auto& inst : canvas.instances) CHECK(inst.labeled_box.category != 1);
    check_box_mask_consistency(canvas);
  }

  TEST_CASE("mosaic4 needs exactly four samples and lands on the target size") {
    AugConfig cfg = quiet_config(32);
    Rng rng(3);
    std::vector<Sample> four(4, rect_sample(32, 32, 8, 8, 12, 12, 2));
    CHECK_THROWS_AS(aug::mosaic4({four[0], four[1]}, cfg, rng), ArityError);
    Sample out = aug::mosaic4(four, cfg, rng);
    CHECK(out.image.h == 32);
    CHECK(out.image.w == 32);
    check_box_mask_consistency(out);
  }

  TEST_CASE("mixup blends with the drawn beta weight") {
    Sample a = rect_sample(16, 16, 2, 2, 4, 4, 1, 1);
    Sample b = rect_sample(16, 16, 8, 8, 4, 4, 2, 2);
    for (auto& p : a.image.px) p = 100;
    for (auto& p : b.image.px) p = 200;

    Rng rng(9);
    Rng probe = rng;  // value-copy: predicts the single beta draw
    const double r = probe.beta(32.0, 32.0);
    Sample out = aug::mixup(a, b, 32.0, 32.0, rng);

    const auto expect =
        static_cast<std::uint8_t>(std::clamp(std::lround(r * 100 + (1 - r) * 200), 0L, 255L));
    CHECK(out.image.at(0, 0, 0) == expect);
    CHECK(out.image.at(15, 15, 2) == expect);

    // Labels are the union, captions concatenated, semantic from the heavier side.
    REQUIRE(out.instances.size() == 2);
    CHECK(out.instances[0].labeled_box.category == 1);
    CHECK(out.instances[1].labeled_box.category == 2);
    CHECK(out.captions.size() == 2);
    CHECK(out.semantic == (r >= 0.5 ? a.semantic : b.semantic));

    CHECK_THROWS_AS(aug::mixup(a, rect_sample(8, 8, 1, 1, 2, 2, 1), 32, 32, rng), ShapeError);
  }

  TEST_CASE("mixup with equal images is blend-invariant") {
    Sample a = rect_sample(16, 16, 2, 2, 4, 4, 1);
    Sample b = rect_sample(16, 16, 2, 2, 4, 4, 2);
    Rng rng(4);
    Sample out = aug::mixup(a, b, 32, 32, rng);
    CHECK(out.image == a.image);
    CHECK(out.instances.size() == a.instances.size() + b.instances.size());
  }

  TEST_CASE("cutout with zero holes is the identity") {
    Sample s = rect_sample(32, 32, 4, 6, 10, 8, 3);
    AugConfig cfg = quiet_config(32);
    cfg.cutout_holes = 0;
    Rng rng(5);
    CHECK(sample_equal(aug::cutout(s, cfg, rng), s));
  }

  TEST_CASE("cutout fills rectangles with gray and leaves labels alone") {
    Sample s = rect_sample(64, 64, 8, 8, 40, 40, 3);
    AugConfig cfg = quiet_config(64);
    cfg.cutout_holes = 6;
    Rng rng(6);
    Sample out = aug::cutout(s, cfg, rng);
    long changed = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        for (int c = 0; c < 3; ++c)
          if (out.image.at(y, x, c) != s.image.at(y, x, c)) {
            CHECK(out.image.at(y, x, c) == 114);
            ++changed;
          }
    CHECK(changed > 0);
    CHECK(out.semantic == s.semantic);
    REQUIRE(out.instances.size() == 1);
    CHECK(out.instances[0].mask == s.instances[0].mask);
    CHECK(out.instances[0].labeled_box.box == s.instances[0].labeled_box.box);
  }

  TEST_CASE("copy_paste appends, composites, and drops covered instances") {
    Rng rng(9);  // first two selection draws land below 0.5
    // src without instances: identity with a warning.
    Sample dst = rect_sample(32, 32, 2, 2, 6, 6, 1, 1);
    Sample bare;
    bare.id = 9;
    bare.image = Image(32, 32, 50);
    bare.semantic = SemanticMask(32, 32);
    bare.captions = {"bare"};
    CHECK(sample_equal(aug::copy_paste(dst, bare, rng), dst));

    // Disjoint paste: count increases, pasted pixels copied, semantic updated.
    Sample src = rect_sample(32, 32, 20, 20, 8, 8, 2, 2);
    Sample out = aug::copy_paste(dst, src, rng);
    REQUIRE(out.instances.size() == 2);
    CHECK(out.instances[1].labeled_box.category == 2);
    CHECK(out.image.at(21, 21, 0) == src.image.at(21, 21, 0));
    CHECK(out.semantic.at(21, 21) == 2);
    CHECK(out.semantic.at(3, 3) == 1);
    check_box_mask_consistency(out);

    // Full coverage: the dst instance is subtracted away entirely.
    Sample cover = rect_sample(32, 32, 0, 0, 12, 12, 5, 3);
    Sample covered = aug::copy_paste(dst, cover, rng);
    REQUIRE(covered.instances.size() == 1);
    CHECK(covered.instances[0].labeled_box.category == 5);
  }

  TEST_CASE("copy_paste recomputes occluded masks") {
    Rng rng(9);  // first selection draw lands below 0.5
    Sample dst = rect_sample(32, 32, 2, 2, 10, 10, 1, 1);
    Sample src = rect_sample(32, 32, 6, 6, 10, 10, 2, 2);  // overlaps half of dst
    Sample out = aug::copy_paste(dst, src, rng);
    REQUIRE(out.instances.size() == 2);
    const auto& occluded = out.instances[0];
    CHECK(occluded.labeled_box.category == 1);
    CHECK(occluded.mask.area() == 100 - 36);  // 6x6 corner bite
    CHECK(occluded.mask.at(7, 7) == 0);
    CHECK(occluded.mask.at(3, 3) == 1);
    check_box_mask_consistency(out);
  }

  TEST_CASE("weak_transform letterbox arithmetic") {
    // Square input at target size: geometry untouched.
    Sample sq = rect_sample(64, 64, 10, 10, 20, 20, 2);
    Sample wsq = aug::weak_transform(sq, 64);
    CHECK(wsq.image == sq.image);
    CHECK(wsq.instances[0].labeled_box.box == sq.instances[0].labeled_box.box);

    // 256x320 input, target 640: scale 2, pad 64 top and bottom.
    Sample s = rect_sample(256, 320, 40, 50, 60, 30, 3);
    double scale = 0;
    Homography h = aug::letterbox_matrix(256, 320, 640, &scale);
    CHECK(scale == doctest::Approx(2.0));
    double ox = 0, oy = 0;
    h.apply(0, 0, ox, oy);
    CHECK(ox == doctest::Approx(0.0));
    CHECK(oy == doctest::Approx(64.0));

    Sample w = aug::weak_transform(s, 640);
    CHECK(w.image.h == 640);
    CHECK(w.image.w == 640);
    CHECK(w.captions == s.captions);
    for (int x = 0; x < 640; x += 13) {
      CHECK(w.image.at(10, x, 0) == 114);   // top pad band
      CHECK(w.image.at(630, x, 1) == 114);  // bottom pad band
    }
    REQUIRE(w.instances.size() == 1);
    const Box& b = w.instances[0].labeled_box.box;
    CHECK(std::abs(b.x1 - 80.0) <= 1.0);    // 40*2
    CHECK(std::abs(b.y1 - 164.0) <= 1.0);   // 50*2 + 64
    CHECK(std::abs(b.x2 - 200.0) <= 1.0);   // (40+60)*2
    CHECK(std::abs(b.y2 - 224.0) <= 1.0);   // (50+30)*2 + 64
    check_box_mask_consistency(w);
  }

  TEST_CASE("make_views with silent config reduces strong to weak geometry") {
    auto ds = testutil::synthetic_dataset(3, 48, 64, 21);
    AugConfig cfg = quiet_config(64);
    Rng rng(1);
    auto views = aug::make_views(ds, cfg, rng);
    REQUIRE(views.strong.size() == 3);
    REQUIRE(views.weak.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(views.strong[i].image == views.weak[i].image);
      CHECK(views.weak[i].captions == ds[i].captions);
    }
  }

  TEST_CASE("make_views provenance is a multiset bijection") {
    auto ds = testutil::synthetic_dataset(8, 48, 48, 22);
    Rng cfg_rng(23);
    for (int trial = 0; trial < 10; ++trial) {
      AugConfig cfg = quiet_config(48);
      cfg.mosaic_prob = cfg_rng.uniform();
      cfg.mixup_prob = cfg_rng.uniform();
      cfg.cutout_prob = cfg_rng.uniform();
      cfg.copy_paste_prob = cfg_rng.uniform();
      cfg.translate = 0.1;
      cfg.scale_min = 0.8;
      cfg.scale_max = 1.2;
      Rng rng(100 + trial);
      auto views = aug::make_views(ds, cfg, rng);

      std::vector<std::int64_t> flat, weak = views.weak_sources;
      for (const auto& group : views.strong_sources)
        flat.insert(flat.end(), group.begin(), group.end());
      std::sort(flat.begin(), flat.end());
      std::sort(weak.begin(), weak.end());
      CHECK(flat == weak);
      REQUIRE(views.weak.size() == ds.size());
      for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(views.weak_sources[i] == ds[i].id);
        CHECK(views.weak[i].captions == ds[i].captions);
      }
    }
  }

  TEST_CASE("make_views keeps labels consistent under the full pipeline") {
    auto ds = testutil::synthetic_dataset(8, 48, 48, 24);
    AugConfig cfg;
    cfg.mosaic_prob = 1.0;
    cfg.mixup_prob = 1.0;
    cfg.cutout_prob = 1.0;
    cfg.copy_paste_prob = 1.0;
    cfg.degrees = 10.0;
    cfg.translate = 0.2;
    cfg.scale_min = 0.5;
    cfg.scale_max = 1.5;
    cfg.target_size = 48;
    cfg.cutout_holes = 4;
    Rng rng(31);
    auto views = aug::make_views(ds, cfg, rng);
    for (const auto& s : views.strong) {
      check_box_mask_consistency(s);
      std::set<int> allowed = {kUnlabeledId};
      for (const auto& src : ds)
        for (auto v : src.semantic.px) allowed.insert(v);
      for (auto v : s.semantic.px) CHECK(allowed.count(v) == 1);
    }
  }

  TEST_CASE("make_views is seed-deterministic") {
    auto ds = testutil::synthetic_dataset(6, 48, 48, 25);
    AugConfig cfg;
    cfg.mosaic_prob = 0.7;
    cfg.mixup_prob = 0.4;
    cfg.cutout_prob = 0.5;
    cfg.copy_paste_prob = 0.5;
    cfg.translate = 0.15;
    cfg.scale_min = 0.7;
    cfg.scale_max = 1.3;
    cfg.target_size = 48;
    Rng r1(77), r2(77);
    auto a = aug::make_views(ds, cfg, r1);
    auto b = aug::make_views(ds, cfg, r2);
    REQUIRE(a.strong.size() == b.strong.size());
    for (std::size_t i = 0; i < a.strong.size(); ++i) {
      CHECK(a.strong[i].image == b.strong[i].image);
      CHECK(a.strong[i].semantic == b.strong[i].semantic);
      REQUIRE(a.strong[i].instances.size() == b.strong[i].instances.size());
      for (std::size_t j = 0; j < a.strong[i].instances.size(); ++j)
        CHECK(a.strong[i].instances[j].mask == b.strong[i].instances[j].mask);
    }
    for (std::size_t i = 0; i < a.weak.size(); ++i) CHECK(a.weak[i].image == b.weak[i].image);
    CHECK(a.strong_sources == b.strong_sources);
    CHECK(a.weak_sources == b.weak_sources);
  }

  TEST_CASE("config validation rejects out-of-range fields") {
    AugConfig bad;
    bad.mosaic_prob = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    AugConfig neg;
    neg.target_size = 0;
    CHECK_THROWS_AS(neg.validate(), ConfigError);
  }
}
