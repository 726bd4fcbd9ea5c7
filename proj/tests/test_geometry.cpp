#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mtvision/errors.hpp"
#include "mtvision/geometry.hpp"
#include "mtvision/rng.hpp"
#include "testutil.hpp"

using namespace mtv;

namespace {

// Reference NMS: same greedy-by-score-per-category contract, written as the
// most literal O(n^2) loop possible so disagreements point at the real one.
std::vector<Detection> nms_oracle(std::vector<Detection> dets, double thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.category == d.category && box_iou(k.box, d.box) >= thresh) suppressed = true;
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

bool same_dets(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].category != b[i].category || a[i].score != b[i].score) return false;
    if (!(a[i].box == b[i].box)) return false;
  }
  return true;
}

Detection det(Box b, double score, int cat) {
  Detection d;
  d.box = b;
  d.score = score;
  d.category = cat;
  return d;
}

}  // namespace

TEST_SUITE("geometry") {
  TEST_CASE("iou of identical boxes is 1") {
    CHECK(box_iou({0, 0, 2, 2}, {0, 0, 2, 2}) == doctest::Approx(1.0));
  }

  TEST_CASE("iou of disjoint boxes is 0") {
    CHECK(box_iou({0, 0, 1, 1}, {2, 2, 3, 3}) == 0.0);
  }

  TEST_CASE("iou of unit-offset overlap is 1/7") {
    // Pixel-count oracle on the integer grid: inter 1, union 4+4-1=7.
    CHECK(box_iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
  }

  TEST_CASE("iou degenerate boxes yield 0") {
    CHECK(box_iou({1, 1, 1, 1}, {1, 1, 1, 1}) == 0.0);
    CHECK(box_iou({0, 0, 0, 5}, {0, 0, 0, 5}) == 0.0);
    CHECK(box_iou({1, 1, 1, 1}, {0, 0, 2, 2}) == 0.0);
  }

  TEST_CASE("iou symmetry and range on random boxes") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
      auto rand_box = [&] {
        double x1 = rng.uniform() * 20, y1 = rng.uniform() * 20;
        return Box{x1, y1, x1 + rng.uniform() * 20, y1 + rng.uniform() * 20};
      };
      Box a = rand_box(), b = rand_box();
      double ab = box_iou(a, b);
      CHECK(ab == box_iou(b, a));
      CHECK(ab >= 0.0);
      CHECK(ab <= 1.0);
      CHECK(box_iou(a, a) == doctest::Approx(1.0));
    }
  }

  TEST_CASE("nms keeps a single detection") {
    auto out = nms({det({0, 0, 4, 4}, 0.7, 3)}, 0.5);
    REQUIRE(out.size() == 1);
    CHECK(out[0].score == 0.7);
    CHECK(out[0].category == 3);
  }

  TEST_CASE("nms suppresses the lower-scoring duplicate") {
    auto out = nms({det({0, 0, 4, 4}, 0.8, 1), det({0, 0, 4, 4}, 0.9, 1)}, 0.5);
    REQUIRE(out.size() == 1);
    CHECK(out[0].score == 0.9);
  }

  TEST_CASE("nms keeps disjoint boxes") {
    auto out = nms({det({0, 0, 4, 4}, 0.8, 1), det({10, 10, 14, 14}, 0.9, 1)}, 0.5);
    REQUIRE(out.size() == 2);
    CHECK(out[0].score == 0.9);
    CHECK(out[1].score == 0.8);
  }

  TEST_CASE("nms is category-aware") {
    auto out = nms({det({0, 0, 4, 4}, 0.9, 1), det({0, 0, 4, 4}, 0.8, 2)}, 0.5);
    CHECK(out.size() == 2);
  }

  TEST_CASE("nms matches the brute-force oracle and is idempotent") {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Detection> dets;
      int n = 1 + rng.uniform_int(8);
      for (int i = 0; i < n; ++i) {
        double x1 = rng.uniform() * 8, y1 = rng.uniform() * 8;
        dets.push_back(det({x1, y1, x1 + 1 + rng.uniform() * 8, y1 + 1 + rng.uniform() * 8},
                           0.1 + 0.8 * rng.uniform(), rng.uniform_int(3)));
      }
      double thresh = 0.2 + 0.6 * rng.uniform();
      auto got = nms(dets, thresh);
      CHECK(same_dets(got, nms_oracle(dets, thresh)));
      CHECK(same_dets(nms(got, thresh), got));
    }
  }

  TEST_CASE("mask_to_bbox single pixel") {
    Mask m(8, 8);
    m.at(3, 4) = 1;
    CHECK(mask_to_bbox(m) == Box{4, 3, 5, 4});
  }

  TEST_CASE("mask_to_bbox full raster") {
    Mask m(6, 9, 1);
    CHECK(mask_to_bbox(m) == Box{0, 0, 9, 6});
  }

  TEST_CASE("mask_to_bbox two corner pixels") {
    Mask m(10, 10);
    m.at(0, 0) = 1;
    m.at(9, 9) = 1;
    CHECK(mask_to_bbox(m) == Box{0, 0, 10, 10});
  }

  TEST_CASE("mask_to_bbox rejects the empty mask") {
    CHECK_THROWS_AS(mask_to_bbox(Mask(4, 4)), EmptyMaskError);
  }

  TEST_CASE("mask_to_bbox inverts integer box rasterization") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
      int x1 = rng.uniform_int(10), y1 = rng.uniform_int(10);
      int w = 1 + rng.uniform_int(10), h = 1 + rng.uniform_int(10);
      Mask m(24, 24);
      for (int y = y1; y < y1 + h; ++y)
        for (int x = x1; x < x1 + w; ++x) m.at(y, x) = 1;
      CHECK(mask_to_bbox(m) ==
            Box{double(x1), double(y1), double(x1 + w), double(y1 + h)});
    }
  }

  TEST_CASE("clip_box leaves an inside box unchanged") {
    CHECK(clip_box({1, 2, 3, 4}, 10, 10) == Box{1, 2, 3, 4});
  }

  TEST_CASE("clip_box drops a fully outside box") {
    CHECK(!clip_box({12, 12, 15, 15}, 10, 10).has_value());
    CHECK(!clip_box({-5, -5, -1, -1}, 10, 10).has_value());
  }

  TEST_CASE("clip_box trims a straddling box") {
    CHECK(clip_box({-5, -5, 5, 5}, 10, 10) == Box{0, 0, 5, 5});
  }

  TEST_CASE("clip_box is idempotent and stays inside the canvas") {
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
      double x1 = rng.uniform() * 20 - 10, y1 = rng.uniform() * 20 - 10;
      Box b{x1, y1, x1 + rng.uniform() * 15, y1 + rng.uniform() * 15};
      auto c = clip_box(b, 10, 10);
      if (!c) continue;
      CHECK(c->x1 >= 0);
      CHECK(c->y1 >= 0);
      CHECK(c->x2 <= 10);
      CHECK(c->y2 <= 10);
      CHECK(clip_box(*c, 10, 10) == *c);
    }
  }
}
