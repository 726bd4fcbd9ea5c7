#pragma once

#include <cstdint>
#include <vector>

#include "mtvision/rng.hpp"
#include "mtvision/types.hpp"

namespace mtv::aug {

struct AugConfig {
  // pipeline step probabilities
  double mosaic_prob = 1.0;
  double mixup_prob = 0.15;
  double cutout_prob = 0.0;
  double copy_paste_prob = 0.0;

  // random_perspective parameter ranges
  double degrees = 0.0;        // rotation, +/- deg
  double translate = 0.1;      // fraction of target size, +/- around center
  double scale_min = 0.5;
  double scale_max = 1.5;
  double shear = 0.0;          // +/- deg
  double perspective = 0.0;    // +/- coefficient

  double mixup_alpha = 32.0;   // Beta(alpha, beta) blend weight
  double mixup_beta = 32.0;

  int target_size = 640;
  int cutout_holes = 8;
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError on out-of-range fields
};

struct AugmentedViews {
  std::vector<Sample> strong;
  std::vector<Sample> weak;
  // provenance: source image ids per strong sample / per weak sample;
  // flattened strong_sources and weak_sources are equal as multisets
  std::vector<std::vector<std::int64_t>> strong_sources;
  std::vector<std::int64_t> weak_sources;
};

// 3x3 projective transform on image coordinates, row-major, maps column
// vectors (x, y, 1)^T.
struct Homography {
  double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty);
  static Homography scaling(double sx, double sy);

  Homography operator*(const Homography& rhs) const;  // this after rhs
  Homography inverse() const;
  void apply(double x, double y, double& ox, double& oy) const;
};

// Deterministic warp core.  Maps the sample through H onto an oh x ow canvas
// (image: bilinear, fill 114; masks: nearest, fill 0; semantic: nearest, fill
// unlabeled).  Boxes are recomputed from the warped masks; instances whose
// visible area falls below drop_area_frac of their source area (or to zero)
// are dropped.
Sample warp_sample(const Sample& s, const Homography& h, int oh, int ow, double drop_area_frac);

Image warp_image(const Image& img, const Homography& h, int oh, int ow, std::uint8_t fill);
Mask warp_mask(const Mask& mask, const Homography& h, int oh, int ow);
SemanticMask warp_semantic(const SemanticMask& sem, const Homography& h, int oh, int ow);

// Aspect-preserving resize to fit target, centered gray padding.
Homography letterbox_matrix(int in_h, int in_w, int target, double* scale_out = nullptr);

// base_scale multiplies the sampled scale range (mosaic passes 0.5 to map its
// double-size canvas back to target_size).
Sample random_perspective(const Sample& s, const AugConfig& cfg, Rng& rng,
                          double base_scale = 1.0);

// Places four target-size samples on a 2*target canvas around center (cx,cy):
// quadrant top-left corners at (cx-T,cy-T), (cx,cy-T), (cx-T,cy), (cx,cy).
Sample mosaic_compose(const std::vector<Sample>& four, int cx, int cy, int target);

Sample mosaic4(const std::vector<Sample>& samples, const AugConfig& cfg, Rng& rng);

Sample mixup(const Sample& a, const Sample& b, double alpha, double beta, Rng& rng);

Sample cutout(const Sample& s, const AugConfig& cfg, Rng& rng);

Sample copy_paste(const Sample& dst, const Sample& src, Rng& rng);

Sample weak_transform(const Sample& s, int target_size);

AugmentedViews make_views(const std::vector<Sample>& batch, const AugConfig& cfg, Rng& rng);

}  // namespace mtv::aug
