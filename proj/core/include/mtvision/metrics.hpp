#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "mtvision/types.hpp"

namespace mtv::metrics {

/// A scored prediction for AP evaluation. `mask` may be empty in box mode.
struct PredInstance {
  Box box;
  double score = 0.0;
  int category = 0;
  Mask mask;
};

/// A ground-truth instance for AP evaluation.
struct GtInstance {
  Box box;
  int category = 0;
  Mask mask;
};

enum class APMode { kBox, kMask };

struct APResult {
  double ap = 0.0;
  bool defined = true;  ///< false when there is no ground truth to evaluate against
  std::map<int, double> per_category;
};

/// COCO AP@[.50:.05:.95], 101-point interpolation, maxDets=100, all areas.
/// Averaged over categories present in the ground truth.
APResult coco_ap(const std::vector<std::vector<PredInstance>>& predictions,
                 const std::vector<std::vector<GtInstance>>& ground_truth, APMode mode);

struct SegIouResult {
  double miou = 0.0;
  double fwiou = 0.0;
  std::map<int, double> per_category;
};

/// Streaming per-category intersection/union counts; merge is associative.
class SegIouAccumulator {
 public:
  void add(const SemanticMask& pred, const SemanticMask& gt);
  void merge(const SegIouAccumulator& other);

  /// MIoU = unweighted mean over categories present in GT (optionally intersected with
  /// `categories`); FWIoU weights each by its GT pixel share.
  SegIouResult result(const std::vector<int>& categories = {}) const;

 private:
  std::array<long long, 256> inter_{}, pred_{}, gt_{};
};

/// Single-pair convenience wrapper over SegIouAccumulator.
SegIouResult segmentation_iou(const SemanticMask& pred, const SemanticMask& gt,
                              const std::vector<int>& categories = {});

/// Corpus-level BLEU-4, no smoothing, closest-reference brevity penalty.
/// Throws ArityError on an empty candidate set or a candidate without references.
double bleu4(const std::vector<std::vector<std::string>>& candidates,
             const std::vector<std::vector<std::vector<std::string>>>& references);

struct MetricReport {
  double box_ap = 0.0;
  double mask_ap = 0.0;
  double miou = 0.0;
  double fwiou = 0.0;
  double bleu4 = 0.0;
  bool box_ap_defined = true;
  bool mask_ap_defined = true;
  std::map<int, double> box_ap_per_category;
  std::map<int, double> mask_ap_per_category;
  std::map<int, double> iou_per_category;
};

/// One JSON record (single line, deterministic key order).
std::string to_json(const MetricReport& r);

/// Human-readable fixed-width table.
std::string to_table(const MetricReport& r);

}  // namespace mtv::metrics
