#pragma once

#include <vector>

#include "mtvision/tensor.hpp"
#include "mtvision/types.hpp"

namespace mtv::losses {

/// Per-task weights for the joint objective.
struct LossWeights {
  double w_det = 1.0;
  double w_mask = 1.0;
  double w_sem = 1.0;
  double w_cap = 1.0;

  /// Throws ConfigError if any weight is negative.
  void validate() const;
};

/// One positive location: a grid cell at one stride responsible for one GT instance.
struct Assignment {
  int stride_index = 0;  ///< index into net::kStrides
  GridLoc loc;           ///< batch item + grid cell
  int gt_index = 0;      ///< index into that image's GT list
};

struct AssignmentResult {
  std::vector<Assignment> assigned;  ///< sorted by (stride_index, n, y, x)
  int batch = 0;
  int img_h = 0;
  int img_w = 0;
};

/// Which stride's scale range best fits a box (smallest |log2(max_side / (8 * stride))|,
/// ties to the smaller stride). Exposed for tests.
int select_stride(const Box& b);

/// CIoU between two boxes, computed through the same graph the loss uses. Exposed for tests.
double ciou_scalar(const Box& pred, const Box& gt);

/// Center-prior assignment: each GT claims the cell containing its center plus the
/// 8-neighborhood (radius 1.5 cells) at its scale-matched stride. A cell contested by
/// several GTs goes to the one with larger IoU against the cell's prior square
/// (side 4 * stride, centered on the cell), ties to the lower GT index.
AssignmentResult assign_detection_targets(const std::vector<std::vector<LabeledBox>>& gt,
                                          int img_h, int img_w);

struct DetectionLossResult {
  Tensor box;  ///< mean (1 - CIoU) over assigned locations
  Tensor obj;  ///< BCE over every location of every stride
  Tensor cls;  ///< one-vs-all BCE over assigned locations
  Tensor total;
};

DetectionLossResult detection_loss(const std::vector<Tensor>& det_maps,
                                   const AssignmentResult& assign,
                                   const std::vector<std::vector<LabeledBox>>& gt);

/// Per assigned location: BCE between the assembled mask (sigmoid of the coefficient-
/// weighted prototype sum, cropped to the GT box) and the GT mask sampled at prototype
/// resolution, summed over the crop and divided by the GT box area in prototype pixels;
/// mean over assignments.
Tensor instance_mask_loss(const Tensor& prototypes, const std::vector<Tensor>& det_maps,
                          const AssignmentResult& assign, const std::vector<Sample>& batch);

/// Mean per-pixel cross-entropy at stride 4; GT is center-sampled down to logit resolution.
Tensor semantic_loss(const Tensor& logits, const std::vector<SemanticMask>& gt);

/// Teacher-forced token cross-entropy. `logits` covers positions 0..L-2 of each sequence
/// (the decoder ran on all tokens but the last); targets are the ids shifted left by one.
/// Pad targets are excluded from numerator and denominator.
Tensor caption_loss(const Tensor& logits, const std::vector<std::vector<int>>& token_ids);

struct LossComponents {
  Tensor det;
  Tensor mask;
  Tensor sem;
  Tensor cap;
};

/// w_det*det + w_mask*mask + w_sem*sem + w_cap*cap.
/// Throws NonFiniteLossError naming the offending task if any component is non-finite.
Tensor total_loss(const LossComponents& c, const LossWeights& w);

}  // namespace mtv::losses
