#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mtvision/augment.hpp"
#include "mtvision/cocodata.hpp"
#include "mtvision/losses.hpp"
#include "mtvision/metrics.hpp"
#include "mtvision/network.hpp"
#include "mtvision/nn.hpp"

namespace mtv::train {

struct OptimizerConfig {
  double l_ie = 1e-4;  ///< image-encoder learning rate (backbone, neck, vision heads)
  double l_td = 1e-4;  ///< text-decoder learning rate (captioning decoder + embeddings)
  double weight_decay = 0.05;
  long total_steps = 1000;
  double lr_floor = 0.0;  ///< linear decay terminates here (default 0)
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

struct GroupRates {
  double encoder = 0.0;
  double decoder = 0.0;
};

/// Two-group AdamW: group 0 = image encoder (every parameter not under "caption."),
/// group 1 = text decoder ("caption." parameters). Throws PartitionError if the
/// prefix rule would claim a parameter twice or miss one.
nn::AdamW build_optimizer(net::Model& model, const OptimizerConfig& cfg);

/// Linear decay from the base rate to lr_floor across total_steps.
/// Throws RangeError unless 0 <= step <= total_steps.
GroupRates lr_at_step(long step, const OptimizerConfig& cfg);

struct StepRecord {
  long step = 0;
  double lr_encoder = 0.0;
  double lr_decoder = 0.0;
  double loss_det = 0.0;
  double loss_mask = 0.0;
  double loss_sem = 0.0;
  double loss_cap = 0.0;
  double loss_total = 0.0;
};

/// One JSONL record (single line, deterministic key order).
std::string to_json(const StepRecord& r);

/// One optimization step: strong view feeds detection/mask/semantic losses, weak view
/// feeds the caption loss, both gradients accumulate into a single optimizer step.
/// Each weak sample is taught its first caption. NonFiniteLossError is rethrown with
/// the batch's source image ids appended.
StepRecord train_step(net::Model& model, const aug::AugmentedViews& views, nn::AdamW& opt,
                      const OptimizerConfig& ocfg, const losses::LossWeights& weights,
                      const coco::Vocabulary& vocab);

struct EvalConfig {
  double conf_thresh = 0.25;
  double nms_iou = 0.5;
  int max_dets = 100;
  int target_size = 640;  ///< evaluation letterbox size (multiple of 32)
  int beam_width = 1;     ///< 1 = greedy decoding
};

/// Inference over the whole dataset (letterboxed, one image at a time): detections with
/// assembled masks, argmaxed semantic raster, decoded captions; aggregates every metric.
/// Throws ArityError on an empty dataset.
metrics::MetricReport evaluate_all(net::Model& model, const std::vector<Sample>& dataset,
                                   const coco::Vocabulary& vocab, const EvalConfig& cfg);

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  net::ModelConfig model_config;
  long step = 0;
  // slot order: optimizer group-major (encoder params in registry order, then decoder)
  std::vector<std::string> param_names;
  std::vector<Shape> param_shapes;
  std::vector<std::vector<Real>> params;
  std::vector<std::vector<Real>> moment1, moment2;
  std::vector<std::string> vocab_tokens;
  Rng::State rng{};
};

/// Capture model parameters, optimizer state, vocabulary, and RNG into a Checkpoint.
Checkpoint snapshot(net::Model& model, nn::AdamW& opt, const coco::Vocabulary& vocab,
                    const Rng& rng);

/// Restore a snapshot into a model built from the same config. Name/shape or slot-count
/// mismatches throw VersionError (checkpoint incompatible with this model).
void restore(net::Model& model, nn::AdamW& opt, coco::Vocabulary& vocab, Rng& rng,
             const Checkpoint& c);

/// Versioned, checksummed binary file; save -> load -> save is byte-identical.
void save_checkpoint(const std::string& path, const Checkpoint& c);

/// Throws IoError (unreadable), ParseError (malformed), VersionError (wrong version),
/// ChecksumError (corrupt payload).
Checkpoint load_checkpoint(const std::string& path);

/// Seeded training loop: each step forks a per-step RNG from `rng`, draws `batch_size`
/// samples with replacement, augments, and calls train_step. Records go to `sink` (if
/// set) and are returned.
std::vector<StepRecord> train_loop(net::Model& model, nn::AdamW& opt,
                                   const std::vector<Sample>& dataset,
                                   const coco::Vocabulary& vocab, const OptimizerConfig& ocfg,
                                   const aug::AugConfig& acfg,
                                   const losses::LossWeights& weights, long steps,
                                   int batch_size, Rng& rng,
                                   const std::function<void(const StepRecord&)>& sink = {});

}  // namespace mtv::train
