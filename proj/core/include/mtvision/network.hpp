#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mtvision/nn.hpp"
#include "mtvision/rng.hpp"
#include "mtvision/tensor.hpp"
#include "mtvision/types.hpp"

namespace mtv::net {

inline constexpr int kStrides[3] = {8, 16, 32};
// box regression range: each edge distance can reach kBoxScale * stride
inline constexpr double kBoxScale = 4.0;

// must stay in sync with softplus() in the tensor engine
inline double softplus_scalar(double z) {
  if (z > 30) return z;
  if (z < -30) return std::exp(z);
  return std::log1p(std::exp(z));
}

inline double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

struct ModelConfig {
  double width = 0.25;   // channel multiplier on the base schedule
  double depth = 0.33;   // ELAN stage count multiplier
  int prototypes = 8;    // K
  int semantic_categories = kMergedCategories;
  int vocab_size = 64;
  int decoder_layers = 2;
  int decoder_heads = 4;
  int decoder_dim = 128;
  int max_caption_len = 32;

  bool multi_scale_semantic = false;
  int caption_encoder_layers = 0;   // >0: prepend transformer encoder over memory
  int max_memory_positions = 400;   // learned positions for the cross-attention memory
  bool use_implicits = true;
  std::uint64_t seed = 0;

  void validate() const;

  // base widths 128/256/512 at strides 8/16/32, scaled and snapped to x8
  int scaled(int base) const {
    const int c = static_cast<int>(std::lround(base * width / 8.0)) * 8;
    return std::max(8, c);
  }
  int c8() const { return scaled(128); }
  int c16() const { return scaled(256); }
  int c32() const { return scaled(512); }
  int elan_blocks() const { return std::max(1, static_cast<int>(std::lround(2.0 * depth))); }
  int det_channels() const { return 5 + kInstanceCategories + prototypes; }
};

struct FeaturePyramid {
  Tensor p8, p16, p32;
};

struct NetworkOutputs {
  std::vector<Tensor> det_maps;  // one per stride: (N, 85+K, H/s, W/s)
  Tensor prototypes;             // (N, K, H/4, W/4)
  Tensor semantic_logits;        // (N, 172, H/4, W/4)
  Tensor caption_logits;         // (N, T, vocab), set by forward paths that run the decoder
};

// (N,3,H,W) float in [0,1]; all samples must share one resolution
Tensor images_to_tensor(const std::vector<Sample>& batch);
Tensor images_to_tensor(const std::vector<Image>& batch);

namespace layers {

struct Elan {
  nn::ConvBlock left, right;          // 1x1 splits
  std::vector<nn::ConvBlock> stages;  // 3x3 chain on the right branch
  nn::ConvBlock merge;                // 1x1 over the concat

  Elan() = default;
  Elan(nn::ParamRegistry& reg, const std::string& name, int channels, int blocks, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

struct Implicit {
  Tensor mul, add;  // per-channel, init 1 / init 0

  Implicit() = default;
  Implicit(nn::ParamRegistry& reg, const std::string& name, int channels);
  Tensor forward(const Tensor& x) const;
};

struct Attention {
  nn::Linear q, k, v, o;
  int heads = 1, dim = 0;

  Attention() = default;
  Attention(nn::ParamRegistry& reg, const std::string& name, int dim, int heads, Rng& rng);
  // kv == query tensor for self-attention; additive_mask may be null
  Tensor forward(const Tensor& query, const Tensor& kv, const Tensor* additive_mask) const;
};

struct DecoderLayer {
  nn::LayerNorm ln1, ln2, ln3;
  Attention self_attn, cross_attn;
  nn::Linear ff1, ff2;

  DecoderLayer() = default;
  DecoderLayer(nn::ParamRegistry& reg, const std::string& name, int dim, int heads, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& memory, const Tensor& causal_mask) const;
};

struct EncoderLayer {
  nn::LayerNorm ln1, ln2;
  Attention self_attn;
  nn::Linear ff1, ff2;

  EncoderLayer() = default;
  EncoderLayer(nn::ParamRegistry& reg, const std::string& name, int dim, int heads, Rng& rng);
  Tensor forward(const Tensor& x) const;
};

}  // namespace layers

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamRegistry& params() { return reg_; }
  const nn::ParamRegistry& params() const { return reg_; }

  // toggles the implicit-latent attachments at head inputs (same weights)
  void set_implicits_enabled(bool on) { implicits_enabled_ = on; }

  FeaturePyramid backbone_forward(const Tensor& images);

  std::vector<Tensor> detection_head(const FeaturePyramid& p);
  Tensor prototype_head(const FeaturePyramid& p);
  Tensor semantic_head(const FeaturePyramid& p);          // mode from config
  Tensor semantic_head(const FeaturePyramid& p, bool multi_scale);
  // tokens: one row per image, all rows the same length T <= max_caption_len
  Tensor caption_decoder_forward(const FeaturePyramid& p,
                                 const std::vector<std::vector<int>>& tokens);
  // returns ids including bos (and eos when emitted); length <= max_len
  std::vector<int> generate_caption(const FeaturePyramid& p, int image_index, int max_len,
                                    int beam_width);

  NetworkOutputs forward_vision(const Tensor& images);

 private:
  Tensor memory_from_pyramid(const FeaturePyramid& p);

  ModelConfig cfg_;
  nn::ParamRegistry reg_;
  bool implicits_enabled_ = true;

  nn::ConvBlock stem_, down4_, down8_, down16_, down32_;
  layers::Elan elan4_, elan8_, elan16_, elan32_;
  nn::ConvBlock neck32_, lat32_, neck16_, lat16_, neck8_;

  layers::Implicit imp_det_[3], imp_proto_, imp_sem_, imp_cap_;

  nn::ConvBlock det_stem_[3];
  nn::Conv det_pred_[3];

  nn::ConvBlock proto_stem1_, proto_stem2_;
  nn::Conv proto_pred_;

  nn::ConvBlock sem_lat16_, sem_lat32_, sem_fuse_, sem_stem_;
  nn::Conv sem_pred_;

  Tensor tok_emb_, pos_emb_, mem_pos_;
  nn::Linear cap_proj_;
  std::vector<layers::EncoderLayer> cap_enc_;
  std::vector<layers::DecoderLayer> cap_dec_;
  nn::LayerNorm cap_ln_f_;
  nn::Linear cap_out_;
};

// Eval-time decode of raw head maps into scored detections (mask coefficients
// attached).  Boxes are clipped to [0,img_w]x[0,img_h]; NMS is per-category.
std::vector<std::vector<Detection>> decode_detections(const std::vector<Tensor>& det_maps,
                                                      int img_h, int img_w, double conf_thresh,
                                                      double nms_iou, int max_dets);

// mask = sigmoid(sum_k coeff_k * proto_k), cropped to the box, strict >0.5
// threshold, nearest-upsampled from stride 4 to image resolution.
Mask assemble_mask(const Tensor& prototypes, int image_index, const Detection& det, int img_h,
                   int img_w);

}  // namespace mtv::net
