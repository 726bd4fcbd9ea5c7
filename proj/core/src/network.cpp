#include "mtvision/network.hpp"

#include <algorithm>
#include <cmath>

#include "mtvision/errors.hpp"
#include "mtvision/geometry.hpp"

namespace mtv::net {

void ModelConfig::validate() const {
  if (!(width > 0) || !(depth > 0)) throw ConfigError("width/depth must be > 0");
  if (prototypes <= 0) throw ConfigError("prototypes must be > 0");
  if (semantic_categories <= 0) throw ConfigError("semantic_categories must be > 0");
  if (vocab_size <= 4) throw ConfigError("vocab_size must exceed the 4 reserved tokens");
  if (decoder_layers <= 0 || decoder_heads <= 0 || decoder_dim <= 0)
    throw ConfigError("decoder layers/heads/dim must be > 0");
  if (decoder_dim % decoder_heads != 0)
    throw ConfigError("decoder_dim must be divisible by decoder_heads");
  if (max_caption_len < 2) throw ConfigError("max_caption_len must be >= 2");
  if (caption_encoder_layers < 0) throw ConfigError("caption_encoder_layers must be >= 0");
  if (max_memory_positions <= 0) throw ConfigError("max_memory_positions must be > 0");
}

Tensor images_to_tensor(const std::vector<Image>& batch) {
  if (batch.empty()) throw ShapeError("images_to_tensor: empty batch");
  const int h = batch[0].h, w = batch[0].w;
  for (const auto& img : batch)
    if (img.h != h || img.w != w) throw ShapeError("images_to_tensor: mixed resolutions");
  const int n = static_cast<int>(batch.size());
  std::vector<Real> v(static_cast<size_t>(n) * 3 * h * w);
  std::size_t o = 0;
  for (const auto& img : batch)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) v[o++] = img.at(y, x, c) / 255.0;
  return Tensor::from_vector({n, 3, h, w}, std::move(v));
}

Tensor images_to_tensor(const std::vector<Sample>& batch) {
  std::vector<Image> imgs;
  imgs.reserve(batch.size());
  for (const auto& s : batch) imgs.push_back(s.image);
  return images_to_tensor(imgs);
}

namespace layers {

Elan::Elan(nn::ParamRegistry& reg, const std::string& name, int channels, int blocks, Rng& rng) {
  const int half = channels / 2;
  left = nn::ConvBlock(reg, name + ".left", channels, half, 1, 1, rng);
  right = nn::ConvBlock(reg, name + ".right", channels, half, 1, 1, rng);
  for (int i = 0; i < blocks; ++i)
    stages.emplace_back(reg, name + ".stage" + std::to_string(i), half, half, 3, 1, rng);
  merge = nn::ConvBlock(reg, name + ".merge", half * (2 + blocks), channels, 1, 1, rng);
}

Tensor Elan::forward(const Tensor& x) const {
  std::vector<Tensor> parts{left.forward(x), right.forward(x)};
  for (const auto& s : stages) parts.push_back(s.forward(parts.back()));
  return merge.forward(concat(parts, 1));
}

Implicit::Implicit(nn::ParamRegistry& reg, const std::string& name, int channels) {
  mul = reg.create(name + ".mul", {channels},
                   std::vector<Real>(static_cast<size_t>(channels), 1.0), false);
  add = reg.create(name + ".add", {channels},
                   std::vector<Real>(static_cast<size_t>(channels), 0.0), false);
}

Tensor Implicit::forward(const Tensor& x) const {
  return add_channel(mul_channel(x, mul), add);
}

Attention::Attention(nn::ParamRegistry& reg, const std::string& name, int dim, int heads,
                     Rng& rng)
    : heads(heads), dim(dim) {
  q = nn::Linear(reg, name + ".q", dim, dim, rng);
  k = nn::Linear(reg, name + ".k", dim, dim, rng);
  v = nn::Linear(reg, name + ".v", dim, dim, rng);
  o = nn::Linear(reg, name + ".o", dim, dim, rng);
}

Tensor Attention::forward(const Tensor& query, const Tensor& kv,
                          const Tensor* additive_mask) const {
  const int b = query.dim(0), tq = query.dim(1), tk = kv.dim(1);
  const int dh = dim / heads;
  auto split = [&](const Tensor& x, int t) {
    return reshape(permute(reshape(x, {b, t, heads, dh}), {0, 2, 1, 3}), {b * heads, t, dh});
  };
  const Tensor qh = split(q.forward(query), tq);
  const Tensor kh = split(k.forward(kv), tk);
  const Tensor vh = split(v.forward(kv), tk);
  const Tensor scores = mul_scalar(bmm(qh, kh, false, true), 1.0 / std::sqrt(double(dh)));
  const Tensor attn = softmax_lastdim(scores, additive_mask);
  const Tensor ctx = bmm(attn, vh);
  return o.forward(reshape(permute(reshape(ctx, {b, heads, tq, dh}), {0, 2, 1, 3}), {b, tq, dim}));
}

DecoderLayer::DecoderLayer(nn::ParamRegistry& reg, const std::string& name, int dim, int heads,
                           Rng& rng) {
  ln1 = nn::LayerNorm(reg, name + ".ln1", dim);
  self_attn = Attention(reg, name + ".self", dim, heads, rng);
  ln2 = nn::LayerNorm(reg, name + ".ln2", dim);
  cross_attn = Attention(reg, name + ".cross", dim, heads, rng);
  ln3 = nn::LayerNorm(reg, name + ".ln3", dim);
  ff1 = nn::Linear(reg, name + ".ff1", dim, 4 * dim, rng);
  ff2 = nn::Linear(reg, name + ".ff2", 4 * dim, dim, rng);
}

Tensor DecoderLayer::forward(const Tensor& x, const Tensor& memory,
                             const Tensor& causal_mask) const {
  Tensor h = x;
  const Tensor n1 = ln1.forward(h);
  h = add(h, self_attn.forward(n1, n1, &causal_mask));
  const Tensor n2 = ln2.forward(h);
  h = add(h, cross_attn.forward(n2, memory, nullptr));
  const Tensor n3 = ln3.forward(h);
  h = add(h, ff2.forward(gelu(ff1.forward(n3))));
  return h;
}

EncoderLayer::EncoderLayer(nn::ParamRegistry& reg, const std::string& name, int dim, int heads,
                           Rng& rng) {
  ln1 = nn::LayerNorm(reg, name + ".ln1", dim);
  self_attn = Attention(reg, name + ".self", dim, heads, rng);
  ln2 = nn::LayerNorm(reg, name + ".ln2", dim);
  ff1 = nn::Linear(reg, name + ".ff1", dim, 4 * dim, rng);
  ff2 = nn::Linear(reg, name + ".ff2", 4 * dim, dim, rng);
}

Tensor EncoderLayer::forward(const Tensor& x) const {
  Tensor h = x;
  const Tensor n1 = ln1.forward(h);
  h = add(h, self_attn.forward(n1, n1, nullptr));
  const Tensor n2 = ln2.forward(h);
  h = add(h, ff2.forward(gelu(ff1.forward(n2))));
  return h;
}

}  // namespace layers

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const int cs = cfg_.scaled(32);   // stem
  const int c4 = cfg_.scaled(64);
  const int c8 = cfg_.c8(), c16 = cfg_.c16(), c32 = cfg_.c32();
  const int nb = cfg_.elan_blocks();

  stem_ = nn::ConvBlock(reg_, "backbone.stem", 3, cs, 3, 2, rng);
  down4_ = nn::ConvBlock(reg_, "backbone.down4", cs, c4, 3, 2, rng);
  elan4_ = layers::Elan(reg_, "backbone.elan4", c4, nb, rng);
  down8_ = nn::ConvBlock(reg_, "backbone.down8", c4, c8, 3, 2, rng);
  elan8_ = layers::Elan(reg_, "backbone.elan8", c8, nb, rng);
  down16_ = nn::ConvBlock(reg_, "backbone.down16", c8, c16, 3, 2, rng);
  elan16_ = layers::Elan(reg_, "backbone.elan16", c16, nb, rng);
  down32_ = nn::ConvBlock(reg_, "backbone.down32", c16, c32, 3, 2, rng);
  elan32_ = layers::Elan(reg_, "backbone.elan32", c32, nb, rng);

  neck32_ = nn::ConvBlock(reg_, "neck.p32", c32, c32, 1, 1, rng);
  lat32_ = nn::ConvBlock(reg_, "neck.lat32", c32, c16, 1, 1, rng);
  neck16_ = nn::ConvBlock(reg_, "neck.p16", c16 * 2, c16, 3, 1, rng);
  lat16_ = nn::ConvBlock(reg_, "neck.lat16", c16, c8, 1, 1, rng);
  neck8_ = nn::ConvBlock(reg_, "neck.p8", c8 * 2, c8, 3, 1, rng);

  const int head_c[3] = {c8, c16, c32};
  imp_det_[0] = layers::Implicit(reg_, "implicit.det8", c8);
  imp_det_[1] = layers::Implicit(reg_, "implicit.det16", c16);
  imp_det_[2] = layers::Implicit(reg_, "implicit.det32", c32);
  imp_proto_ = layers::Implicit(reg_, "implicit.proto", c8);
  imp_sem_ = layers::Implicit(reg_, "implicit.sem", c8);
  imp_cap_ = layers::Implicit(reg_, "implicit.cap", c32);

  for (int i = 0; i < 3; ++i) {
    const std::string base = "det.s" + std::to_string(kStrides[i]);
    det_stem_[i] = nn::ConvBlock(reg_, base + ".stem", head_c[i], head_c[i], 3, 1, rng);
    det_pred_[i] = nn::Conv(reg_, base + ".pred", head_c[i], cfg_.det_channels(), 1, 1, rng);
  }

  proto_stem1_ = nn::ConvBlock(reg_, "proto.stem1", c8, c8, 3, 1, rng);
  proto_stem2_ = nn::ConvBlock(reg_, "proto.stem2", c8, c8, 3, 1, rng);
  proto_pred_ = nn::Conv(reg_, "proto.pred", c8, cfg_.prototypes, 1, 1, rng);

  if (cfg_.multi_scale_semantic) {
    sem_lat16_ = nn::ConvBlock(reg_, "sem.lat16", c16, c8, 1, 1, rng);
    sem_lat32_ = nn::ConvBlock(reg_, "sem.lat32", c32, c8, 1, 1, rng);
    sem_fuse_ = nn::ConvBlock(reg_, "sem.fuse", c8 * 3, c8, 3, 1, rng);
  }
  const int sem_mid = std::max(8, c8 / 4);
  sem_stem_ = nn::ConvBlock(reg_, "sem.stem", c8, sem_mid, 3, 1, rng);
  sem_pred_ = nn::Conv(reg_, "sem.pred", sem_mid, cfg_.semantic_categories, 1, 1, rng);

  const int d = cfg_.decoder_dim;
  tok_emb_ = reg_.create("caption.tok_emb.table", {cfg_.vocab_size, d},
                         nn::normal_init((long)cfg_.vocab_size * d, 0.02, rng), true);
  pos_emb_ = reg_.create("caption.pos_emb.table", {cfg_.max_caption_len, d},
                         nn::normal_init((long)cfg_.max_caption_len * d, 0.02, rng), true);
  mem_pos_ = reg_.create("caption.mem_pos.table", {cfg_.max_memory_positions, d},
                         nn::normal_init((long)cfg_.max_memory_positions * d, 0.02, rng), true);
  cap_proj_ = nn::Linear(reg_, "caption.proj", c32, d, rng);
  for (int i = 0; i < cfg_.caption_encoder_layers; ++i)
    cap_enc_.emplace_back(reg_, "caption.enc" + std::to_string(i), d, cfg_.decoder_heads, rng);
  for (int i = 0; i < cfg_.decoder_layers; ++i)
    cap_dec_.emplace_back(reg_, "caption.dec" + std::to_string(i), d, cfg_.decoder_heads, rng);
  cap_ln_f_ = nn::LayerNorm(reg_, "caption.ln_f", d);
  cap_out_ = nn::Linear(reg_, "caption.out", d, cfg_.vocab_size, rng);

  implicits_enabled_ = cfg_.use_implicits;
}

FeaturePyramid Model::backbone_forward(const Tensor& images) {
  if (images.ndim() != 4 || images.dim(1) != 3)
    throw ShapeError("backbone_forward: expected (N,3,H,W), got " + shape_str(images.shape()));
  if (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0)
    throw ShapeError("backbone_forward: spatial dims must be divisible by 32, got " +
                     shape_str(images.shape()));

  Tensor x = stem_.forward(images);
  x = elan4_.forward(down4_.forward(x));
  const Tensor b8 = elan8_.forward(down8_.forward(x));
  const Tensor b16 = elan16_.forward(down16_.forward(b8));
  const Tensor b32 = elan32_.forward(down32_.forward(b16));

  FeaturePyramid p;
  p.p32 = neck32_.forward(b32);
  p.p16 = neck16_.forward(concat({upsample_nearest2x(lat32_.forward(p.p32)), b16}, 1));
  p.p8 = neck8_.forward(concat({upsample_nearest2x(lat16_.forward(p.p16)), b8}, 1));
  return p;
}

std::vector<Tensor> Model::detection_head(const FeaturePyramid& p) {
  const Tensor* feats[3] = {&p.p8, &p.p16, &p.p32};
  std::vector<Tensor> maps;
  for (int i = 0; i < 3; ++i) {
    Tensor f = implicits_enabled_ ? imp_det_[i].forward(*feats[i]) : *feats[i];
    maps.push_back(det_pred_[i].forward(det_stem_[i].forward(f)));
  }
  return maps;
}

Tensor Model::prototype_head(const FeaturePyramid& p) {
  Tensor f = implicits_enabled_ ? imp_proto_.forward(p.p8) : p.p8;
  f = upsample_nearest2x(proto_stem1_.forward(f));
  return proto_pred_.forward(proto_stem2_.forward(f));
}

Tensor Model::semantic_head(const FeaturePyramid& p) {
  return semantic_head(p, cfg_.multi_scale_semantic);
}

Tensor Model::semantic_head(const FeaturePyramid& p, bool multi_scale) {
  if (multi_scale != cfg_.multi_scale_semantic)
    throw ConfigError("semantic_head: model was not built for this mode");
  Tensor f = implicits_enabled_ ? imp_sem_.forward(p.p8) : p.p8;
  if (multi_scale) {
    const Tensor l16 = upsample_nearest2x(sem_lat16_.forward(p.p16));
    const Tensor l32 = upsample_nearest2x(upsample_nearest2x(sem_lat32_.forward(p.p32)));
    f = sem_fuse_.forward(concat({f, l16, l32}, 1));
  }
  return sem_pred_.forward(upsample_nearest2x(sem_stem_.forward(f)));
}

Tensor Model::memory_from_pyramid(const FeaturePyramid& p) {
  Tensor f = implicits_enabled_ ? imp_cap_.forward(p.p32) : p.p32;
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  const int s = h * w;
  if (s > cfg_.max_memory_positions)
    throw ShapeError("caption memory has " + std::to_string(s) + " positions, max is " +
                     std::to_string(cfg_.max_memory_positions));
  Tensor mem = cap_proj_.forward(reshape(permute(f, {0, 2, 3, 1}), {n, s, c}));
  std::vector<int> pos_ids(static_cast<size_t>(n) * s);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < s; ++j) pos_ids[static_cast<size_t>(i) * s + j] = j;
  mem = add(mem, embedding(mem_pos_, pos_ids, {n, s}));
  for (const auto& enc : cap_enc_) mem = enc.forward(mem);
  return mem;
}

namespace {

Tensor causal_mask(int t) {
  std::vector<Real> v(static_cast<size_t>(t) * t, 0.0);
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) v[static_cast<size_t>(i) * t + j] = -1e30;
  return Tensor::from_vector({t, t}, std::move(v));
}

Tensor decode_with_memory(const Tensor& memory, const std::vector<std::vector<int>>& tokens,
                          const Tensor& tok_emb, const Tensor& pos_emb,
                          const std::vector<layers::DecoderLayer>& dec,
                          const nn::LayerNorm& ln_f, const nn::Linear& out, int max_caption_len) {
  const int n = static_cast<int>(tokens.size());
  if (n == 0 || n != memory.dim(0)) throw ShapeError("caption decode: batch size mismatch");
  const int t = static_cast<int>(tokens[0].size());
  if (t < 1 || t > max_caption_len)
    throw ShapeError("caption decode: sequence length " + std::to_string(t) + " out of range");
  std::vector<int> flat, pos;
  flat.reserve(static_cast<size_t>(n) * t);
  pos.reserve(static_cast<size_t>(n) * t);
  for (const auto& row : tokens) {
    if (static_cast<int>(row.size()) != t)
      throw ShapeError("caption decode: ragged token batch");
    for (int j = 0; j < t; ++j) {
      flat.push_back(row[static_cast<size_t>(j)]);
      pos.push_back(j);
    }
  }
  Tensor x = add(embedding(tok_emb, flat, {n, t}), embedding(pos_emb, pos, {n, t}));
  const Tensor mask = causal_mask(t);
  for (const auto& layer : dec) x = layer.forward(x, memory, mask);
  return out.forward(ln_f.forward(x));
}

}  // namespace

Tensor Model::caption_decoder_forward(const FeaturePyramid& p,
                                      const std::vector<std::vector<int>>& tokens) {
  const Tensor memory = memory_from_pyramid(p);
  return decode_with_memory(memory, tokens, tok_emb_, pos_emb_, cap_dec_, cap_ln_f_, cap_out_,
                            cfg_.max_caption_len);
}

std::vector<int> Model::generate_caption(const FeaturePyramid& p, int image_index, int max_len,
                                         int beam_width) {
  if (beam_width < 1) throw ConfigError("beam width must be >= 1");
  max_len = std::min(max_len, cfg_.max_caption_len);
  if (max_len < 2) throw ConfigError("max_len must be >= 2");

  FeaturePyramid single;
  single.p8 = slice(p.p8, 0, image_index, 1).detach();
  single.p16 = slice(p.p16, 0, image_index, 1).detach();
  single.p32 = slice(p.p32, 0, image_index, 1).detach();
  const Tensor memory = memory_from_pyramid(single);

  constexpr int kBos = 1, kEos = 2;
  struct Beam {
    std::vector<int> ids;
    double logp = 0.0;
    bool done = false;
  };
  std::vector<Beam> beams{{{kBos}, 0.0, false}};

  const int vocab = cfg_.vocab_size;
  while (true) {
    bool all_done = true;
    for (const auto& b : beams) all_done = all_done && b.done;
    if (all_done) break;

    std::vector<Beam> candidates;
    for (const auto& b : beams) {
      if (b.done) {
        candidates.push_back(b);
        continue;
      }
      const Tensor logits = decode_with_memory(memory, {b.ids}, tok_emb_, pos_emb_, cap_dec_,
                                               cap_ln_f_, cap_out_, cfg_.max_caption_len);
      const int t = static_cast<int>(b.ids.size());
      const Real* row = logits.data() + static_cast<long>(t - 1) * vocab;
      // log-softmax over the last position
      Real mx = row[0];
      for (int i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
      Real z = 0;
      for (int i = 0; i < vocab; ++i) z += std::exp(row[i] - mx);
      const Real lse = mx + std::log(z);

      std::vector<int> order(static_cast<size_t>(vocab));
      for (int i = 0; i < vocab; ++i) order[static_cast<size_t>(i)] = i;
      std::partial_sort(order.begin(),
                        order.begin() + std::min<std::size_t>(order.size(), beam_width),
                        order.end(), [&](int a, int c) {
                          if (row[a] != row[c]) return row[a] > row[c];
                          return a < c;
                        });
      for (int k = 0; k < beam_width && k < vocab; ++k) {
        const int tok = order[static_cast<size_t>(k)];
        Beam nb = b;
        nb.ids.push_back(tok);
        nb.logp += row[tok] - lse;
        nb.done = (tok == kEos) || (static_cast<int>(nb.ids.size()) >= max_len);
        candidates.push_back(std::move(nb));
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Beam& a, const Beam& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      return a.ids < b.ids;
    });
    if (static_cast<int>(candidates.size()) > beam_width) candidates.resize(beam_width);
    beams = std::move(candidates);
  }

  const Beam* best = &beams[0];
  for (const auto& b : beams)
    if (b.logp > best->logp) best = &b;
  return best->ids;
}

NetworkOutputs Model::forward_vision(const Tensor& images) {
  const FeaturePyramid p = backbone_forward(images);
  NetworkOutputs out;
  out.det_maps = detection_head(p);
  out.prototypes = prototype_head(p);
  out.semantic_logits = semantic_head(p);
  return out;
}

std::vector<std::vector<Detection>> decode_detections(const std::vector<Tensor>& det_maps,
                                                      int img_h, int img_w, double conf_thresh,
                                                      double nms_iou, int max_dets) {
  if (det_maps.size() != 3) throw ShapeError("decode_detections: expected 3 stride maps");
  const int n = det_maps[0].dim(0);
  std::vector<std::vector<Detection>> result(static_cast<size_t>(n));

  for (int img = 0; img < n; ++img) {
    std::vector<Detection> dets;
    for (int si = 0; si < 3; ++si) {
      const Tensor& m = det_maps[static_cast<size_t>(si)];
      const int ch = m.dim(1), h = m.dim(2), w = m.dim(3);
      const int k = ch - 5 - kInstanceCategories;
      const double stride = kStrides[si];
      const Real* base = m.data() + static_cast<long>(img) * ch * h * w;
      const long hw = static_cast<long>(h) * w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const long off = static_cast<long>(y) * w + x;
          const double obj = sigmoid_scalar(base[4 * hw + off]);
          int best_c = 0;
          double best_v = base[5 * hw + off];
          for (int c = 1; c < kInstanceCategories; ++c) {
            const double v = base[(5 + c) * hw + off];
            if (v > best_v) {
              best_v = v;
              best_c = c;
            }
          }
          const double score = obj * sigmoid_scalar(best_v);
          if (score < conf_thresh) continue;

          const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
          const double l = softplus_scalar(base[0 * hw + off]) * stride * kBoxScale;
          const double t = softplus_scalar(base[1 * hw + off]) * stride * kBoxScale;
          const double r = softplus_scalar(base[2 * hw + off]) * stride * kBoxScale;
          const double b = softplus_scalar(base[3 * hw + off]) * stride * kBoxScale;
          Box box{cx - l, cy - t, cx + r, cy + b};
          box.x1 = std::clamp(box.x1, 0.0, double(img_w));
          box.y1 = std::clamp(box.y1, 0.0, double(img_h));
          box.x2 = std::clamp(box.x2, 0.0, double(img_w));
          box.y2 = std::clamp(box.y2, 0.0, double(img_h));
          if (!(box.x2 > box.x1) || !(box.y2 > box.y1)) continue;

          Detection d;
          d.box = box;
          d.score = score;
          d.category = best_c;
          d.mask_coefficients.resize(static_cast<size_t>(k));
          for (int kk = 0; kk < k; ++kk)
            d.mask_coefficients[static_cast<size_t>(kk)] = base[(5 + kInstanceCategories + kk) * hw + off];
          dets.push_back(std::move(d));
        }
      }
    }
    std::vector<Detection> kept = nms(dets, nms_iou);
    if (static_cast<int>(kept.size()) > max_dets) kept.resize(static_cast<size_t>(max_dets));
    result[static_cast<size_t>(img)] = std::move(kept);
  }
  return result;
}

Mask assemble_mask(const Tensor& prototypes, int image_index, const Detection& det, int img_h,
                   int img_w) {
  if (prototypes.ndim() != 4) throw ShapeError("assemble_mask: prototypes must be (N,K,H,W)");
  const int k = prototypes.dim(1), ph = prototypes.dim(2), pw = prototypes.dim(3);
  if (static_cast<int>(det.mask_coefficients.size()) != k)
    throw ContractError("assemble_mask: detection carries " +
                        std::to_string(det.mask_coefficients.size()) + " coefficients, need " +
                        std::to_string(k));

  const Real* base = prototypes.data() + static_cast<long>(image_index) * k * ph * pw;
  const double sy = static_cast<double>(img_h) / ph;
  const double sx = static_cast<double>(img_w) / pw;

  Mask low(ph, pw, 0);
  for (int y = 0; y < ph; ++y) {
    for (int x = 0; x < pw; ++x) {
      const double icx = (x + 0.5) * sx, icy = (y + 0.5) * sy;
      if (icx < det.box.x1 || icx >= det.box.x2 || icy < det.box.y1 || icy >= det.box.y2)
        continue;  // crop: outside the detection box stays 0
      double logit = 0;
      for (int kk = 0; kk < k; ++kk)
        logit += det.mask_coefficients[static_cast<size_t>(kk)] *
                 base[static_cast<long>(kk) * ph * pw + static_cast<long>(y) * pw + x];
      if (sigmoid_scalar(logit) > 0.5) low.at(y, x) = 1;
    }
  }

  Mask out(img_h, img_w, 0);
  for (int y = 0; y < img_h; ++y) {
    const int py = std::min(ph - 1, static_cast<int>(y / sy));
    for (int x = 0; x < img_w; ++x) {
      const int px = std::min(pw - 1, static_cast<int>(x / sx));
      out.at(y, x) = low.at(py, px);
    }
  }
  return out;
}

}  // namespace mtv::net
