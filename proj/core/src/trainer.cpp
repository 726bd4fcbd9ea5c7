#include "mtvision/trainer.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "mtvision/errors.hpp"

namespace mtv::train {

namespace {

constexpr char kMagic[8] = {'M', 'T', 'V', 'C', 'K', 'P', 'T', '\0'};
constexpr const char* kDecoderPrefix = "caption.";

bool is_decoder_param(const std::string& name) {
  return name.rfind(kDecoderPrefix, 0) == 0;
}

/// Registry indices in optimizer slot order: encoder group first, then decoder group,
/// each in registration order.
std::vector<std::size_t> slot_order(const nn::ParamRegistry& reg) {
  std::vector<std::size_t> enc, dec;
  for (std::size_t i = 0; i < reg.size(); ++i)
    (is_decoder_param(reg.name(i)) ? dec : enc).push_back(i);
  enc.insert(enc.end(), dec.begin(), dec.end());
  return enc;
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(l_ie > 0) || !(l_td > 0)) throw ConfigError("learning rates must be > 0");
  if (weight_decay < 0) throw ConfigError("weight decay must be >= 0");
  if (total_steps <= 0) throw ConfigError("total_steps must be > 0");
  if (lr_floor < 0) throw ConfigError("lr_floor must be >= 0");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
    throw ConfigError("betas must be in (0,1)");
  if (!(eps > 0)) throw ConfigError("eps must be > 0");
}

nn::AdamW build_optimizer(net::Model& model, const OptimizerConfig& cfg) {
  cfg.validate();
  auto& reg = model.params();

  nn::ParamGroup encoder, decoder;
  encoder.name = "encoder";
  decoder.name = "decoder";
  encoder.weight_decay = decoder.weight_decay = cfg.weight_decay;

  std::set<std::size_t> claimed;
  for (std::size_t i = 0; i < reg.size(); ++i) {
    nn::ParamGroup& g = is_decoder_param(reg.name(i)) ? decoder : encoder;
    if (!claimed.insert(i).second)
      throw PartitionError("parameter claimed twice: " + reg.name(i));
    g.params.push_back(reg.tensor(i));
    g.decay.push_back(reg.decay(i) ? 1 : 0);
  }
  if (claimed.size() != reg.size())
    throw PartitionError("optimizer groups do not cover all parameters");

  return nn::AdamW({encoder, decoder}, cfg.beta1, cfg.beta2, cfg.eps);
}

GroupRates lr_at_step(long step, const OptimizerConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw RangeError("lr_at_step: step " + std::to_string(step) + " outside [0, " +
                     std::to_string(cfg.total_steps) + "]");
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  GroupRates r;
  r.encoder = cfg.lr_floor + (cfg.l_ie - cfg.lr_floor) * frac;
  r.decoder = cfg.lr_floor + (cfg.l_td - cfg.lr_floor) * frac;
  return r;
}

std::string to_json(const StepRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["lr_encoder"] = r.lr_encoder;
  j["lr_decoder"] = r.lr_decoder;
  j["loss_det"] = r.loss_det;
  j["loss_mask"] = r.loss_mask;
  j["loss_sem"] = r.loss_sem;
  j["loss_cap"] = r.loss_cap;
  j["loss_total"] = r.loss_total;
  return j.dump();
}

namespace {

/// Trim encoded captions to the longest effective length (through each row's eos) and
/// return {full rows, teacher-forcing inputs (all but the last token)}.
std::pair<std::vector<std::vector<int>>, std::vector<std::vector<int>>> caption_rows(
    const std::vector<Sample>& weak, const coco::Vocabulary& vocab, int max_len) {
  std::vector<std::vector<int>> rows;
  int eff = 2;
  for (const auto& s : weak) {
    const std::string text = s.captions.empty() ? std::string() : s.captions.front();
    std::vector<int> ids = coco::encode_caption(text, vocab, max_len);
    int eos_pos = static_cast<int>(ids.size()) - 1;
    for (int i = 0; i < static_cast<int>(ids.size()); ++i)
      if (ids[static_cast<size_t>(i)] == coco::Vocabulary::kEos) {
        eos_pos = i;
        break;
      }
    eff = std::max(eff, eos_pos + 1);
    rows.push_back(std::move(ids));
  }
  std::vector<std::vector<int>> inputs;
  for (auto& r : rows) {
    r.resize(static_cast<size_t>(eff), coco::Vocabulary::kPad);
    inputs.emplace_back(r.begin(), r.end() - 1);
  }
  return {rows, inputs};
}

}  // namespace

StepRecord train_step(net::Model& model, const aug::AugmentedViews& views, nn::AdamW& opt,
                      const OptimizerConfig& ocfg, const losses::LossWeights& weights,
                      const coco::Vocabulary& vocab) {
  const long step = opt.step_count();
  const GroupRates rates = lr_at_step(step, ocfg);
  opt.zero_grad();

  // strong view: detection, instance masks, semantic segmentation
  const Tensor xs = net::images_to_tensor(views.strong);
  const net::FeaturePyramid ps = model.backbone_forward(xs);
  const std::vector<Tensor> det_maps = model.detection_head(ps);
  const Tensor protos = model.prototype_head(ps);
  const Tensor sem_logits = model.semantic_head(ps);

  std::vector<std::vector<LabeledBox>> gt;
  std::vector<SemanticMask> gt_sem;
  for (const auto& s : views.strong) {
    std::vector<LabeledBox> boxes;
    for (const auto& inst : s.instances) boxes.push_back(inst.labeled_box);
    gt.push_back(std::move(boxes));
    gt_sem.push_back(s.semantic);
  }
  const auto assignment = losses::assign_detection_targets(gt, xs.dim(2), xs.dim(3));

  losses::LossComponents parts;
  const auto det = losses::detection_loss(det_maps, assignment, gt);
  parts.det = det.total;
  parts.mask = losses::instance_mask_loss(protos, det_maps, assignment, views.strong);
  parts.sem = losses::semantic_loss(sem_logits, gt_sem);

  // weak view: captioning
  const Tensor xw = net::images_to_tensor(views.weak);
  const net::FeaturePyramid pw = model.backbone_forward(xw);
  const auto [full_rows, inputs] =
      caption_rows(views.weak, vocab, model.config().max_caption_len);
  const Tensor cap_logits = model.caption_decoder_forward(pw, inputs);
  parts.cap = losses::caption_loss(cap_logits, full_rows);

  Tensor total;
  try {
    total = losses::total_loss(parts, weights);
  } catch (const NonFiniteLossError& e) {
    std::string ids;
    for (const auto& group : views.strong_sources)
      for (auto id : group) ids += std::to_string(id) + " ";
    throw NonFiniteLossError(e.task(),
                             std::string(e.what()) + " (batch image ids: " + ids + ")");
  }

  total.backward();
  opt.step({rates.encoder, rates.decoder});

  StepRecord rec;
  rec.step = opt.step_count();
  rec.lr_encoder = rates.encoder;
  rec.lr_decoder = rates.decoder;
  rec.loss_det = parts.det.data()[0];
  rec.loss_mask = parts.mask.data()[0];
  rec.loss_sem = parts.sem.data()[0];
  rec.loss_cap = parts.cap.data()[0];
  rec.loss_total = total.data()[0];
  return rec;
}

namespace {

std::vector<std::string> tokens_from_ids(const std::vector<int>& ids,
                                         const coco::Vocabulary& vocab) {
  std::vector<std::string> toks;
  for (int id : ids) {
    if (id == coco::Vocabulary::kEos) break;
    if (id == coco::Vocabulary::kBos || id == coco::Vocabulary::kPad) continue;
    if (id >= 0 && id < vocab.size()) toks.push_back(vocab.id_to_token[static_cast<size_t>(id)]);
  }
  return toks;
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> toks;
  std::istringstream in(text);
  std::string t;
  while (in >> t) toks.push_back(t);
  return toks;
}

}  // namespace

metrics::MetricReport evaluate_all(net::Model& model, const std::vector<Sample>& dataset,
                                   const coco::Vocabulary& vocab, const EvalConfig& cfg) {
  if (dataset.empty()) throw ArityError("evaluate_all: empty dataset");

  std::vector<std::vector<metrics::PredInstance>> preds;
  std::vector<std::vector<metrics::GtInstance>> gts;
  metrics::SegIouAccumulator seg;
  std::vector<std::vector<std::string>> cands;
  std::vector<std::vector<std::vector<std::string>>> refs;

  for (const auto& raw : dataset) {
    const Sample s = aug::weak_transform(raw, cfg.target_size);
    const Tensor x = net::images_to_tensor(std::vector<Sample>{s});
    const net::FeaturePyramid p = model.backbone_forward(x);
    const std::vector<Tensor> det_maps = model.detection_head(p);
    const Tensor protos = model.prototype_head(p);
    const Tensor sem_logits = model.semantic_head(p);

    const auto decoded = net::decode_detections(det_maps, s.image.h, s.image.w, cfg.conf_thresh,
                                                cfg.nms_iou, cfg.max_dets);
    std::vector<metrics::PredInstance> img_preds;
    for (const auto& d : decoded[0]) {
      metrics::PredInstance pi;
      pi.box = d.box;
      pi.score = d.score;
      pi.category = d.category;
      pi.mask = net::assemble_mask(protos, 0, d, s.image.h, s.image.w);
      img_preds.push_back(std::move(pi));
    }
    preds.push_back(std::move(img_preds));

    std::vector<metrics::GtInstance> img_gt;
    for (const auto& inst : s.instances)
      img_gt.push_back({inst.labeled_box.box, inst.labeled_box.category, inst.mask});
    gts.push_back(std::move(img_gt));

    // semantic: argmax at stride 4, nearest-upsampled back to image resolution
    const int c = sem_logits.dim(1), h4 = sem_logits.dim(2), w4 = sem_logits.dim(3);
    const Real* sl = sem_logits.data();
    SemanticMask pred_sem(s.image.h, s.image.w, 0);
    for (int y = 0; y < s.image.h; ++y)
      for (int xpx = 0; xpx < s.image.w; ++xpx) {
        const int y4 = std::min(h4 - 1, y / 4), x4 = std::min(w4 - 1, xpx / 4);
        int best = 0;
        Real bv = sl[(static_cast<long>(0) * c) * h4 * w4 + static_cast<long>(y4) * w4 + x4];
        for (int cc = 1; cc < c; ++cc) {
          const Real v = sl[(static_cast<long>(cc) * h4 + y4) * w4 + x4];
          if (v > bv) {
            bv = v;
            best = cc;
          }
        }
        pred_sem.at(y, xpx) = static_cast<std::uint8_t>(best);
      }
    seg.add(pred_sem, s.semantic);

    if (!raw.captions.empty()) {
      const auto ids = model.generate_caption(p, 0, model.config().max_caption_len,
                                              cfg.beam_width);
      cands.push_back(tokens_from_ids(ids, vocab));
      std::vector<std::vector<std::string>> r;
      for (const auto& cap : raw.captions) r.push_back(split_tokens(coco::normalize_caption(cap)));
      refs.push_back(std::move(r));
    }
  }

  metrics::MetricReport rep;
  const auto box = metrics::coco_ap(preds, gts, metrics::APMode::kBox);
  const auto mask = metrics::coco_ap(preds, gts, metrics::APMode::kMask);
  rep.box_ap = box.ap;
  rep.box_ap_defined = box.defined;
  rep.box_ap_per_category = box.per_category;
  rep.mask_ap = mask.ap;
  rep.mask_ap_defined = mask.defined;
  rep.mask_ap_per_category = mask.per_category;
  const auto s = seg.result();
  rep.miou = s.miou;
  rep.fwiou = s.fwiou;
  rep.iou_per_category = s.per_category;
  rep.bleu4 = cands.empty() ? 0.0 : metrics::bleu4(cands, refs);
  return rep;
}

// ---- checkpointing ----

namespace {

nlohmann::json config_json(const net::ModelConfig& c) {
  nlohmann::json j;
  j["width"] = c.width;
  j["depth"] = c.depth;
  j["prototypes"] = c.prototypes;
  j["semantic_categories"] = c.semantic_categories;
  j["vocab_size"] = c.vocab_size;
  j["decoder_layers"] = c.decoder_layers;
  j["decoder_heads"] = c.decoder_heads;
  j["decoder_dim"] = c.decoder_dim;
  j["max_caption_len"] = c.max_caption_len;
  j["multi_scale_semantic"] = c.multi_scale_semantic;
  j["caption_encoder_layers"] = c.caption_encoder_layers;
  j["max_memory_positions"] = c.max_memory_positions;
  j["use_implicits"] = c.use_implicits;
  j["seed"] = c.seed;
  return j;
}

net::ModelConfig config_from_json(const nlohmann::json& j) {
  net::ModelConfig c;
  c.width = j.at("width").get<double>();
  c.depth = j.at("depth").get<double>();
  c.prototypes = j.at("prototypes").get<int>();
  c.semantic_categories = j.at("semantic_categories").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.decoder_heads = j.at("decoder_heads").get<int>();
  c.decoder_dim = j.at("decoder_dim").get<int>();
  c.max_caption_len = j.at("max_caption_len").get<int>();
  c.multi_scale_semantic = j.at("multi_scale_semantic").get<bool>();
  c.caption_encoder_layers = j.at("caption_encoder_layers").get<int>();
  c.max_memory_positions = j.at("max_memory_positions").get<int>();
  c.use_implicits = j.at("use_implicits").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32(const std::string& s, std::size_t& pos) {
  if (pos + 4 > s.size()) throw ParseError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[pos++])) << (8 * i);
  return v;
}

std::uint64_t read_u64(const std::string& s, std::size_t& pos) {
  if (pos + 8 > s.size()) throw ParseError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos++])) << (8 * i);
  return v;
}

void append_doubles(std::string& out, const std::vector<Real>& v) {
  static_assert(sizeof(Real) == 8);
  const std::size_t n = out.size();
  out.resize(n + v.size() * 8);
  std::memcpy(out.data() + n, v.data(), v.size() * 8);
}

}  // namespace

Checkpoint snapshot(net::Model& model, nn::AdamW& opt, const coco::Vocabulary& vocab,
                    const Rng& rng) {
  auto& reg = model.params();
  const auto order = slot_order(reg);
  if (order.size() != opt.slot_count())
    throw ContractError("snapshot: optimizer slot count does not match the model");

  Checkpoint c;
  c.model_config = model.config();
  c.step = opt.step_count();
  c.rng = rng.state();
  c.vocab_tokens = vocab.id_to_token;
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    const std::size_t i = order[slot];
    const Tensor t = reg.tensor(i);
    c.param_names.push_back(reg.name(i));
    c.param_shapes.push_back(t.shape());
    c.params.emplace_back(t.data(), t.data() + t.numel());
    c.moment1.push_back(opt.moment1(slot));
    c.moment2.push_back(opt.moment2(slot));
  }
  return c;
}

void restore(net::Model& model, nn::AdamW& opt, coco::Vocabulary& vocab, Rng& rng,
             const Checkpoint& c) {
  auto& reg = model.params();
  const auto order = slot_order(reg);
  if (c.param_names.size() != order.size() || opt.slot_count() != order.size())
    throw VersionError("checkpoint incompatible: parameter count mismatch");

  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    const std::size_t i = order[slot];
    if (reg.name(i) != c.param_names[slot])
      throw VersionError("checkpoint incompatible: parameter " + c.param_names[slot] +
                         " does not match model parameter " + reg.name(i));
    Tensor t = reg.tensor(i);
    if (t.shape() != c.param_shapes[slot] ||
        static_cast<std::size_t>(t.numel()) != c.params[slot].size())
      throw VersionError("checkpoint incompatible: shape mismatch for " + reg.name(i));
    std::copy(c.params[slot].begin(), c.params[slot].end(), t.data());
    if (opt.moment1(slot).size() != c.moment1[slot].size() ||
        opt.moment2(slot).size() != c.moment2[slot].size())
      throw VersionError("checkpoint incompatible: optimizer state mismatch");
    opt.moment1(slot) = c.moment1[slot];
    opt.moment2(slot) = c.moment2[slot];
  }
  opt.set_step_count(c.step);
  vocab.id_to_token = c.vocab_tokens;
  vocab.token_to_id.clear();
  for (std::size_t i = 0; i < vocab.id_to_token.size(); ++i)
    vocab.token_to_id[vocab.id_to_token[i]] = static_cast<int>(i);
  rng.set_state(c.rng);
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  nlohmann::json header;
  header["model_config"] = config_json(c.model_config);
  header["step"] = c.step;
  header["vocab"] = c.vocab_tokens;
  header["rng"] = {{"s", {c.rng.s[0], c.rng.s[1], c.rng.s[2], c.rng.s[3]}},
                   {"have_gauss", c.rng.have_gauss},
                   {"gauss", c.rng.gauss}};
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < c.param_names.size(); ++i) {
    nlohmann::json p;
    p["name"] = c.param_names[i];
    p["shape"] = c.param_shapes[i];
    p["numel"] = c.params[i].size();
    params.push_back(p);
  }
  header["params"] = params;
  const std::string header_str = header.dump();

  std::string blob;
  for (const auto& v : c.params) append_doubles(blob, v);
  for (const auto& v : c.moment1) append_doubles(blob, v);
  for (const auto& v : c.moment2) append_doubles(blob, v);

  std::string payload;
  append_u64(payload, header_str.size());
  payload += header_str;
  append_u64(payload, blob.size());
  payload += blob;

  const auto crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size())));

  std::string out(kMagic, sizeof kMagic);
  append_u32(out, c.version);
  out += payload;
  append_u32(out, crc);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint: " + path);
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  if (raw.size() < sizeof kMagic + 8 || std::memcmp(raw.data(), kMagic, sizeof kMagic) != 0)
    throw ParseError("not a checkpoint file: " + path);
  pos = sizeof kMagic;
  const std::uint32_t version = read_u32(raw, pos);
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));

  if (raw.size() < pos + 8 + 4) throw ParseError("checkpoint truncated");
  const std::string payload = raw.substr(pos, raw.size() - pos - 4);

  std::size_t p = 0;
  const std::uint64_t header_len = read_u64(payload, p);
  if (p + header_len + 8 > payload.size()) throw ParseError("checkpoint truncated");
  const std::size_t header_off = p;
  p += header_len;
  const std::uint64_t blob_len = read_u64(payload, p);
  if (p + blob_len > payload.size()) throw ParseError("checkpoint truncated");
  if (p + blob_len < payload.size()) throw ParseError("checkpoint blob length mismatch");

  std::size_t cpos = raw.size() - 4;
  const std::uint32_t stored_crc = read_u32(raw, cpos);
  const auto crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size())));
  if (crc != stored_crc) throw ChecksumError("checkpoint payload checksum mismatch");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(payload.substr(header_off, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint c;
  c.version = version;
  try {
    c.model_config = config_from_json(header.at("model_config"));
    c.step = header.at("step").get<long>();
    c.vocab_tokens = header.at("vocab").get<std::vector<std::string>>();
    const auto& r = header.at("rng");
    for (int i = 0; i < 4; ++i) c.rng.s[i] = r.at("s").at(i).get<std::uint64_t>();
    c.rng.have_gauss = r.at("have_gauss").get<std::uint8_t>();
    c.rng.gauss = r.at("gauss").get<double>();
    for (const auto& pj : header.at("params")) {
      c.param_names.push_back(pj.at("name").get<std::string>());
      c.param_shapes.push_back(pj.at("shape").get<Shape>());
      c.params.emplace_back(pj.at("numel").get<std::size_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }

  std::uint64_t need = 0;
  for (const auto& v : c.params) need += v.size() * 8 * 3;  // params + two moments
  if (need != blob_len) throw ParseError("checkpoint blob size mismatch");

  auto read_block = [&](std::vector<Real>& v) {
    std::memcpy(v.data(), payload.data() + p, v.size() * 8);
    p += v.size() * 8;
  };
  for (auto& v : c.params) read_block(v);
  c.moment1.resize(c.params.size());
  c.moment2.resize(c.params.size());
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    c.moment1[i].resize(c.params[i].size());
    read_block(c.moment1[i]);
  }
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    c.moment2[i].resize(c.params[i].size());
    read_block(c.moment2[i]);
  }
  return c;
}

std::vector<StepRecord> train_loop(net::Model& model, nn::AdamW& opt,
                                   const std::vector<Sample>& dataset,
                                   const coco::Vocabulary& vocab, const OptimizerConfig& ocfg,
                                   const aug::AugConfig& acfg,
                                   const losses::LossWeights& weights, long steps,
                                   int batch_size, Rng& rng,
                                   const std::function<void(const StepRecord&)>& sink) {
  if (dataset.empty()) throw ArityError("train_loop: empty dataset");
  if (batch_size < 1) throw ConfigError("train_loop: batch_size must be >= 1");

  std::vector<StepRecord> records;
  for (long i = 0; i < steps; ++i) {
    Rng step_rng = rng.fork(static_cast<std::uint64_t>(opt.step_count()));
    std::vector<Sample> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int b = 0; b < batch_size; ++b)
      batch.push_back(dataset[step_rng.uniform_int(dataset.size())]);
    const aug::AugmentedViews views = aug::make_views(batch, acfg, step_rng);
    const StepRecord rec = train_step(model, views, opt, ocfg, weights, vocab);
    if (sink) sink(rec);
    records.push_back(rec);
  }
  return records;
}

}  // namespace mtv::train
