#include "mtvision/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mtvision/errors.hpp"

namespace mtv::config {

namespace {

using nlohmann::json;

/// Reject keys outside `allowed`, naming the first offender.
void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ConfigError(where + ": unknown key \"" + key + "\"");
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key \"") + key + "\": " + e.what());
  }
}

void parse_dataset(const json& j, RunConfig& c) {
  check_keys(j, {"train_instances", "train_stuff", "train_captions", "image_root",
                 "max_images", "vocab_min_freq"},
             "dataset");
  get_to(j, "train_instances", c.train_instances);
  get_to(j, "train_stuff", c.train_stuff);
  get_to(j, "train_captions", c.train_captions);
  get_to(j, "image_root", c.image_root);
  get_to(j, "max_images", c.max_images);
  get_to(j, "vocab_min_freq", c.vocab_min_freq);
}

void parse_model(const json& j, net::ModelConfig& m) {
  check_keys(j, {"width", "depth", "prototypes", "semantic_categories", "vocab_size",
                 "decoder_layers", "decoder_heads", "decoder_dim", "max_caption_len",
                 "multi_scale_semantic", "caption_encoder_layers", "max_memory_positions",
                 "use_implicits", "seed"},
             "model");
  get_to(j, "width", m.width);
  get_to(j, "depth", m.depth);
  get_to(j, "prototypes", m.prototypes);
  get_to(j, "semantic_categories", m.semantic_categories);
  get_to(j, "vocab_size", m.vocab_size);
  get_to(j, "decoder_layers", m.decoder_layers);
  get_to(j, "decoder_heads", m.decoder_heads);
  get_to(j, "decoder_dim", m.decoder_dim);
  get_to(j, "max_caption_len", m.max_caption_len);
  get_to(j, "multi_scale_semantic", m.multi_scale_semantic);
  get_to(j, "caption_encoder_layers", m.caption_encoder_layers);
  get_to(j, "max_memory_positions", m.max_memory_positions);
  get_to(j, "use_implicits", m.use_implicits);
  get_to(j, "seed", m.seed);
}

void parse_augment(const json& j, aug::AugConfig& a) {
  check_keys(j, {"mosaic_prob", "mixup_prob", "cutout_prob", "copy_paste_prob", "degrees",
                 "translate", "scale_min", "scale_max", "shear", "perspective", "mixup_alpha",
                 "mixup_beta", "target_size", "cutout_holes", "seed"},
             "augment");
  get_to(j, "mosaic_prob", a.mosaic_prob);
  get_to(j, "mixup_prob", a.mixup_prob);
  get_to(j, "cutout_prob", a.cutout_prob);
  get_to(j, "copy_paste_prob", a.copy_paste_prob);
  get_to(j, "degrees", a.degrees);
  get_to(j, "translate", a.translate);
  get_to(j, "scale_min", a.scale_min);
  get_to(j, "scale_max", a.scale_max);
  get_to(j, "shear", a.shear);
  get_to(j, "perspective", a.perspective);
  get_to(j, "mixup_alpha", a.mixup_alpha);
  get_to(j, "mixup_beta", a.mixup_beta);
  get_to(j, "target_size", a.target_size);
  get_to(j, "cutout_holes", a.cutout_holes);
  get_to(j, "seed", a.seed);
}

void parse_optimizer(const json& j, train::OptimizerConfig& o) {
  check_keys(j, {"l_ie", "l_td", "weight_decay", "total_steps", "lr_floor", "beta1", "beta2",
                 "eps"},
             "optimizer");
  get_to(j, "l_ie", o.l_ie);
  get_to(j, "l_td", o.l_td);
  get_to(j, "weight_decay", o.weight_decay);
  get_to(j, "total_steps", o.total_steps);
  get_to(j, "lr_floor", o.lr_floor);
  get_to(j, "beta1", o.beta1);
  get_to(j, "beta2", o.beta2);
  get_to(j, "eps", o.eps);
}

void parse_loss_weights(const json& j, losses::LossWeights& w) {
  check_keys(j, {"w_det", "w_mask", "w_sem", "w_cap"}, "loss_weights");
  get_to(j, "w_det", w.w_det);
  get_to(j, "w_mask", w.w_mask);
  get_to(j, "w_sem", w.w_sem);
  get_to(j, "w_cap", w.w_cap);
}

void parse_eval(const json& j, train::EvalConfig& e) {
  check_keys(j, {"conf_thresh", "nms_iou", "max_dets", "target_size", "beam_width"}, "eval");
  get_to(j, "conf_thresh", e.conf_thresh);
  get_to(j, "nms_iou", e.nms_iou);
  get_to(j, "max_dets", e.max_dets);
  get_to(j, "target_size", e.target_size);
  get_to(j, "beam_width", e.beam_width);
}

void parse_run(const json& j, RunConfig& c) {
  check_keys(j, {"steps", "batch_size", "seed", "output_dir", "checkpoint_every"}, "run");
  get_to(j, "steps", c.steps);
  get_to(j, "batch_size", c.batch_size);
  get_to(j, "seed", c.seed);
  get_to(j, "output_dir", c.output_dir);
  get_to(j, "checkpoint_every", c.checkpoint_every);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  augment.validate();
  optimizer.validate();
  loss_weights.validate();
  if (max_images < 0) throw ConfigError("dataset.max_images must be >= 0");
  if (vocab_min_freq < 1) throw ConfigError("dataset.vocab_min_freq must be >= 1");
  if (steps < 0) throw ConfigError("run.steps must be >= 0");
  if (batch_size < 1) throw ConfigError("run.batch_size must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be >= 0");
  if (eval.target_size < 32 || eval.target_size % 32 != 0)
    throw ConfigError("eval.target_size must be a positive multiple of 32");
  if (augment.target_size % 32 != 0)
    throw ConfigError("augment.target_size must be a multiple of 32");
  if (eval.beam_width < 1) throw ConfigError("eval.beam_width must be >= 1");
  if (eval.max_dets < 1) throw ConfigError("eval.max_dets must be >= 1");
  if (output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
}

RunConfig default_config() { return RunConfig{}; }

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"dataset", "model", "augment", "optimizer", "loss_weights", "eval", "run"},
             "config");

  RunConfig c;
  if (j.contains("dataset")) parse_dataset(j.at("dataset"), c);
  if (j.contains("model")) parse_model(j.at("model"), c.model);
  if (j.contains("augment")) parse_augment(j.at("augment"), c.augment);
  if (j.contains("optimizer")) parse_optimizer(j.at("optimizer"), c.optimizer);
  if (j.contains("loss_weights")) parse_loss_weights(j.at("loss_weights"), c.loss_weights);
  if (j.contains("eval")) parse_eval(j.at("eval"), c.eval);
  if (j.contains("run")) parse_run(j.at("run"), c);
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const RunConfig& c) {
  json j;
  j["dataset"] = {{"train_instances", c.train_instances},
                  {"train_stuff", c.train_stuff},
                  {"train_captions", c.train_captions},
                  {"image_root", c.image_root},
                  {"max_images", c.max_images},
                  {"vocab_min_freq", c.vocab_min_freq}};
  j["model"] = {{"width", c.model.width},
                {"depth", c.model.depth},
                {"prototypes", c.model.prototypes},
                {"semantic_categories", c.model.semantic_categories},
                {"vocab_size", c.model.vocab_size},
                {"decoder_layers", c.model.decoder_layers},
                {"decoder_heads", c.model.decoder_heads},
                {"decoder_dim", c.model.decoder_dim},
                {"max_caption_len", c.model.max_caption_len},
                {"multi_scale_semantic", c.model.multi_scale_semantic},
                {"caption_encoder_layers", c.model.caption_encoder_layers},
                {"max_memory_positions", c.model.max_memory_positions},
                {"use_implicits", c.model.use_implicits},
                {"seed", c.model.seed}};
  j["augment"] = {{"mosaic_prob", c.augment.mosaic_prob},
                  {"mixup_prob", c.augment.mixup_prob},
                  {"cutout_prob", c.augment.cutout_prob},
                  {"copy_paste_prob", c.augment.copy_paste_prob},
                  {"degrees", c.augment.degrees},
                  {"translate", c.augment.translate},
                  {"scale_min", c.augment.scale_min},
                  {"scale_max", c.augment.scale_max},
                  {"shear", c.augment.shear},
                  {"perspective", c.augment.perspective},
                  {"mixup_alpha", c.augment.mixup_alpha},
                  {"mixup_beta", c.augment.mixup_beta},
                  {"target_size", c.augment.target_size},
                  {"cutout_holes", c.augment.cutout_holes},
                  {"seed", c.augment.seed}};
  j["optimizer"] = {{"l_ie", c.optimizer.l_ie},
                    {"l_td", c.optimizer.l_td},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"total_steps", c.optimizer.total_steps},
                    {"lr_floor", c.optimizer.lr_floor},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps}};
  j["loss_weights"] = {{"w_det", c.loss_weights.w_det},
                       {"w_mask", c.loss_weights.w_mask},
                       {"w_sem", c.loss_weights.w_sem},
                       {"w_cap", c.loss_weights.w_cap}};
  j["eval"] = {{"conf_thresh", c.eval.conf_thresh},
               {"nms_iou", c.eval.nms_iou},
               {"max_dets", c.eval.max_dets},
               {"target_size", c.eval.target_size},
               {"beam_width", c.eval.beam_width}};
  j["run"] = {{"steps", c.steps},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"output_dir", c.output_dir},
              {"checkpoint_every", c.checkpoint_every}};
  return j.dump(2) + "\n";
}

}  // namespace mtv::config
