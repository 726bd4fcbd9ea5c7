// mtv: train / eval / predict / caption-video / dump-augment / default-config.
//
// Exit codes: 0 success, 2 configuration error (bad flags, bad or missing
// config file), 3 I/O or data error, 4 checkpoint incompatible or corrupt.
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <mtvision/augment.hpp>
#include <mtvision/cocodata.hpp>
#include <mtvision/config.hpp>
#include <mtvision/errors.hpp>
#include <mtvision/imageio.hpp>
#include <mtvision/metrics.hpp>
#include <mtvision/network.hpp>
#include <mtvision/render.hpp>
#include <mtvision/trainer.hpp>
#include <mtvision/video.hpp>

namespace fs = std::filesystem;
using namespace mtv;

namespace {

// Config-file problems are configuration errors, not generic I/O errors.
config::RunConfig read_config(const std::string& path) {
  try {
    return config::load_config(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

coco::Vocabulary reserved_only_vocab() {
  coco::Vocabulary v;
  v.id_to_token = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int i = 0; i < 4; ++i) v.token_to_id[v.id_to_token[i]] = i;
  return v;
}

struct LoadedData {
  coco::DatasetIndex index;
  coco::Vocabulary vocab;
};

LoadedData load_dataset(const config::RunConfig& cfg, bool need_images) {
  if (cfg.train_instances.empty()) throw ConfigError("dataset.train_instances is required");
  LoadedData d;
  d.index = coco::load_instances(cfg.train_instances);
  if (!cfg.train_stuff.empty()) d.index = coco::load_stuff_merged(cfg.train_stuff, std::move(d.index));
  if (!cfg.train_captions.empty()) d.index = coco::load_captions(cfg.train_captions, std::move(d.index));
  if (cfg.max_images > 0) coco::limit_images(d.index, cfg.max_images);
  if (d.index.samples.empty()) throw IoError("dataset: no samples after filtering");
  if (need_images) coco::load_image_pixels(d.index, cfg.image_root);
  d.vocab = cfg.train_captions.empty() ? reserved_only_vocab()
                                       : coco::build_vocab(d.index, cfg.vocab_min_freq);
  return d;
}

struct LoadedModel {
  std::unique_ptr<net::Model> model;
  std::unique_ptr<nn::AdamW> opt;
  coco::Vocabulary vocab;
  Rng rng{0};
  long step = 0;
};

LoadedModel from_checkpoint(const std::string& path, const train::OptimizerConfig& ocfg) {
  train::Checkpoint ck = train::load_checkpoint(path);
  LoadedModel lm;
  lm.model = std::make_unique<net::Model>(ck.model_config);
  lm.opt = std::make_unique<nn::AdamW>(train::build_optimizer(*lm.model, ocfg));
  train::restore(*lm.model, *lm.opt, lm.vocab, lm.rng, ck);
  lm.step = ck.step;
  return lm;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << text;
  if (!f) throw IoError("short write: " + path);
}

std::string ckpt_path(const std::string& dir, long step) {
  return (fs::path(dir) / ("step_" + std::to_string(step) + ".ckpt")).string();
}

// ---------------------------------------------------------------- train ----

struct TrainArgs {
  std::string config_path;
  std::string resume;
  int max_images = -1;
  std::int64_t seed = -1;
};

int cmd_train(const TrainArgs& a) {
  config::RunConfig cfg = read_config(a.config_path);
  if (a.max_images >= 0) cfg.max_images = a.max_images;
  if (a.seed >= 0) {
    cfg.seed = static_cast<std::uint64_t>(a.seed);
    cfg.model.seed = cfg.seed;
    cfg.augment.seed = cfg.seed;
  }
  cfg.validate();

  LoadedData data = load_dataset(cfg, true);
  if (cfg.model.vocab_size < data.vocab.size()) cfg.model.vocab_size = data.vocab.size();

  fs::create_directories(cfg.output_dir);

  std::unique_ptr<net::Model> model;
  std::unique_ptr<nn::AdamW> opt;
  coco::Vocabulary vocab = data.vocab;
  Rng rng(cfg.seed);
  long done = 0;
  auto log_mode = std::ios::trunc;

  if (!a.resume.empty()) {
    train::Checkpoint ck = train::load_checkpoint(a.resume);
    model = std::make_unique<net::Model>(ck.model_config);
    opt = std::make_unique<nn::AdamW>(train::build_optimizer(*model, cfg.optimizer));
    train::restore(*model, *opt, vocab, rng, ck);
    done = ck.step;
    log_mode = std::ios::app;
  } else {
    model = std::make_unique<net::Model>(cfg.model);
    opt = std::make_unique<nn::AdamW>(train::build_optimizer(*model, cfg.optimizer));
  }

  if (done > cfg.steps) throw ConfigError("run.steps is behind the checkpoint step");

  write_text_file((fs::path(cfg.output_dir) / "config.json").string(), config::to_json(cfg));

  std::ofstream log(fs::path(cfg.output_dir) / "train_log.jsonl", log_mode);
  if (!log) throw IoError("cannot open train log in " + cfg.output_dir);

  auto sink = [&](const train::StepRecord& r) {
    std::string line = train::to_json(r);
    log << line << "\n";
    log.flush();
    std::cout << line << "\n";
    if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && r.step < cfg.steps) {
      train::save_checkpoint(ckpt_path(cfg.output_dir, r.step),
                             train::snapshot(*model, *opt, vocab, rng));
    }
  };

  train::train_loop(*model, *opt, data.index.samples, vocab, cfg.optimizer, cfg.augment,
                    cfg.loss_weights, cfg.steps - done, cfg.batch_size, rng, sink);

  train::save_checkpoint((fs::path(cfg.output_dir) / "final.ckpt").string(),
                         train::snapshot(*model, *opt, vocab, rng));
  return 0;
}

// ----------------------------------------------------------------- eval ----

struct EvalArgs {
  std::string config_path;
  std::string checkpoint;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  config::RunConfig cfg = read_config(a.config_path);
  cfg.validate();
  LoadedModel lm = from_checkpoint(a.checkpoint, cfg.optimizer);
  LoadedData data = load_dataset(cfg, true);

  metrics::MetricReport rep = train::evaluate_all(*lm.model, data.index.samples, lm.vocab, cfg.eval);
  std::cout << metrics::to_table(rep);

  std::string out = a.out;
  if (out.empty()) {
    fs::create_directories(cfg.output_dir);
    out = (fs::path(cfg.output_dir) / "report.json").string();
  }
  std::string j = metrics::to_json(rep);
  if (j.empty() || j.back() != '\n') j += "\n";
  write_text_file(out, j);
  return 0;
}

// -------------------------------------------------------------- predict ----

struct PredictArgs {
  std::string checkpoint;
  std::string image;
  std::string out = "overlay.png";
  double conf = -1.0;
  int target_size = -1;
  int beam = -1;
};

// Map a letterbox-space stride-4 semantic argmax raster onto the original
// image resolution through the letterbox transform.
SemanticMask semantic_to_original(const Tensor& logits, const aug::Homography& h, int oh, int ow) {
  const int gh = logits.dim(2), gw = logits.dim(3);
  const int cats = logits.dim(1);
  const Real* v = logits.data();
  const std::size_t plane = static_cast<std::size_t>(gh) * gw;
  SemanticMask out(oh, ow, kUnlabeledId);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double lx, ly;
      h.apply(x + 0.5, y + 0.5, lx, ly);
      int gx = std::clamp(static_cast<int>(std::floor(lx / 4.0)), 0, gw - 1);
      int gy = std::clamp(static_cast<int>(std::floor(ly / 4.0)), 0, gh - 1);
      const std::size_t cell = static_cast<std::size_t>(gy) * gw + gx;
      int best = 0;
      double best_v = v[cell];
      for (int c = 1; c < cats; ++c) {
        double cv = v[static_cast<std::size_t>(c) * plane + cell];
        if (cv > best_v) {
          best_v = cv;
          best = c;
        }
      }
      out.px[static_cast<std::size_t>(y) * ow + x] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

Mask mask_to_original(const Mask& lb_mask, const aug::Homography& h, int oh, int ow) {
  Mask out(oh, ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double lx, ly;
      h.apply(x + 0.5, y + 0.5, lx, ly);
      int mx = static_cast<int>(std::floor(lx));
      int my = static_cast<int>(std::floor(ly));
      if (mx < 0 || my < 0 || mx >= lb_mask.w || my >= lb_mask.h) continue;
      out.px[static_cast<std::size_t>(y) * ow + x] =
          lb_mask.px[static_cast<std::size_t>(my) * lb_mask.w + mx];
    }
  }
  return out;
}

int cmd_predict(const PredictArgs& a) {
  LoadedModel lm = from_checkpoint(a.checkpoint, train::OptimizerConfig{});

  train::EvalConfig ev;
  if (a.conf >= 0.0) ev.conf_thresh = a.conf;
  if (a.target_size > 0) ev.target_size = a.target_size;
  if (a.beam > 0) ev.beam_width = a.beam;
  if (ev.target_size <= 0 || ev.target_size % 32 != 0)
    throw ConfigError("--target-size must be a positive multiple of 32");

  Image img = read_image(a.image);
  Sample s;
  s.image = img;
  Sample lb = aug::weak_transform(s, ev.target_size);

  aug::Homography h = aug::letterbox_matrix(img.h, img.w, ev.target_size);
  aug::Homography hinv = h.inverse();

  net::Model& model = *lm.model;
  Tensor x = net::images_to_tensor(std::vector<Sample>{lb});
  net::FeaturePyramid p = model.backbone_forward(x);
  std::vector<Tensor> det_maps = model.detection_head(p);
  Tensor protos = model.prototype_head(p);
  Tensor sem_logits = model.semantic_head(p);
  std::vector<int> ids =
      model.generate_caption(p, 0, model.config().max_caption_len, ev.beam_width);
  std::string caption = coco::decode_caption(ids, lm.vocab);

  auto decoded = net::decode_detections(det_maps, ev.target_size, ev.target_size,
                                        ev.conf_thresh, ev.nms_iou, ev.max_dets);

  // map letterbox-space outputs back to the original resolution
  std::vector<Detection> dets;
  std::vector<Mask> masks;
  for (const Detection& d : decoded[0]) {
    Mask lb_mask = net::assemble_mask(protos, 0, d, ev.target_size, ev.target_size);
    Detection m = d;
    double x1, y1, x2, y2;
    hinv.apply(d.box.x1, d.box.y1, x1, y1);
    hinv.apply(d.box.x2, d.box.y2, x2, y2);
    m.box = {std::clamp(x1, 0.0, double(img.w)), std::clamp(y1, 0.0, double(img.h)),
             std::clamp(x2, 0.0, double(img.w)), std::clamp(y2, 0.0, double(img.h))};
    if (m.box.x2 <= m.box.x1 || m.box.y2 <= m.box.y1) continue;  // fell in the padding
    dets.push_back(std::move(m));
    masks.push_back(mask_to_original(lb_mask, h, img.h, img.w));
  }
  SemanticMask sem = semantic_to_original(sem_logits, h, img.h, img.w);

  Image overlay = render::render_overlay(img, dets, masks, &sem, caption);
  write_png(a.out, overlay);
  write_text_file(a.out + ".json", render::sidecar_json(dets, masks, caption));
  std::cout << caption << "\n";
  return 0;
}

// -------------------------------------------------------- caption-video ----

struct VideoArgs {
  std::string checkpoint;
  std::string video;
  std::string decoder;
  std::string out;
  double interval = 1.0;
  int target_size = -1;
  int beam = -1;
};

std::string default_decoder() {
  std::error_code ec;
  fs::path self = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) {
    fs::path cand = self.parent_path() / "mtv-framepipe";
    if (fs::exists(cand, ec)) return cand.string();
  }
  return "mtv-framepipe";
}

int cmd_caption_video(const VideoArgs& a) {
  LoadedModel lm = from_checkpoint(a.checkpoint, train::OptimizerConfig{});

  train::EvalConfig ev;
  if (a.target_size > 0) ev.target_size = a.target_size;
  if (a.beam > 0) ev.beam_width = a.beam;
  if (ev.target_size <= 0 || ev.target_size % 32 != 0)
    throw ConfigError("--target-size must be a positive multiple of 32");
  if (a.interval <= 0.0) throw ConfigError("--interval must be positive");

  std::string decoder = a.decoder.empty() ? default_decoder() : a.decoder;
  video::FrameReader reader(decoder + " " + video::shell_quote(a.video));
  const video::VideoHeader& hdr = reader.header();
  if (hdr.frames <= 0) throw IoError("video has no frames");

  std::vector<double> stamps = video::sample_timestamps(hdr, a.interval);

  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::binary);
    if (!file) throw IoError("cannot open for writing: " + a.out);
  }
  std::ostream& out = a.out.empty() ? std::cout : file;

  net::Model& model = *lm.model;
  Image frame;
  long have = -1;
  for (double t : stamps) {
    long idx = video::frame_index_at(hdr, t);
    while (have < idx) {
      if (!reader.next_frame(frame)) throw IoError("decoder stream ended early");
      ++have;
    }
    Sample s;
    s.image = frame;
    Sample lb = aug::weak_transform(s, ev.target_size);
    net::FeaturePyramid p = model.backbone_forward(net::images_to_tensor(std::vector<Sample>{lb}));
    std::vector<int> ids =
        model.generate_caption(p, 0, model.config().max_caption_len, ev.beam_width);
    nlohmann::json rec;
    rec["t"] = t;
    rec["frame"] = idx;
    rec["caption"] = coco::decode_caption(ids, lm.vocab);
    out << rec.dump() << "\n";
  }
  out.flush();
  return 0;
}

// --------------------------------------------------------- dump-augment ----

struct DumpArgs {
  std::string config_path;
  std::string out_dir = "augment_dump";
  int batches = 1;
};

int cmd_dump_augment(const DumpArgs& a) {
  config::RunConfig cfg = read_config(a.config_path);
  cfg.validate();
  if (a.batches < 1) throw ConfigError("--batches must be >= 1");

  LoadedData data = load_dataset(cfg, true);
  fs::create_directories(a.out_dir);
  Rng rng(cfg.seed);

  for (int b = 0; b < a.batches; ++b) {
    std::vector<Sample> batch;
    for (int i = 0; i < cfg.batch_size; ++i) {
      std::size_t pick = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::uint64_t>(data.index.samples.size())));
      batch.push_back(data.index.samples[pick]);
    }
    aug::AugmentedViews views = aug::make_views(batch, cfg.augment, rng);

    nlohmann::json prov;
    prov["strong_sources"] = views.strong_sources;
    prov["weak_sources"] = views.weak_sources;
    for (std::size_t i = 0; i < views.strong.size(); ++i) {
      std::string name = "b" + std::to_string(b) + "_strong" + std::to_string(i) + ".png";
      write_png((fs::path(a.out_dir) / name).string(), views.strong[i].image);
    }
    for (std::size_t i = 0; i < views.weak.size(); ++i) {
      std::string name = "b" + std::to_string(b) + "_weak" + std::to_string(i) + ".png";
      write_png((fs::path(a.out_dir) / name).string(), views.weak[i].image);
    }
    write_text_file((fs::path(a.out_dir) / ("b" + std::to_string(b) + "_sources.json")).string(),
                    prov.dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-task vision system: detection, instance & semantic "
               "segmentation, captioning"};
  app.require_subcommand(1);

  TrainArgs ta;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config", ta.config_path, "run config JSON")->required();
  train_cmd->add_option("--max-images", ta.max_images, "cap the dataset size");
  train_cmd->add_option("--resume", ta.resume, "checkpoint to resume from");
  train_cmd->add_option("--seed", ta.seed, "override run/model/augment seeds");

  EvalArgs ea;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the configured dataset");
  eval_cmd->add_option("--config", ea.config_path, "run config JSON")->required();
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--out", ea.out, "metrics report path (default <output_dir>/report.json)");

  PredictArgs pa;
  CLI::App* predict_cmd = app.add_subcommand("predict", "run one image and render the overlay");
  predict_cmd->add_option("--checkpoint", pa.checkpoint, "checkpoint file")->required();
  predict_cmd->add_option("--image", pa.image, "input image (PNG or JPEG)")->required();
  predict_cmd->add_option("--out", pa.out, "overlay PNG path (sidecar JSON at <out>.json)");
  predict_cmd->add_option("--conf", pa.conf, "confidence threshold");
  predict_cmd->add_option("--target-size", pa.target_size, "letterbox size, multiple of 32");
  predict_cmd->add_option("--beam", pa.beam, "caption beam width");

  VideoArgs va;
  CLI::App* video_cmd = app.add_subcommand("caption-video", "caption a video at fixed intervals");
  video_cmd->add_option("--checkpoint", va.checkpoint, "checkpoint file")->required();
  video_cmd->add_option("--video", va.video, "video path, passed to the decoder")->required();
  video_cmd->add_option("--decoder", va.decoder, "FRAMEPIPE decoder command (default mtv-framepipe)");
  video_cmd->add_option("--interval", va.interval, "seconds between captioned records");
  video_cmd->add_option("--out", va.out, "JSONL output path (default stdout)");
  video_cmd->add_option("--target-size", va.target_size, "letterbox size, multiple of 32");
  video_cmd->add_option("--beam", va.beam, "caption beam width");

  DumpArgs da;
  CLI::App* dump_cmd = app.add_subcommand("dump-augment", "write augmented views as PNG files");
  dump_cmd->add_option("--config", da.config_path, "run config JSON")->required();
  dump_cmd->add_option("--out", da.out_dir, "output directory");
  dump_cmd->add_option("--batches", da.batches, "number of batches to dump");

  CLI::App* defcfg_cmd = app.add_subcommand("default-config", "print the default config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(ta);
    if (eval_cmd->parsed()) return cmd_eval(ea);
    if (predict_cmd->parsed()) return cmd_predict(pa);
    if (video_cmd->parsed()) return cmd_caption_video(va);
    if (dump_cmd->parsed()) return cmd_dump_augment(da);
    if (defcfg_cmd->parsed()) {
      std::cout << config::to_json(config::default_config());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const VersionError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const ChecksumError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
