#pragma once

#include <cstdint>
#include <string>

#include "mtvision/augment.hpp"
#include "mtvision/losses.hpp"
#include "mtvision/network.hpp"
#include "mtvision/trainer.hpp"

namespace mtv::config {

/// Full run description. Every field has a documented default; the JSON file may set
/// any subset, but unknown keys are rejected (ConfigError).
struct RunConfig {
  // dataset
  std::string train_instances;  ///< COCO instances JSON
  std::string train_stuff;      ///< COCO stuff JSON ("" = instances only, rest unlabeled)
  std::string train_captions;   ///< COCO captions JSON ("" = no captions)
  std::string image_root;       ///< directory with image files
  int max_images = 0;           ///< 0 = no limit
  int vocab_min_freq = 5;

  net::ModelConfig model;
  aug::AugConfig augment;
  train::OptimizerConfig optimizer;
  losses::LossWeights loss_weights;
  train::EvalConfig eval;

  // run
  long steps = 100;
  int batch_size = 8;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/out";
  long checkpoint_every = 0;  ///< 0 = final checkpoint only

  void validate() const;
};

/// The built-in defaults (identical to a default-constructed RunConfig).
RunConfig default_config();

/// Parse strict JSON text. Unknown keys at any level -> ConfigError naming the key.
RunConfig parse_config(const std::string& json_text);

/// Read and parse a config file. Unreadable file -> IoError.
RunConfig load_config(const std::string& path);

/// Serialize with every field present (the documented-defaults dump).
std::string to_json(const RunConfig& c);

}  // namespace mtv::config
