// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Experiment configuration: a flat "key = value" file with dotted sections.
//
//   # comment
//   seed = 7
//   generate.strength = 0.3
//
// Every key must appear in the schema; missing keys take their defaults.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "busaug/adapters.hpp"
#include "busaug/data.hpp"
#include "busaug/diffusion.hpp"
#include "busaug/eval.hpp"

namespace busaug::config {

/// Validated key/value tree holding canonical value strings for every schema key.
class ConfigTree {
 public:
  /// All schema keys at their defaults.
  ConfigTree();

  /// Parses, type-checks and constraint-checks one value. Throws ConfigError
  /// naming the key and the violated constraint.
  void set(std::string_view key, std::string_view value);
  const std::string& get(std::string_view key) const;
  const std::map<std::string, std::string, std::less<>>& values() const { return values_; }

  /// Canonical text form; parse_config_text(echo()) reproduces this tree.
  std::string echo() const;

  friend bool operator==(const ConfigTree&, const ConfigTree&) = default;

 private:
  std::map<std::string, std::string, std::less<>> values_;
};

struct KeyInfo {
  std::string key;
  std::string type;  // "int", "uint", "real", "string", "int-list"
  std::string default_value;
  std::string description;
};
/// The documented schema, in echo order.
const std::vector<KeyInfo>& schema();

ConfigTree parse_config_text(std::string_view text, std::string_view origin = "<config>");
/// Throws ConfigError when the file cannot be read or fails validation.
ConfigTree parse_config(const std::filesystem::path& path);

struct DataSettings {
  std::string source = "phantom";  // phantom | busi | manifest
  std::string root;
  int image_size = 64;
  data::ClassCounts counts = {168, 81, 51};
  double train_fraction = 0.8;
  data::PhantomConfig phantom;
};

struct DiffusionSettings {
  int timesteps = diffusion::kDefaultTimesteps;
  double beta_min = diffusion::kDefaultBetaMin;
  double beta_max = diffusion::kDefaultBetaMax;
  diffusion::UNetConfig unet;
  adapters::EncoderConfig encoder;
  int pretrain_epochs = 0;
  double learning_rate = 0.0;
  int batch_size = 0;
  double cond_dropout = 0.0;
};

struct LoraSettings {
  int rank = adapters::kDefaultLoraRank;
  double alpha = adapters::kDefaultLoraAlpha;
  int epochs = 0;
  double learning_rate = 0.0;
  int batch_size = 0;
};

struct TiSettings {
  std::string token;
  std::string init_source;
  int vectors = 1;
  adapters::TextualInversionConfig train;
};

struct GenerateSettings {
  double strength = 0.3;
  int steps = 50;
  double guidance = 1.0;
  /// 0 means "match the largest train class".
  int target_per_class = 0;
};

struct EvalSettings {
  std::string extractor = "random-conv";  // random-conv | classifier | file
  int feature_width = 8;
  std::string feature_file;
};

/// Typed view of a validated tree.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  DataSettings data;
  DiffusionSettings diffusion;
  LoraSettings lora;
  TiSettings ti;
  GenerateSettings generate;
  eval::ClassifierConfig classifier;
  EvalSettings eval;
  /// The tree this view was built from.
  ConfigTree tree;
};

/// Converts and cross-checks (e.g. beta_min <= beta_max, diffusion image size).
ExperimentConfig to_experiment(const ConfigTree& tree);

}  // namespace busaug::config
