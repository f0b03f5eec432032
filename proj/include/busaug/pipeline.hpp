// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "busaug/config.hpp"
#include "busaug/data.hpp"
#include "busaug/diffusion.hpp"
#include "busaug/eval.hpp"
#include "busaug/report.hpp"
#include "busaug/text_encoder.hpp"
#include "json.hpp"

namespace busaug::pipeline {

// Arms ------------------------------------------------------------------------------

enum class ExperimentArm { kBaseline, kSd, kSdImg2img, kSdTi, kSdTiImg2img };
inline constexpr std::array<ExperimentArm, 5> kAllArms = {ExperimentArm::kBaseline, ExperimentArm::kSd,
                                                           ExperimentArm::kSdImg2img, ExperimentArm::kSdTi,
                                                           ExperimentArm::kSdTiImg2img};

/// baseline, sd, sd_img2img, sd_ti, sd_ti_img2img
std::string_view to_string(ExperimentArm arm);
/// Throws UsageError for anything else.
ExperimentArm parse_arm(std::string_view name);
/// Row label used in the results table.
std::string_view arm_title(ExperimentArm arm);

struct ArmFlags {
  bool use_ti = false;
  bool use_img2img = false;
  friend bool operator==(const ArmFlags&, const ArmFlags&) = default;
};
ArmFlags arm_flags(ExperimentArm arm);
inline bool is_augmented(ExperimentArm arm) { return arm != ExperimentArm::kBaseline; }

// Generation ---------------------------------------------------------------------------

struct GenerationConfig {
  bool use_ti = false;
  bool use_img2img = false;
  double strength = 0.3;
  int sampler_steps = 50;
  double guidance = 1.0;
  std::uint64_t seed_base = 0;
  std::string token = std::string(data::kDefaultToken);
  int threads = 1;
  void validate() const;
};

/// Provenance of one generated image.
struct GenerationRecord {
  data::ClassLabel label = data::ClassLabel::kBenign;
  std::uint64_t seed = 0;
  std::string prompt;
  bool refined = false;
  double strength = 0.0;
  int sampler_steps = 0;
  double guidance = 1.0;
  /// FNV digests of the text2img stage output and of the final image.
  std::string text2img_digest;
  std::string output_digest;
  nlohmann::json to_json() const;
};

struct GeneratedImages {
  std::vector<Image> images;
  /// Text2img stage outputs (identical to images when img2img is off).
  std::vector<Image> text2img;
  std::vector<GenerationRecord> records;
};

/// Memo of text2img outputs keyed by (prompt, seed, steps, guidance), so arms
/// that differ only in refinement share their first stage.
class Text2ImgCache {
 public:
  using Key = std::tuple<std::string, std::uint64_t, int, double>;
  std::optional<Image> find(const Key& key) const;
  void insert(const Key& key, const Image& image);
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::map<Key, Image> entries_;
};

/// Hex FNV-1a digest of an image's pixel bytes.
std::string image_digest(const Image& image);

/// For i in [0, count): seed = seed_base + i, text2img from the label prompt,
/// then (optionally) img2img on that output with the same prompt and seed.
GeneratedImages hybrid_generate(const diffusion::EpsilonModel& model, const adapters::PromptEncoder& encoder,
                                const diffusion::NoiseSchedule& schedule, data::ClassLabel label, int count,
                                const GenerationConfig& config, Text2ImgCache* cache = nullptr);

struct AugmentationRun {
  std::string arm;
  std::string input_digest;
  data::ClassCounts plan{};
  std::vector<GenerationRecord> records;
  std::string output_digest;
  nlohmann::json to_json() const;
};

struct AugmentationResult {
  data::Manifest manifest;
  AugmentationRun run;
};

/// Tops every train class up to target_per_class (0 = the largest train class)
/// with synthetic samples quantized to 8 bits. Real samples and the val split
/// are untouched. With image_dir set, images are written there as
/// synthetic_<label>_<seed>.png; on failure the files written so far are removed.
AugmentationResult augment_manifest(const data::Manifest& manifest, const diffusion::EpsilonModel& model,
                                    const adapters::PromptEncoder& encoder,
                                    const diffusion::NoiseSchedule& schedule, int target_per_class,
                                    const GenerationConfig& config, const std::filesystem::path& image_dir = {},
                                    Text2ImgCache* cache = nullptr);

// Experiments ------------------------------------------------------------------------------------

/// Artifacts shared by the arms of one run, built on first use.
///
/// With a run directory, everything is also written below it:
///   config.txt, data/ (split dataset), <arm>/ (manifest, images/,
///   checkpoints/, report.json, augmentation.json).
class ExperimentContext {
 public:
  ExperimentContext(config::ExperimentConfig config, std::filesystem::path run_dir = {});

  const config::ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }
  const diffusion::NoiseSchedule& schedule() const { return schedule_; }

  /// Real dataset with train/val assigned.
  const data::Manifest& dataset();
  /// Base denoiser trained on all parameters, then LoRA fine-tuned (adapters attached).
  const diffusion::DiffusionCheckpoint& lora_checkpoint();
  /// LoRA-merged denoiser and encoder used for sampling.
  const diffusion::DenoiserModel& merged_model();
  const adapters::PromptEncoder& merged_encoder();
  /// Merged encoder plus the learned TI token.
  const adapters::PromptEncoder& ti_encoder();
  const eval::ClassifierModel& baseline_classifier();
  const eval::FeatureExtractor& extractor();
  /// Features and statistics of the real train images.
  const eval::FIDStats& real_stats();
  Text2ImgCache& cache() { return cache_; }
  /// Mean epoch losses of the base (all-parameter) training stage.
  const std::vector<double>& pretrain_losses() const { return pretrain_losses_; }

  /// Replace lazily built artifacts with ones loaded elsewhere (e.g. from a run directory).
  void set_dataset(data::Manifest manifest);
  void set_lora_checkpoint(diffusion::DiffusionCheckpoint checkpoint);
  void set_token(const adapters::TokenEmbedding& token);

  GenerationConfig generation_config(ExperimentArm arm) const;
  /// Key identifying an image for precomputed features: its path relative to the run directory.
  std::string feature_key(const data::Manifest& manifest, std::size_t index) const;

 private:
  config::ExperimentConfig config_;
  std::filesystem::path run_dir_;
  diffusion::NoiseSchedule schedule_;
  Text2ImgCache cache_;
  std::optional<data::Manifest> dataset_;
  std::optional<diffusion::DiffusionCheckpoint> lora_;
  std::vector<double> pretrain_losses_;
  std::optional<diffusion::DenoiserModel> merged_model_;
  std::optional<adapters::PromptEncoder> merged_encoder_;
  std::optional<adapters::PromptEncoder> ti_encoder_;
  std::optional<adapters::TokenEmbedding> token_;
  std::optional<eval::ClassifierModel> baseline_classifier_;
  std::unique_ptr<eval::FeatureExtractor> extractor_;
  std::optional<eval::FIDStats> real_stats_;
};

struct ArmResult {
  ExperimentArm arm = ExperimentArm::kBaseline;
  eval::MetricsReport report;
  data::Manifest manifest;
  std::optional<AugmentationRun> augmentation;
};

/// Baseline: classifier on the real train split. Other arms: LoRA model (and
/// TI token) generate the class deficit, the classifier trains on the
/// augmented split, and FID compares real train images with the arm's synthetic ones.
ArmResult run_experiment(ExperimentArm arm, ExperimentContext& context);

struct RunAllResult {
  std::vector<ArmResult> arms;
  std::string table;
  nlohmann::json table_json;
  /// Set when the run has a directory.
  std::filesystem::path grid_path;
};

/// Grid columns: REAL (first real sample per label) plus the first (seed_base)
/// generation of each augmented arm per label.
std::vector<report::GridColumn> grid_columns(ExperimentContext& context);

/// All five arms in order, sharing the LoRA checkpoint, TI token and text2img
/// outputs; writes report.md, report.json and grid.png into the run directory.
RunAllResult run_all(const config::ExperimentConfig& config, const std::filesystem::path& run_dir = {});

}  // namespace busaug::pipeline
