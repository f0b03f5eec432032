// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "busaug/diffusion.hpp"
#include "busaug/nn.hpp"
#include "busaug/text_encoder.hpp"

namespace busaug::adapters {

/// Snapshot of one low-rank adapter: delta = (alpha / rank) * B * A.
struct LoraAdapter {
  std::string target_name;
  int rank = 0;
  double alpha = 0.0;
  nn::Matrix a;  // rank x k
  nn::Matrix b;  // d x rank
};

inline constexpr int kDefaultLoraRank = 4;
inline constexpr double kDefaultLoraAlpha = 4.0;

/// Conditioning projections ("cond.*", "*.film", "text.proj.*") plus the mid-block convolutions.
std::vector<std::string> default_lora_targets(const nn::LoraHost& host);

/// Attaches zero-initialized (B = 0) adapters with seeded Gaussian A and
/// freezes the base weights. Throws RuntimeError for unknown targets or a
/// rank larger than the target allows; nothing is attached in that case.
std::vector<LoraAdapter> attach_lora(nn::LoraHost& host, const std::vector<std::string>& target_names, int rank,
                                     double alpha, std::uint64_t seed);

/// Current adapter tensors of a host.
std::vector<LoraAdapter> export_adapters(const nn::LoraHost& host);

/// Re-attaches saved adapters to a host carrying the same base weights.
void apply_adapters(nn::LoraHost& host, const std::vector<LoraAdapter>& adapters);

/// Folds every adapter into its base weight. Throws RuntimeError if the host
/// has no adapters (e.g. already merged).
void merge_lora(nn::LoraHost& host);

void save_adapters(const std::filesystem::path& path, const std::vector<LoraAdapter>& adapters);
std::vector<LoraAdapter> load_adapters(const std::filesystem::path& path);

// Textual inversion -------------------------------------------------------------------

struct TextualInversionConfig {
  double learning_rate = 5e-3;
  int steps = 500;
  int batch_size = 4;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Optimizes only the token's embedding rows against the denoising loss with
/// the denoiser and every other encoder tensor held fixed. Writes the learned
/// vectors into the encoder and returns them.
TokenEmbedding train_textual_inversion(const diffusion::DenoiserModel& model, PromptEncoder& encoder,
                                       const std::string& token, const std::vector<Image>& images,
                                       const std::vector<std::string>& prompts,
                                       const diffusion::NoiseSchedule& schedule,
                                       const TextualInversionConfig& config);

void save_token(const std::filesystem::path& path, const TokenEmbedding& embedding);
TokenEmbedding load_token(const std::filesystem::path& path);

}  // namespace busaug::adapters
