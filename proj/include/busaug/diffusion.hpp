// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "busaug/data.hpp"
#include "busaug/image.hpp"
#include "busaug/nn.hpp"
#include "busaug/text_encoder.hpp"
#include "json.hpp"

namespace busaug::diffusion {

// Noise schedule -------------------------------------------------------------------

/// Linear-beta DDPM schedule. Timesteps are 1-based; alpha_bar(0) == 1.
struct NoiseSchedule {
  int steps = 0;
  double beta_min = 0.0;
  double beta_max = 0.0;
  std::vector<double> betas;       // betas[t-1]
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // cumulative products

  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(static_cast<std::size_t>(t - 1)); }
  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

inline constexpr int kDefaultTimesteps = 200;
inline constexpr double kDefaultBetaMin = 1e-4;
inline constexpr double kDefaultBetaMax = 0.02;

NoiseSchedule make_schedule(int steps = kDefaultTimesteps, double beta_min = kDefaultBetaMin,
                            double beta_max = kDefaultBetaMax);

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Image forward_diffuse(const Image& x0, int t, const Image& eps, const NoiseSchedule& schedule);
/// Same with an explicit abar, for degenerate-limit checks.
Image forward_diffuse_abar(const Image& x0, double alpha_bar, const Image& eps);

// Denoiser -------------------------------------------------------------------------------

/// Anything that predicts the noise in x_t.
class EpsilonModel {
 public:
  virtual ~EpsilonModel() = default;
  virtual Image predict_eps(const Image& x_t, int t, const nn::Vector& cond) const = 0;
  virtual int image_size() const = 0;
  virtual int cond_dim() const = 0;
};

/// Architecture descriptor of the conditional U-Net.
struct UNetConfig {
  int image_size = 64;
  /// Space-to-depth factor applied before the first convolution.
  int patch = 2;
  /// Channel width per resolution level; each extra level halves the resolution.
  std::vector<int> channels = {16, 32};
  int cond_dim = 32;
  /// Width of the time/conditioning embedding that drives every block's scale and shift.
  int embed_dim = 64;
  int groups = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct DenoiserTape;

/// Conditional U-Net epsilon predictor.
///
/// Conditioning enters through a per-block scale-and-shift on group-normalized
/// activations, driven by SiLU(time_embedding + projected condition). Dense maps
/// are named "time.0", "time.1", "cond.0", "cond.1", "stem", "down<i>.conv1",
/// "down<i>.film", ..., "mid.*", "up<i>.*", "out.conv".
class DenoiserModel : public EpsilonModel, public nn::LoraHost {
 public:
  DenoiserModel() = default;
  DenoiserModel(const UNetConfig& config, std::uint64_t seed);

  const UNetConfig& config() const { return config_; }

  Image predict_eps(const Image& x_t, int t, const nn::Vector& cond) const override;
  int image_size() const override { return config_.image_size; }
  int cond_dim() const override { return config_.cond_dim; }

  /// Forward pass that records what backward() needs.
  Image forward(const Image& x_t, int t, const nn::Vector& cond, DenoiserTape* tape) const;
  /// Accumulates parameter gradients; returns d loss / d cond.
  nn::Vector backward(const DenoiserTape& tape, const Image& grad_out);

  nn::ParameterStore& store() override { return store_; }
  const nn::ParameterStore& store() const override { return store_; }
  std::vector<std::string> dense_map_names() const override;
  nn::DenseMap* find_dense_map(std::string_view name) override;
  const nn::DenseMap* find_dense_map(std::string_view name) const override;

  /// Adapters currently attached (target, spec), sorted by target.
  std::vector<std::pair<std::string, nn::LoraSpec>> lora_specs() const;

  struct ResBlock {
    nn::GroupNorm norm1;
    nn::Conv2d conv1;
    nn::GroupNorm norm2;
    nn::DenseMap film;
    nn::Conv2d conv2;
    bool has_skip = false;
    nn::Conv2d skip;
    int out_channels = 0;
  };

 private:
  template <typename Fn>
  void for_each_dense(Fn&& fn) const;

  UNetConfig config_;
  nn::ParameterStore store_;
  nn::DenseMap time0_;
  nn::DenseMap time1_;
  nn::DenseMap cond0_;
  nn::DenseMap cond1_;
  nn::Conv2d stem_;
  std::vector<ResBlock> down_;
  ResBlock mid_;
  std::vector<ResBlock> up_;
  nn::GroupNorm out_norm_;
  nn::Conv2d out_conv_;
};

/// Sinusoidal embedding of a timestep (dim must be even).
nn::Vector timestep_embedding(int t, int dim);

// Loss -------------------------------------------------------------------------------------

/// Per-item timestep and noise drawn for a denoising loss evaluation.
struct NoiseDraw {
  std::vector<int> timesteps;
  std::vector<Image> noise;
};

/// Deterministic (t, eps) draws: t uniform in [1, T], eps standard normal.
NoiseDraw draw_noise(std::uint64_t seed, std::size_t count, int height, int width, const NoiseSchedule& schedule);

/// Mean squared error between the drawn noise and the model's prediction.
double denoising_loss(const EpsilonModel& model, std::span<const Image> batch, std::span<const nn::Vector> conds,
                      const NoiseSchedule& schedule, std::uint64_t rng_seed);

struct LossWithGrad {
  double loss = 0.0;
  /// d loss / d cond for each batch item.
  std::vector<nn::Vector> cond_grads;
};

/// Same loss; also accumulates d loss / d parameter into the model's store
/// (for parameters with requires_grad set).
LossWithGrad denoising_loss_grad(DenoiserModel& model, std::span<const Image> batch,
                                 std::span<const nn::Vector> conds, const NoiseSchedule& schedule,
                                 std::uint64_t rng_seed);

// Training ---------------------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int epochs = 30;
  std::uint64_t seed = 0;
  /// Parameter-name predicate; applied to the denoiser and encoder stores.
  nn::ParameterSelector trainable_selector = [](std::string_view) { return true; };
  /// Human-readable form of the selector, folded into the config digest.
  std::string selector_description = "all";
  /// Probability of replacing the condition with zeros (enables guidance).
  double cond_dropout = 0.0;

  void validate() const;
  std::string digest() const;
};

/// Named selectors used by the pipeline and CLI.
nn::ParameterSelector select_all();
nn::ParameterSelector select_nothing();
nn::ParameterSelector select_lora_only();

struct DiffusionCheckpoint {
  DenoiserModel model;
  adapters::PromptEncoder encoder;
  NoiseSchedule schedule;
  std::string config_digest;
  std::vector<double> epoch_losses;

  void save(const std::filesystem::path& path) const;
  static DiffusionCheckpoint load(const std::filesystem::path& path);
  /// Loads and checks the architecture descriptor; mismatch is a DataError.
  static DiffusionCheckpoint load(const std::filesystem::path& path, const UNetConfig& expected);
};

/// Runs epochs x ceil(N / batch) Adam steps of the denoising objective over the
/// train split. Only selector-approved, non-frozen parameters move.
DiffusionCheckpoint train_diffusion(const DenoiserModel& model, const data::Manifest& manifest,
                                    const adapters::PromptEncoder& encoder, const NoiseSchedule& schedule,
                                    const TrainConfig& config);

// Sampling -----------------------------------------------------------------------------------

/// Descending DDIM timesteps t_n > ... > t_1 >= 1 with t_n == start, t_i = ceil(i * start / n).
std::vector<int> ddim_timesteps(int start, int count);

/// One deterministic DDIM (eta = 0) move from t to t_prev given a noise estimate.
Image ddim_step(const Image& x_t, const Image& eps, int t, int t_prev, const NoiseSchedule& schedule);

struct SamplerOptions {
  int steps = 50;
  /// Classifier-free guidance scale; 1 uses the conditional prediction only.
  double guidance = 1.0;
};

/// DDIM from seeded x_T ~ N(0, I) down to t = 0; output clamped to [-1, 1].
Image text2img_sample(const EpsilonModel& model, const nn::Vector& cond, const NoiseSchedule& schedule,
                      const SamplerOptions& options, std::uint64_t seed);

/// Noises source to t* = round(strength * T) and runs DDIM back to 0.
/// strength 0 returns source; strength 1 is exactly text2img_sample.
Image img2img_sample(const EpsilonModel& model, const Image& source, const nn::Vector& cond,
                     const NoiseSchedule& schedule, double strength, const SamplerOptions& options,
                     std::uint64_t seed);

}  // namespace busaug::diffusion
