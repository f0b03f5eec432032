// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "busaug/archive.hpp"
#include "busaug/error.hpp"
#include "busaug/rng.hpp"

namespace busaug::diffusion {

using nn::FeatureMap;
using nn::Matrix;
using nn::Vector;

// Schedule ------------------------------------------------------------------------------

nlohmann::json NoiseSchedule::to_json() const {
  return {{"steps", steps}, {"beta_min", beta_min}, {"beta_max", beta_max}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  return make_schedule(j.at("steps").get<int>(), j.at("beta_min").get<double>(), j.at("beta_max").get<double>());
}

NoiseSchedule make_schedule(int steps, double beta_min, double beta_max) {
  if (steps < 2) throw ConfigError("noise schedule needs at least 2 timesteps");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ConfigError("noise schedule needs 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  double prod = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double beta = beta_min + (beta_max - beta_min) * (t - 1) / (steps - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    prod *= 1.0 - beta;
    s.alpha_bars.push_back(prod);
  }
  return s;
}

Image forward_diffuse_abar(const Image& x0, double alpha_bar, const Image& eps) {
  if (!x0.same_shape(eps)) throw DataError("forward_diffuse: noise shape does not match image shape");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  Image out(x0.height, x0.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels[i] = a * x0.pixels[i] + b * eps.pixels[i];
  return out;
}

Image forward_diffuse(const Image& x0, int t, const Image& eps, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps) {
    throw RuntimeError("forward_diffuse: timestep " + std::to_string(t) + " outside [1, " +
                       std::to_string(schedule.steps) + "]");
  }
  return forward_diffuse_abar(x0, schedule.alpha_bar(t), eps);
}

// U-Net -------------------------------------------------------------------------------------

void UNetConfig::validate() const {
  if (patch < 1 || image_size % patch != 0) throw ConfigError("unet: image_size must be divisible by patch");
  if (channels.empty()) throw ConfigError("unet: at least one channel level required");
  const int base = image_size / patch;
  if (base % (1 << (channels.size() - 1)) != 0) {
    throw ConfigError("unet: resolution is not divisible by 2^(levels-1)");
  }
  for (int c : channels)
    if (c < 1) throw ConfigError("unet: channel widths must be positive");
  if (cond_dim < 1) throw ConfigError("unet: cond_dim must be positive");
  if (embed_dim < 2 || embed_dim % 2 != 0) throw ConfigError("unet: embed_dim must be even and >= 2");
  if (groups < 1) throw ConfigError("unet: groups must be positive");
}

nlohmann::json UNetConfig::to_json() const {
  return {{"image_size", image_size}, {"patch", patch},         {"channels", channels},
          {"cond_dim", cond_dim},     {"embed_dim", embed_dim}, {"groups", groups}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.patch = j.at("patch").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.cond_dim = j.at("cond_dim").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.groups = j.at("groups").get<int>();
  return c;
}

Vector timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  Vector e(dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * k / half);
    e(k) = std::sin(t * freq);
    e(half + k) = std::cos(t * freq);
  }
  return e;
}

namespace {

DenoiserModel::ResBlock make_block(const std::string& name, int in, int out, int embed_dim, int groups) {
  DenoiserModel::ResBlock b;
  b.norm1 = nn::GroupNorm(name + ".norm1", in, nn::group_count(in, groups));
  b.conv1 = nn::Conv2d(name + ".conv1", in, out, 3);
  b.norm2 = nn::GroupNorm(name + ".norm2", out, nn::group_count(out, groups));
  b.film = nn::DenseMap(name + ".film", embed_dim, 2 * out);
  b.conv2 = nn::Conv2d(name + ".conv2", out, out, 3);
  b.has_skip = in != out;
  if (b.has_skip) b.skip = nn::Conv2d(name + ".skip", in, out, 1);
  b.out_channels = out;
  return b;
}

void declare_block(const DenoiserModel::ResBlock& b, nn::ParameterStore& store, Rng& rng) {
  b.norm1.declare(store);
  b.conv1.declare(store, rng);
  b.norm2.declare(store);
  b.film.declare(store, rng, 0.5);
  b.conv2.declare(store, rng, 0.5);
  if (b.has_skip) b.skip.declare(store, rng);
}

}  // namespace

struct BlockCache {
  nn::GroupNormCache norm1;
  Matrix h0;
  nn::ConvCache conv1;
  nn::GroupNormCache norm2;
  Matrix normalized;
  Matrix scale;
  Matrix modulated;
  nn::ConvCache conv2;
  nn::ConvCache skip;
};

struct DenoiserTape {
  Matrix t_in;
  Matrix t_hidden;
  Matrix t_act;
  Matrix c_in;
  Matrix c_hidden;
  Matrix c_act;
  Matrix emb;
  Matrix emb_act;
  nn::ConvCache stem;
  std::vector<BlockCache> down;
  std::vector<std::pair<int, int>> down_sizes;
  BlockCache mid;
  std::vector<BlockCache> up;
  nn::GroupNormCache out_norm;
  Matrix out_pre;
  nn::ConvCache out_conv;
};

namespace {

FeatureMap block_forward(const nn::ParameterStore& s, const DenoiserModel::ResBlock& b, const FeatureMap& x,
                         const Matrix& emb_act, BlockCache* cache) {
  const FeatureMap h0 = b.norm1.forward(s, x, cache ? &cache->norm1 : nullptr);
  FeatureMap a0 = h0;
  a0.values = nn::silu(h0.values);
  const FeatureMap h1 = b.conv1.forward(s, a0, cache ? &cache->conv1 : nullptr);
  const FeatureMap g = b.norm2.forward(s, h1, cache ? &cache->norm2 : nullptr);
  const Matrix film = b.film.forward(s, emb_act);
  const int c = b.out_channels;
  const auto scale = film.col(0).head(c).array();
  const auto shift = film.col(0).tail(c).array();
  FeatureMap f = g;
  f.values = (g.values.array().colwise() * (1.0 + scale)).colwise() + shift;
  FeatureMap a1 = f;
  a1.values = nn::silu(f.values);
  FeatureMap out = b.conv2.forward(s, a1, cache ? &cache->conv2 : nullptr);
  if (b.has_skip) {
    out.values += b.skip.forward(s, x, cache ? &cache->skip : nullptr).values;
  } else {
    out.values += x.values;
  }
  if (cache) {
    cache->h0 = h0.values;
    cache->normalized = g.values;
    cache->scale = film.topRows(c);
    cache->modulated = std::move(f.values);
  }
  return out;
}

FeatureMap block_backward(nn::ParameterStore& s, const DenoiserModel::ResBlock& b, const BlockCache& cache,
                          const FeatureMap& grad_out, const Matrix& emb_act, Matrix& grad_emb_act) {
  FeatureMap d = b.conv2.backward(s, cache.conv2, grad_out);
  d.values = nn::silu_backward(cache.modulated, d.values);
  const int c = b.out_channels;
  Matrix dfilm(2 * c, 1);
  dfilm.topRows(c) = (d.values.array() * cache.normalized.array()).rowwise().sum().matrix();
  dfilm.bottomRows(c) = d.values.rowwise().sum();
  grad_emb_act += b.film.backward(s, emb_act, dfilm);
  d.values = d.values.array().colwise() * (1.0 + cache.scale.col(0).array());
  d = b.norm2.backward(s, cache.norm2, d);
  d = b.conv1.backward(s, cache.conv1, d);
  d.values = nn::silu_backward(cache.h0, d.values);
  FeatureMap gx = b.norm1.backward(s, cache.norm1, d);
  if (b.has_skip) {
    gx.values += b.skip.backward(s, cache.skip, grad_out).values;
  } else {
    gx.values += grad_out.values;
  }
  return gx;
}

FeatureMap image_to_map(const Image& img) {
  FeatureMap m(1, img.height, img.width);
  for (std::size_t i = 0; i < img.size(); ++i) m.values(0, static_cast<Eigen::Index>(i)) = img.pixels[i];
  return m;
}

Image map_to_image(const FeatureMap& m) {
  Image img(m.height, m.width);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = m.values(0, static_cast<Eigen::Index>(i));
  return img;
}

}  // namespace

DenoiserModel::DenoiserModel(const UNetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const int e = config_.embed_dim;
  const int g = config_.groups;
  const int in_ch = config_.patch * config_.patch;
  const auto& ch = config_.channels;
  const int levels = static_cast<int>(ch.size());

  time0_ = nn::DenseMap("time.0", e, e);
  time1_ = nn::DenseMap("time.1", e, e);
  cond0_ = nn::DenseMap("cond.0", config_.cond_dim, e);
  cond1_ = nn::DenseMap("cond.1", e, e);
  stem_ = nn::Conv2d("stem", in_ch, ch[0], 3);
  int prev = ch[0];
  for (int i = 0; i < levels; ++i) {
    down_.push_back(make_block("down" + std::to_string(i), prev, ch[i], e, g));
    prev = ch[i];
  }
  mid_ = make_block("mid", prev, prev, e, g);
  up_.resize(levels);
  for (int i = levels - 1; i >= 0; --i) {
    const int incoming = i == levels - 1 ? ch[levels - 1] : ch[i + 1];
    up_[i] = make_block("up" + std::to_string(i), incoming + ch[i], ch[i], e, g);
  }
  out_norm_ = nn::GroupNorm("out.norm", ch[0], nn::group_count(ch[0], g));
  out_conv_ = nn::Conv2d("out.conv", ch[0], in_ch, 3);

  Rng rng(derive_seed(seed, "denoiser-init"));
  time0_.declare(store_, rng);
  time1_.declare(store_, rng);
  cond0_.declare(store_, rng);
  cond1_.declare(store_, rng);
  stem_.declare(store_, rng);
  for (const auto& b : down_) declare_block(b, store_, rng);
  declare_block(mid_, store_, rng);
  for (int i = levels - 1; i >= 0; --i) declare_block(up_[i], store_, rng);
  out_norm_.declare(store_);
  out_conv_.declare(store_, rng, 0.2);
}

Image DenoiserModel::predict_eps(const Image& x_t, int t, const Vector& cond) const {
  return forward(x_t, t, cond, nullptr);
}

Image DenoiserModel::forward(const Image& x_t, int t, const Vector& cond, DenoiserTape* tape) const {
  if (x_t.height != config_.image_size || x_t.width != config_.image_size) {
    throw RuntimeError("denoiser expects " + std::to_string(config_.image_size) + "x" +
                       std::to_string(config_.image_size) + " input");
  }
  if (cond.size() != config_.cond_dim) throw RuntimeError("denoiser: conditioning vector has wrong dimension");
  const auto& s = store_;
  const int levels = static_cast<int>(config_.channels.size());

  const Matrix t_in = timestep_embedding(t, config_.embed_dim);
  const Matrix t_hidden = time0_.forward(s, t_in);
  const Matrix t_act = nn::silu(t_hidden);
  const Matrix c_in = cond;
  const Matrix c_hidden = cond0_.forward(s, c_in);
  const Matrix c_act = nn::silu(c_hidden);
  const Matrix emb = time1_.forward(s, t_act) + cond1_.forward(s, c_act);
  const Matrix emb_act = nn::silu(emb);

  if (tape) {
    tape->down.assign(levels, {});
    tape->up.assign(levels, {});
    tape->down_sizes.assign(levels, {});
  }
  FeatureMap h = stem_.forward(s, nn::space_to_depth(image_to_map(x_t), config_.patch), tape ? &tape->stem : nullptr);
  std::vector<FeatureMap> skips;
  for (int i = 0; i < levels; ++i) {
    if (tape) tape->down_sizes[i] = {h.height, h.width};
    h = block_forward(s, down_[i], h, emb_act, tape ? &tape->down[i] : nullptr);
    skips.push_back(h);
    if (i < levels - 1) h = nn::avg_pool2(h);
  }
  h = block_forward(s, mid_, h, emb_act, tape ? &tape->mid : nullptr);
  for (int i = levels - 1; i >= 0; --i) {
    h = block_forward(s, up_[i], nn::concat_channels(h, skips[i]), emb_act, tape ? &tape->up[i] : nullptr);
    if (i > 0) h = nn::upsample2(h);
  }
  FeatureMap o = out_norm_.forward(s, h, tape ? &tape->out_norm : nullptr);
  if (tape) tape->out_pre = o.values;
  o.values = nn::silu(o.values);
  o = out_conv_.forward(s, o, tape ? &tape->out_conv : nullptr);

  if (tape) {
    tape->t_in = t_in;
    tape->t_hidden = t_hidden;
    tape->t_act = t_act;
    tape->c_in = c_in;
    tape->c_hidden = c_hidden;
    tape->c_act = c_act;
    tape->emb = emb;
    tape->emb_act = emb_act;
  }
  return map_to_image(nn::depth_to_space(o, config_.patch));
}

Vector DenoiserModel::backward(const DenoiserTape& tape, const Image& grad_out) {
  auto& s = store_;
  const int levels = static_cast<int>(config_.channels.size());
  const auto& ch = config_.channels;
  Matrix grad_emb_act = Matrix::Zero(config_.embed_dim, 1);

  FeatureMap d = nn::space_to_depth(image_to_map(grad_out), config_.patch);
  d = out_conv_.backward(s, tape.out_conv, d);
  d.values = nn::silu_backward(tape.out_pre, d.values);
  d = out_norm_.backward(s, tape.out_norm, d);

  std::vector<FeatureMap> skip_grads(levels);
  for (int i = 0; i < levels; ++i) {
    if (i > 0) d = nn::upsample2_backward(d);
    FeatureMap dcat = block_backward(s, up_[i], tape.up[i], d, tape.emb_act, grad_emb_act);
    const int incoming = i == levels - 1 ? ch[levels - 1] : ch[i + 1];
    auto [dh, dskip] = nn::split_channels(dcat, incoming);
    skip_grads[i] = std::move(dskip);
    d = std::move(dh);
  }
  d = block_backward(s, mid_, tape.mid, d, tape.emb_act, grad_emb_act);
  for (int i = levels - 1; i >= 0; --i) {
    if (i < levels - 1) {
      d = nn::avg_pool2_backward(d, skip_grads[i].height, skip_grads[i].width);
    }
    d.values += skip_grads[i].values;
    d = block_backward(s, down_[i], tape.down[i], d, tape.emb_act, grad_emb_act);
  }
  stem_.backward(s, tape.stem, d);

  const Matrix grad_emb = nn::silu_backward(tape.emb, grad_emb_act);
  const Matrix d_t_act = time1_.backward(s, tape.t_act, grad_emb);
  time0_.backward(s, tape.t_in, nn::silu_backward(tape.t_hidden, d_t_act));
  const Matrix d_c_act = cond1_.backward(s, tape.c_act, grad_emb);
  const Matrix d_cond = cond0_.backward(s, tape.c_in, nn::silu_backward(tape.c_hidden, d_c_act));
  return d_cond.col(0);
}

template <typename Fn>
void DenoiserModel::for_each_dense(Fn&& fn) const {
  fn(time0_);
  fn(time1_);
  fn(cond0_);
  fn(cond1_);
  fn(stem_.map());
  auto block = [&](const ResBlock& b) {
    fn(b.conv1.map());
    fn(b.film);
    fn(b.conv2.map());
    if (b.has_skip) fn(b.skip.map());
  };
  for (const auto& b : down_) block(b);
  block(mid_);
  for (const auto& b : up_) block(b);
  fn(out_conv_.map());
}

std::vector<std::string> DenoiserModel::dense_map_names() const {
  std::vector<std::string> names;
  for_each_dense([&](const nn::DenseMap& m) { names.push_back(m.name()); });
  return names;
}

const nn::DenseMap* DenoiserModel::find_dense_map(std::string_view name) const {
  const nn::DenseMap* found = nullptr;
  for_each_dense([&](const nn::DenseMap& m) {
    if (m.name() == name) found = &m;
  });
  return found;
}

nn::DenseMap* DenoiserModel::find_dense_map(std::string_view name) {
  return const_cast<nn::DenseMap*>(std::as_const(*this).find_dense_map(name));
}

std::vector<std::pair<std::string, nn::LoraSpec>> DenoiserModel::lora_specs() const {
  std::vector<std::pair<std::string, nn::LoraSpec>> out;
  for_each_dense([&](const nn::DenseMap& m) {
    if (m.lora()) out.emplace_back(m.name(), *m.lora());
  });
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

// Loss ------------------------------------------------------------------------------------------

NoiseDraw draw_noise(std::uint64_t seed, std::size_t count, int height, int width, const NoiseSchedule& schedule) {
  Rng rng(seed);
  NoiseDraw draw;
  for (std::size_t i = 0; i < count; ++i) {
    draw.timesteps.push_back(static_cast<int>(rng.uniform_int(1, schedule.steps)));
    Image eps(height, width);
    for (double& v : eps.pixels) v = rng.normal();
    draw.noise.push_back(std::move(eps));
  }
  return draw;
}

double denoising_loss(const EpsilonModel& model, std::span<const Image> batch, std::span<const Vector> conds,
                      const NoiseSchedule& schedule, std::uint64_t rng_seed) {
  if (batch.empty()) throw RuntimeError("denoising loss needs a non-empty batch");
  if (conds.size() != batch.size()) throw RuntimeError("denoising loss: one condition per image required");
  const NoiseDraw draw = draw_noise(rng_seed, batch.size(), batch[0].height, batch[0].width, schedule);
  double total = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Image x_t = forward_diffuse(batch[i], draw.timesteps[i], draw.noise[i], schedule);
    const Image pred = model.predict_eps(x_t, draw.timesteps[i], conds[i]);
    for (std::size_t p = 0; p < pred.size(); ++p) {
      const double diff = pred.pixels[p] - draw.noise[i].pixels[p];
      total += diff * diff;
    }
    count += static_cast<double>(pred.size());
  }
  return total / count;
}

LossWithGrad denoising_loss_grad(DenoiserModel& model, std::span<const Image> batch, std::span<const Vector> conds,
                                 const NoiseSchedule& schedule, std::uint64_t rng_seed) {
  if (batch.empty()) throw RuntimeError("denoising loss needs a non-empty batch");
  if (conds.size() != batch.size()) throw RuntimeError("denoising loss: one condition per image required");
  const NoiseDraw draw = draw_noise(rng_seed, batch.size(), batch[0].height, batch[0].width, schedule);
  const double count = static_cast<double>(batch.size() * batch[0].size());
  LossWithGrad result;
  DenoiserTape tape;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Image x_t = forward_diffuse(batch[i], draw.timesteps[i], draw.noise[i], schedule);
    const Image pred = model.forward(x_t, draw.timesteps[i], conds[i], &tape);
    Image grad(pred.height, pred.width);
    for (std::size_t p = 0; p < pred.size(); ++p) {
      const double diff = pred.pixels[p] - draw.noise[i].pixels[p];
      result.loss += diff * diff;
      grad.pixels[p] = 2.0 * diff / count;
    }
    result.cond_grads.push_back(model.backward(tape, grad));
  }
  result.loss /= count;
  return result;
}

// Training ---------------------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) throw ConfigError("cond_dropout must lie in [0, 1)");
}

std::string TrainConfig::digest() const {
  char text[256];
  std::snprintf(text, sizeof(text), "lr=%.17g;batch=%d;epochs=%d;seed=%llu;dropout=%.17g;select=", learning_rate,
                batch_size, epochs, static_cast<unsigned long long>(seed), cond_dropout);
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(fnv1a(std::string(text) + selector_description)));
  return hex;
}

nn::ParameterSelector select_all() {
  return [](std::string_view) { return true; };
}

nn::ParameterSelector select_nothing() {
  return [](std::string_view) { return false; };
}

nn::ParameterSelector select_lora_only() {
  return [](std::string_view name) {
    return name.ends_with(".lora_A") || name.ends_with(".lora_B");
  };
}

DiffusionCheckpoint train_diffusion(const DenoiserModel& model, const data::Manifest& manifest,
                                    const adapters::PromptEncoder& encoder, const NoiseSchedule& schedule,
                                    const TrainConfig& config) {
  config.validate();
  std::vector<Image> images;
  std::vector<std::string> prompts;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& s = manifest.samples[i];
    if (s.split != data::Split::kTrain) continue;
    prompts.push_back(s.prompt);
    images.push_back(manifest.load_image(i));
  }
  if (images.empty()) throw DataError("diffusion training needs a non-empty train split");
  for (const auto& p : prompts) {
    const auto unknown = encoder.unknown_words(p);
    if (!unknown.empty()) throw DataError("prompt encoder does not know '" + unknown.front() + "' in \"" + p + "\"");
  }

  DiffusionCheckpoint ckpt{model, encoder, schedule, config.digest(), {}};
  {
    nn::TrainableScope model_scope(ckpt.model.store(), config.trainable_selector);
    nn::TrainableScope text_scope(ckpt.encoder.store(), config.trainable_selector);
    nn::Adam model_opt(config.learning_rate);
    nn::Adam text_opt(config.learning_rate);
    Rng dropout_rng(derive_seed(config.seed, "cond-dropout"));
    const std::uint64_t noise_root = derive_seed(config.seed, "noise");
    const std::uint64_t order_root = derive_seed(config.seed, "order");
    const Vector null_cond = Vector::Zero(ckpt.model.cond_dim());

    std::uint64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      Rng order_rng(derive_seed(order_root, static_cast<std::uint64_t>(epoch)));
      const auto order = order_rng.permutation(images.size());
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        std::vector<Image> batch;
        std::vector<Vector> conds;
        std::vector<adapters::EncodeCache> caches(end - start);
        std::vector<bool> dropped;
        for (std::size_t k = start; k < end; ++k) {
          batch.push_back(images[order[k]]);
          const bool drop = config.cond_dropout > 0.0 && dropout_rng.uniform() < config.cond_dropout;
          dropped.push_back(drop);
          conds.push_back(drop ? null_cond : ckpt.encoder.encode(prompts[order[k]], &caches[k - start]));
        }
        ckpt.model.store().zero_grad();
        ckpt.encoder.store().zero_grad();
        const LossWithGrad lg = denoising_loss_grad(ckpt.model, batch, conds, schedule, derive_seed(noise_root, step));
        for (std::size_t k = 0; k < batch.size(); ++k)
          if (!dropped[k]) ckpt.encoder.backward(caches[k], lg.cond_grads[k]);
        model_opt.step(ckpt.model.store());
        text_opt.step(ckpt.encoder.store());
        epoch_loss += lg.loss * static_cast<double>(batch.size());
        ++step;
      }
      ckpt.epoch_losses.push_back(epoch_loss / static_cast<double>(images.size()));
    }
  }
  return ckpt;
}

// Checkpoint files -------------------------------------------------------------------------------

void DiffusionCheckpoint::save(const std::filesystem::path& path) const {
  Archive a;
  a.kind = "denoiser-checkpoint";
  a.header["architecture"] = model.config().to_json();
  a.header["schedule"] = schedule.to_json();
  a.header["config_digest"] = config_digest;
  a.header["epoch_losses"] = epoch_losses;
  a.header["encoder"] = encoder.describe();
  nlohmann::json lora = nlohmann::json::array();
  for (const auto& [target, spec] : model.lora_specs())
    lora.push_back({{"target", target}, {"rank", spec.rank}, {"alpha", spec.alpha}});
  a.header["lora"] = lora;
  for (const auto& [name, p] : model.store()) a.tensors.emplace(name, p.value);
  for (const auto& [name, p] : encoder.store()) a.tensors.emplace(name, p.value);
  a.save(path);
}

DiffusionCheckpoint DiffusionCheckpoint::load(const std::filesystem::path& path) {
  const Archive a = Archive::load(path, "denoiser-checkpoint");
  DiffusionCheckpoint ckpt;
  const UNetConfig arch = UNetConfig::from_json(a.header.at("architecture"));
  ckpt.model = DenoiserModel(arch, 0);
  for (const auto& l : a.header.at("lora")) {
    const auto target = l.at("target").get<std::string>();
    nn::DenseMap* m = ckpt.model.find_dense_map(target);
    if (!m) throw DataError("checkpoint '" + path.string() + "' has an adapter on unknown map '" + target + "'");
    m->set_lora({l.at("rank").get<int>(), l.at("alpha").get<double>()});
  }
  std::map<std::string, Matrix> text_tensors;
  nn::ParameterStore loaded;
  for (const auto& [name, m] : a.tensors) {
    if (name.starts_with("text.")) {
      text_tensors.emplace(name, m);
    } else {
      loaded.add(name, m);
    }
  }
  // Every tensor the architecture declares must be present with the same shape.
  std::size_t expected = 0;
  for (const auto& [name, p] : ckpt.model.store()) {
    ++expected;
    if (!loaded.contains(name)) throw DataError("checkpoint '" + path.string() + "' lacks tensor '" + name + "'");
    const auto& v = loaded.get(name).value;
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols()) {
      throw DataError("checkpoint '" + path.string() + "' tensor '" + name + "' has the wrong shape");
    }
  }
  for (const auto& [target, spec] : ckpt.model.lora_specs()) {
    (void)spec;
    if (!loaded.contains(target + ".lora_A") || !loaded.contains(target + ".lora_B")) {
      throw DataError("checkpoint '" + path.string() + "' lacks adapter tensors for '" + target + "'");
    }
    loaded.get(target + ".weight").frozen = true;
    if (loaded.contains(target + ".bias")) loaded.get(target + ".bias").frozen = true;
    expected += 2;
  }
  if (expected != loaded.size()) throw DataError("checkpoint '" + path.string() + "' has unexpected tensors");
  ckpt.model.store() = std::move(loaded);
  ckpt.encoder = adapters::PromptEncoder::restore(a.header.at("encoder"), text_tensors);
  ckpt.schedule = NoiseSchedule::from_json(a.header.at("schedule"));
  ckpt.config_digest = a.header.value("config_digest", std::string());
  ckpt.epoch_losses = a.header.value("epoch_losses", std::vector<double>{});
  return ckpt;
}

DiffusionCheckpoint DiffusionCheckpoint::load(const std::filesystem::path& path, const UNetConfig& expected) {
  const Archive head = Archive::load(path, "denoiser-checkpoint");
  const UNetConfig arch = UNetConfig::from_json(head.header.at("architecture"));
  if (!(arch == expected)) {
    throw DataError("checkpoint '" + path.string() + "' architecture " + arch.to_json().dump() +
                    " does not match expected " + expected.to_json().dump());
  }
  return load(path);
}

// Sampling ---------------------------------------------------------------------------------------

std::vector<int> ddim_timesteps(int start, int count) {
  if (count < 1 || count > start) {
    throw ConfigError("DDIM needs 1 <= steps <= " + std::to_string(start) + ", got " + std::to_string(count));
  }
  std::vector<int> ts;
  for (int i = count; i >= 1; --i) {
    const long long num = static_cast<long long>(i) * start;
    ts.push_back(static_cast<int>((num + count - 1) / count));
  }
  return ts;
}

Image ddim_step(const Image& x_t, const Image& eps, int t, int t_prev, const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  const double s_ab = std::sqrt(ab);
  const double s_1ab = std::sqrt(1.0 - ab);
  const double s_abp = std::sqrt(ab_prev);
  const double s_1abp = std::sqrt(1.0 - ab_prev);
  Image out(x_t.height, x_t.width);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (x_t.pixels[i] - s_1ab * eps.pixels[i]) / s_ab;
    out.pixels[i] = s_abp * x0 + s_1abp * eps.pixels[i];
  }
  return out;
}

namespace {

Image guided_eps(const EpsilonModel& model, const Image& x, int t, const Vector& cond, double guidance) {
  Image eps = model.predict_eps(x, t, cond);
  if (guidance == 1.0) return eps;
  const Image uncond = model.predict_eps(x, t, Vector::Zero(cond.size()));
  for (std::size_t i = 0; i < eps.size(); ++i)
    eps.pixels[i] = uncond.pixels[i] + guidance * (eps.pixels[i] - uncond.pixels[i]);
  return eps;
}

Image run_ddim(const EpsilonModel& model, Image x, const Vector& cond, const NoiseSchedule& schedule,
               const std::vector<int>& ts, double guidance) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    x = ddim_step(x, guided_eps(model, x, t, cond, guidance), t, t_prev, schedule);
  }
  for (double& v : x.pixels) v = std::clamp(v, -1.0, 1.0);
  return x;
}

}  // namespace

Image text2img_sample(const EpsilonModel& model, const Vector& cond, const NoiseSchedule& schedule,
                      const SamplerOptions& options, std::uint64_t seed) {
  if (options.steps > schedule.steps) {
    throw ConfigError("sampler steps " + std::to_string(options.steps) + " exceed schedule length " +
                      std::to_string(schedule.steps));
  }
  const auto ts = ddim_timesteps(schedule.steps, options.steps);
  Rng rng(seed);
  Image x(model.image_size(), model.image_size());
  for (double& v : x.pixels) v = rng.normal();
  return run_ddim(model, std::move(x), cond, schedule, ts, options.guidance);
}

Image img2img_sample(const EpsilonModel& model, const Image& source, const Vector& cond,
                     const NoiseSchedule& schedule, double strength, const SamplerOptions& options,
                     std::uint64_t seed) {
  if (!(strength >= 0.0 && strength <= 1.0)) {
    throw ConfigError("img2img strength must lie in [0, 1], got " + std::to_string(strength));
  }
  if (source.height != model.image_size() || source.width != model.image_size()) {
    throw DataError("img2img source does not match the model image size");
  }
  const int t_start = static_cast<int>(std::lround(strength * schedule.steps));
  if (t_start == 0) return source;
  if (strength == 1.0) return text2img_sample(model, cond, schedule, options, seed);
  if (options.steps > schedule.steps) {
    throw ConfigError("sampler steps " + std::to_string(options.steps) + " exceed schedule length " +
                      std::to_string(schedule.steps));
  }
  Rng rng(derive_seed(seed, "img2img"));
  Image eps(source.height, source.width);
  for (double& v : eps.pixels) v = rng.normal();
  const Image noised = forward_diffuse(source, t_start, eps, schedule);
  const int count = std::max(1, static_cast<int>(std::lround(static_cast<double>(options.steps) * t_start /
                                                             schedule.steps)));
  return run_ddim(model, noised, cond, schedule, ddim_timesteps(t_start, count), options.guidance);
}

}  // namespace busaug::diffusion
