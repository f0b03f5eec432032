// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <future>

#include "busaug/adapters.hpp"
#include "busaug/error.hpp"
#include "busaug/report.hpp"
#include "busaug/rng.hpp"

namespace busaug::pipeline {

namespace fs = std::filesystem;
using data::ClassLabel;

// Arms ------------------------------------------------------------------------------

std::string_view to_string(ExperimentArm arm) {
  switch (arm) {
    case ExperimentArm::kBaseline: return "baseline";
    case ExperimentArm::kSd: return "sd";
    case ExperimentArm::kSdImg2img: return "sd_img2img";
    case ExperimentArm::kSdTi: return "sd_ti";
    case ExperimentArm::kSdTiImg2img: return "sd_ti_img2img";
  }
  return "?";
}

ExperimentArm parse_arm(std::string_view name) {
  for (ExperimentArm arm : kAllArms)
    if (to_string(arm) == name) return arm;
  throw UsageError("unknown arm '" + std::string(name) +
                   "' (expected baseline, sd, sd_img2img, sd_ti or sd_ti_img2img)");
}

std::string_view arm_title(ExperimentArm arm) {
  switch (arm) {
    case ExperimentArm::kBaseline: return "Baseline (Original Images)";
    case ExperimentArm::kSd: return "Original + SD";
    case ExperimentArm::kSdImg2img: return "Original + SD + img2img";
    case ExperimentArm::kSdTi: return "Original + SD + TI";
    case ExperimentArm::kSdTiImg2img: return "Original + SD + TI + img2img";
  }
  return "?";
}

ArmFlags arm_flags(ExperimentArm arm) {
  switch (arm) {
    case ExperimentArm::kSdImg2img: return {false, true};
    case ExperimentArm::kSdTi: return {true, false};
    case ExperimentArm::kSdTiImg2img: return {true, true};
    default: return {false, false};
  }
}

// Generation ---------------------------------------------------------------------------

void GenerationConfig::validate() const {
  if (!(strength >= 0.0 && strength <= 1.0)) throw ConfigError("generation strength must be in [0, 1]");
  if (sampler_steps < 1) throw ConfigError("generation sampler steps must be >= 1");
  if (use_ti && token.empty()) throw ConfigError("TI generation needs a token");
}

nlohmann::json GenerationRecord::to_json() const {
  return {{"label", data::to_string(label)},   {"seed", seed},
          {"prompt", prompt},                  {"refined", refined},
          {"strength", strength},              {"sampler_steps", sampler_steps},
          {"guidance", guidance},              {"text2img_digest", text2img_digest},
          {"output_digest", output_digest}};
}

std::optional<Image> Text2ImgCache::find(const Key& key) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void Text2ImgCache::insert(const Key& key, const Image& image) {
  std::lock_guard lock(mutex_);
  entries_.emplace(key, image);
}

std::size_t Text2ImgCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

std::string image_digest(const Image& image) {
  const std::string_view bytes(reinterpret_cast<const char*>(image.pixels.data()), image.size() * sizeof(double));
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
  return hex;
}

GeneratedImages hybrid_generate(const diffusion::EpsilonModel& model, const adapters::PromptEncoder& encoder,
                                const diffusion::NoiseSchedule& schedule, ClassLabel label, int count,
                                const GenerationConfig& config, Text2ImgCache* cache) {
  config.validate();
  if (count < 0) throw ConfigError("generation count must be >= 0");
  GeneratedImages out;
  if (count == 0) return out;
  const std::string prompt = data::prompt_for_label(label, config.use_ti, config.token);
  const nn::Vector cond = encoder.encode(prompt);
  const diffusion::SamplerOptions options{config.sampler_steps, config.guidance};
  const auto n = static_cast<std::size_t>(count);
  out.images.resize(n);
  out.text2img.resize(n);
  out.records.resize(n);

  auto work = [&](std::size_t i) {
    const std::uint64_t seed = config.seed_base + i;
    const Text2ImgCache::Key key{prompt, seed, config.sampler_steps, config.guidance};
    std::optional<Image> base = cache ? cache->find(key) : std::nullopt;
    if (!base) {
      base = diffusion::text2img_sample(model, cond, schedule, options, seed);
      if (cache) cache->insert(key, *base);
    }
    Image final_image = config.use_img2img
                            ? diffusion::img2img_sample(model, *base, cond, schedule, config.strength, options, seed)
                            : *base;
    GenerationRecord& rec = out.records[i];
    rec.label = label;
    rec.seed = seed;
    rec.prompt = prompt;
    rec.refined = config.use_img2img;
    rec.strength = config.use_img2img ? config.strength : 0.0;
    rec.sampler_steps = config.sampler_steps;
    rec.guidance = config.guidance;
    rec.text2img_digest = image_digest(*base);
    rec.output_digest = image_digest(final_image);
    out.text2img[i] = std::move(*base);
    out.images[i] = std::move(final_image);
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(config.threads, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < n; i += workers) work(i);
      }));
    }
    for (auto& j : jobs) j.get();
  }
  return out;
}

nlohmann::json AugmentationRun::to_json() const {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : records) recs.push_back(r.to_json());
  nlohmann::json p;
  for (ClassLabel label : data::kAllLabels) p[std::string(data::to_string(label))] = plan[data::index_of(label)];
  return {{"arm", arm}, {"input_digest", input_digest}, {"plan", p}, {"records", recs}, {"output_digest", output_digest}};
}

AugmentationResult augment_manifest(const data::Manifest& manifest, const diffusion::EpsilonModel& model,
                                    const adapters::PromptEncoder& encoder,
                                    const diffusion::NoiseSchedule& schedule, int target_per_class,
                                    const GenerationConfig& config, const fs::path& image_dir,
                                    Text2ImgCache* cache) {
  config.validate();
  const data::ClassCounts train = manifest.counts(data::Split::kTrain);
  const int target = target_per_class > 0 ? target_per_class : *std::max_element(train.begin(), train.end());

  AugmentationResult result;
  result.run.input_digest = data::manifest_digest(manifest);
  result.run.plan = data::balance_plan(train, target);
  result.manifest = manifest;

  std::vector<fs::path> written;
  try {
    if (!image_dir.empty()) fs::create_directories(image_dir);
    for (ClassLabel label : data::kAllLabels) {
      const int need = result.run.plan[data::index_of(label)];
      GeneratedImages gen = hybrid_generate(model, encoder, schedule, label, need, config, cache);
      for (std::size_t i = 0; i < gen.images.size(); ++i) {
        data::Sample s;
        s.image = quantize(gen.images[i]);
        s.label = label;
        s.split = data::Split::kTrain;
        s.prompt = gen.records[i].prompt;
        s.synthetic = true;
        s.seed = gen.records[i].seed;
        if (!image_dir.empty()) {
          char name[96];
          std::snprintf(name, sizeof(name), "synthetic_%s_%05llu.png", std::string(data::to_string(label)).c_str(),
                        static_cast<unsigned long long>(*s.seed));
          const fs::path path = image_dir / name;
          write_png(path, *s.image);
          written.push_back(path);
          s.path = fs::absolute(path).lexically_normal().string();
        } else {
          char name[96];
          std::snprintf(name, sizeof(name), "synthetic_%s_%05llu.png", std::string(data::to_string(label)).c_str(),
                        static_cast<unsigned long long>(*s.seed));
          s.path = name;
        }
        result.manifest.samples.push_back(std::move(s));
        result.run.records.push_back(gen.records[i]);
      }
    }
  } catch (const Error&) {
    std::error_code ec;
    for (const auto& p : written) fs::remove(p, ec);
    throw;
  } catch (const std::exception& e) {
    std::error_code ec;
    for (const auto& p : written) fs::remove(p, ec);
    throw RuntimeError(std::string("augmentation failed: ") + e.what());
  }
  result.run.output_digest = data::manifest_digest(result.manifest);
  return result;
}

// Experiment context -----------------------------------------------------------------------------

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

}  // namespace

ExperimentContext::ExperimentContext(config::ExperimentConfig config, fs::path run_dir)
    : config_(std::move(config)), run_dir_(std::move(run_dir)) {
  const auto& d = config_.diffusion;
  schedule_ = diffusion::make_schedule(d.timesteps, d.beta_min, d.beta_max);
  if (!run_dir_.empty()) {
    fs::create_directories(run_dir_);
    write_text(run_dir_ / "config.txt", config_.tree.echo());
  }
}

const data::Manifest& ExperimentContext::dataset() {
  if (dataset_) return *dataset_;
  const auto& dc = config_.data;
  data::Manifest m;
  if (dc.source == "phantom") {
    m = data::make_phantom_manifest(dc.counts, dc.phantom, config_.threads);
  } else if (dc.source == "busi") {
    m = data::ingest_busi(dc.root, dc.image_size);
  } else {
    m = data::read_manifest(dc.root);
    if (m.image_size != 0 && m.image_size != dc.image_size) {
      throw DataError("manifest image size " + std::to_string(m.image_size) + " differs from data.image_size");
    }
    m.image_size = dc.image_size;
  }
  const bool presplit = !m.samples.empty() && std::all_of(m.samples.begin(), m.samples.end(), [](const auto& s) {
    return s.split != data::Split::kUnassigned;
  });
  if (!presplit) m = data::split_stratified(m, dc.train_fraction, derive_seed(config_.seed, "split"));
  if (!run_dir_.empty()) m = data::save_dataset(m, run_dir_ / "data");
  dataset_ = std::move(m);
  return *dataset_;
}

const diffusion::DiffusionCheckpoint& ExperimentContext::lora_checkpoint() {
  if (lora_) return *lora_;
  const auto& dc = config_.diffusion;
  const data::Manifest& m = dataset();
  diffusion::DenoiserModel model(dc.unet, derive_seed(config_.seed, "denoiser-init"));
  adapters::PromptEncoder encoder(adapters::PromptEncoder::prompt_vocabulary(), dc.encoder,
                                  derive_seed(config_.seed, "encoder-init"));

  diffusion::DiffusionCheckpoint base{model, encoder, schedule_, {}, {}};
  if (dc.pretrain_epochs > 0) {
    diffusion::TrainConfig tc;
    tc.learning_rate = dc.learning_rate;
    tc.batch_size = dc.batch_size;
    tc.epochs = dc.pretrain_epochs;
    tc.seed = derive_seed(config_.seed, "pretrain");
    tc.cond_dropout = dc.cond_dropout;
    base = diffusion::train_diffusion(model, m, encoder, schedule_, tc);
    pretrain_losses_ = base.epoch_losses;
  }

  const auto& lc = config_.lora;
  adapters::attach_lora(base.model, adapters::default_lora_targets(base.model), lc.rank, lc.alpha,
                        derive_seed(config_.seed, "lora-init"));
  adapters::attach_lora(base.encoder, adapters::default_lora_targets(base.encoder), lc.rank, lc.alpha,
                        derive_seed(config_.seed, "lora-init-text"));
  if (lc.epochs > 0) {
    diffusion::TrainConfig tc;
    tc.learning_rate = lc.learning_rate;
    tc.batch_size = lc.batch_size;
    tc.epochs = lc.epochs;
    tc.seed = derive_seed(config_.seed, "lora");
    tc.trainable_selector = diffusion::select_lora_only();
    tc.selector_description = "lora";
    tc.cond_dropout = dc.cond_dropout;
    lora_ = diffusion::train_diffusion(base.model, m, base.encoder, schedule_, tc);
  } else {
    lora_ = std::move(base);
  }
  return *lora_;
}

const diffusion::DenoiserModel& ExperimentContext::merged_model() {
  if (!merged_model_) {
    diffusion::DenoiserModel m = lora_checkpoint().model;
    adapters::merge_lora(m);
    merged_model_ = std::move(m);
  }
  return *merged_model_;
}

const adapters::PromptEncoder& ExperimentContext::merged_encoder() {
  if (!merged_encoder_) {
    adapters::PromptEncoder e = lora_checkpoint().encoder;
    adapters::merge_lora(e);
    merged_encoder_ = std::move(e);
  }
  return *merged_encoder_;
}

const adapters::PromptEncoder& ExperimentContext::ti_encoder() {
  if (ti_encoder_) return *ti_encoder_;
  const auto& tc = config_.ti;
  if (tc.token.empty()) throw ConfigError("TI arms need ti.token");
  adapters::PromptEncoder enc = merged_encoder();
  enc.register_token(tc.token, tc.init_source, tc.vectors);
  const data::Manifest& m = dataset();
  std::vector<Image> images;
  std::vector<std::string> prompts;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    if (m.samples[i].split != data::Split::kTrain) continue;
    images.push_back(m.load_image(i));
    prompts.push_back(data::prompt_for_label(m.samples[i].label, true, tc.token));
  }
  token_ = adapters::train_textual_inversion(merged_model(), enc, tc.token, images, prompts, schedule_, tc.train);
  ti_encoder_ = std::move(enc);
  return *ti_encoder_;
}

const eval::ClassifierModel& ExperimentContext::baseline_classifier() {
  if (!baseline_classifier_) baseline_classifier_ = eval::train_classifier(dataset(), config_.classifier);
  return *baseline_classifier_;
}

const eval::FeatureExtractor& ExperimentContext::extractor() {
  if (extractor_) return *extractor_;
  const auto& ec = config_.eval;
  if (ec.extractor == "random-conv") {
    extractor_ = std::make_unique<eval::RandomConvExtractor>(config_.data.image_size, ec.feature_width,
                                                             derive_seed(config_.seed, "fid-features"),
                                                             config_.threads);
  } else if (ec.extractor == "classifier") {
    extractor_ = std::make_unique<eval::ClassifierFeatureExtractor>(baseline_classifier());
  } else {
    extractor_ = std::make_unique<eval::PrecomputedExtractor>(ec.feature_file);
  }
  return *extractor_;
}

std::string ExperimentContext::feature_key(const data::Manifest& manifest, std::size_t index) const {
  const data::Sample& s = manifest.samples.at(index);
  if (s.path.empty()) return "memory:" + std::to_string(index);
  if (run_dir_.empty()) return s.path;
  const fs::path abs = fs::absolute(manifest.resolve(s)).lexically_normal();
  const fs::path rel = abs.lexically_relative(fs::absolute(run_dir_).lexically_normal());
  return rel.empty() ? abs.generic_string() : rel.generic_string();
}

const eval::FIDStats& ExperimentContext::real_stats() {
  if (real_stats_) return *real_stats_;
  const data::Manifest& m = dataset();
  std::vector<Image> images;
  std::vector<std::string> keys;
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    if (m.samples[i].split != data::Split::kTrain || m.samples[i].synthetic) continue;
    images.push_back(m.load_image(i));
    keys.push_back(feature_key(m, i));
  }
  real_stats_ = eval::fid_stats(extractor().extract(images, keys));
  return *real_stats_;
}

void ExperimentContext::set_dataset(data::Manifest manifest) {
  dataset_ = std::move(manifest);
  real_stats_.reset();
  baseline_classifier_.reset();
}

void ExperimentContext::set_lora_checkpoint(diffusion::DiffusionCheckpoint checkpoint) {
  lora_ = std::move(checkpoint);
  merged_model_.reset();
  merged_encoder_.reset();
  ti_encoder_.reset();
}

void ExperimentContext::set_token(const adapters::TokenEmbedding& token) {
  adapters::PromptEncoder enc = merged_encoder();
  enc.load_token(token);
  ti_encoder_ = std::move(enc);
  token_ = token;
}

GenerationConfig ExperimentContext::generation_config(ExperimentArm arm) const {
  const ArmFlags flags = arm_flags(arm);
  GenerationConfig g;
  g.use_ti = flags.use_ti;
  g.use_img2img = flags.use_img2img;
  g.strength = config_.generate.strength;
  g.sampler_steps = config_.generate.steps;
  g.guidance = config_.generate.guidance;
  g.seed_base = derive_seed(config_.seed, "generate") & 0xffffffffULL;
  g.token = config_.ti.token;
  g.threads = config_.threads;
  return g;
}

// Experiments ------------------------------------------------------------------------------------

ArmResult run_experiment(ExperimentArm arm, ExperimentContext& ctx) {
  const auto& cfg = ctx.config();
  const fs::path arm_dir = ctx.run_dir().empty() ? fs::path() : ctx.run_dir() / std::string(to_string(arm));
  if (!arm_dir.empty()) fs::create_directories(arm_dir / "checkpoints");

  ArmResult result;
  result.arm = arm;
  const data::Manifest& real = ctx.dataset();
  std::optional<eval::ClassifierModel> trained;
  const eval::ClassifierModel* classifier = nullptr;

  if (!is_augmented(arm)) {
    result.manifest = real;
    classifier = &ctx.baseline_classifier();
  } else {
    const GenerationConfig gen = ctx.generation_config(arm);
    if (gen.use_ti && cfg.ti.token.empty()) throw ConfigError("arm " + std::string(to_string(arm)) + " needs ti.token");
    const adapters::PromptEncoder& encoder = gen.use_ti ? ctx.ti_encoder() : ctx.merged_encoder();
    AugmentationResult aug =
        augment_manifest(real, ctx.merged_model(), encoder, ctx.schedule(), cfg.generate.target_per_class, gen,
                         arm_dir.empty() ? fs::path() : arm_dir / "images", &ctx.cache());
    aug.run.arm = std::string(to_string(arm));
    result.manifest = std::move(aug.manifest);
    result.augmentation = std::move(aug.run);
    trained = eval::train_classifier(result.manifest, cfg.classifier);
    classifier = &*trained;
  }

  result.report = eval::evaluate_classifier(*classifier, result.manifest, data::Split::kVal);
  auto& meta = result.report.metadata;
  meta["arm"] = to_string(arm);
  meta["title"] = arm_title(arm);
  meta["seed"] = cfg.seed;
  meta["val_size"] = result.manifest.counts(data::Split::kVal)[0] + result.manifest.counts(data::Split::kVal)[1] +
                     result.manifest.counts(data::Split::kVal)[2];
  const data::ClassCounts train = result.manifest.counts(data::Split::kTrain);
  meta["train_counts"] = {{"benign", train[0]}, {"malignant", train[1]}, {"normal", train[2]}};

  if (is_augmented(arm)) {
    std::vector<Image> synthetic;
    std::vector<std::string> keys;
    for (std::size_t i = 0; i < result.manifest.samples.size(); ++i) {
      if (!result.manifest.samples[i].synthetic) continue;
      synthetic.push_back(result.manifest.load_image(i));
      keys.push_back(ctx.feature_key(result.manifest, i));
    }
    meta["fid_real_set"] = "train";
    meta["fid_real_count"] = ctx.real_stats().n;
    meta["fid_synthetic_count"] = synthetic.size();
    meta["fid_extractor"] = ctx.extractor().name();
    if (synthetic.size() >= 2) {
      result.report.fid = eval::fid(ctx.real_stats(), eval::fid_stats(ctx.extractor().extract(synthetic, keys)));
    } else {
      result.report.flags.push_back("fid_skipped:fewer_than_two_synthetic_images");
    }
    meta["input_digest"] = result.augmentation->input_digest;
    meta["output_digest"] = result.augmentation->output_digest;
  }

  if (!arm_dir.empty()) {
    data::write_manifest(arm_dir / "manifest.jsonl", result.manifest);
    write_json(arm_dir / "report.json", result.report.to_json());
    classifier->save(arm_dir / "checkpoints" / "classifier.bin");
    if (is_augmented(arm)) {
      write_json(arm_dir / "augmentation.json", result.augmentation->to_json());
      ctx.lora_checkpoint().save(arm_dir / "checkpoints" / "diffusion.ckpt");
      std::vector<adapters::LoraAdapter> all = adapters::export_adapters(ctx.lora_checkpoint().model);
      for (auto& a : adapters::export_adapters(ctx.lora_checkpoint().encoder)) all.push_back(std::move(a));
      adapters::save_adapters(arm_dir / "checkpoints" / "lora_adapters.bin", all);
      if (arm_flags(arm).use_ti) {
        adapters::save_token(arm_dir / "checkpoints" / "token.bin", ctx.ti_encoder().token_embedding(cfg.ti.token));
      }
    }
  }
  return result;
}

RunAllResult run_all(const config::ExperimentConfig& config, const fs::path& run_dir) {
  ExperimentContext ctx(config, run_dir);
  RunAllResult out;
  std::vector<eval::MetricsReport> reports;
  for (ExperimentArm arm : kAllArms) {
    out.arms.push_back(run_experiment(arm, ctx));
    reports.push_back(out.arms.back().report);
  }
  const report::RenderedReport rendered = report::render_report(reports);
  out.table = rendered.markdown;
  out.table_json = rendered.json;
  out.table_json["pretrain_losses"] = ctx.pretrain_losses();
  out.table_json["lora_losses"] = ctx.lora_checkpoint().epoch_losses;

  if (!run_dir.empty()) {
    write_text(run_dir / "report.md", out.table);
    nlohmann::json full = out.table_json;
    full["reports"] = nlohmann::json::array();
    for (const auto& r : reports) full["reports"].push_back(r.to_json());
    write_json(run_dir / "report.json", full);

    out.grid_path = run_dir / "grid.png";
    report::export_grid(grid_columns(ctx), {data::kAllLabels.begin(), data::kAllLabels.end()}, out.grid_path);
  }
  return out;
}

std::vector<report::GridColumn> grid_columns(ExperimentContext& ctx) {
  std::vector<report::GridColumn> columns;
  report::GridColumn real{"REAL", {}};
  const data::Manifest& m = ctx.dataset();
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    if (m.samples[i].synthetic) continue;
    auto& cell = real.cells[m.samples[i].label];
    if (cell.empty()) cell.push_back(m.load_image(i));
  }
  columns.push_back(std::move(real));
  const char* names[] = {"", "SD", "SD+I2I", "SD+TI", "SD+TI+I2I"};
  for (std::size_t a = 1; a < kAllArms.size(); ++a) {
    const GenerationConfig gen = ctx.generation_config(kAllArms[a]);
    const adapters::PromptEncoder& enc = gen.use_ti ? ctx.ti_encoder() : ctx.merged_encoder();
    report::GridColumn col{names[a], {}};
    for (ClassLabel label : data::kAllLabels) {
      auto g = hybrid_generate(ctx.merged_model(), enc, ctx.schedule(), label, 1, gen, &ctx.cache());
      col.cells[label].push_back(quantize(g.images.front()));
    }
    columns.push_back(std::move(col));
  }
  return columns;
}

}  // namespace busaug::pipeline
