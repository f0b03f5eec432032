// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "busaug/error.hpp"
#include "busaug/rng.hpp"

namespace busaug::config {

namespace {

struct KeySpec {
  KeyInfo info;
  double min = -std::numeric_limits<double>::infinity();
  double max = std::numeric_limits<double>::infinity();
  bool min_exclusive = false;
  std::vector<std::string> choices;
};

KeySpec int_key(std::string key, long long def, double min, double max, std::string desc) {
  return {{std::move(key), "int", std::to_string(def), std::move(desc)}, min, max, false, {}};
}

KeySpec real_key(std::string key, std::string def, double min, double max, std::string desc,
                 bool min_exclusive = false) {
  return {{std::move(key), "real", std::move(def), std::move(desc)}, min, max, min_exclusive, {}};
}

KeySpec string_key(std::string key, std::string def, std::string desc, std::vector<std::string> choices = {}) {
  return {{std::move(key), "string", std::move(def), std::move(desc)}, 0, 0, false, std::move(choices)};
}

const std::vector<KeySpec>& specs() {
  static const std::vector<KeySpec> table = [] {
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<KeySpec> t;
    t.push_back({{"seed", "uint", "0", "root seed; every stage seed is derived from it"}, 0, inf, false, {}});
    t.push_back(int_key("threads", 1, 1, 256, "worker threads for phantom generation, sampling and features"));

    t.push_back(string_key("data.source", "phantom", "phantom | busi | manifest", {"phantom", "busi", "manifest"}));
    t.push_back(string_key("data.root", "", "BUSI root directory or manifest path"));
    t.push_back(int_key("data.image_size", 64, 16, 1024, "square image size in pixels"));
    t.push_back(int_key("data.benign", 168, 0, 1e6, "phantom count for benign"));
    t.push_back(int_key("data.malignant", 81, 0, 1e6, "phantom count for malignant"));
    t.push_back(int_key("data.normal", 51, 0, 1e6, "phantom count for normal"));
    t.push_back(real_key("data.train_fraction", "0.8", 0, 1, "per-class train fraction (floor)", true));
    t.push_back(real_key("data.speckle_scale", "1", 0, inf, "speckle correlation length (pixels)", true));
    t.push_back(real_key("data.lesion_intensity", "0.25", 0, 1, "lesion echo level"));

    t.push_back(int_key("diffusion.timesteps", diffusion::kDefaultTimesteps, 2, 100000, "T"));
    t.push_back(real_key("diffusion.beta_min", "0.0001", 0, 1, "first beta", true));
    t.push_back(real_key("diffusion.beta_max", "0.02", 0, 1, "last beta", true));
    t.push_back({{"diffusion.channels", "int-list", "16,32", "U-Net widths per resolution level"}, 1, 4096, false, {}});
    t.push_back(int_key("diffusion.patch", 2, 1, 8, "space-to-depth factor"));
    t.push_back(int_key("diffusion.cond_dim", 32, 1, 4096, "conditioning vector size"));
    t.push_back(int_key("diffusion.token_dim", 32, 1, 4096, "token embedding size"));
    t.push_back(int_key("diffusion.embed_dim", 64, 2, 4096, "time/condition embedding size (even)"));
    t.push_back(int_key("diffusion.groups", 4, 1, 64, "preferred group-norm group count"));
    t.push_back(int_key("diffusion.pretrain_epochs", 100, 0, 1e6, "base denoiser epochs (all parameters)"));
    t.push_back(real_key("diffusion.learning_rate", "0.0001", 0, inf, "base denoiser learning rate", true));
    t.push_back(int_key("diffusion.batch_size", 16, 1, 1e6, "base denoiser batch size"));
    t.push_back(real_key("diffusion.cond_dropout", "0", 0, 1, "probability of a null condition in training"));

    t.push_back(int_key("lora.rank", adapters::kDefaultLoraRank, 1, 4096, "adapter rank"));
    t.push_back(real_key("lora.alpha", "4", 0, inf, "adapter alpha", true));
    t.push_back(int_key("lora.epochs", 30, 0, 1e6, "LoRA fine-tuning epochs"));
    t.push_back(real_key("lora.learning_rate", "0.0001", 0, inf, "LoRA learning rate", true));
    t.push_back(int_key("lora.batch_size", 16, 1, 1e6, "LoRA batch size"));

    t.push_back(string_key("ti.token", std::string(data::kDefaultToken), "pseudo-word learned by textual inversion"));
    t.push_back(string_key("ti.init", "image", "vocabulary word or \"mean\" used to initialize the token"));
    t.push_back(int_key("ti.vectors", 1, 1, 64, "embedding rows for the token"));
    t.push_back(int_key("ti.steps", 500, 0, 1e7, "textual inversion steps"));
    t.push_back(real_key("ti.learning_rate", "0.005", 0, inf, "textual inversion learning rate", true));
    t.push_back(int_key("ti.batch_size", 4, 1, 1e6, "textual inversion batch size"));

    t.push_back(real_key("generate.strength", "0.3", 0, 1, "img2img denoising strength"));
    t.push_back(int_key("generate.steps", 50, 1, 100000, "DDIM steps for text2img"));
    t.push_back(real_key("generate.guidance", "1", 0, inf, "classifier-free guidance scale (1 = off)"));
    t.push_back(int_key("generate.target_per_class", 0, 0, 1e7, "train images per class after augmentation (0 = majority)"));

    t.push_back(real_key("classifier.learning_rate", "0.0001", 0, inf, "Adam learning rate", true));
    t.push_back(int_key("classifier.batch_size", 16, 1, 1e6, "batch size"));
    t.push_back(int_key("classifier.epochs", 30, 0, 1e6, "epochs"));
    t.push_back(real_key("classifier.flip_probability", "0.5", 0, 1, "horizontal flip probability"));
    t.push_back(int_key("classifier.width", 8, 1, 1024, "first-stage channel width"));

    t.push_back(string_key("eval.extractor", "random-conv", "random-conv | classifier | file",
                           {"random-conv", "classifier", "file"}));
    t.push_back(int_key("eval.feature_width", 8, 1, 1024, "random-conv first-stage width (features = 8 x width)"));
    t.push_back(string_key("eval.feature_file", "", "precomputed feature file (eval.extractor = file)"));
    return t;
  }();
  return table;
}

const KeySpec* find_spec(std::string_view key) {
  for (const auto& s : specs())
    if (s.info.key == key) return &s;
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

[[noreturn]] void fail(const KeySpec& spec, const std::string& what) {
  throw ConfigError("config key '" + spec.info.key + "': " + what);
}

void check_range(const KeySpec& spec, double v, const std::string& text) {
  const bool low = spec.min_exclusive ? !(v > spec.min) : !(v >= spec.min);
  if (low || !(v <= spec.max)) {
    std::ostringstream bound;
    bound << (spec.min_exclusive ? "(" : "[") << format_real(spec.min) << ", " << format_real(spec.max) << "]";
    fail(spec, "value " + text + " violates constraint " + bound.str());
  }
}

long long parse_int(const KeySpec& spec, std::string_view text) {
  long long v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    fail(spec, "expected an integer, got '" + std::string(text) + "'");
  }
  return v;
}

std::string canonical(const KeySpec& spec, std::string_view raw) {
  const std::string text = trim(raw);
  const std::string& type = spec.info.type;
  if (type == "string") {
    if (!spec.choices.empty()) {
      for (const auto& c : spec.choices)
        if (c == text) return text;
      std::string list;
      for (const auto& c : spec.choices) list += (list.empty() ? "" : ", ") + c;
      fail(spec, "value '" + text + "' is not one of {" + list + "}");
    }
    return text;
  }
  if (type == "uint") {
    std::uint64_t v = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() || text.empty()) {
      fail(spec, "expected a non-negative integer, got '" + text + "'");
    }
    return std::to_string(v);
  }
  if (type == "int") {
    const long long v = parse_int(spec, text);
    check_range(spec, static_cast<double>(v), text);
    return std::to_string(v);
  }
  if (type == "real") {
    double v = 0.0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() || text.empty()) {
      fail(spec, "expected a real number, got '" + text + "'");
    }
    check_range(spec, v, text);
    return format_real(v);
  }
  // int-list
  std::string out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    const long long v = parse_int(spec, t);
    check_range(spec, static_cast<double>(v), t);
    out += (out.empty() ? "" : ",") + std::to_string(v);
  }
  if (out.empty()) fail(spec, "expected a comma-separated list of integers");
  return out;
}

int as_int(const ConfigTree& t, std::string_view key) { return std::stoi(t.get(key)); }
double as_real(const ConfigTree& t, std::string_view key) { return std::stod(t.get(key)); }

}  // namespace

const std::vector<KeyInfo>& schema() {
  static const std::vector<KeyInfo> infos = [] {
    std::vector<KeyInfo> out;
    for (const auto& s : specs()) out.push_back(s.info);
    return out;
  }();
  return infos;
}

ConfigTree::ConfigTree() {
  for (const auto& s : specs()) values_[s.info.key] = canonical(s, s.info.default_value);
}

void ConfigTree::set(std::string_view key, std::string_view value) {
  const KeySpec* spec = find_spec(key);
  if (!spec) throw ConfigError("unknown config key '" + std::string(key) + "'");
  values_[spec->info.key] = canonical(*spec, value);
}

const std::string& ConfigTree::get(std::string_view key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  return it->second;
}

std::string ConfigTree::echo() const {
  std::string out;
  std::string section;
  for (const auto& s : specs()) {
    const auto dot = s.info.key.find('.');
    const std::string sec = dot == std::string::npos ? std::string() : s.info.key.substr(0, dot);
    if (sec != section) {
      out += "\n";
      section = sec;
    }
    out += s.info.key + " = " + get(s.info.key) + "\n";
  }
  return out;
}

ConfigTree parse_config_text(std::string_view text, std::string_view origin) {
  ConfigTree tree;
  std::map<std::string, int, std::less<>> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = std::string(origin) + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    if (auto [it, inserted] = seen.emplace(key, line_no); !inserted) {
      throw ConfigError(where + "key '" + key + "' repeats line " + std::to_string(it->second));
    }
    try {
      tree.set(key, std::string_view(body).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  to_experiment(tree);
  return tree;
}

ConfigTree parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

ExperimentConfig to_experiment(const ConfigTree& t) {
  ExperimentConfig c;
  c.tree = t;
  c.seed = std::stoull(t.get("seed"));
  c.threads = as_int(t, "threads");

  c.data.source = t.get("data.source");
  c.data.root = t.get("data.root");
  c.data.image_size = as_int(t, "data.image_size");
  c.data.counts = {as_int(t, "data.benign"), as_int(t, "data.malignant"), as_int(t, "data.normal")};
  c.data.train_fraction = as_real(t, "data.train_fraction");
  c.data.phantom.image_size = c.data.image_size;
  c.data.phantom.speckle_scale = as_real(t, "data.speckle_scale");
  c.data.phantom.lesion_intensity = as_real(t, "data.lesion_intensity");
  c.data.phantom.seed = derive_seed(c.seed, "phantoms");
  if (c.data.source != "phantom" && c.data.root.empty()) {
    throw ConfigError("config key 'data.root' is required when data.source = " + c.data.source);
  }
  if (!(c.data.train_fraction < 1.0)) throw ConfigError("config key 'data.train_fraction' must be < 1");

  auto& d = c.diffusion;
  d.timesteps = as_int(t, "diffusion.timesteps");
  d.beta_min = as_real(t, "diffusion.beta_min");
  d.beta_max = as_real(t, "diffusion.beta_max");
  if (d.beta_min > d.beta_max) throw ConfigError("config keys 'diffusion.beta_min' <= 'diffusion.beta_max' violated");
  if (!(d.beta_max < 1.0)) throw ConfigError("config key 'diffusion.beta_max' must be < 1");
  d.unet.image_size = c.data.image_size;
  d.unet.patch = as_int(t, "diffusion.patch");
  d.unet.channels.clear();
  std::stringstream ss(t.get("diffusion.channels"));
  std::string item;
  while (std::getline(ss, item, ',')) d.unet.channels.push_back(std::stoi(item));
  d.unet.cond_dim = as_int(t, "diffusion.cond_dim");
  d.unet.embed_dim = as_int(t, "diffusion.embed_dim");
  d.unet.groups = as_int(t, "diffusion.groups");
  d.encoder.token_dim = as_int(t, "diffusion.token_dim");
  d.encoder.cond_dim = d.unet.cond_dim;
  d.pretrain_epochs = as_int(t, "diffusion.pretrain_epochs");
  d.learning_rate = as_real(t, "diffusion.learning_rate");
  d.batch_size = as_int(t, "diffusion.batch_size");
  d.cond_dropout = as_real(t, "diffusion.cond_dropout");
  try {
    d.unet.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("diffusion architecture: ") + e.what());
  }

  c.lora.rank = as_int(t, "lora.rank");
  c.lora.alpha = as_real(t, "lora.alpha");
  c.lora.epochs = as_int(t, "lora.epochs");
  c.lora.learning_rate = as_real(t, "lora.learning_rate");
  c.lora.batch_size = as_int(t, "lora.batch_size");

  c.ti.token = t.get("ti.token");
  if (c.ti.token.empty() || c.ti.token.find_first_of(" \t") != std::string::npos) {
    throw ConfigError("config key 'ti.token' must be a single non-empty word");
  }
  c.ti.init_source = t.get("ti.init");
  c.ti.vectors = as_int(t, "ti.vectors");
  c.ti.train.steps = as_int(t, "ti.steps");
  c.ti.train.learning_rate = as_real(t, "ti.learning_rate");
  c.ti.train.batch_size = as_int(t, "ti.batch_size");
  c.ti.train.seed = derive_seed(c.seed, "textual-inversion");

  c.generate.strength = as_real(t, "generate.strength");
  c.generate.steps = as_int(t, "generate.steps");
  c.generate.guidance = as_real(t, "generate.guidance");
  c.generate.target_per_class = as_int(t, "generate.target_per_class");
  if (c.generate.steps > d.timesteps) {
    throw ConfigError("config key 'generate.steps' must not exceed diffusion.timesteps");
  }

  c.classifier.learning_rate = as_real(t, "classifier.learning_rate");
  c.classifier.batch_size = as_int(t, "classifier.batch_size");
  c.classifier.epochs = as_int(t, "classifier.epochs");
  c.classifier.flip_probability = as_real(t, "classifier.flip_probability");
  c.classifier.width = as_int(t, "classifier.width");
  c.classifier.seed = derive_seed(c.seed, "classifier");
  if (c.data.image_size % 8 != 0) throw ConfigError("config key 'data.image_size' must be a multiple of 8");

  c.eval.extractor = t.get("eval.extractor");
  c.eval.feature_width = as_int(t, "eval.feature_width");
  c.eval.feature_file = t.get("eval.feature_file");
  if (c.eval.extractor == "file" && c.eval.feature_file.empty()) {
    throw ConfigError("config key 'eval.feature_file' is required when eval.extractor = file");
  }
  return c;
}

}  // namespace busaug::config
