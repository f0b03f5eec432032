// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numbers>
#include <sstream>

#include "busaug/error.hpp"
#include "busaug/rng.hpp"
#include "json.hpp"

namespace busaug::data {

using nlohmann::json;

std::string_view to_string(ClassLabel label) {
  switch (label) {
    case ClassLabel::kBenign:
      return "benign";
    case ClassLabel::kMalignant:
      return "malignant";
    case ClassLabel::kNormal:
      return "normal";
  }
  return "?";
}

ClassLabel parse_label(std::string_view text) {
  for (ClassLabel l : kAllLabels)
    if (to_string(l) == text) return l;
  throw DataError("unknown class label '" + std::string(text) + "' (expected benign, malignant or normal)");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kUnassigned:
      break;
  }
  return "unassigned";
}

namespace {

Split parse_split(const json& value) {
  if (value.is_null()) return Split::kUnassigned;
  const auto s = value.get<std::string>();
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "unassigned") return Split::kUnassigned;
  throw DataError("unknown split '" + s + "'");
}

}  // namespace

ClassCounts Manifest::counts() const {
  ClassCounts c{};
  for (const Sample& s : samples) ++c[index_of(s.label)];
  return c;
}

ClassCounts Manifest::counts(Split split) const {
  ClassCounts c{};
  for (const Sample& s : samples)
    if (s.split == split) ++c[index_of(s.label)];
  return c;
}

std::filesystem::path Manifest::resolve(const Sample& s) const {
  std::filesystem::path p(s.path);
  if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
  return p;
}

Image Manifest::load_image(std::size_t index) const {
  const Sample& s = samples.at(index);
  if (s.image) return *s.image;
  Image img = read_png(resolve(s));
  if (image_size > 0 && (img.height != image_size || img.width != image_size)) {
    throw DataError("image '" + resolve(s).string() + "' is " + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + ", manifest expects " + std::to_string(image_size));
  }
  return img;
}

Manifest Manifest::filtered(Split split) const {
  Manifest out = *this;
  out.samples.clear();
  for (const Sample& s : samples)
    if (s.split == split) out.samples.push_back(s);
  return out;
}

std::string prompt_for_label(ClassLabel label, bool ti_mode, std::string_view ti_token) {
  if (ti_mode && ti_token.empty()) throw DataError("textual-inversion prompts need a non-empty token");
  const std::string head = ti_mode ? std::string(ti_token) : std::string("ultrasound");
  switch (label) {
    case ClassLabel::kBenign:
      return head + " image of a benign breast lesion";
    case ClassLabel::kMalignant:
      return head + " image of a malignant breast lesion";
    case ClassLabel::kNormal:
      return head + " image of normal breast tissue";
  }
  return {};
}

// BUSI ---------------------------------------------------------------------------------

Manifest ingest_busi(const std::filesystem::path& root_dir, int image_size) {
  namespace fs = std::filesystem;
  if (image_size < 1) throw DataError("image size must be positive");
  Manifest m;
  m.image_size = image_size;
  m.source = "busi:" + root_dir.string();
  for (ClassLabel label : kAllLabels) {
    const fs::path dir = root_dir / std::string(to_string(label));
    if (!fs::is_directory(dir)) {
      throw DataError("BUSI root '" + root_dir.string() + "' is missing the '" + std::string(to_string(label)) +
                      "' class directory");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      std::string ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (ext != ".png") continue;
      if (entry.path().stem().string().find("_mask") != std::string::npos) continue;
      files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) m.warnings.push_back("class '" + std::string(to_string(label)) + "' has no images");
    for (const fs::path& f : files) {
      Sample s;
      s.path = f.string();
      s.image = quantize(resize(read_png(f), image_size, image_size));
      s.label = label;
      s.prompt = prompt_for_label(label);
      m.samples.push_back(std::move(s));
    }
  }
  return m;
}

Manifest split_stratified(const Manifest& manifest, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw DataError("train fraction must lie strictly between 0 and 1");
  }
  Manifest out = manifest;
  for (ClassLabel label : kAllLabels) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < out.samples.size(); ++i)
      if (out.samples[i].label == label) members.push_back(i);
    if (members.empty()) continue;
    if (members.size() < 2) {
      throw DataError("class '" + std::string(to_string(label)) + "' has fewer than 2 samples; cannot split");
    }
    // The small epsilon keeps exact products such as 210 * 0.8 from rounding down.
    const auto n_train = static_cast<std::size_t>(std::floor(members.size() * train_fraction + 1e-9));
    Rng rng(derive_seed(seed, to_string(label)));
    const auto order = rng.permutation(members.size());
    for (std::size_t k = 0; k < order.size(); ++k)
      out.samples[members[order[k]]].split = k < n_train ? Split::kTrain : Split::kVal;
  }
  return out;
}

ClassCounts balance_plan(const ClassCounts& train_counts, int target_per_class) {
  ClassCounts plan{};
  for (int c = 0; c < kNumClasses; ++c) {
    if (train_counts[c] > target_per_class) {
      throw DataError("target " + std::to_string(target_per_class) + " is below the " +
                      std::string(to_string(static_cast<ClassLabel>(c))) + " count " + std::to_string(train_counts[c]) +
                      "; balancing never removes real samples");
    }
    plan[c] = target_per_class - train_counts[c];
  }
  return plan;
}

// Manifest files --------------------------------------------------------------------------

namespace {

json sample_to_json(const Sample& s) {
  json j;
  j["path"] = s.path;
  j["label"] = to_string(s.label);
  j["split"] = s.split == Split::kUnassigned ? json(nullptr) : json(to_string(s.split));
  j["prompt"] = s.prompt;
  j["synthetic"] = s.synthetic;
  j["seed"] = s.seed ? json(*s.seed) : json(nullptr);
  return j;
}

json meta_to_json(const Manifest& m) {
  json j;
  j["image_size"] = m.image_size;
  j["source"] = m.source;
  j["creation_seed"] = m.creation_seed;
  j["warnings"] = m.warnings;
  return j;
}

}  // namespace

namespace {

/// Path of a sample's image relative to the directory a manifest is written to.
std::string relative_to(const Manifest& manifest, const Sample& s, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (s.path.empty()) return s.path;
  const fs::path target = fs::absolute(manifest.resolve(s)).lexically_normal();
  const fs::path rel = target.lexically_relative(fs::absolute(dir).lexically_normal());
  return rel.empty() ? target.generic_string() : rel.generic_string();
}

}  // namespace

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write manifest '" + path.string() + "'");
  const auto dir = path.parent_path();
  for (Sample s : manifest.samples) {
    s.path = relative_to(manifest, s, dir);
    out << sample_to_json(s).dump() << '\n';
  }
  std::ofstream meta(path.string() + ".meta.json", std::ios::binary);
  meta << meta_to_json(manifest).dump(2) << '\n';
  if (!out || !meta) throw RuntimeError("write failed for manifest '" + path.string() + "'");
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Sample s;
      s.path = j.at("path").get<std::string>();
      s.label = parse_label(j.at("label").get<std::string>());
      s.split = parse_split(j.at("split"));
      s.prompt = j.at("prompt").get<std::string>();
      s.synthetic = j.at("synthetic").get<bool>();
      if (!j.at("seed").is_null()) s.seed = j.at("seed").get<std::uint64_t>();
      if (s.synthetic && !s.seed) throw DataError("synthetic sample without a seed");
      m.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError("manifest '" + path.string() + "' line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("manifest '" + path.string() + "' line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::ifstream meta_in(path.string() + ".meta.json");
  if (meta_in) {
    const json meta = json::parse(meta_in);
    m.image_size = meta.value("image_size", 0);
    m.source = meta.value("source", std::string());
    m.creation_seed = meta.value("creation_seed", std::uint64_t{0});
    m.warnings = meta.value("warnings", std::vector<std::string>{});
  }
  return m;
}

Manifest save_dataset(const Manifest& manifest, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  Manifest out = manifest;
  out.base_dir = dir;
  std::array<int, kNumClasses> next{};
  for (Sample& s : out.samples) {
    const int idx = next[index_of(s.label)]++;
    if (!s.image) {
      s.path = fs::absolute(manifest.resolve(s)).lexically_normal().string();
      continue;
    }
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%05d.png", std::string(to_string(s.label)).c_str(), idx);
    const fs::path rel = fs::path("images") / name;
    write_png(dir / rel, *s.image);
    s.path = rel.string();
  }
  write_manifest(dir / "manifest.jsonl", out);
  return out;
}

std::string manifest_digest(const Manifest& manifest) {
  std::string text = meta_to_json(manifest).dump();
  for (Sample s : manifest.samples) {
    s.path = std::filesystem::path(s.path).filename().string();
    text += sample_to_json(s).dump();
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return hex;
}

// Phantoms -----------------------------------------------------------------------------------

void PhantomConfig::validate() const {
  auto fail = [](const std::string& what) { throw DataError("phantom config: " + what); };
  if (image_size < 16) fail("image_size must be >= 16");
  if (!(speckle_scale > 0.0)) fail("speckle_scale must be positive");
  if (!(lesion_intensity >= 0.0 && lesion_intensity <= 1.0)) fail("lesion_intensity must lie in [0, 1]");
  if (!(benign_axis_min > 0.0 && benign_axis_min <= benign_axis_max && benign_axis_max < 0.5)) {
    fail("benign axis range must satisfy 0 < min <= max < 0.5");
  }
  if (malignant_spikes_min < 0 || malignant_spikes_min > malignant_spikes_max) fail("malignant spike range is empty");
  if (!(malignant_irregularity >= 0.0 && malignant_irregularity < 1.0)) {
    fail("malignant_irregularity must lie in [0, 1)");
  }
  if (normal_bands_min < 1 || normal_bands_min > normal_bands_max) fail("normal band range is empty");
}

namespace {

constexpr double kTissueLevelMin = 0.52;
constexpr double kTissueLevelMax = 0.62;
constexpr double kDisplayGain = 1.6;

/// Separable Gaussian blur with zero padding.
std::vector<double> gaussian_blur(const std::vector<double>& field, int size, double sigma,
                                  double* kernel_energy) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  double energy1d = 0.0;
  for (double& k : kernel) {
    k /= sum;
    energy1d += k * k;
  }
  *kernel_energy = energy1d * energy1d;
  std::vector<double> tmp(field.size(), 0.0);
  std::vector<double> out(field.size(), 0.0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < size) acc += kernel[i + radius] * field[y * size + xx];
      }
      tmp[y * size + x] = acc;
    }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < size) acc += kernel[i + radius] * tmp[yy * size + x];
      }
      out[y * size + x] = acc;
    }
  return out;
}

/// Unit-mean Rayleigh speckle: magnitude of a correlated complex Gaussian field.
std::vector<double> speckle_field(int size, double scale, Rng& rng) {
  std::vector<double> re(static_cast<std::size_t>(size) * size);
  std::vector<double> im(re.size());
  for (double& v : re) v = rng.normal();
  for (double& v : im) v = rng.normal();
  double energy = 1.0;
  re = gaussian_blur(re, size, scale, &energy);
  im = gaussian_blur(im, size, scale, &energy);
  // Interior pixels have per-component variance equal to the kernel energy;
  // E|z| for a Rayleigh variable is sigma * sqrt(pi / 2).
  const double mean_magnitude = std::sqrt(energy) * std::sqrt(std::numbers::pi / 2.0);
  std::vector<double> out(re.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::hypot(re[i], im[i]) / mean_magnitude;
  return out;
}

/// Smooth random texture in [0, 1] built from a few low-frequency cosines.
double smooth_texture(double x, double y, const std::array<std::array<double, 4>, 4>& waves) {
  double v = 0.0;
  for (const auto& w : waves) v += std::cos(w[0] * x + w[1] * y + w[2]) * w[3];
  return 0.5 + 0.5 * std::clamp(v, -1.0, 1.0);
}

}  // namespace

Phantom generate_phantom(ClassLabel label, const PhantomConfig& config, std::uint64_t seed) {
  config.validate();
  const int n = config.image_size;
  const double s = n;
  Rng rng(derive_seed(derive_seed(config.seed, seed), to_string(label)));

  std::vector<double> echo(static_cast<std::size_t>(n) * n);
  std::vector<std::uint8_t> mask(echo.size(), 0);

  // Tissue background: skin line, depth bands (strong only for normal tissue).
  const double level = rng.uniform(kTissueLevelMin, kTissueLevelMax);
  const double skin = rng.uniform(0.05, 0.09) * s;
  const bool is_normal = label == ClassLabel::kNormal;
  const int bands = is_normal ? static_cast<int>(rng.uniform_int(config.normal_bands_min, config.normal_bands_max))
                              : static_cast<int>(rng.uniform_int(1, 2));
  const double band_amp = is_normal ? rng.uniform(0.14, 0.2) : 0.04;
  const double band_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double tilt = rng.uniform(-0.12, 0.12);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double depth = y + tilt * (x - s / 2);
      double e = level + band_amp * std::sin(2.0 * std::numbers::pi * bands * depth / s + band_phase);
      if (y < skin) e = 0.85;
      echo[y * n + x] = e;
    }

  const double cx = rng.uniform(0.38, 0.62) * s;
  const double cy = rng.uniform(0.42, 0.62) * s;
  if (label == ClassLabel::kBenign) {
    const double a = rng.uniform(config.benign_axis_min, config.benign_axis_max) * s;
    const double b = rng.uniform(config.benign_axis_min, config.benign_axis_max) * s;
    const double angle = rng.uniform(-std::numbers::pi / 4, std::numbers::pi / 4);
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);
    const double softness = 1.2;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double u = ca * (x + 0.5 - cx) + sa * (y + 0.5 - cy);
        const double v = -sa * (x + 0.5 - cx) + ca * (y + 0.5 - cy);
        const double r = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
        const double w = 1.0 / (1.0 + std::exp(-(1.0 - r) * std::min(a, b) / softness));
        double& e = echo[y * n + x];
        e = (1.0 - w) * e + w * config.lesion_intensity;
        if (r < 1.0) mask[y * n + x] = 1;
      }
  } else if (label == ClassLabel::kMalignant) {
    const double r0 = rng.uniform(0.11, 0.17) * s;
    std::array<double, 4> harm_amp{};
    std::array<double, 4> harm_phase{};
    for (int h = 0; h < 4; ++h) {
      harm_amp[h] = rng.uniform(-1.0, 1.0) * config.malignant_irregularity / (h + 2);
      harm_phase[h] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    const int spikes = static_cast<int>(rng.uniform_int(config.malignant_spikes_min, config.malignant_spikes_max));
    std::vector<std::pair<double, double>> spike_params;  // angle, length
    for (int k = 0; k < spikes; ++k)
      spike_params.emplace_back(rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.3, 0.7) * r0);
    std::array<std::array<double, 4>, 4> waves{};
    for (auto& w : waves) {
      w = {rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(0.0, 2.0 * std::numbers::pi),
           rng.uniform(0.2, 0.45)};
    }
    auto boundary = [&](double theta) {
      double r = 1.0;
      for (int h = 0; h < 4; ++h) r += harm_amp[h] * std::cos((h + 2) * theta + harm_phase[h]);
      r *= r0;
      for (const auto& [phi, len] : spike_params) {
        double d = std::remainder(theta - phi, 2.0 * std::numbers::pi);
        r += len * std::exp(-(d / 0.1) * (d / 0.1));
      }
      return r;
    };
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double dx = x + 0.5 - cx;
        const double dy = y + 0.5 - cy;
        const double dist = std::hypot(dx, dy);
        const double edge = boundary(std::atan2(dy, dx));
        const double w = std::clamp(edge - dist + 0.5, 0.0, 1.0);
        double& e = echo[y * n + x];
        // Posterior acoustic shadow beneath the mass.
        if (dy > 0.5 * r0 && std::abs(dx) < 0.8 * r0) e *= 0.78;
        const double inside = config.lesion_intensity + 0.3 * smooth_texture(x, y, waves);
        e = (1.0 - w) * e + w * inside;
        if (dist < edge) mask[y * n + x] = 1;
      }
  }

  const auto speckle = speckle_field(n, config.speckle_scale, rng);
  Phantom out;
  out.image = Image(n, n);
  for (std::size_t i = 0; i < echo.size(); ++i) {
    const double display = 1.0 - std::exp(-kDisplayGain * std::max(0.0, echo[i]) * speckle[i]);
    out.image.pixels[i] = 2.0 * display - 1.0;
  }
  out.image = quantize(out.image);
  out.lesion_mask = std::move(mask);
  return out;
}

std::vector<Phantom> generate_phantoms(ClassLabel label, const PhantomConfig& config,
                                       const std::vector<std::uint64_t>& seeds, int threads) {
  std::vector<Phantom> out(seeds.size());
  if (threads <= 1 || seeds.size() < 2) {
    for (std::size_t i = 0; i < seeds.size(); ++i) out[i] = generate_phantom(label, config, seeds[i]);
    return out;
  }
  std::vector<std::future<void>> jobs;
  const std::size_t workers = std::min<std::size_t>(threads, seeds.size());
  for (std::size_t w = 0; w < workers; ++w) {
    jobs.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < seeds.size(); i += workers) out[i] = generate_phantom(label, config, seeds[i]);
    }));
  }
  for (auto& j : jobs) j.get();
  return out;
}

Manifest make_phantom_manifest(const ClassCounts& counts, const PhantomConfig& config, int threads) {
  config.validate();
  Manifest m;
  m.image_size = config.image_size;
  m.source = "phantom";
  m.creation_seed = config.seed;
  for (ClassLabel label : kAllLabels) {
    std::vector<std::uint64_t> seeds(counts[index_of(label)]);
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
    auto phantoms = generate_phantoms(label, config, seeds, threads);
    for (auto& p : phantoms) {
      Sample s;
      s.image = std::move(p.image);
      s.label = label;
      s.prompt = prompt_for_label(label);
      m.samples.push_back(std::move(s));
    }
  }
  return m;
}

}  // namespace busaug::data
