// Shared fixtures for the unit tests.

#pragma once

#include <filesystem>
#include <string>

#include "busaug/data.hpp"
#include "busaug/diffusion.hpp"
#include "busaug/rng.hpp"
#include "busaug/text_encoder.hpp"

namespace busaug::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(fnv1a(tag) ^ static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
    path_ = std::filesystem::temp_directory_path() / ("busaug-" + tag + "-" + std::to_string(rng.next_u64() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline Image random_image(int size, Rng& rng) {
  Image im(size, size);
  for (double& p : im.pixels) p = rng.uniform(-1.0, 1.0);
  return im;
}

inline nn::Vector random_vector(int n, Rng& rng) {
  nn::Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

/// U-Net small enough for finite-difference checks (under 500 scalars).
inline diffusion::UNetConfig tiny_unet() {
  diffusion::UNetConfig c;
  c.image_size = 8;
  c.patch = 1;
  c.channels = {2};
  c.cond_dim = 4;
  c.embed_dim = 2;
  c.groups = 1;
  return c;
}

/// Small but realistic U-Net for sampler and training checks.
inline diffusion::UNetConfig small_unet(int image_size = 16) {
  diffusion::UNetConfig c;
  c.image_size = image_size;
  c.patch = 2;
  c.channels = {8, 16};
  c.cond_dim = 8;
  c.embed_dim = 16;
  c.groups = 4;
  return c;
}

inline adapters::PromptEncoder small_encoder(int token_dim = 8, int cond_dim = 8, std::uint64_t seed = 3) {
  return adapters::PromptEncoder(adapters::PromptEncoder::prompt_vocabulary(), {token_dim, cond_dim}, seed);
}

/// Returns its input as the noise estimate.
class IdentityEpsilon : public diffusion::EpsilonModel {
 public:
  explicit IdentityEpsilon(int size, int cond_dim = 4) : size_(size), cond_dim_(cond_dim) {}
  Image predict_eps(const Image& x_t, int, const nn::Vector&) const override { return x_t; }
  int image_size() const override { return size_; }
  int cond_dim() const override { return cond_dim_; }

 private:
  int size_;
  int cond_dim_;
};

/// Predicts zero noise everywhere.
class ZeroEpsilon : public diffusion::EpsilonModel {
 public:
  explicit ZeroEpsilon(int size, int cond_dim = 4) : size_(size), cond_dim_(cond_dim) {}
  Image predict_eps(const Image& x_t, int, const nn::Vector&) const override { return Image(x_t.height, x_t.width); }
  int image_size() const override { return size_; }
  int cond_dim() const override { return cond_dim_; }

 private:
  int size_;
  int cond_dim_;
};

/// Manifest of in-memory phantoms with a split already assigned.
inline data::Manifest phantom_split(const data::ClassCounts& counts, int image_size, std::uint64_t seed,
                                    double fraction = 0.8) {
  data::PhantomConfig pc;
  pc.image_size = image_size;
  pc.seed = seed;
  return data::split_stratified(data::make_phantom_manifest(counts, pc), fraction, seed + 1);
}

/// Manifest of constant in-memory images with the given train and val counts.
inline data::Manifest blank_split(const data::ClassCounts& train, const data::ClassCounts& val, int size) {
  data::Manifest m;
  m.image_size = size;
  for (data::ClassLabel label : data::kAllLabels)
    for (data::Split split : {data::Split::kTrain, data::Split::kVal}) {
      const int n = (split == data::Split::kTrain ? train : val)[data::index_of(label)];
      for (int i = 0; i < n; ++i) {
        data::Sample s;
        s.path = std::string(data::to_string(label)) + "_" + std::string(data::to_string(split)) + "_" +
                 std::to_string(i) + ".png";
        s.image = Image(size, size, -0.5);
        s.label = label;
        s.split = split;
        s.prompt = data::prompt_for_label(label);
        m.samples.push_back(s);
      }
    }
  return m;
}

}  // namespace busaug::testing
