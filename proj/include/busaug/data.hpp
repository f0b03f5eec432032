// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "busaug/image.hpp"

namespace busaug::data {

enum class ClassLabel : int { kBenign = 0, kMalignant = 1, kNormal = 2 };

inline constexpr int kNumClasses = 3;
inline constexpr std::array<ClassLabel, kNumClasses> kAllLabels = {ClassLabel::kBenign, ClassLabel::kMalignant,
                                                                    ClassLabel::kNormal};

std::string_view to_string(ClassLabel label);
/// Throws DataError for anything but benign/malignant/normal.
ClassLabel parse_label(std::string_view text);
inline int index_of(ClassLabel label) { return static_cast<int>(label); }

enum class Split { kUnassigned, kTrain, kVal };
std::string_view to_string(Split split);

/// Per-class counts indexed by ClassLabel.
using ClassCounts = std::array<int, kNumClasses>;

struct Sample {
  /// File path; relative paths resolve against the owning manifest's base directory.
  std::string path;
  /// Decoded pixels, when the sample lives in memory.
  std::optional<Image> image;
  ClassLabel label = ClassLabel::kBenign;
  Split split = Split::kUnassigned;
  std::string prompt;
  bool synthetic = false;
  std::optional<std::uint64_t> seed;
};

struct Manifest {
  std::vector<Sample> samples;
  int image_size = 0;
  std::string source;
  std::uint64_t creation_seed = 0;
  std::vector<std::string> warnings;
  std::filesystem::path base_dir;

  ClassCounts counts() const;
  ClassCounts counts(Split split) const;
  /// Returns the in-memory image or reads it from disk.
  Image load_image(std::size_t index) const;
  std::filesystem::path resolve(const Sample& s) const;
  /// Subset with only the given split, preserving order.
  Manifest filtered(Split split) const;
};

// Prompts -----------------------------------------------------------------------

inline constexpr std::string_view kDefaultToken = "<ultrasound>";

/// Radiology-style prompt for a label. With ti_mode, ti_token replaces the
/// word "ultrasound". Throws DataError when ti_mode is set without a token.
std::string prompt_for_label(ClassLabel label, bool ti_mode = false, std::string_view ti_token = {});

// Dataset operations ----------------------------------------------------------------

/// Ingests the public BUSI layout (benign/ malignant/ normal/ folders of PNGs),
/// skipping "*_mask*" files. Images are resized to image_size and held in memory.
Manifest ingest_busi(const std::filesystem::path& root_dir, int image_size);

/// Per class: floor(count * train_fraction) samples go to train via a seeded
/// permutation, the remainder to val.
Manifest split_stratified(const Manifest& manifest, double train_fraction, std::uint64_t seed);

/// Synthetic samples needed per class to reach target_per_class.
ClassCounts balance_plan(const ClassCounts& train_counts, int target_per_class);

// Manifest files ----------------------------------------------------------------------

/// JSON Lines (one sample per line) plus a "<path>.meta.json" sidecar with
/// image_size, source, creation_seed and warnings. Image paths are written
/// relative to the manifest's directory.
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

/// Writes every in-memory image under dir/images/ as PNG, rewrites paths
/// relative to dir, and saves dir/manifest.jsonl.
Manifest save_dataset(const Manifest& manifest, const std::filesystem::path& dir);

/// 64-bit FNV digest of the serialized manifest (file names, labels, splits,
/// prompts, seeds, metadata) as a hex string. Independent of where the
/// manifest lives on disk.
std::string manifest_digest(const Manifest& manifest);

// Speckle phantoms -----------------------------------------------------------------------

struct PhantomConfig {
  int image_size = 64;
  /// Gaussian correlation length of the speckle field, in pixels.
  double speckle_scale = 1.0;
  /// Echo level of lesion interiors, relative to the ~0.57 tissue background.
  double lesion_intensity = 0.25;
  /// Benign ellipse semi-axis range, as a fraction of image size.
  double benign_axis_min = 0.11;
  double benign_axis_max = 0.22;
  int malignant_spikes_min = 5;
  int malignant_spikes_max = 9;
  double malignant_irregularity = 0.3;
  int normal_bands_min = 3;
  int normal_bands_max = 6;
  std::uint64_t seed = 0;

  /// Throws DataError naming the offending field.
  void validate() const;
};

struct Phantom {
  Image image;
  /// Ground-truth lesion support, row-major, 1 inside the lesion.
  std::vector<std::uint8_t> lesion_mask;
};

Phantom generate_phantom(ClassLabel label, const PhantomConfig& config, std::uint64_t seed);

/// Generates one phantom per seed, optionally on several threads. The result
/// is identical to sequential generation.
std::vector<Phantom> generate_phantoms(ClassLabel label, const PhantomConfig& config,
                                       const std::vector<std::uint64_t>& seeds, int threads = 1);

/// In-memory phantom dataset with the given per-class counts (split unassigned).
Manifest make_phantom_manifest(const ClassCounts& counts, const PhantomConfig& config, int threads = 1);

}  // namespace busaug::data
