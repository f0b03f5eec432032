// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "busaug/data.hpp"
#include "busaug/image.hpp"
#include "busaug/nn.hpp"
#include "json.hpp"

namespace busaug::eval {

using nn::Matrix;
using nn::Vector;

// Feature extraction -------------------------------------------------------------------

/// Maps images to fixed-length feature vectors for FID.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual int dim() const = 0;
  virtual bool deterministic() const { return true; }
  /// Row i holds the features of images[i]. keys identify images for
  /// providers that look features up instead of computing them.
  virtual Matrix extract(const std::vector<Image>& images, const std::vector<std::string>& keys) const = 0;
};

/// Frozen convolutional network with seeded Gaussian weights: three strided
/// ReLU stages, then per-channel means and standard deviations of the last one.
class RandomConvExtractor : public FeatureExtractor {
 public:
  RandomConvExtractor(int input_size = 64, int width = 8, std::uint64_t seed = 0, int threads = 1);
  std::string name() const override;
  int dim() const override;
  Matrix extract(const std::vector<Image>& images, const std::vector<std::string>& keys) const override;
  Vector features(const Image& image) const;

 private:
  int input_size_;
  int width_;
  std::uint64_t seed_;
  int threads_;
  nn::ParameterStore store_;
  std::vector<nn::Conv2d> convs_;
};

/// Features read from a feature file (e.g. Inception-v3 pool features computed elsewhere).
class PrecomputedExtractor : public FeatureExtractor {
 public:
  explicit PrecomputedExtractor(const std::filesystem::path& path);
  std::string name() const override { return name_; }
  int dim() const override { return dim_; }
  /// Throws DataError naming the first key absent from the file.
  Matrix extract(const std::vector<Image>& images, const std::vector<std::string>& keys) const override;

 private:
  std::string name_;
  int dim_ = 0;
  std::map<std::string, Vector> table_;
};

/// Binary feature file: extractor name, dimension and one vector per key.
void write_feature_file(const std::filesystem::path& path, const std::string& extractor_name,
                        const std::vector<std::string>& keys, const Matrix& features);
struct FeatureFile {
  std::string extractor_name;
  int dim = 0;
  std::vector<std::string> keys;
  Matrix features;
};
FeatureFile read_feature_file(const std::filesystem::path& path);

// FID ----------------------------------------------------------------------------------------

struct FIDStats {
  Vector mu;
  Matrix sigma;
  long n = 0;
};

/// Column means and unbiased covariance (divisor n - 1), symmetrized.
FIDStats fid_stats(const Matrix& features);

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues in [-tol, 0) are clamped to zero, tol = 1e-6 * max(1, max|M|);
/// anything lower is an error.
Matrix matrix_sqrt_psd(const Matrix& m);

/// Frechet distance between two Gaussian fits.
double fid(const FIDStats& a, const FIDStats& b);

// Classifier ---------------------------------------------------------------------------------------

struct ClassifierConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  int epochs = 30;
  std::uint64_t seed = 0;
  double flip_probability = 0.5;
  /// Channel width of the first stage; doubles at each of the two downsamplings.
  int width = 8;
  void validate() const;
};

struct ClassifierTape;

/// Reduced residual CNN: strided stem, three residual stages separated by
/// strided convolutions, global average pooling and a 3-way linear head.
/// Inputs are normalized with the training set's pixel mean and std.
class ClassifierModel {
 public:
  ClassifierModel() = default;
  ClassifierModel(int image_size, int width, std::uint64_t seed);

  int image_size() const { return image_size_; }
  int width() const { return width_; }
  int feature_dim() const { return 4 * width_; }
  double input_mean() const { return mean_; }
  double input_std() const { return std_; }
  void set_normalization(double mean, double std);

  Vector logits(const Image& image, ClassifierTape* tape = nullptr) const;
  Vector predict_proba(const Image& image) const;
  /// Pooled activations feeding the head.
  Vector penultimate(const Image& image) const;
  void backward(const ClassifierTape& tape, const Vector& grad_logits);

  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

  void save(const std::filesystem::path& path) const;
  static ClassifierModel load(const std::filesystem::path& path);

 private:
  struct Stage {
    nn::Conv2d down;
    nn::GroupNorm down_norm;
    nn::Conv2d conv1;
    nn::GroupNorm norm1;
    nn::Conv2d conv2;
    nn::GroupNorm norm2;
  };
  void build();

  int image_size_ = 0;
  int width_ = 0;
  double mean_ = 0.0;
  double std_ = 1.0;
  nn::ParameterStore store_;
  std::vector<Stage> stages_;
  nn::DenseMap head_;
};

/// Penultimate-layer features of a trained classifier.
class ClassifierFeatureExtractor : public FeatureExtractor {
 public:
  explicit ClassifierFeatureExtractor(ClassifierModel model) : model_(std::move(model)) {}
  std::string name() const override { return "classifier-penultimate"; }
  int dim() const override { return model_.feature_dim(); }
  Matrix extract(const std::vector<Image>& images, const std::vector<std::string>& keys) const override;

 private:
  ClassifierModel model_;
};

Vector softmax(const Vector& logits);

/// Cross-entropy training on the train split with random horizontal flips.
/// Throws DataError when a class is missing from the train split.
ClassifierModel train_classifier(const data::Manifest& manifest, const ClassifierConfig& config);

// Metrics --------------------------------------------------------------------------------------------

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::optional<double> auc;
  int support = 0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double auc_roc_ovr_macro = 0.0;
  double ppv_macro = 0.0;
  double recall_macro = 0.0;
  std::optional<double> fid;
  std::array<ClassMetrics, data::kNumClasses> per_class{};
  std::array<std::array<int, data::kNumClasses>, data::kNumClasses> confusion{};  // [true][predicted]
  std::vector<std::string> flags;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Argmax predictions (ties to the lowest index), macro precision/recall/F1
/// and macro one-vs-rest AUC by trapezoidal ROC integration.
MetricsReport compute_metrics(const Matrix& probs, const std::vector<int>& labels);

/// Class-probability matrix of a classifier over the given split.
MetricsReport evaluate_classifier(const ClassifierModel& model, const data::Manifest& manifest,
                                  data::Split split = data::Split::kVal);

}  // namespace busaug::eval
