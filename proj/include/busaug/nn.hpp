// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Minimal layer toolkit with explicit forward/backward passes.
//
// Layers are descriptors: they hold parameter *names* and resolve them in a
// ParameterStore on every call, so models are plain copyable values. Every
// trainable weight is a 2-D matrix (convolutions are dense maps over im2col
// patches), which makes every weight a valid LoRA attachment point.

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "busaug/rng.hpp"

namespace busaug::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Parameter {
  Matrix value;
  Matrix grad;
  /// Set when a LoRA adapter owns the update path for this weight.
  bool frozen = false;
  /// Toggled by training loops; backward skips gradient accumulation when false.
  bool requires_grad = true;
};

using ParameterSelector = std::function<bool(std::string_view)>;

class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter, std::less<>>;

  Parameter& add(const std::string& name, Matrix init);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const { return params_.find(name) != params_.end(); }
  void remove(std::string_view name);

  std::vector<std::string> names() const;
  std::size_t scalar_count() const;
  void zero_grad();

  /// Sets requires_grad = selector(name) && !frozen on every parameter.
  void select_trainable(const ParameterSelector& selector);
  void require_all_grads();

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  /// True when both stores hold the same names with byte-identical values.
  bool bitwise_equal(const ParameterStore& other) const;

 private:
  Map params_;
};

/// Channels x (height*width) activations; pixel index p = y * width + x.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  Matrix values;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), values(Matrix::Zero(c, h * w)) {}
  int pixels() const { return height * width; }
};

// ---------------------------------------------------------------------------

struct LoraSpec {
  int rank = 0;
  double alpha = 0.0;
  double scale() const { return alpha / rank; }
};

/// y = W x + b with an optional low-rank delta (alpha/r) B A folded into W.
class DenseMap {
 public:
  DenseMap() = default;
  DenseMap(std::string name, int in, int out, bool bias = true);

  const std::string& name() const { return name_; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }
  const std::string& weight_name() const { return weight_name_; }
  std::string bias_name() const { return name_ + ".bias"; }
  std::string lora_a_name() const { return name_ + ".lora_A"; }
  std::string lora_b_name() const { return name_ + ".lora_B"; }

  /// Adds weight (scaled Gaussian) and zero bias to the store.
  void declare(ParameterStore& store, Rng& rng, double gain = 1.0) const;

  /// Dense W + (alpha/r) B A, or W when no adapter is attached.
  Matrix effective_weight(const ParameterStore& store) const;

  /// x: in x n columns.
  Matrix forward(const ParameterStore& store, const Matrix& x) const;
  /// Accumulates parameter gradients; returns d loss / d x.
  Matrix backward(ParameterStore& store, const Matrix& x, const Matrix& grad_out) const;

  const std::optional<LoraSpec>& lora() const { return lora_; }
  void attach_lora(ParameterStore& store, int rank, double alpha, Rng& rng);
  /// Bakes the delta into W and drops the adapter tensors.
  void merge_lora(ParameterStore& store);
  /// Restores adapter bookkeeping for tensors already present in the store.
  void set_lora(const LoraSpec& spec) { lora_ = spec; }

 private:
  std::string name_;
  std::string weight_name_;
  int in_ = 0;
  int out_ = 0;
  bool bias_ = true;
  std::optional<LoraSpec> lora_;
};

struct ConvCache {
  Matrix cols;
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
};

/// Square-kernel convolution, zero padding kernel/2.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel = 3, int stride = 1, bool bias = true);

  DenseMap& map() { return map_; }
  const DenseMap& map() const { return map_; }
  void declare(ParameterStore& store, Rng& rng, double gain = 1.0) const { map_.declare(store, rng, gain); }

  FeatureMap forward(const ParameterStore& store, const FeatureMap& x, ConvCache* cache) const;
  FeatureMap backward(ParameterStore& store, const ConvCache& cache, const FeatureMap& grad_out) const;

  int out_size(int in) const { return (in + 2 * (kernel_ / 2) - kernel_) / stride_ + 1; }

 private:
  Matrix im2col(const FeatureMap& x, int out_h, int out_w) const;

  DenseMap map_;
  int in_channels_ = 0;
  int out_channels_ = 0;
  int kernel_ = 3;
  int stride_ = 1;
};

struct GroupNormCache {
  Matrix normalized;
  Vector inv_std;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(std::string name, int channels, int groups);

  void declare(ParameterStore& store) const;
  FeatureMap forward(const ParameterStore& store, const FeatureMap& x, GroupNormCache* cache) const;
  FeatureMap backward(ParameterStore& store, const GroupNormCache& cache, const FeatureMap& grad_out) const;

  static constexpr double kEpsilon = 1e-5;

 private:
  std::string name_;
  int channels_ = 0;
  int groups_ = 1;
};

/// Largest divisor of channels not exceeding preferred.
int group_count(int channels, int preferred);

// Elementwise activations -----------------------------------------------------

Matrix silu(const Matrix& x);
/// grad_out * silu'(x)
Matrix silu_backward(const Matrix& x, const Matrix& grad_out);
Matrix relu(const Matrix& x);
Matrix relu_backward(const Matrix& x, const Matrix& grad_out);

// Resampling / reshaping --------------------------------------------------------

FeatureMap avg_pool2(const FeatureMap& x);
FeatureMap avg_pool2_backward(const FeatureMap& grad_out, int in_height, int in_width);
FeatureMap upsample2(const FeatureMap& x);
FeatureMap upsample2_backward(const FeatureMap& grad_out);
/// Stacks channels of a above channels of b.
FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b);
/// Splits a gradient produced by concat_channels back into its parts.
std::pair<FeatureMap, FeatureMap> split_channels(const FeatureMap& g, int first_channels);
/// (C, H, W) -> (C*f*f, H/f, W/f) and its inverse.
FeatureMap space_to_depth(const FeatureMap& x, int factor);
FeatureMap depth_to_space(const FeatureMap& x, int factor);

/// Channel means over all pixels (C x 1).
Matrix global_avg_pool(const FeatureMap& x);

// Optimizer -----------------------------------------------------------------------

/// Adam with bias correction; updates parameters whose requires_grad is set.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  /// Applies one update using gradients scaled by grad_scale.
  void step(ParameterStore& store, double grad_scale = 1.0);
  /// Single-tensor variant for values that live outside a store.
  void step(const std::string& key, Matrix& value, const Matrix& grad);

  long steps() const { return t_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
    long t = 0;
  };
  void update(Moments& mom, Matrix& value, const Matrix& grad);

  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Restores requires_grad on every parameter when it goes out of scope.
class TrainableScope {
 public:
  TrainableScope(ParameterStore& store, const ParameterSelector& selector) : store_(store) {
    store_.select_trainable(selector);
  }
  ~TrainableScope() { store_.require_all_grads(); }
  TrainableScope(const TrainableScope&) = delete;
  TrainableScope& operator=(const TrainableScope&) = delete;

 private:
  ParameterStore& store_;
};

}  // namespace busaug::nn

namespace busaug::nn {

/// A model whose dense maps can carry LoRA adapters.
class LoraHost {
 public:
  virtual ~LoraHost() = default;
  virtual ParameterStore& store() = 0;
  virtual const ParameterStore& store() const = 0;
  /// Hierarchical names of every dense map (including convolution kernels).
  virtual std::vector<std::string> dense_map_names() const = 0;
  /// nullptr when no map has that name.
  virtual DenseMap* find_dense_map(std::string_view name) = 0;
  virtual const DenseMap* find_dense_map(std::string_view name) const = 0;
};

}  // namespace busaug::nn
