// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/nn.hpp"

#include <cmath>
#include <cstring>

#include "busaug/error.hpp"

namespace busaug::nn {

Parameter& ParameterStore::add(const std::string& name, Matrix init) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw RuntimeError("parameter '" + name + "' already exists");
  it->second.grad = Matrix::Zero(init.rows(), init.cols());
  it->second.value = std::move(init);
  return it->second;
}

Parameter& ParameterStore::get(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw RuntimeError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

const Parameter& ParameterStore::get(std::string_view name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw RuntimeError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

void ParameterStore::remove(std::string_view name) {
  auto it = params_.find(name);
  if (it != params_.end()) params_.erase(it);
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

void ParameterStore::select_trainable(const ParameterSelector& selector) {
  for (auto& [name, p] : params_) p.requires_grad = !p.frozen && selector(name);
}

void ParameterStore::require_all_grads() {
  for (auto& [_, p] : params_) p.requires_grad = true;
}

bool ParameterStore::bitwise_equal(const ParameterStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
    const Matrix& x = a->second.value;
    const Matrix& y = b->second.value;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), static_cast<std::size_t>(x.size()) * sizeof(double)) != 0) return false;
  }
  return true;
}

// DenseMap ---------------------------------------------------------------------

DenseMap::DenseMap(std::string name, int in, int out, bool bias)
    : name_(std::move(name)), weight_name_(name_ + ".weight"), in_(in), out_(out), bias_(bias) {}

void DenseMap::declare(ParameterStore& store, Rng& rng, double gain) const {
  Matrix w(out_, in_);
  const double stddev = gain / std::sqrt(static_cast<double>(in_));
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = stddev * rng.normal();
  store.add(weight_name_, std::move(w));
  if (bias_) store.add(bias_name(), Matrix::Zero(out_, 1));
}

Matrix DenseMap::effective_weight(const ParameterStore& store) const {
  const Matrix& w = store.get(weight_name_).value;
  if (!lora_) return w;
  const Matrix& a = store.get(lora_a_name()).value;
  const Matrix& b = store.get(lora_b_name()).value;
  return w + lora_->scale() * (b * a);
}

Matrix DenseMap::forward(const ParameterStore& store, const Matrix& x) const {
  Matrix y(out_, x.cols());
  if (lora_) {
    y.noalias() = effective_weight(store) * x;
  } else {
    y.noalias() = store.get(weight_name_).value * x;
  }
  if (bias_) y.colwise() += store.get(bias_name()).value.col(0);
  return y;
}

Matrix DenseMap::backward(ParameterStore& store, const Matrix& x, const Matrix& grad_out) const {
  Parameter& w = store.get(weight_name_);
  if (bias_) {
    Parameter& b = store.get(bias_name());
    if (b.requires_grad) b.grad.col(0) += grad_out.rowwise().sum();
  }
  if (!lora_) {
    if (w.requires_grad) w.grad.noalias() += grad_out * x.transpose();
    Matrix gx(in_, x.cols());
    gx.noalias() = w.value.transpose() * grad_out;
    return gx;
  }
  Parameter& a = store.get(lora_a_name());
  Parameter& b = store.get(lora_b_name());
  if (w.requires_grad || a.requires_grad || b.requires_grad) {
    Matrix gw(out_, in_);
    gw.noalias() = grad_out * x.transpose();
    const double s = lora_->scale();
    if (a.requires_grad) a.grad.noalias() += s * (b.value.transpose() * gw);
    if (b.requires_grad) b.grad.noalias() += s * (gw * a.value.transpose());
    if (w.requires_grad) w.grad += gw;
  }
  Matrix gx(in_, x.cols());
  gx.noalias() = effective_weight(store).transpose() * grad_out;
  return gx;
}

void DenseMap::attach_lora(ParameterStore& store, int rank, double alpha, Rng& rng) {
  if (lora_) throw RuntimeError("'" + name_ + "' already has a LoRA adapter");
  if (rank < 1 || rank > std::min(in_, out_)) {
    throw RuntimeError("LoRA rank " + std::to_string(rank) + " invalid for '" + name_ + "' (" +
                       std::to_string(out_) + "x" + std::to_string(in_) + ")");
  }
  Matrix a(rank, in_);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(in_));
  for (Eigen::Index j = 0; j < a.cols(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) = stddev * rng.normal();
  store.add(lora_a_name(), std::move(a));
  store.add(lora_b_name(), Matrix::Zero(out_, rank));
  store.get(weight_name_).frozen = true;
  if (bias_) store.get(bias_name()).frozen = true;
  lora_ = LoraSpec{rank, alpha};
}

void DenseMap::merge_lora(ParameterStore& store) {
  if (!lora_) throw RuntimeError("'" + name_ + "' has no LoRA adapter to merge");
  Matrix merged = effective_weight(store);
  Parameter& w = store.get(weight_name_);
  w.value = std::move(merged);
  w.frozen = false;
  if (bias_) store.get(bias_name()).frozen = false;
  store.remove(lora_a_name());
  store.remove(lora_b_name());
  lora_.reset();
}

// Conv2d -------------------------------------------------------------------------

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, bool bias)
    : map_(std::move(name), in_channels * kernel * kernel, out_channels, bias),
      in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride) {}

// Row index of the patch matrix is (ky * k + kx) * Cin + c, so each copy moves
// one contiguous channel column.
Matrix Conv2d::im2col(const FeatureMap& x, int out_h, int out_w) const {
  const int k = kernel_;
  const int pad = k / 2;
  const int cin = in_channels_;
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(k) * k * cin, static_cast<Eigen::Index>(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      double* col = cols.col(oy * out_w + ox).data();
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride_ + ky - pad;
        if (iy < 0 || iy >= x.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride_ + kx - pad;
          if (ix < 0 || ix >= x.width) continue;
          const double* src = x.values.col(iy * x.width + ix).data();
          std::memcpy(col + (ky * k + kx) * cin, src, sizeof(double) * cin);
        }
      }
    }
  }
  return cols;
}

FeatureMap Conv2d::forward(const ParameterStore& store, const FeatureMap& x, ConvCache* cache) const {
  if (x.channels != in_channels_) {
    throw RuntimeError("conv '" + map_.name() + "' expects " + std::to_string(in_channels_) + " channels, got " +
                       std::to_string(x.channels));
  }
  const int oh = out_size(x.height);
  const int ow = out_size(x.width);
  FeatureMap y;
  y.channels = out_channels_;
  y.height = oh;
  y.width = ow;
  if (kernel_ == 1 && stride_ == 1) {
    y.values = map_.forward(store, x.values);
    if (cache) {
      cache->cols = x.values;
      cache->in_channels = x.channels;
      cache->in_height = x.height;
      cache->in_width = x.width;
    }
    return y;
  }
  Matrix cols = im2col(x, oh, ow);
  y.values = map_.forward(store, cols);
  if (cache) {
    cache->cols = std::move(cols);
    cache->in_channels = x.channels;
    cache->in_height = x.height;
    cache->in_width = x.width;
  }
  return y;
}

FeatureMap Conv2d::backward(ParameterStore& store, const ConvCache& cache, const FeatureMap& grad_out) const {
  Matrix gcols = map_.backward(store, cache.cols, grad_out.values);
  FeatureMap gx(cache.in_channels, cache.in_height, cache.in_width);
  if (kernel_ == 1 && stride_ == 1) {
    gx.values = std::move(gcols);
    return gx;
  }
  const int k = kernel_;
  const int pad = k / 2;
  const int cin = in_channels_;
  for (int oy = 0; oy < grad_out.height; ++oy) {
    for (int ox = 0; ox < grad_out.width; ++ox) {
      const double* col = gcols.col(oy * grad_out.width + ox).data();
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride_ + ky - pad;
        if (iy < 0 || iy >= gx.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride_ + kx - pad;
          if (ix < 0 || ix >= gx.width) continue;
          double* dst = gx.values.col(iy * gx.width + ix).data();
          const double* src = col + (ky * k + kx) * cin;
          for (int c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
  return gx;
}

// GroupNorm ----------------------------------------------------------------------

int group_count(int channels, int preferred) {
  for (int g = std::min(channels, preferred); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

GroupNorm::GroupNorm(std::string name, int channels, int groups)
    : name_(std::move(name)), channels_(channels), groups_(groups) {
  if (channels % groups != 0) throw RuntimeError("group norm '" + name_ + "': channels not divisible by groups");
}

void GroupNorm::declare(ParameterStore& store) const {
  store.add(name_ + ".gamma", Matrix::Ones(channels_, 1));
  store.add(name_ + ".beta", Matrix::Zero(channels_, 1));
}

FeatureMap GroupNorm::forward(const ParameterStore& store, const FeatureMap& x, GroupNormCache* cache) const {
  const Matrix& gamma = store.get(name_ + ".gamma").value;
  const Matrix& beta = store.get(name_ + ".beta").value;
  const int cpg = channels_ / groups_;
  const double count = static_cast<double>(cpg) * x.pixels();
  Matrix normalized(x.channels, x.pixels());
  Vector inv_std(groups_);
  for (int g = 0; g < groups_; ++g) {
    auto block = x.values.middleRows(g * cpg, cpg);
    const double mean = block.sum() / count;
    const double var = (block.array() - mean).square().sum() / count;
    const double is = 1.0 / std::sqrt(var + kEpsilon);
    inv_std(g) = is;
    normalized.middleRows(g * cpg, cpg) = (block.array() - mean) * is;
  }
  FeatureMap y(x.channels, x.height, x.width);
  y.values = (normalized.array().colwise() * gamma.col(0).array()).colwise() + beta.col(0).array();
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

FeatureMap GroupNorm::backward(ParameterStore& store, const GroupNormCache& cache, const FeatureMap& grad_out) const {
  Parameter& gamma = store.get(name_ + ".gamma");
  Parameter& beta = store.get(name_ + ".beta");
  const Matrix& xhat = cache.normalized;
  if (gamma.requires_grad) gamma.grad.col(0) += (grad_out.values.array() * xhat.array()).rowwise().sum().matrix();
  if (beta.requires_grad) beta.grad.col(0) += grad_out.values.rowwise().sum();
  const Matrix dxhat = grad_out.values.array().colwise() * gamma.value.col(0).array();
  const int cpg = channels_ / groups_;
  const double count = static_cast<double>(cpg) * grad_out.pixels();
  FeatureMap gx(grad_out.channels, grad_out.height, grad_out.width);
  for (int g = 0; g < groups_; ++g) {
    auto d = dxhat.middleRows(g * cpg, cpg);
    auto xh = xhat.middleRows(g * cpg, cpg);
    const double sum_d = d.sum();
    const double sum_dx = (d.array() * xh.array()).sum();
    gx.values.middleRows(g * cpg, cpg) =
        (cache.inv_std(g) / count) * (count * d.array() - sum_d - xh.array() * sum_dx);
  }
  return gx;
}

// Activations --------------------------------------------------------------------

Matrix silu(const Matrix& x) { return x.array() / (1.0 + (-x.array()).exp()); }

Matrix silu_backward(const Matrix& x, const Matrix& grad_out) {
  const auto sig = 1.0 / (1.0 + (-x.array()).exp());
  return grad_out.array() * sig * (1.0 + x.array() * (1.0 - sig));
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Matrix& x, const Matrix& grad_out) {
  return (x.array() > 0.0).select(grad_out, 0.0);
}

// Resampling -----------------------------------------------------------------------

FeatureMap avg_pool2(const FeatureMap& x) {
  FeatureMap y(x.channels, x.height / 2, x.width / 2);
  for (int oy = 0; oy < y.height; ++oy)
    for (int ox = 0; ox < y.width; ++ox) {
      const int p = 2 * oy * x.width + 2 * ox;
      y.values.col(oy * y.width + ox) =
          0.25 * (x.values.col(p) + x.values.col(p + 1) + x.values.col(p + x.width) + x.values.col(p + x.width + 1));
    }
  return y;
}

FeatureMap avg_pool2_backward(const FeatureMap& grad_out, int in_height, int in_width) {
  FeatureMap gx(grad_out.channels, in_height, in_width);
  for (int oy = 0; oy < grad_out.height; ++oy)
    for (int ox = 0; ox < grad_out.width; ++ox) {
      const auto g = 0.25 * grad_out.values.col(oy * grad_out.width + ox);
      const int p = 2 * oy * in_width + 2 * ox;
      gx.values.col(p) = g;
      gx.values.col(p + 1) = g;
      gx.values.col(p + in_width) = g;
      gx.values.col(p + in_width + 1) = g;
    }
  return gx;
}

FeatureMap upsample2(const FeatureMap& x) {
  FeatureMap y(x.channels, x.height * 2, x.width * 2);
  for (int iy = 0; iy < y.height; ++iy)
    for (int ix = 0; ix < y.width; ++ix) y.values.col(iy * y.width + ix) = x.values.col((iy / 2) * x.width + ix / 2);
  return y;
}

FeatureMap upsample2_backward(const FeatureMap& grad_out) {
  FeatureMap gx(grad_out.channels, grad_out.height / 2, grad_out.width / 2);
  for (int iy = 0; iy < grad_out.height; ++iy)
    for (int ix = 0; ix < grad_out.width; ++ix)
      gx.values.col((iy / 2) * gx.width + ix / 2) += grad_out.values.col(iy * grad_out.width + ix);
  return gx;
}

FeatureMap concat_channels(const FeatureMap& a, const FeatureMap& b) {
  FeatureMap y(a.channels + b.channels, a.height, a.width);
  y.values.topRows(a.channels) = a.values;
  y.values.bottomRows(b.channels) = b.values;
  return y;
}

std::pair<FeatureMap, FeatureMap> split_channels(const FeatureMap& g, int first_channels) {
  FeatureMap a(first_channels, g.height, g.width);
  FeatureMap b(g.channels - first_channels, g.height, g.width);
  a.values = g.values.topRows(first_channels);
  b.values = g.values.bottomRows(g.channels - first_channels);
  return {std::move(a), std::move(b)};
}

FeatureMap space_to_depth(const FeatureMap& x, int factor) {
  if (factor == 1) return x;
  FeatureMap y(x.channels * factor * factor, x.height / factor, x.width / factor);
  for (int oy = 0; oy < y.height; ++oy)
    for (int ox = 0; ox < y.width; ++ox)
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          y.values.col(oy * y.width + ox).segment((dy * factor + dx) * x.channels, x.channels) =
              x.values.col((oy * factor + dy) * x.width + ox * factor + dx);
  return y;
}

FeatureMap depth_to_space(const FeatureMap& x, int factor) {
  if (factor == 1) return x;
  const int c = x.channels / (factor * factor);
  FeatureMap y(c, x.height * factor, x.width * factor);
  for (int oy = 0; oy < x.height; ++oy)
    for (int ox = 0; ox < x.width; ++ox)
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          y.values.col((oy * factor + dy) * y.width + ox * factor + dx) =
              x.values.col(oy * x.width + ox).segment((dy * factor + dx) * c, c);
  return y;
}

Matrix global_avg_pool(const FeatureMap& x) { return x.values.rowwise().mean(); }

// Adam -----------------------------------------------------------------------------

void Adam::update(Moments& mom, Matrix& value, const Matrix& grad) {
  if (mom.m.size() == 0) {
    mom.m = Matrix::Zero(value.rows(), value.cols());
    mom.v = Matrix::Zero(value.rows(), value.cols());
  }
  ++mom.t;
  mom.m = beta1_ * mom.m + (1.0 - beta1_) * grad;
  mom.v = beta2_ * mom.v + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(mom.t));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(mom.t));
  value.array() -= lr_ * (mom.m.array() / c1) / ((mom.v.array() / c2).sqrt() + eps_);
}

void Adam::step(ParameterStore& store, double grad_scale) {
  ++t_;
  for (auto& [name, p] : store) {
    if (!p.requires_grad) continue;
    update(state_[name], p.value, grad_scale == 1.0 ? p.grad : Matrix(p.grad * grad_scale));
  }
}

void Adam::step(const std::string& key, Matrix& value, const Matrix& grad) {
  ++t_;
  update(state_[key], value, grad);
}

}  // namespace busaug::nn
