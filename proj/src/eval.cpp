// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/eval.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

#include "busaug/archive.hpp"
#include "busaug/error.hpp"
#include "busaug/rng.hpp"

namespace busaug::eval {

namespace {

nn::FeatureMap to_feature_map(const Image& image, double mean = 0.0, double std = 1.0) {
  nn::FeatureMap x(1, image.height, image.width);
  for (std::size_t i = 0; i < image.size(); ++i) x.values(0, static_cast<Eigen::Index>(i)) = (image.pixels[i] - mean) / std;
  return x;
}

Image fit_size(const Image& image, int size) {
  if (image.height == size && image.width == size) return image;
  return resize(image, size, size);
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers; each index is independent.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::future<void>> jobs;
  for (std::size_t w = 0; w < workers; ++w) {
    jobs.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    }));
  }
  for (auto& j : jobs) j.get();
}

}  // namespace

// Random convolutional features ------------------------------------------------------------

RandomConvExtractor::RandomConvExtractor(int input_size, int width, std::uint64_t seed, int threads)
    : input_size_(input_size), width_(width), seed_(seed), threads_(threads) {
  if (input_size < 8 || width < 1) throw ConfigError("random-conv extractor needs input_size >= 8 and width >= 1");
  Rng rng(derive_seed(seed, "random-conv-features"));
  int in = 1;
  for (int i = 0; i < 3; ++i) {
    const int out = width << i;
    convs_.emplace_back("feat.conv" + std::to_string(i), in, out, 3, 2, true);
    convs_.back().declare(store_, rng, std::sqrt(2.0));
    in = out;
  }
}

std::string RandomConvExtractor::name() const {
  return "random-conv(w=" + std::to_string(width_) + ",seed=" + std::to_string(seed_) + ")";
}

int RandomConvExtractor::dim() const { return 2 * (width_ << 2); }

Vector RandomConvExtractor::features(const Image& image) const {
  nn::FeatureMap x = to_feature_map(fit_size(image, input_size_));
  for (const auto& conv : convs_) {
    x = conv.forward(store_, x, nullptr);
    x.values = nn::relu(x.values);
  }
  const Vector mean = x.values.rowwise().mean();
  const Vector sd = ((x.values.colwise() - mean).array().square().rowwise().mean()).sqrt();
  Vector out(dim());
  out << mean, sd;
  return out;
}

Matrix RandomConvExtractor::extract(const std::vector<Image>& images, const std::vector<std::string>&) const {
  Matrix out(static_cast<Eigen::Index>(images.size()), dim());
  parallel_for(images.size(), threads_, [&](std::size_t i) {
    out.row(static_cast<Eigen::Index>(i)) = features(images[i]).transpose();
  });
  return out;
}

// Precomputed features ------------------------------------------------------------------------

void write_feature_file(const std::filesystem::path& path, const std::string& extractor_name,
                        const std::vector<std::string>& keys, const Matrix& features) {
  if (static_cast<Eigen::Index>(keys.size()) != features.rows()) {
    throw RuntimeError("feature file needs one key per feature row");
  }
  Archive a;
  a.kind = "features";
  a.header["extractor"] = extractor_name;
  a.header["dim"] = features.cols();
  a.header["keys"] = keys;
  a.tensors.emplace("features", features);
  a.save(path);
}

FeatureFile read_feature_file(const std::filesystem::path& path) {
  const Archive a = Archive::load(path, "features");
  FeatureFile f;
  f.extractor_name = a.header.at("extractor").get<std::string>();
  f.dim = a.header.at("dim").get<int>();
  f.keys = a.header.at("keys").get<std::vector<std::string>>();
  auto it = a.tensors.find("features");
  if (it == a.tensors.end()) throw DataError("feature file '" + path.string() + "' has no feature matrix");
  f.features = it->second;
  if (f.features.rows() != static_cast<Eigen::Index>(f.keys.size()) || f.features.cols() != f.dim) {
    throw DataError("feature file '" + path.string() + "' is inconsistent with its header");
  }
  return f;
}

PrecomputedExtractor::PrecomputedExtractor(const std::filesystem::path& path) {
  FeatureFile f = read_feature_file(path);
  name_ = f.extractor_name;
  dim_ = f.dim;
  for (std::size_t i = 0; i < f.keys.size(); ++i) table_[f.keys[i]] = f.features.row(static_cast<Eigen::Index>(i)).transpose();
}

Matrix PrecomputedExtractor::extract(const std::vector<Image>& images, const std::vector<std::string>& keys) const {
  if (keys.size() != images.size()) throw DataError("precomputed features are looked up by key; one key per image");
  Matrix out(static_cast<Eigen::Index>(keys.size()), dim_);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    auto it = table_.find(keys[i]);
    if (it == table_.end()) throw DataError("feature file has no entry for image '" + keys[i] + "'");
    out.row(static_cast<Eigen::Index>(i)) = it->second.transpose();
  }
  return out;
}

// FID -------------------------------------------------------------------------------------------

FIDStats fid_stats(const Matrix& features) {
  if (features.rows() < 2) throw DataError("FID statistics need at least two feature rows");
  FIDStats s;
  s.n = features.rows();
  s.mu = features.colwise().mean().transpose();
  const Matrix centered = features.rowwise() - s.mu.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(s.n - 1);
  s.sigma = 0.5 * (cov + cov.transpose());
  return s;
}

Matrix matrix_sqrt_psd(const Matrix& m) {
  if (m.rows() != m.cols()) throw RuntimeError("matrix square root needs a square matrix");
  if (m.size() == 0) return m;
  const Matrix sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  if (es.info() != Eigen::Success) throw RuntimeError("eigendecomposition failed");
  const double tol = 1e-6 * std::max(1.0, sym.cwiseAbs().maxCoeff());
  Vector ev = es.eigenvalues();
  if (ev.minCoeff() < -tol) {
    throw RuntimeError("matrix is not positive semidefinite (eigenvalue " + std::to_string(ev.minCoeff()) + ")");
  }
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  const Matrix& q = es.eigenvectors();
  return q * ev.asDiagonal() * q.transpose();
}

double fid(const FIDStats& a, const FIDStats& b) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != b.sigma.rows()) {
    throw DataError("FID statistics have different feature dimensions");
  }
  const Matrix root_a = matrix_sqrt_psd(a.sigma);
  const Matrix cross = matrix_sqrt_psd(root_a * b.sigma * root_a);
  const double value = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * cross.trace();
  const double scale = std::max({1.0, a.sigma.trace(), b.sigma.trace()});
  if (value < -1e-6 * scale) throw RuntimeError("FID evaluated to a negative value");
  return std::max(0.0, value);
}

// Classifier ---------------------------------------------------------------------------------------

void ClassifierConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("classifier.learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("classifier.batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("classifier.epochs must be >= 0");
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) {
    throw ConfigError("classifier.flip_probability must be in [0, 1]");
  }
  if (width < 1) throw ConfigError("classifier.width must be >= 1");
}

struct ClassifierTape {
  struct StageTape {
    nn::ConvCache down, conv1, conv2;
    nn::GroupNormCache down_norm, norm1, norm2;
    Matrix a0, a1, sum;
  };
  std::vector<StageTape> stages;
  Matrix pooled;
  int out_channels = 0;
  int out_height = 0;
  int out_width = 0;
};

ClassifierModel::ClassifierModel(int image_size, int width, std::uint64_t seed)
    : image_size_(image_size), width_(width) {
  if (image_size < 8 || image_size % 8 != 0) throw ConfigError("classifier image size must be a multiple of 8");
  if (width < 1) throw ConfigError("classifier width must be >= 1");
  build();
  Rng rng(derive_seed(seed, "classifier-init"));
  for (const auto& s : stages_) {
    s.down.declare(store_, rng, std::sqrt(2.0));
    s.down_norm.declare(store_);
    s.conv1.declare(store_, rng, std::sqrt(2.0));
    s.norm1.declare(store_);
    s.conv2.declare(store_, rng, std::sqrt(2.0));
    s.norm2.declare(store_);
  }
  head_.declare(store_, rng, 1.0);
}

void ClassifierModel::build() {
  stages_.clear();
  int in = 1;
  for (int i = 0; i < 3; ++i) {
    const int c = width_ << i;
    const int g = nn::group_count(c, 4);
    const std::string p = "cls.stage" + std::to_string(i);
    stages_.push_back({nn::Conv2d(p + ".down", in, c, 3, 2), nn::GroupNorm(p + ".down_norm", c, g),
                       nn::Conv2d(p + ".conv1", c, c), nn::GroupNorm(p + ".norm1", c, g),
                       nn::Conv2d(p + ".conv2", c, c), nn::GroupNorm(p + ".norm2", c, g)});
    in = c;
  }
  head_ = nn::DenseMap("cls.head", in, data::kNumClasses);
}

void ClassifierModel::set_normalization(double mean, double std) {
  if (!(std > 0.0)) throw RuntimeError("normalization std must be positive");
  mean_ = mean;
  std_ = std;
}

Vector ClassifierModel::logits(const Image& image, ClassifierTape* tape) const {
  if (image.height != image_size_ || image.width != image_size_) {
    throw DataError("classifier expects " + std::to_string(image_size_) + "x" + std::to_string(image_size_) + " images");
  }
  ClassifierTape local;
  ClassifierTape& t = tape ? *tape : local;
  t.stages.assign(stages_.size(), {});
  nn::FeatureMap x = to_feature_map(image, mean_, std_);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const Stage& s = stages_[i];
    auto& st = t.stages[i];
    nn::FeatureMap d = s.down_norm.forward(store_, s.down.forward(store_, x, &st.down), &st.down_norm);
    st.a0 = d.values;
    nn::FeatureMap h = d;
    h.values = nn::relu(st.a0);
    nn::FeatureMap c1 = s.norm1.forward(store_, s.conv1.forward(store_, h, &st.conv1), &st.norm1);
    st.a1 = c1.values;
    c1.values = nn::relu(st.a1);
    nn::FeatureMap c2 = s.norm2.forward(store_, s.conv2.forward(store_, c1, &st.conv2), &st.norm2);
    st.sum = c2.values + h.values;
    x = c2;
    x.values = nn::relu(st.sum);
  }
  t.pooled = nn::global_avg_pool(x);
  t.out_channels = x.channels;
  t.out_height = x.height;
  t.out_width = x.width;
  return head_.forward(store_, t.pooled).col(0);
}

void ClassifierModel::backward(const ClassifierTape& tape, const Vector& grad_logits) {
  const Matrix g_pooled = head_.backward(store_, tape.pooled, grad_logits);
  nn::FeatureMap g(tape.out_channels, tape.out_height, tape.out_width);
  g.values = g_pooled.col(0).replicate(1, g.pixels()) / static_cast<double>(g.pixels());
  for (std::size_t i = stages_.size(); i-- > 0;) {
    const Stage& s = stages_[i];
    const auto& st = tape.stages[i];
    nn::FeatureMap gs = g;
    gs.values = nn::relu_backward(st.sum, g.values);
    nn::FeatureMap g_r1 = s.conv2.backward(store_, st.conv2, s.norm2.backward(store_, st.norm2, gs));
    g_r1.values = nn::relu_backward(st.a1, g_r1.values);
    nn::FeatureMap g_h = s.conv1.backward(store_, st.conv1, s.norm1.backward(store_, st.norm1, g_r1));
    g_h.values += gs.values;
    g_h.values = nn::relu_backward(st.a0, g_h.values);
    nn::FeatureMap g_d = s.down_norm.backward(store_, st.down_norm, g_h);
    g = s.down.backward(store_, st.down, g_d);
  }
}

Vector softmax(const Vector& logits) {
  const Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

Vector ClassifierModel::predict_proba(const Image& image) const { return softmax(logits(image)); }

Vector ClassifierModel::penultimate(const Image& image) const {
  ClassifierTape t;
  logits(image, &t);
  return t.pooled.col(0);
}

void ClassifierModel::save(const std::filesystem::path& path) const {
  Archive a;
  a.kind = "classifier";
  a.header = {{"image_size", image_size_}, {"width", width_}, {"mean", mean_}, {"std", std_}};
  for (const auto& [name, p] : store_) a.tensors.emplace(name, p.value);
  a.save(path);
}

ClassifierModel ClassifierModel::load(const std::filesystem::path& path) {
  const Archive a = Archive::load(path, "classifier");
  ClassifierModel m;
  m.image_size_ = a.header.at("image_size").get<int>();
  m.width_ = a.header.at("width").get<int>();
  m.mean_ = a.header.at("mean").get<double>();
  m.std_ = a.header.at("std").get<double>();
  ClassifierModel fresh(m.image_size_, m.width_, 0);
  m.stages_ = fresh.stages_;
  m.head_ = fresh.head_;
  for (const auto& [name, p] : fresh.store_) {
    auto it = a.tensors.find(name);
    if (it == a.tensors.end() || it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw DataError("classifier file '" + path.string() + "' lacks a valid tensor '" + name + "'");
    }
    m.store_.add(name, it->second);
  }
  if (a.tensors.size() != fresh.store_.size()) throw DataError("classifier file '" + path.string() + "' has extra tensors");
  return m;
}

Matrix ClassifierFeatureExtractor::extract(const std::vector<Image>& images, const std::vector<std::string>&) const {
  Matrix out(static_cast<Eigen::Index>(images.size()), dim());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = model_.penultimate(fit_size(images[i], model_.image_size())).transpose();
  }
  return out;
}

ClassifierModel train_classifier(const data::Manifest& manifest, const ClassifierConfig& config) {
  config.validate();
  const data::Manifest train = manifest.filtered(data::Split::kTrain);
  const data::ClassCounts counts = train.counts();
  for (data::ClassLabel label : data::kAllLabels) {
    if (counts[data::index_of(label)] == 0) {
      throw DataError("train split has no '" + std::string(data::to_string(label)) + "' samples");
    }
  }
  std::vector<Image> images;
  std::vector<int> labels;
  images.reserve(train.samples.size());
  for (std::size_t i = 0; i < train.samples.size(); ++i) {
    images.push_back(train.load_image(i));
    labels.push_back(data::index_of(train.samples[i].label));
  }
  const int size = images.front().height;

  ClassifierModel model(size, config.width, config.seed);
  double sum = 0.0;
  double sq = 0.0;
  double count = 0.0;
  for (const auto& im : images) {
    for (double v : im.pixels) {
      sum += v;
      sq += v * v;
    }
    count += static_cast<double>(im.size());
  }
  const double mean = sum / count;
  model.set_normalization(mean, std::sqrt(std::max(sq / count - mean * mean, 1e-12)));

  nn::Adam opt(config.learning_rate);
  const std::uint64_t order_root = derive_seed(config.seed, "classifier-order");
  const std::uint64_t flip_root = derive_seed(config.seed, "classifier-flip");
  const std::size_t n = images.size();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng order_rng(derive_seed(order_root, static_cast<std::uint64_t>(epoch)));
    Rng flip_rng(derive_seed(flip_root, static_cast<std::uint64_t>(epoch)));
    const auto order = order_rng.permutation(n);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      const double inv_b = 1.0 / static_cast<double>(end - start);
      model.store().zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        const bool flip = flip_rng.uniform() < config.flip_probability;
        ClassifierTape tape;
        const Vector p = softmax(model.logits(flip ? flip_horizontal(images[idx]) : images[idx], &tape));
        Vector g = p;
        g(labels[idx]) -= 1.0;
        model.backward(tape, g * inv_b);
      }
      opt.step(model.store());
    }
  }
  return model;
}

// Metrics ---------------------------------------------------------------------------------------

namespace {

/// One-vs-rest ROC area by trapezoids over score groups; tied scores form a
/// single diagonal segment (i.e. count half).
std::optional<double> ovr_auc(const Matrix& probs, const std::vector<int>& labels, int cls) {
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs(static_cast<Eigen::Index>(a), cls) > probs(static_cast<Eigen::Index>(b), cls); });
  double pos = 0.0;
  for (int l : labels) pos += (l == cls);
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  double tp = 0.0;
  double fp = 0.0;
  double area = 0.0;
  for (std::size_t i = 0; i < n;) {
    const double score = probs(static_cast<Eigen::Index>(order[i]), cls);
    double dtp = 0.0;
    double dfp = 0.0;
    for (; i < n && probs(static_cast<Eigen::Index>(order[i]), cls) == score; ++i) {
      (labels[order[i]] == cls ? dtp : dfp) += 1.0;
    }
    area += dfp * (2.0 * tp + dtp) / 2.0;
    tp += dtp;
    fp += dfp;
  }
  return area / (pos * neg);
}

}  // namespace

MetricsReport compute_metrics(const Matrix& probs, const std::vector<int>& labels) {
  constexpr int k = data::kNumClasses;
  const std::size_t n = labels.size();
  if (n == 0) throw DataError("metrics need at least one prediction");
  if (probs.rows() != static_cast<Eigen::Index>(n) || probs.cols() != k) {
    throw DataError("probability matrix must be n x 3 with one row per label");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw DataError("label " + std::to_string(labels[i]) + " is not a class index");
    if (std::abs(probs.row(static_cast<Eigen::Index>(i)).sum() - 1.0) > 1e-6) {
      throw DataError("probability row " + std::to_string(i) + " does not sum to 1");
    }
  }

  MetricsReport r;
  for (std::size_t i = 0; i < n; ++i) {
    int pred = 0;
    for (int c = 1; c < k; ++c)
      if (probs(static_cast<Eigen::Index>(i), c) > probs(static_cast<Eigen::Index>(i), pred)) pred = c;
    ++r.confusion[labels[i]][pred];
  }
  int correct = 0;
  for (int c = 0; c < k; ++c) correct += r.confusion[c][c];
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  double auc_sum = 0.0;
  int auc_count = 0;
  for (int c = 0; c < k; ++c) {
    const std::string name(data::to_string(static_cast<data::ClassLabel>(c)));
    int tp = r.confusion[c][c];
    int fp = 0;
    int fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += r.confusion[o][c];
      fn += r.confusion[c][o];
    }
    ClassMetrics& m = r.per_class[c];
    m.support = tp + fn;
    if (tp + fp == 0) {
      r.flags.push_back("ppv_undefined:" + name);
    } else {
      m.precision = static_cast<double>(tp) / (tp + fp);
    }
    if (tp + fn == 0) {
      r.flags.push_back("recall_undefined:" + name);
    } else {
      m.recall = static_cast<double>(tp) / (tp + fn);
    }
    if (m.precision + m.recall == 0.0) {
      r.flags.push_back("f1_undefined:" + name);
    } else {
      m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    }
    m.auc = ovr_auc(probs, labels, c);
    if (m.auc) {
      auc_sum += *m.auc;
      ++auc_count;
    } else {
      r.flags.push_back("auc_skipped:" + name);
    }
    r.ppv_macro += m.precision / k;
    r.recall_macro += m.recall / k;
    r.f1_macro += m.f1 / k;
  }
  r.auc_roc_ovr_macro = auc_count ? auc_sum / auc_count : 0.0;
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["Accuracy"] = accuracy;
  j["F1-Score"] = f1_macro;
  j["AUC-ROC"] = auc_roc_ovr_macro;
  j["PPV"] = ppv_macro;
  j["Recall"] = recall_macro;
  j["FID"] = fid ? nlohmann::json(*fid) : nlohmann::json(nullptr);
  nlohmann::json pc = nlohmann::json::object();
  for (int c = 0; c < data::kNumClasses; ++c) {
    const auto& m = per_class[c];
    pc[std::string(data::to_string(static_cast<data::ClassLabel>(c)))] = {
        {"precision", m.precision},
        {"recall", m.recall},
        {"f1", m.f1},
        {"auc", m.auc ? nlohmann::json(*m.auc) : nlohmann::json(nullptr)},
        {"support", m.support}};
  }
  j["per_class"] = pc;
  j["confusion"] = confusion;
  j["flags"] = flags;
  j["metadata"] = metadata;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.accuracy = j.at("Accuracy").get<double>();
  r.f1_macro = j.at("F1-Score").get<double>();
  r.auc_roc_ovr_macro = j.at("AUC-ROC").get<double>();
  r.ppv_macro = j.at("PPV").get<double>();
  r.recall_macro = j.at("Recall").get<double>();
  if (!j.at("FID").is_null()) r.fid = j.at("FID").get<double>();
  for (int c = 0; c < data::kNumClasses; ++c) {
    const auto& m = j.at("per_class").at(std::string(data::to_string(static_cast<data::ClassLabel>(c))));
    auto& out = r.per_class[c];
    out.precision = m.at("precision").get<double>();
    out.recall = m.at("recall").get<double>();
    out.f1 = m.at("f1").get<double>();
    if (!m.at("auc").is_null()) out.auc = m.at("auc").get<double>();
    out.support = m.at("support").get<int>();
  }
  r.confusion = j.at("confusion").get<decltype(r.confusion)>();
  r.flags = j.at("flags").get<std::vector<std::string>>();
  r.metadata = j.value("metadata", nlohmann::json::object());
  return r;
}

MetricsReport evaluate_classifier(const ClassifierModel& model, const data::Manifest& manifest, data::Split split) {
  const data::Manifest subset = manifest.filtered(split);
  if (subset.samples.empty()) throw DataError("no samples in the evaluation split");
  Matrix probs(static_cast<Eigen::Index>(subset.samples.size()), data::kNumClasses);
  std::vector<int> labels;
  for (std::size_t i = 0; i < subset.samples.size(); ++i) {
    probs.row(static_cast<Eigen::Index>(i)) = model.predict_proba(subset.load_image(i)).transpose();
    labels.push_back(data::index_of(subset.samples[i].label));
  }
  return compute_metrics(probs, labels);
}

}  // namespace busaug::eval
