// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/adapters.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

#include "busaug/archive.hpp"
#include "busaug/data.hpp"
#include "busaug/error.hpp"
#include "busaug/rng.hpp"

namespace busaug::adapters {

using nn::Matrix;
using nn::Vector;

// Prompt encoder -------------------------------------------------------------------------

PromptEncoder::PromptEncoder(std::vector<std::string> vocabulary, const EncoderConfig& config, std::uint64_t seed)
    : config_(config),
      proj0_("text.proj.0", config.token_dim, config.cond_dim),
      proj1_("text.proj.1", config.cond_dim, config.cond_dim) {
  if (config.token_dim < 1 || config.cond_dim < 1) throw ConfigError("encoder dimensions must be positive");
  std::sort(vocabulary.begin(), vocabulary.end());
  vocabulary.erase(std::unique(vocabulary.begin(), vocabulary.end()), vocabulary.end());
  vocabulary_ = std::move(vocabulary);
  for (std::size_t i = 0; i < vocabulary_.size(); ++i) index_.emplace(vocabulary_[i], static_cast<int>(i));

  Rng rng(derive_seed(seed, "text-encoder-init"));
  Matrix table(static_cast<Eigen::Index>(vocabulary_.size()), config.token_dim);
  for (Eigen::Index j = 0; j < table.cols(); ++j)
    for (Eigen::Index i = 0; i < table.rows(); ++i) table(i, j) = rng.normal();
  store_.add("text.embedding", std::move(table));
  proj0_.declare(store_, rng);
  proj1_.declare(store_, rng);
}

std::vector<std::string> PromptEncoder::prompt_vocabulary() {
  std::set<std::string> words;
  for (data::ClassLabel label : data::kAllLabels) {
    std::istringstream in(data::prompt_for_label(label));
    std::string w;
    while (in >> w) words.insert(w);
  }
  return {words.begin(), words.end()};
}

bool PromptEncoder::is_registered(std::string_view token) const {
  return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

std::vector<std::string> PromptEncoder::tokenize(std::string_view prompt) const {
  static constexpr std::string_view kStrip = ".,;:!?\"'()[]{}";
  std::vector<std::string> out;
  std::istringstream in{std::string(prompt)};
  std::string word;
  while (in >> word) {
    if (is_registered(word)) {
      out.push_back(word);
      continue;
    }
    const auto first = word.find_first_not_of(kStrip);
    if (first == std::string::npos) continue;
    const auto last = word.find_last_not_of(kStrip);
    word = word.substr(first, last - first + 1);
    std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) { return std::tolower(c); });
    out.push_back(word);
  }
  return out;
}

std::vector<std::string> PromptEncoder::unknown_words(std::string_view prompt) const {
  std::vector<std::string> unknown;
  for (const auto& t : tokenize(prompt))
    if (!is_registered(t) && index_.find(t) == index_.end()) unknown.push_back(t);
  return unknown;
}

bool PromptEncoder::covers(std::string_view prompt) const { return unknown_words(prompt).empty(); }

Vector PromptEncoder::encode(std::string_view prompt, EncodeCache* cache, bool strict) const {
  // Pool in sorted order so word order cannot change the rounding.
  auto words = tokenize(prompt);
  std::sort(words.begin(), words.end());
  std::vector<std::string> used;
  std::vector<std::string> unknown;
  Matrix pooled = Matrix::Zero(config_.token_dim, 1);
  int positions = 0;
  const Matrix& table = store_.get("text.embedding").value;
  for (const auto& w : words) {
    if (is_registered(w)) {
      const Matrix& rows = store_.get(token_param_name(w)).value;
      pooled.col(0) += rows.colwise().sum().transpose();
      positions += static_cast<int>(rows.rows());
      used.push_back(w);
    } else if (auto it = index_.find(w); it != index_.end()) {
      pooled.col(0) += table.row(it->second).transpose();
      ++positions;
      used.push_back(w);
    } else {
      unknown.push_back(w);
    }
  }
  if (strict && !unknown.empty()) {
    std::string list;
    for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
    throw DataError("unknown prompt token(s): " + list);
  }
  if (positions == 0) throw DataError("prompt \"" + std::string(prompt) + "\" has no known tokens");
  pooled /= positions;
  Matrix hidden = proj0_.forward(store_, pooled);
  Matrix cond = proj1_.forward(store_, nn::silu(hidden));
  if (cache) {
    cache->tokens = std::move(used);
    cache->pooled = pooled;
    cache->hidden = hidden;
  }
  return cond.col(0);
}

void PromptEncoder::backward(const EncodeCache& cache, const Vector& grad_cond) {
  const Matrix d_act = proj1_.backward(store_, nn::silu(cache.hidden), grad_cond);
  const Matrix d_pooled = proj0_.backward(store_, cache.pooled, nn::silu_backward(cache.hidden, d_act));
  int positions = 0;
  for (const auto& w : cache.tokens)
    positions += is_registered(w) ? static_cast<int>(store_.get(token_param_name(w)).value.rows()) : 1;
  const Vector per_position = d_pooled.col(0) / positions;
  nn::Parameter& table = store_.get("text.embedding");
  for (const auto& w : cache.tokens) {
    if (is_registered(w)) {
      nn::Parameter& rows = store_.get(token_param_name(w));
      if (rows.requires_grad) rows.grad.rowwise() += per_position.transpose();
    } else if (table.requires_grad) {
      table.grad.row(index_.at(w)) += per_position.transpose();
    }
  }
}

TokenEmbedding PromptEncoder::register_token(const std::string& token, const std::string& init_source, int n_vec) {
  if (token.empty()) throw DataError("token must be non-empty");
  if (n_vec < 1) throw DataError("token needs at least one vector");
  if (index_.count(token) || is_registered(token)) throw DataError("token '" + token + "' is already registered");
  const Matrix& table = store_.get("text.embedding").value;
  Eigen::RowVectorXd init;
  if (init_source == "mean") {
    init = table.colwise().mean();
  } else if (auto it = index_.find(init_source); it != index_.end()) {
    init = table.row(it->second);
  } else {
    throw DataError("token init source '" + init_source + "' is neither \"mean\" nor a vocabulary word");
  }
  TokenEmbedding e{token, init.replicate(n_vec, 1), init_source};
  load_token(e);
  return e;
}

void PromptEncoder::load_token(const TokenEmbedding& embedding) {
  if (index_.count(embedding.token) || is_registered(embedding.token)) {
    throw DataError("token '" + embedding.token + "' is already registered");
  }
  if (embedding.vectors.cols() != config_.token_dim || embedding.vectors.rows() < 1) {
    throw DataError("token '" + embedding.token + "' vectors do not match the encoder width");
  }
  store_.add(token_param_name(embedding.token), embedding.vectors);
  tokens_.push_back(embedding.token);
  token_init_[embedding.token] = embedding.init_source;
}

TokenEmbedding PromptEncoder::token_embedding(const std::string& token) const {
  if (!is_registered(token)) throw DataError("token '" + token + "' is not registered");
  return {token, store_.get(token_param_name(token)).value, token_init_.at(token)};
}

std::vector<std::string> PromptEncoder::dense_map_names() const { return {proj0_.name(), proj1_.name()}; }

nn::DenseMap* PromptEncoder::find_dense_map(std::string_view name) {
  if (name == proj0_.name()) return &proj0_;
  if (name == proj1_.name()) return &proj1_;
  return nullptr;
}

const nn::DenseMap* PromptEncoder::find_dense_map(std::string_view name) const {
  return const_cast<PromptEncoder*>(this)->find_dense_map(name);
}

nlohmann::json PromptEncoder::describe() const {
  nlohmann::json j;
  j["token_dim"] = config_.token_dim;
  j["cond_dim"] = config_.cond_dim;
  j["vocabulary"] = vocabulary_;
  nlohmann::json toks = nlohmann::json::array();
  for (const auto& t : tokens_) toks.push_back({{"token", t}, {"init_source", token_init_.at(t)}});
  j["tokens"] = toks;
  nlohmann::json lora = nlohmann::json::array();
  for (const nn::DenseMap* m : {&proj0_, &proj1_})
    if (m->lora()) lora.push_back({{"target", m->name()}, {"rank", m->lora()->rank}, {"alpha", m->lora()->alpha}});
  j["lora"] = lora;
  return j;
}

PromptEncoder PromptEncoder::restore(const nlohmann::json& description,
                                     const std::map<std::string, nn::Matrix>& tensors) {
  EncoderConfig cfg{description.at("token_dim").get<int>(), description.at("cond_dim").get<int>()};
  PromptEncoder enc(description.at("vocabulary").get<std::vector<std::string>>(), cfg, 0);
  for (const auto& t : description.at("tokens")) {
    const auto token = t.at("token").get<std::string>();
    auto it = tensors.find(token_param_name(token));
    if (it == tensors.end()) throw DataError("encoder state lacks vectors for token '" + token + "'");
    enc.load_token({token, it->second, t.at("init_source").get<std::string>()});
  }
  for (const auto& l : description.at("lora")) {
    nn::DenseMap* m = enc.find_dense_map(l.at("target").get<std::string>());
    if (!m) throw DataError("encoder state has an adapter on an unknown map");
    m->set_lora({l.at("rank").get<int>(), l.at("alpha").get<double>()});
    enc.store_.add(m->lora_a_name(), Matrix());
    enc.store_.add(m->lora_b_name(), Matrix());
    enc.store_.get(m->weight_name()).frozen = true;
    enc.store_.get(m->bias_name()).frozen = true;
  }
  for (auto& [name, p] : enc.store_) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("encoder state lacks tensor '" + name + "'");
    if (p.value.size() != 0 && (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())) {
      throw DataError("encoder tensor '" + name + "' has the wrong shape");
    }
    p.value = it->second;
    p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
  }
  return enc;
}

// LoRA ---------------------------------------------------------------------------------------

std::vector<std::string> default_lora_targets(const nn::LoraHost& host) {
  std::vector<std::string> out;
  for (const auto& name : host.dense_map_names()) {
    const std::string_view n = name;
    const bool conditioning = n.starts_with("cond.") || n.ends_with(".film") || n.starts_with("text.proj.");
    const bool mid = n.starts_with("mid.") && (n.ends_with(".conv1") || n.ends_with(".conv2"));
    if (conditioning || mid) out.push_back(name);
  }
  return out;
}

std::vector<LoraAdapter> attach_lora(nn::LoraHost& host, const std::vector<std::string>& target_names, int rank,
                                     double alpha, std::uint64_t seed) {
  for (const auto& name : target_names) {
    const nn::DenseMap* m = host.find_dense_map(name);
    if (!m) throw RuntimeError("LoRA target '" + name + "' does not name a dense map");
    if (rank < 1 || rank > std::min(m->in_features(), m->out_features())) {
      throw RuntimeError("LoRA rank " + std::to_string(rank) + " is too large for '" + name + "'");
    }
    if (m->lora()) throw RuntimeError("'" + name + "' already carries an adapter");
  }
  for (const auto& name : target_names) {
    Rng rng(derive_seed(seed, name));
    host.find_dense_map(name)->attach_lora(host.store(), rank, alpha, rng);
  }
  return export_adapters(host);
}

std::vector<LoraAdapter> export_adapters(const nn::LoraHost& host) {
  std::vector<LoraAdapter> out;
  for (const auto& name : host.dense_map_names()) {
    const nn::DenseMap* m = host.find_dense_map(name);
    if (!m->lora()) continue;
    out.push_back({name, m->lora()->rank, m->lora()->alpha, host.store().get(m->lora_a_name()).value,
                   host.store().get(m->lora_b_name()).value});
  }
  return out;
}

void apply_adapters(nn::LoraHost& host, const std::vector<LoraAdapter>& adapters) {
  for (const auto& ad : adapters) {
    nn::DenseMap* m = host.find_dense_map(ad.target_name);
    if (!m) throw DataError("adapter targets unknown map '" + ad.target_name + "'");
    if (ad.a.rows() != ad.rank || ad.a.cols() != m->in_features() || ad.b.rows() != m->out_features() ||
        ad.b.cols() != ad.rank) {
      throw DataError("adapter for '" + ad.target_name + "' does not fit the target weight");
    }
    Rng unused(0);
    m->attach_lora(host.store(), ad.rank, ad.alpha, unused);
    host.store().get(m->lora_a_name()).value = ad.a;
    host.store().get(m->lora_b_name()).value = ad.b;
  }
}

void merge_lora(nn::LoraHost& host) {
  bool any = false;
  for (const auto& name : host.dense_map_names()) {
    nn::DenseMap* m = host.find_dense_map(name);
    if (!m->lora()) continue;
    m->merge_lora(host.store());
    any = true;
  }
  if (!any) throw RuntimeError("no LoRA adapters to merge (already merged or never attached)");
}

void save_adapters(const std::filesystem::path& path, const std::vector<LoraAdapter>& adapters) {
  Archive a;
  a.kind = "lora-adapters";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& ad : adapters) {
    list.push_back({{"target", ad.target_name}, {"rank", ad.rank}, {"alpha", ad.alpha}});
    a.tensors.emplace(ad.target_name + ".A", ad.a);
    a.tensors.emplace(ad.target_name + ".B", ad.b);
  }
  a.header["adapters"] = list;
  a.save(path);
}

std::vector<LoraAdapter> load_adapters(const std::filesystem::path& path) {
  const Archive a = Archive::load(path, "lora-adapters");
  std::vector<LoraAdapter> out;
  for (const auto& j : a.header.at("adapters")) {
    LoraAdapter ad;
    ad.target_name = j.at("target").get<std::string>();
    ad.rank = j.at("rank").get<int>();
    ad.alpha = j.at("alpha").get<double>();
    auto ia = a.tensors.find(ad.target_name + ".A");
    auto ib = a.tensors.find(ad.target_name + ".B");
    if (ia == a.tensors.end() || ib == a.tensors.end()) {
      throw DataError("adapter file '" + path.string() + "' lacks tensors for '" + ad.target_name + "'");
    }
    ad.a = ia->second;
    ad.b = ib->second;
    out.push_back(std::move(ad));
  }
  return out;
}

// Textual inversion -------------------------------------------------------------------------------

void TextualInversionConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("textual inversion learning rate must be positive");
  if (steps < 0) throw ConfigError("textual inversion steps must be >= 0");
  if (batch_size < 1) throw ConfigError("textual inversion batch size must be >= 1");
}

TokenEmbedding train_textual_inversion(const diffusion::DenoiserModel& model, PromptEncoder& encoder,
                                       const std::string& token, const std::vector<Image>& images,
                                       const std::vector<std::string>& prompts,
                                       const diffusion::NoiseSchedule& schedule,
                                       const TextualInversionConfig& config) {
  config.validate();
  if (!encoder.is_registered(token)) throw DataError("token '" + token + "' is not registered");
  if (images.size() != prompts.size()) throw DataError("textual inversion needs one prompt per image");
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto words = encoder.tokenize(prompts[i]);
    if (std::find(words.begin(), words.end(), token) != words.end()) usable.push_back(i);
  }
  if (usable.empty()) throw DataError("token '" + token + "' appears in none of the training prompts");
  for (std::size_t i : usable) encoder.encode(prompts[i]);  // fails early on unknown words

  diffusion::DenoiserModel frozen = model;
  const std::string param = PromptEncoder::token_param_name(token);
  nn::TrainableScope model_scope(frozen.store(), diffusion::select_nothing());
  nn::TrainableScope text_scope(encoder.store(), [&](std::string_view name) { return name == param; });
  nn::Adam opt(config.learning_rate);
  const std::uint64_t noise_root = derive_seed(config.seed, "ti-noise");
  const std::uint64_t order_root = derive_seed(config.seed, "ti-order");

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::uint64_t pass = 0;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<Image> batch;
    std::vector<Vector> conds;
    std::vector<EncodeCache> caches(config.batch_size);
    for (int k = 0; k < config.batch_size; ++k) {
      if (cursor == order.size()) {
        Rng rng(derive_seed(order_root, pass++));
        order = rng.permutation(usable.size());
        cursor = 0;
      }
      const std::size_t idx = usable[order[cursor++]];
      batch.push_back(images[idx]);
      conds.push_back(encoder.encode(prompts[idx], &caches[k]));
    }
    encoder.store().zero_grad();
    const auto lg = diffusion::denoising_loss_grad(frozen, batch, conds, schedule,
                                                   derive_seed(noise_root, static_cast<std::uint64_t>(step)));
    for (std::size_t k = 0; k < batch.size(); ++k) encoder.backward(caches[k], lg.cond_grads[k]);
    opt.step(encoder.store());
  }
  return encoder.token_embedding(token);
}

void save_token(const std::filesystem::path& path, const TokenEmbedding& embedding) {
  Archive a;
  a.kind = "token-embedding";
  a.header["token"] = embedding.token;
  a.header["init_source"] = embedding.init_source;
  a.tensors.emplace("vectors", embedding.vectors);
  a.save(path);
}

TokenEmbedding load_token(const std::filesystem::path& path) {
  const Archive a = Archive::load(path, "token-embedding");
  auto it = a.tensors.find("vectors");
  if (it == a.tensors.end()) throw DataError("token file '" + path.string() + "' has no vectors");
  return {a.header.at("token").get<std::string>(), it->second, a.header.value("init_source", std::string())};
}

}  // namespace busaug::adapters
