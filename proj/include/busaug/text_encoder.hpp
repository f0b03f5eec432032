// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "busaug/nn.hpp"
#include "json.hpp"

namespace busaug::adapters {

struct EncoderConfig {
  int token_dim = 32;
  int cond_dim = 32;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Learned pseudo-word: the token string and its embedding rows.
struct TokenEmbedding {
  std::string token;
  nn::Matrix vectors;  // n_vec x token_dim
  std::string init_source;
};

struct EncodeCache {
  std::vector<std::string> tokens;
  nn::Matrix pooled;  // token_dim x 1
  nn::Matrix hidden;  // cond_dim x 1, before SiLU
};

/// Text pathway: vocabulary lookup, mean pooling, two-layer projection to a
/// conditioning vector.
///
/// Parameters live under "text.": the base table "text.embedding" (one row
/// per vocabulary word), one "text.token.<tok>" tensor per registered
/// pseudo-word, and the projection maps "text.proj.0" / "text.proj.1".
class PromptEncoder : public nn::LoraHost {
 public:
  PromptEncoder() = default;
  PromptEncoder(std::vector<std::string> vocabulary, const EncoderConfig& config, std::uint64_t seed);

  /// Vocabulary covering every prompt the data module can emit.
  static std::vector<std::string> prompt_vocabulary();

  const EncoderConfig& config() const { return config_; }
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  const std::vector<std::string>& registered_tokens() const { return tokens_; }
  bool is_registered(std::string_view token) const;

  /// Lowercase whitespace split with punctuation stripped; registered tokens
  /// are matched verbatim before any stripping.
  std::vector<std::string> tokenize(std::string_view prompt) const;

  /// Throws DataError listing unknown words in strict mode; otherwise skips them.
  nn::Vector encode(std::string_view prompt, EncodeCache* cache = nullptr, bool strict = true) const;
  /// Accumulates gradients for the rows and projection maps used by the cached encode.
  void backward(const EncodeCache& cache, const nn::Vector& grad_cond);

  /// True when every word of the prompt is known.
  bool covers(std::string_view prompt) const;
  std::vector<std::string> unknown_words(std::string_view prompt) const;

  /// Adds n_vec rows for a new token initialized from a vocabulary word
  /// (replicated) or "mean" (column mean of the base table).
  TokenEmbedding register_token(const std::string& token, const std::string& init_source, int n_vec = 1);
  /// Registers a token with fixed vectors (e.g. loaded from a token file).
  void load_token(const TokenEmbedding& embedding);
  TokenEmbedding token_embedding(const std::string& token) const;
  static std::string token_param_name(std::string_view token) { return "text.token." + std::string(token); }

  nn::ParameterStore& store() override { return store_; }
  const nn::ParameterStore& store() const override { return store_; }
  std::vector<std::string> dense_map_names() const override;
  nn::DenseMap* find_dense_map(std::string_view name) override;
  const nn::DenseMap* find_dense_map(std::string_view name) const override;

  nlohmann::json describe() const;
  /// Rebuilds an encoder from describe() output and a tensor map.
  static PromptEncoder restore(const nlohmann::json& description, const std::map<std::string, nn::Matrix>& tensors);

 private:
  EncoderConfig config_;
  std::vector<std::string> vocabulary_;
  std::map<std::string, int, std::less<>> index_;
  std::vector<std::string> tokens_;
  std::map<std::string, std::string, std::less<>> token_init_;
  nn::ParameterStore store_;
  nn::DenseMap proj0_;
  nn::DenseMap proj1_;
};

}  // namespace busaug::adapters
