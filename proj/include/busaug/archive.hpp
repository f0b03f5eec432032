// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"

namespace busaug {

/// Versioned binary container: a JSON header plus named float64 matrices.
///
/// Layout (little-endian): magic "BSAG", u32 version, u32 kind-length + kind,
/// u64 header-length + header JSON, u32 tensor count, then per tensor
/// u32 name-length + name, u32 rows, u32 cols, rows*cols doubles (column-major).
struct Archive {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Eigen::MatrixXd> tensors;

  void save(const std::filesystem::path& path) const;

  /// Throws DataError on a bad magic, unsupported version, or kind mismatch
  /// (when expected_kind is non-empty).
  static Archive load(const std::filesystem::path& path, const std::string& expected_kind = {});
};

}  // namespace busaug
