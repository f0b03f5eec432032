// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/archive.hpp"

#include <bit>
#include <fstream>

#include "busaug/error.hpp"

namespace busaug {

static_assert(std::endian::native == std::endian::little, "archive format assumes little-endian hosts");

namespace {

constexpr char kMagic[4] = {'B', 'S', 'A', 'G'};

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_string32(std::ofstream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw DataError("truncated archive '" + path.string() + "'");
  return value;
}

std::string get_string(std::ifstream& in, std::uint64_t n, const std::filesystem::path& path) {
  if (n > (1ULL << 32)) throw DataError("corrupt archive '" + path.string() + "'");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataError("truncated archive '" + path.string() + "'");
  return s;
}

}  // namespace

void Archive::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put_string32(out, kind);
  const std::string text = header.dump();
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put_string32(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw RuntimeError("write failed for '" + path.string() + "'");
}

Archive Archive::load(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open archive '" + path.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(kMagic, 4)) {
    throw DataError("'" + path.string() + "' is not a busaug archive");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw DataError("'" + path.string() + "' has unsupported archive version " + std::to_string(version));
  }
  Archive a;
  a.kind = get_string(in, get<std::uint32_t>(in, path), path);
  if (!expected_kind.empty() && a.kind != expected_kind) {
    throw DataError("'" + path.string() + "' holds a " + a.kind + ", expected " + expected_kind);
  }
  a.header = nlohmann::json::parse(get_string(in, get<std::uint64_t>(in, path), path));
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(in, get<std::uint32_t>(in, path), path);
    const auto rows = get<std::uint32_t>(in, path);
    const auto cols = get<std::uint32_t>(in, path);
    Eigen::MatrixXd m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw DataError("truncated archive '" + path.string() + "'");
    a.tensors.emplace(std::move(name), std::move(m));
  }
  return a;
}

}  // namespace busaug
