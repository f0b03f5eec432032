// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace busaug {

/// Grayscale image with pixel values in [-1, 1], row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return pixels.size(); }

  bool same_shape(const Image& other) const { return height == other.height && width == other.width; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Byte-level equality (distinguishes -0.0 from +0.0 and NaN payloads).
bool bitwise_equal(const Image& a, const Image& b);

/// [-1, 1] <-> 8-bit mapping used by every stored image.
std::uint8_t to_byte(double value);
double from_byte(std::uint8_t value);

/// Rounds every pixel through the 8-bit representation.
Image quantize(const Image& image);

/// Area-weighted resampling to a new size.
Image resize(const Image& image, int height, int width);

/// Mirrors columns.
Image flip_horizontal(const Image& image);

/// Reads any PNG as grayscale, mapped to [-1, 1]. Throws DataError with the path on failure.
Image read_png(const std::filesystem::path& path);

/// Writes an 8-bit grayscale PNG. Throws RuntimeError on failure.
void write_png(const std::filesystem::path& path, const Image& image);

/// Encodes to PNG bytes in memory (deterministic; no timestamps).
std::vector<std::uint8_t> encode_png(const Image& image);

}  // namespace busaug
