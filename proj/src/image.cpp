// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "busaug/error.hpp"

namespace busaug {

bool bitwise_equal(const Image& a, const Image& b) {
  return a.same_shape(b) &&
         std::memcmp(a.pixels.data(), b.pixels.data(), a.pixels.size() * sizeof(double)) == 0;
}

std::uint8_t to_byte(double value) {
  const double v = std::clamp((value + 1.0) * 127.5, 0.0, 255.0);
  return static_cast<std::uint8_t>(std::lround(v));
}

double from_byte(std::uint8_t value) { return static_cast<double>(value) / 127.5 - 1.0; }

Image quantize(const Image& image) {
  Image out = image;
  for (double& p : out.pixels) p = from_byte(to_byte(p));
  return out;
}

Image resize(const Image& image, int height, int width) {
  if (image.height == height && image.width == width) return image;
  Image out(height, width);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double y0 = y * sy;
    const double y1 = y0 + sy;
    for (int x = 0; x < width; ++x) {
      const double x0 = x * sx;
      const double x1 = x0 + sx;
      if (sy <= 1.0 && sx <= 1.0) {
        // Upsampling: bilinear on pixel centers.
        const double cy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
        const double cx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
        const int iy = static_cast<int>(cy);
        const int ix = static_cast<int>(cx);
        const int jy = std::min(iy + 1, image.height - 1);
        const int jx = std::min(ix + 1, image.width - 1);
        const double fy = cy - iy;
        const double fx = cx - ix;
        out.at(y, x) = (1 - fy) * ((1 - fx) * image.at(iy, ix) + fx * image.at(iy, jx)) +
                       fy * ((1 - fx) * image.at(jy, ix) + fx * image.at(jy, jx));
        continue;
      }
      double acc = 0.0;
      double weight = 0.0;
      for (int iy = static_cast<int>(y0); iy < std::min(image.height, static_cast<int>(std::ceil(y1))); ++iy) {
        const double wy = std::min(y1, iy + 1.0) - std::max(y0, static_cast<double>(iy));
        if (wy <= 0) continue;
        for (int ix = static_cast<int>(x0); ix < std::min(image.width, static_cast<int>(std::ceil(x1))); ++ix) {
          const double wx = std::min(x1, ix + 1.0) - std::max(x0, static_cast<double>(ix));
          if (wx <= 0) continue;
          acc += wy * wx * image.at(iy, ix);
          weight += wy * wx;
        }
      }
      out.at(y, x) = acc / weight;
    }
  }
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out(image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) out.at(y, x) = image.at(y, image.width - 1 - x);
  return out;
}

Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw DataError("cannot read image '" + path.string() + "': " + img.message);
  }
  img.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode image '" + path.string() + "': " + msg);
  }
  Image out(static_cast<int>(img.height), static_cast<int>(img.width));
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = from_byte(buffer[i]);
  return out;
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image.pixels[i]);
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(img, size, 0, bytes.data(), 0, nullptr)) {
    throw RuntimeError(std::string("png encode failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, bytes.data(), 0, nullptr)) {
    throw RuntimeError(std::string("png encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const auto bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw RuntimeError("write failed for '" + path.string() + "'");
}

}  // namespace busaug
