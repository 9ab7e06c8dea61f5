#pragma once

#include "anerf/common.hpp"

#include <filesystem>
#include <vector>

namespace anerf {

/// Row-major interleaved float image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), pixels(static_cast<size_t>(w) * h * c, fill) {}

  float& at(int row, int col, int ch = 0) {
    return pixels[(static_cast<size_t>(row) * width + col) * channels + ch];
  }
  float at(int row, int col, int ch = 0) const {
    return pixels[(static_cast<size_t>(row) * width + col) * channels + ch];
  }
  bool same_shape(const Image& other) const {
    return width == other.width && height == other.height && channels == other.channels;
  }
  bool operator==(const Image& other) const = default;
};

/// 8-bit PNG (gray or RGB); values clamped to [0, 1].
void write_png8(const Image& image, const std::filesystem::path& path);

/// 16-bit PNG; stored value = round(clamp(v / scale, 0, 1) * 65535).
void write_png16(const Image& image, const std::filesystem::path& path, double scale = 1.0);

/// Reads 8- or 16-bit gray/RGB PNG into [0, 1] floats (alpha dropped).
Image read_png(const std::filesystem::path& path);

/// The value a 16-bit PNG round trip yields for v in [0, 1].
inline float quantize16(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<float>(static_cast<double>(static_cast<int>(c * 65535.0 + 0.5)) / 65535.0);
}

}  // namespace anerf
