#pragma once

#include <filesystem>
#include <vector>

namespace cfdiff {

/// Row-major H x W x 3 float image with values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int r, int c, int ch) { return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  float at(int r, int c, int ch) const { return pixels[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  bool operator==(const Image&) const = default;
};

/// 8-bit RGB PNG. Values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Quantizes to 8 bits and back, i.e. what a PNG round trip yields.
Image quantize8(const Image& image);

/// Places images side by side (rows x cols, row-major) with a 1 px gap.
Image tile_images(const std::vector<Image>& images, int cols, float gap_value = 1.0f);

double mean_abs_diff(const Image& a, const Image& b);

}  // namespace cfdiff
