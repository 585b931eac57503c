#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hmt {

/// 8-bit interleaved image. Pixel (u, v) is column u, row v; integer
/// coordinates address pixel centers.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
  std::string source_id;

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, 0) {}

  std::uint8_t& at(int u, int v, int c = 0) { return pixels[(static_cast<std::size_t>(v) * width + u) * channels + c]; }
  std::uint8_t at(int u, int v, int c = 0) const {
    return pixels[(static_cast<std::size_t>(v) * width + u) * channels + c];
  }
};

/// Gray, gray+alpha, RGB and RGBA PNGs at 8 bits; 16-bit input is stripped
/// and palettes expanded. Throws Errc::io.
Image read_png(const std::string& path);
void write_png(const Image& img, const std::string& path);

}  // namespace hmt
