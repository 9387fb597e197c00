#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace v2f {

/// H x W x 3 image, interleaved RGB, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, float fill = 0.0f) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// 8-bit RGB raster used for overlays and plots.
struct Canvas {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Canvas() = default;
  Canvas(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}
};

Canvas to_canvas(const Image& img);

/// 8-bit PNG I/O through libpng. Throws IoError.
void write_png(const std::filesystem::path& path, const Canvas& canvas);
Canvas read_png(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png_image(const std::filesystem::path& path);

}  // namespace v2f
