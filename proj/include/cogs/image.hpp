#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cogs {

// Planar (channel-major) raster with values nominally in [0,1].
struct Raster {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Raster() = default;
  Raster(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(size_t(h) * w * c, fill) {}

  double& at(int c, int y, int x) { return data[(size_t(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(size_t(c) * height + y) * width + x]; }
  size_t plane() const { return size_t(height) * width; }
  bool empty() const { return data.empty(); }
  bool operator==(const Raster&) const = default;
};

// Binary h x w map (0 or 1).
struct Bitmap {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;

  Bitmap() = default;
  Bitmap(int h, int w, uint8_t fill = 0) : height(h), width(w), data(size_t(h) * w, fill) {}

  uint8_t& at(int y, int x) { return data[size_t(y) * width + x]; }
  uint8_t at(int y, int x) const { return data[size_t(y) * width + x]; }
  size_t count() const;
  bool operator==(const Bitmap&) const = default;
};

// Snaps every value to the nearest 8-bit level so PNG storage is lossless.
void quantize_8bit(Raster& r);

Raster bitmap_to_raster(const Bitmap& b);
// Threshold at 0.5 of the first channel.
Bitmap raster_to_bitmap(const Raster& r);

// PNG codec. Rasters with 1 channel encode as 8-bit gray, 3 as RGB.
std::vector<uint8_t> encode_png(const Raster& r);
Raster decode_png(const std::vector<uint8_t>& bytes);
void write_png(const std::filesystem::path& path, const Raster& r);
Raster read_png(const std::filesystem::path& path);

std::string base64_encode(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> base64_decode(std::string_view text);

}  // namespace cogs
