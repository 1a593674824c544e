#include "cogs/image.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cogs/error.hpp"

namespace cogs {

size_t Bitmap::count() const {
  return static_cast<size_t>(std::count_if(data.begin(), data.end(), [](uint8_t v) { return v != 0; }));
}

void quantize_8bit(Raster& r) {
  for (double& v : r.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

Raster bitmap_to_raster(const Bitmap& b) {
  Raster r(b.height, b.width, 1);
  for (size_t i = 0; i < b.data.size(); ++i) r.data[i] = b.data[i] ? 1.0 : 0.0;
  return r;
}

Bitmap raster_to_bitmap(const Raster& r) {
  Bitmap b(r.height, r.width);
  for (size_t i = 0; i < b.data.size(); ++i) b.data[i] = r.data[i] >= 0.5 ? 1 : 0;
  return b;
}

std::vector<uint8_t> encode_png(const Raster& r) {
  COGS_CHECK(r.channels == 1 || r.channels == 3, ErrorKind::kShape,
             "encode_png: expected 1 or 3 channels");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = r.width;
  image.height = r.height;
  image.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<uint8_t> interleaved(r.plane() * r.channels);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < r.channels; ++c)
        interleaved[(size_t(y) * r.width + x) * r.channels + c] =
            static_cast<uint8_t>(std::lround(std::clamp(r.at(c, y, x), 0.0, 1.0) * 255.0));
  png_alloc_size_t size = 0;
  COGS_CHECK(png_image_write_to_memory(&image, nullptr, &size, 0, interleaved.data(), 0, nullptr),
             ErrorKind::kIo, std::string("png size query failed: ") + image.message);
  std::vector<uint8_t> out(size);
  COGS_CHECK(png_image_write_to_memory(&image, out.data(), &size, 0, interleaved.data(), 0, nullptr),
             ErrorKind::kIo, std::string("png encode failed: ") + image.message);
  out.resize(size);
  return out;
}

Raster decode_png(const std::vector<uint8_t>& bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw Error(ErrorKind::kFormat, std::string("png decode failed: ") + image.message);
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  std::vector<uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(ErrorKind::kFormat, std::string("png decode failed: ") + image.message);
  }
  Raster r(image.height, image.width, channels);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < channels; ++c)
        r.at(c, y, x) = buf[(size_t(y) * r.width + x) * channels + c] / 255.0;
  return r;
}

void write_png(const std::filesystem::path& path, const Raster& r) {
  const auto bytes = encode_png(r);
  std::ofstream out(path, std::ios::binary);
  COGS_CHECK(out.good(), ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

Raster read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  COGS_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const uint32_t v = (uint32_t(bytes[i]) << 16) | (uint32_t(bytes[i + 1]) << 8) | bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i < bytes.size()) {
    uint32_t v = uint32_t(bytes[i]) << 16;
    if (i + 1 < bytes.size()) v |= uint32_t(bytes[i + 1]) << 8;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += (i + 1 < bytes.size()) ? kB64[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<uint8_t> base64_decode(std::string_view text) {
  std::array<int, 256> table;
  table.fill(-1);
  for (int i = 0; i < 64; ++i) table[static_cast<uint8_t>(kB64[i])] = i;
  std::vector<uint8_t> out;
  uint32_t acc = 0;
  int bits = 0;
  for (char ch : text) {
    if (ch == '=' || ch == '\n' || ch == '\r' || ch == ' ') continue;
    const int v = table[static_cast<uint8_t>(ch)];
    COGS_CHECK(v >= 0, ErrorKind::kFormat, "invalid base64 character");
    acc = (acc << 6) | uint32_t(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

}  // namespace cogs
