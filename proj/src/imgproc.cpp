#include "cogs/imgproc.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "cogs/error.hpp"

namespace cogs {

Raster to_gray(const Raster& image) {
  if (image.channels == 1) return image;
  COGS_CHECK(image.channels == 3, ErrorKind::kShape, "to_gray: expected 1 or 3 channels");
  Raster g(image.height, image.width, 1);
  const size_t n = image.plane();
  for (size_t i = 0; i < n; ++i)
    g.data[i] = 0.299 * image.data[i] + 0.587 * image.data[n + i] + 0.114 * image.data[2 * n + i];
  return g;
}

Raster to_rgb(const Raster& image) {
  if (image.channels == 3) return image;
  COGS_CHECK(image.channels == 1, ErrorKind::kShape, "to_rgb: expected 1 or 3 channels");
  Raster out(image.height, image.width, 3);
  for (int c = 0; c < 3; ++c) std::copy(image.data.begin(), image.data.end(), out.data.begin() + c * image.plane());
  return out;
}

Raster gaussian_blur(const Raster& image, double sigma) {
  COGS_CHECK(sigma > 0.0, ErrorKind::kConfig, "gaussian_blur: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double z = 0.0;
  for (int i = -radius; i <= radius; ++i) z += (kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& k : kernel) k /= z;

  const int h = image.height, w = image.width;
  Raster tmp(h, w, image.channels), out(h, w, image.channels);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[i + radius] * image.at(c, y, std::clamp(x + i, 0, w - 1));
        tmp.at(c, y, x) = acc;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += kernel[i + radius] * tmp.at(c, std::clamp(y + i, 0, h - 1), x);
        out.at(c, y, x) = acc;
      }
  }
  return out;
}

Bitmap canny(const Raster& image, const CannyParams& params) {
  Raster g = to_gray(image);
  if (params.sigma > 0.0) g = gaussian_blur(g, params.sigma);
  const int h = g.height, w = g.width;
  auto px = [&](int y, int x) { return g.at(0, std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1)); };

  std::vector<double> mag(size_t(h) * w), gx(mag.size()), gy(mag.size());
  double max_mag = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double dy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      const size_t i = size_t(y) * w + x;
      gx[i] = dx;
      gy[i] = dy;
      mag[i] = std::hypot(dx, dy);
      max_mag = std::max(max_mag, mag[i]);
    }
  Bitmap edges(h, w);
  // Below this the image is treated as flat (8-bit quantization noise).
  if (max_mag < 1e-9) return edges;

  auto mag_at = [&](int y, int x) {
    return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : mag[size_t(y) * w + x];
  };
  std::vector<uint8_t> cls(mag.size(), 0);  // 0 none, 1 weak, 2 strong
  const double lo = params.low * max_mag, hi = params.high * max_mag;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t i = size_t(y) * w + x;
      const double m = mag[i];
      if (m < lo || m == 0.0) continue;
      double angle = std::atan2(gy[i], gx[i]) * 180.0 / M_PI;
      if (angle < 0) angle += 180.0;
      int ox = 0, oy = 0;
      if (angle < 22.5 || angle >= 157.5) {
        ox = 1;
      } else if (angle < 67.5) {
        ox = 1;
        oy = 1;
      } else if (angle < 112.5) {
        oy = 1;
      } else {
        ox = -1;
        oy = 1;
      }
      // Ties resolve toward the negative side so step edges stay one pixel wide.
      if (m > mag_at(y - oy, x - ox) && m >= mag_at(y + oy, x + ox)) cls[i] = m >= hi ? 2 : 1;
    }
  std::deque<size_t> queue;
  for (size_t i = 0; i < cls.size(); ++i)
    if (cls[i] == 2) {
      edges.data[i] = 1;
      queue.push_back(i);
    }
  while (!queue.empty()) {
    const size_t i = queue.front();
    queue.pop_front();
    const int y = int(i / w), x = int(i % w);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const size_t j = size_t(ny) * w + nx;
        if (cls[j] == 1 && !edges.data[j]) {
          edges.data[j] = 1;
          queue.push_back(j);
        }
      }
  }
  return edges;
}

Bitmap dilate(const Bitmap& mask, double radius) {
  Bitmap out(mask.height, mask.width);
  const int r = static_cast<int>(std::floor(radius));
  const double r2 = radius * radius;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= mask.height || nx < 0 || nx >= mask.width) continue;
          if (dx * dx + dy * dy <= r2) out.at(ny, nx) = 1;
        }
    }
  return out;
}

}  // namespace cogs
