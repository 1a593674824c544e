#pragma once

#include "cogs/image.hpp"

namespace cogs {

// Hysteresis thresholds are fractions of the maximum gradient magnitude.
struct CannyParams {
  double low = 0.1;
  double high = 0.3;
  double sigma = 1.0;  // pre-smoothing; 0 disables
};

Raster to_gray(const Raster& image);
Raster to_rgb(const Raster& image);

// Separable Gaussian, kernel radius ceil(3 sigma), replicated borders.
Raster gaussian_blur(const Raster& image, double sigma);

// Sobel gradients, non-maximum suppression, double threshold and 8-connected
// hysteresis. A flat image yields no edges.
Bitmap canny(const Raster& image, const CannyParams& params);

// Set pixels within Euclidean distance `radius` of any set pixel.
Bitmap dilate(const Bitmap& mask, double radius);

}  // namespace cogs
