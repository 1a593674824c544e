#pragma once

#include <span>
#include <vector>

#include "cogs/image.hpp"
#include "cogs/tensor.hpp"

namespace cogs {

// Stacks same-shaped rasters into [B,C,H,W].
ag::Tensor stack_rasters(std::span<const Raster> rasters);
ag::Tensor stack_rasters(const std::vector<const Raster*>& rasters);
// Extracts image b of a [B,C,H,W] tensor.
Raster raster_from_tensor(const ag::Tensor& t, int b);

}  // namespace cogs
