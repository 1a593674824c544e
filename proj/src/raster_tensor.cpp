#include "cogs/raster_tensor.hpp"

#include "cogs/error.hpp"

namespace cogs {

ag::Tensor stack_rasters(const std::vector<const Raster*>& rasters) {
  COGS_CHECK(!rasters.empty(), ErrorKind::kShape, "stack_rasters: empty batch");
  const Raster& first = *rasters.front();
  std::vector<double> values;
  values.reserve(first.data.size() * rasters.size());
  for (const Raster* r : rasters) {
    COGS_CHECK(r->height == first.height && r->width == first.width && r->channels == first.channels,
               ErrorKind::kShape, "stack_rasters: mixed raster shapes");
    values.insert(values.end(), r->data.begin(), r->data.end());
  }
  return ag::Tensor::from({int(rasters.size()), first.channels, first.height, first.width},
                          std::move(values));
}

ag::Tensor stack_rasters(std::span<const Raster> rasters) {
  std::vector<const Raster*> ptrs;
  for (const Raster& r : rasters) ptrs.push_back(&r);
  return stack_rasters(ptrs);
}

Raster raster_from_tensor(const ag::Tensor& t, int b) {
  COGS_CHECK(t.rank() == 4 && b >= 0 && b < t.dim(0), ErrorKind::kShape, "raster_from_tensor");
  Raster r(t.dim(2), t.dim(3), t.dim(1));
  const size_t n = r.data.size();
  std::copy_n(t.values().begin() + b * n, n, r.data.begin());
  return r;
}

}  // namespace cogs
