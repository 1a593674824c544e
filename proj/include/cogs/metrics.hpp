#pragma once

// Evaluation measures: feature-space Frechet distance, diversity, structure
// (Chamfer against Canny edges), class partitioning and precision@k.

#include <map>
#include <vector>

#include "cogs/dataset.hpp"
#include "cogs/image.hpp"
#include "cogs/imgproc.hpp"
#include "cogs/style_encoder.hpp"

namespace cogs::metrics {

// Pooled activations of the frozen style encoder, one vector per image.
std::vector<std::vector<double>> embed_features(const std::vector<Raster>& images,
                                                const style::StyleEncoder& encoder);

struct GaussianStats {
  std::vector<double> mean;
  std::vector<double> covariance;  // m x m, row-major
  long count = 0;

  int dim() const { return static_cast<int>(mean.size()); }
};

// Sample mean and unbiased covariance; needs at least two vectors.
GaussianStats gaussian_stats(const std::vector<std::vector<double>>& features);

// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)). Eigenvalues below -1e-8
// are rejected as non-PSD; smaller negatives clamp to zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// Mean pairwise feature distance over all unique pairs.
double diversity_score(const std::vector<Raster>& outputs, const style::StyleEncoder& encoder);
double diversity_score(const std::vector<std::vector<double>>& features);

struct DistanceField {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int y, int x) const { return values[size_t(y) * width + x]; }
};

DistanceField distance_transform(const Bitmap& edges);

struct ChamferResult {
  double distance = 0.0;
  bool flagged = false;  // generated image had no edges; distance is the diagonal
};

// Mean, over the sketch's stroke pixels, of the distance to the nearest Canny
// edge of `generated`.
ChamferResult chamfer_structure(const Bitmap& sketch, const Raster& generated, const CannyParams& canny = {});
ChamferResult chamfer_structure(const data::SketchRecord& sketch, const Raster& generated,
                                const CannyParams& canny = {});

struct Partitions {
  std::vector<int> simple;
  std::vector<int> medium;
  std::vector<int> complex;
};

// Ascending-score tertiles; ties go by class index.
Partitions partition_classes(const std::map<int, double>& per_class_scores);

double precision_at_k(const std::vector<std::vector<bool>>& relevance, int k);

}  // namespace cogs::metrics
