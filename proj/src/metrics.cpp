#include "cogs/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "cogs/error.hpp"
#include "cogs/kernels.hpp"

namespace cogs::metrics {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix as_matrix(const GaussianStats& s) {
  return Eigen::Map<const Matrix>(s.covariance.data(), s.dim(), s.dim());
}

// Symmetric PSD square root by eigendecomposition.
Matrix psd_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
  COGS_CHECK(eig.info() == Eigen::Success, ErrorKind::kNumeric, "eigendecomposition failed");
  Eigen::VectorXd ev = eig.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) {
    COGS_CHECK(ev[i] >= -1e-8, ErrorKind::kNumeric,
               "matrix is not positive semi-definite (eigenvalue " + std::to_string(ev[i]) + ")");
    ev[i] = std::sqrt(std::max(ev[i], 0.0));
  }
  return eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
}

double l2(const std::vector<double>& a, const std::vector<double>& b) { return style::euclidean(a, b); }

}  // namespace

std::vector<std::vector<double>> embed_features(const std::vector<Raster>& images,
                                                const style::StyleEncoder& encoder) {
  std::vector<std::vector<double>> out(images.size());
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < images.size(); ++i) out[i] = encoder.features(images[i]);
  return out;
}

GaussianStats gaussian_stats(const std::vector<std::vector<double>>& features) {
  COGS_CHECK(features.size() >= 2, ErrorKind::kRange, "gaussian_stats: need at least two samples");
  const size_t m = features[0].size();
  GaussianStats s;
  s.count = long(features.size());
  s.mean.assign(m, 0.0);
  for (const auto& f : features) {
    COGS_CHECK(f.size() == m, ErrorKind::kShape, "gaussian_stats: feature dimensions differ");
    for (size_t j = 0; j < m; ++j) s.mean[j] += f[j];
  }
  for (double& v : s.mean) v /= double(features.size());
  s.covariance.assign(m * m, 0.0);
  for (const auto& f : features)
    for (size_t a = 0; a < m; ++a)
      for (size_t b = a; b < m; ++b) s.covariance[a * m + b] += (f[a] - s.mean[a]) * (f[b] - s.mean[b]);
  for (size_t a = 0; a < m; ++a)
    for (size_t b = a; b < m; ++b) {
      s.covariance[a * m + b] /= double(features.size() - 1);
      s.covariance[b * m + a] = s.covariance[a * m + b];
    }
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  COGS_CHECK(a.dim() == b.dim(), ErrorKind::kShape,
             "frechet_distance: dimension mismatch " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  const size_t m = a.mean.size();
  COGS_CHECK(a.covariance.size() == m * m && b.covariance.size() == m * m, ErrorKind::kShape,
             "frechet_distance: covariance is not m x m");
  double mean_term = 0.0;
  for (size_t i = 0; i < m; ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);

  // Tr((S1 S2)^1/2) = Tr((S1^1/2 S2 S1^1/2)^1/2), whose argument is symmetric.
  const Matrix s1 = as_matrix(a), s2 = as_matrix(b);
  const Matrix r1 = psd_sqrt(s1);
  const Matrix inner = r1 * s2 * r1;
  const Matrix cross = psd_sqrt(0.5 * (inner + inner.transpose()));
  const double d = mean_term + s1.trace() + s2.trace() - 2.0 * cross.trace();
  return std::max(d, 0.0);
}

double diversity_score(const std::vector<std::vector<double>>& features) {
  COGS_CHECK(features.size() >= 2, ErrorKind::kRange, "diversity_score: need at least two outputs");
  double sum = 0.0;
  long pairs = 0;
  for (size_t i = 0; i < features.size(); ++i)
    for (size_t j = i + 1; j < features.size(); ++j, ++pairs) sum += l2(features[i], features[j]);
  return sum / double(pairs);
}

double diversity_score(const std::vector<Raster>& outputs, const style::StyleEncoder& encoder) {
  COGS_CHECK(outputs.size() >= 2, ErrorKind::kRange, "diversity_score: need at least two outputs");
  return diversity_score(embed_features(outputs, encoder));
}

DistanceField distance_transform(const Bitmap& edges) {
  COGS_CHECK(edges.count() > 0, ErrorKind::kRange, "distance_transform: edge map is empty");
  DistanceField f{edges.height, edges.width, std::vector<double>(edges.data.size())};
  kernels::distance_transform(edges.data.data(), edges.height, edges.width, f.values.data());
  return f;
}

ChamferResult chamfer_structure(const Bitmap& sketch, const Raster& generated, const CannyParams& canny_params) {
  COGS_CHECK(sketch.count() > 0, ErrorKind::kRange, "chamfer_structure: sketch has no strokes");
  COGS_CHECK(sketch.height == generated.height && sketch.width == generated.width, ErrorKind::kShape,
             "chamfer_structure: sketch and image sizes differ");
  const Bitmap edges = canny(generated, canny_params);
  if (edges.count() == 0)
    return {std::hypot(double(sketch.height), double(sketch.width)), true};
  const DistanceField f = distance_transform(edges);
  double sum = 0.0;
  for (size_t i = 0; i < sketch.data.size(); ++i)
    if (sketch.data[i]) sum += f.values[i];
  return {sum / double(sketch.count()), false};
}

ChamferResult chamfer_structure(const data::SketchRecord& sketch, const Raster& generated,
                                const CannyParams& canny_params) {
  return chamfer_structure(sketch.pixels, generated, canny_params);
}

Partitions partition_classes(const std::map<int, double>& per_class_scores) {
  COGS_CHECK(per_class_scores.size() >= 3, ErrorKind::kRange, "partition_classes: need at least three classes");
  std::vector<std::pair<double, int>> order;
  for (const auto& [c, s] : per_class_scores) order.emplace_back(s, c);
  std::sort(order.begin(), order.end());
  const size_t n = order.size();
  // Remainders go to the earlier tertiles.
  const size_t a = (n + 2) / 3, b = (n + 1) / 3;
  Partitions p;
  for (size_t i = 0; i < n; ++i)
    (i < a ? p.simple : i < a + b ? p.medium : p.complex).push_back(order[i].second);
  return p;
}

double precision_at_k(const std::vector<std::vector<bool>>& relevance, int k) {
  COGS_CHECK(k >= 1, ErrorKind::kRange, "precision_at_k: k must be >= 1");
  COGS_CHECK(!relevance.empty(), ErrorKind::kRange, "precision_at_k: no queries");
  double total = 0.0;
  for (const auto& list : relevance) {
    COGS_CHECK(list.size() >= size_t(k), ErrorKind::kRange,
               "precision_at_k: ranked list shorter than k (" + std::to_string(list.size()) + ")");
    total += double(std::count(list.begin(), list.begin() + k, true)) / k;
  }
  return total / double(relevance.size());
}

}  // namespace cogs::metrics
