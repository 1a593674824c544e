#include "cogs/style_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cogs/error.hpp"
#include "cogs/raster_tensor.hpp"

namespace cogs::style {

using ag::Tensor;

StyleEncoder::StyleEncoder(uint64_t seed) {
  Rng rng(derive_seed(seed, "style-encoder"));
  weights_.add("style.conv1.w", {kConv1, 3, 3, 3}, nn::Init::kNormal, rng, 2.0 / std::sqrt(27.0));
  weights_.add("style.conv1.b", {kConv1}, nn::Init::kUniform, rng, 0.5);
  weights_.add("style.conv2.w", {kConv2, kConv1, 3, 3}, nn::Init::kNormal, rng,
               2.0 / std::sqrt(9.0 * kConv1));
  weights_.add("style.conv2.b", {kConv2}, nn::Init::kUniform, rng, 0.5);
  weights_.round_to_float();
  weights_.set_requires_grad(false);
}

StyleEncoder::StyleEncoder(nn::ParamStore weights) : weights_(std::move(weights)) {
  for (const char* name : {"style.conv1.w", "style.conv1.b", "style.conv2.w", "style.conv2.b"})
    COGS_CHECK(weights_.contains(name), ErrorKind::kFormat, std::string("style encoder missing ") + name);
  COGS_CHECK(weights_.get("style.conv1.w").shape() == ag::Shape({kConv1, 3, 3, 3}) &&
                 weights_.get("style.conv2.w").shape() == ag::Shape({kConv2, kConv1, 3, 3}),
             ErrorKind::kShape, "style encoder weight shapes do not match");
  weights_.set_requires_grad(false);
}

StyleEncoder::Activations StyleEncoder::run(const Tensor& images) const {
  COGS_CHECK(images.rank() == 4 && (images.dim(1) == 3 || images.dim(1) == 1), ErrorKind::kShape,
             "style encoder expects [B,3,H,W] or [B,1,H,W]");
  Tensor x = images.dim(1) == 1 ? ag::replicate_channels(images, 3) : images;
  Activations a;
  a.layer1 = ag::tanh(ag::conv2d(x, weights_.get("style.conv1.w"), weights_.get("style.conv1.b"), 1, 1));
  a.layer2 = ag::tanh(ag::conv2d(a.layer1, weights_.get("style.conv2.w"), weights_.get("style.conv2.b"), 2, 1));
  return a;
}

Tensor StyleEncoder::embed_batch(const Tensor& images) const {
  const Activations a = run(images);
  Tensor x = images.dim(1) == 1 ? ag::replicate_channels(images, 3) : images;
  Tensor parts = ag::concat_cols({ag::channel_mean_std(a.layer1), ag::channel_mean_std(a.layer2),
                                  ag::soft_histogram(x, kBins, kBandwidth)});
  return ag::l2_normalize_rows(parts);
}

Tensor StyleEncoder::features_batch(const Tensor& images) const {
  const Activations a = run(images);
  return ag::concat_cols({ag::channel_mean_std(a.layer1), ag::channel_mean_std(a.layer2),
                          ag::region_mean(a.layer2, 2)});
}

StyleEmbedding StyleEncoder::embed(const Raster& image) const {
  for (double v : image.data)
    COGS_CHECK(std::isfinite(v), ErrorKind::kNumeric, "style_embed: non-finite pixel");
  ag::NoGradGuard guard;
  const Raster* p = &image;
  Tensor e = embed_batch(stack_rasters(std::vector<const Raster*>{p}));
  return {e.values(), std::nullopt};
}

std::vector<double> StyleEncoder::features(const Raster& image) const {
  ag::NoGradGuard guard;
  const Raster* p = &image;
  return features_batch(stack_rasters(std::vector<const Raster*>{p})).values();
}

double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  COGS_CHECK(a.size() == b.size(), ErrorKind::kShape,
             "dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

double style_distance(const StyleEmbedding& a, const StyleEmbedding& b) {
  return euclidean(a.values, b.values);
}

namespace {

double sq(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

KMeansResult lloyd(const std::vector<std::vector<double>>& pts, int k, Rng& rng, int max_iter) {
  const size_t n = pts.size();
  KMeansResult res;
  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  res.centroids.push_back(pts[std::uniform_int_distribution<size_t>(0, n - 1)(rng)]);
  while (int(res.centroids.size()) < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq(pts[i], res.centroids.back()));
      total += d2[i];
    }
    size_t pick = 0;
    if (total > 0.0) {
      double u = uniform(rng, 0.0, total);
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u <= 0.0 && d2[pick] > 0.0) break;
      }
    }
    res.centroids.push_back(pts[pick]);
  }
  res.assignment.assign(n, -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = sq(pts[i], res.centroids[0]);
      for (int c = 1; c < k; ++c) {
        const double d = sq(pts[i], res.centroids[c]);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (res.assignment[i] != best) {
        res.assignment[i] = best;
        changed = true;
      }
    }
    // Empty clusters take the point farthest from its centroid.
    for (int c = 0; c < k; ++c) {
      if (std::count(res.assignment.begin(), res.assignment.end(), c) > 0) continue;
      size_t far = 0;
      double fd = -1.0;
      for (size_t i = 0; i < n; ++i) {
        const double d = sq(pts[i], res.centroids[res.assignment[i]]);
        if (d > fd && std::count(res.assignment.begin(), res.assignment.end(), res.assignment[i]) > 1) {
          fd = d;
          far = i;
        }
      }
      res.assignment[far] = c;
      changed = true;
    }
    for (int c = 0; c < k; ++c) {
      std::vector<double> mean(pts[0].size(), 0.0);
      int count = 0;
      for (size_t i = 0; i < n; ++i)
        if (res.assignment[i] == c) {
          for (size_t j = 0; j < mean.size(); ++j) mean[j] += pts[i][j];
          ++count;
        }
      for (double& v : mean) v /= count;
      res.centroids[c] = std::move(mean);
    }
    if (!changed) break;
  }
  res.inertia = 0.0;
  for (size_t i = 0; i < n; ++i) res.inertia += sq(pts[i], res.centroids[res.assignment[i]]);
  return res;
}

}  // namespace

KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k, int restarts, uint64_t seed,
                    int max_iter) {
  COGS_CHECK(k >= 1 && size_t(k) <= points.size(), ErrorKind::kRange,
             "kmeans: need 1 <= k <= number of points");
  Rng rng(derive_seed(seed, "kmeans"));
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, restarts); ++r) {
    KMeansResult res = lloyd(points, k, rng, max_iter);
    if (res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

DiverseSelection select_diverse_styles(const std::vector<double>& target,
                                       const std::vector<Candidate>& same_class, int N, int k,
                                       uint64_t seed) {
  COGS_CHECK(k >= 1 && N >= k, ErrorKind::kConfig, "select_diverse_styles: need N >= k >= 1");
  std::vector<std::pair<double, const Candidate*>> ranked;
  for (const Candidate& c : same_class) ranked.emplace_back(euclidean(target, c.embedding), &c);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second->id < b.second->id;
  });
  if (ranked.size() > size_t(N)) ranked.resize(N);

  DiverseSelection out;
  if (ranked.size() <= size_t(k)) {
    out.flagged = ranked.size() < size_t(k);
    for (const auto& r : ranked) out.ids.push_back(r.second->id);
    return out;
  }
  std::vector<std::vector<double>> pts;
  for (const auto& r : ranked) pts.push_back(r.second->embedding);
  const KMeansResult km = kmeans(pts, k, 10, seed);
  std::vector<size_t> reps;
  for (int c = 0; c < k; ++c) {
    long best = -1;
    double bd = 0.0;
    for (size_t i = 0; i < pts.size(); ++i) {
      if (km.assignment[i] != c) continue;
      const double d = sq(pts[i], km.centroids[c]);
      if (best < 0 || d < bd || (d == bd && ranked[i].second->id < ranked[size_t(best)].second->id)) {
        best = long(i);
        bd = d;
      }
    }
    reps.push_back(size_t(best));
  }
  std::sort(reps.begin(), reps.end());
  for (size_t i : reps) out.ids.push_back(ranked[i].second->id);
  return out;
}

DiverseSelection select_diverse_styles(const data::ImageRecord& target, const data::Manifest& manifest,
                                       int N, int k, const StyleEncoder& encoder, uint64_t seed) {
  std::vector<Candidate> cands;
  for (const auto& r : manifest.records)
    if (r.image.class_label == target.class_label)
      cands.push_back({r.image.id, encoder.embed(r.image.pixels).values});
  return select_diverse_styles(encoder.embed(target.pixels).values, cands, N, k, seed);
}

}  // namespace cogs::style
