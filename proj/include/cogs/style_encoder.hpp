#pragma once

// Fixed style descriptor: per-channel mean/stddev of a frozen random-weight
// conv stack plus a soft color histogram, L2-normalized. Differentiable with
// respect to pixels.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cogs/dataset.hpp"
#include "cogs/image.hpp"
#include "cogs/nn.hpp"

namespace cogs::style {

struct StyleEmbedding {
  std::vector<double> values;
  std::optional<std::string> source_image_id;
};

class StyleEncoder {
 public:
  static constexpr int kConv1 = 16;
  static constexpr int kConv2 = 24;
  static constexpr int kBins = 16;
  static constexpr double kBandwidth = 1.0 / 16.0;

  explicit StyleEncoder(uint64_t seed = 17);
  // Adopts serialized frozen weights.
  explicit StyleEncoder(nn::ParamStore weights);

  // 2*(16+24) + 3*16 = 128
  int dim() const { return 2 * (kConv1 + kConv2) + 3 * kBins; }
  // Conv statistics plus 2x2 pooled means of the second layer.
  int feature_dim() const { return 2 * (kConv1 + kConv2) + 4 * kConv2; }

  StyleEmbedding embed(const Raster& image) const;
  // images[B,3,H,W] (1-channel input is replicated) -> [B, dim]
  ag::Tensor embed_batch(const ag::Tensor& images) const;

  std::vector<double> features(const Raster& image) const;
  ag::Tensor features_batch(const ag::Tensor& images) const;

  const nn::ParamStore& weights() const { return weights_; }

 private:
  struct Activations {
    ag::Tensor layer1, layer2;
  };
  Activations run(const ag::Tensor& images) const;

  nn::ParamStore weights_;
};

// Euclidean distance; throws on dimension mismatch.
double style_distance(const StyleEmbedding& a, const StyleEmbedding& b);
double euclidean(const std::vector<double>& a, const std::vector<double>& b);

struct KMeansResult {
  std::vector<int> assignment;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
};

// Lloyd iterations from k-means++ seeds; best inertia over `restarts`.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k, int restarts,
                    uint64_t seed, int max_iter = 100);

struct Candidate {
  std::string id;
  std::vector<double> embedding;
};

struct DiverseSelection {
  std::vector<std::string> ids;
  bool flagged = false;  // fewer than k candidates were available
};

// Among the N nearest candidates to `target` (itself included), cluster into
// k groups and return the member nearest each centroid.
DiverseSelection select_diverse_styles(const std::vector<double>& target,
                                       const std::vector<Candidate>& same_class, int N,
                                       int k, uint64_t seed);

DiverseSelection select_diverse_styles(const data::ImageRecord& target,
                                       const data::Manifest& manifest, int N, int k,
                                       const StyleEncoder& encoder, uint64_t seed = 0);

}  // namespace cogs::style
