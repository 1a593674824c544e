#pragma once

// Per-class variational embedding of image-token grids. The encoder maps a
// quantized latent grid to (mean, stddev) in a d-dim space W trained so that
// generations sharing a sketch sit close together; the decoder maps W back to
// a grid, which is re-quantized against the image codebook.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cogs/metrics.hpp"
#include "cogs/nn.hpp"
#include "cogs/transformer.hpp"
#include "cogs/vq.hpp"
#include "json.hpp"

namespace cogs::vae {

struct VAEConfig {
  int d = 64;
  int channels = 32;  // conv width over the latent grid
  int hidden = 256;
  double tau = 0.1;  // contrastive temperature
  double lambda_v = 1e6;
  // Training-time augmentation: each input token is swapped for a uniformly
  // random codebook entry with this probability.
  double token_noise = 0.15;
  int pairs_per_batch = 8;  // N; a batch holds 2N generations
  int bootstrap_epochs = 40;  // stage-1 cap
  int patience = 3;
  double plateau_tol = 1e-3;
  int epochs = 20;  // stage 2
  double lr = 1e-3;
  uint64_t seed = 1;

  void validate() const;
};

VAEConfig vae_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VAEConfig& c);

struct LatentPoint {
  std::vector<double> mean;
  std::vector<double> stddev;
  int class_label = 0;
};

// Grid of codebook rows selected by `tokens`.
vq::LatentGrid grid_from_tokens(const vq::TokenGrid& tokens, const vq::Codebook& codebook);

struct Decoded {
  vq::LatentGrid grid;
  vq::TokenGrid tokens;
};

// Training-mode encoder output for a batch of flattened grids.
struct Encoded {
  ag::Tensor mean;       // [B, d]
  ag::Tensor log_sigma;  // [B, d]
};

class RefineVAE {
 public:
  // class_label -1 is a shared model over every class.
  RefineVAE(const VAEConfig& cfg, int class_label, const vq::Codebook& image_codebook, int grid_h, int grid_w);

  const VAEConfig& config() const { return cfg_; }
  int class_label() const { return class_label_; }
  int input_dim() const { return grid_h_ * grid_w_ * codebook_.n_z; }
  const vq::Codebook& codebook() const { return codebook_; }

  Encoded encode_batch(const ag::Tensor& grids) const;
  // w[B,d] -> continuous grids [B, h*w*n_z]
  ag::Tensor decode_batch(const ag::Tensor& w) const;

  LatentPoint encode(const vq::LatentGrid& z) const;
  LatentPoint encode(const vq::TokenGrid& tokens) const;
  // Reparameterized draw mean + stddev * eps with eps ~ N(0, I) from `noise_seed`.
  std::vector<double> sample(const LatentPoint& p, uint64_t noise_seed) const;
  Decoded decode(const std::vector<double>& w) const;

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  std::vector<ag::Tensor> encoder_params() const;

  nlohmann::json metadata() const;
  void save(const std::filesystem::path& path) const;
  static RefineVAE load(const std::filesystem::path& path);

 private:
  void check_grid(const vq::LatentGrid& z) const;

  VAEConfig cfg_;
  int class_label_;
  vq::Codebook codebook_;
  int grid_h_, grid_w_;
  nn::ParamStore params_;
};

// Per-row sum of squared reconstruction error plus closed-form KL to N(0, I),
// both averaged over the batch.
ag::Tensor elbo_loss(const ag::Tensor& z, const Encoded& encoded, const ag::Tensor& decoded);

// InfoNCE over L2-normalized rows: anchor i's positive is positives[i]; every
// other row except i itself is a negative.
ag::Tensor contrastive_loss(const ag::Tensor& embeddings, const std::vector<int32_t>& positives, double tau);

// elbo + lambda * contrastive
ag::Tensor vae_loss(const ag::Tensor& elbo, const ag::Tensor& contrastive, double lambda);

// One generated image and where it came from.
struct GeneratedSample {
  std::string id;
  std::string sketch_id;
  std::string style_id;
  int class_label = 0;
  vq::TokenGrid tokens;
};

// Samples the transformer `per_sketch` times per sketch of `class_label`
// (-1: all classes), each with a different same-class style image. Sampling
// settings default to the model's own.
std::vector<GeneratedSample> generate_corpus(const tf::CogsTransformer& model, const tf::Frozen& frozen,
                                             const data::Manifest& manifest, int class_label, int per_sketch,
                                             uint64_t seed, std::optional<double> temperature = {},
                                             std::optional<int> top_k = {});

// Anchor/positive batches: N sketches, two generations each, rows (2i, 2i+1).
struct PairBatch {
  std::vector<const GeneratedSample*> items;
  std::vector<int32_t> positives;
};
std::vector<PairBatch> make_pair_batches(const std::vector<GeneratedSample>& samples, int pairs_per_batch,
                                         Rng& rng);

struct EpochLog {
  int stage = 1;
  int epoch = 0;
  double loss = 0.0;
  double contrastive = 0.0;
  double elbo = 0.0;
};

// `init`, when given, supplies starting weights (e.g. a model bootstrapped on
// every class); it must share the config's shape and the codebook.
RefineVAE train_refine_vae(int class_label, const std::vector<GeneratedSample>& corpus, const VAEConfig& cfg,
                           const vq::Codebook& image_codebook, int grid_h, int grid_w,
                           const std::function<void(const EpochLog&)>& on_epoch = {},
                           const RefineVAE* init = nullptr);

// Fraction of anchors whose positive is nearest (by mean embedding) among all
// other rows of its batch.
double positive_precision_at_1(const RefineVAE& vae, const std::vector<PairBatch>& batches);

// ---------------------------------------------------------------- index

struct IndexEntry {
  std::string id;
  std::vector<double> mean;
  nlohmann::json metadata;
};

struct Neighbor {
  std::string id;
  double distance = 0.0;
};

struct RetrievalResult {
  std::vector<Neighbor> neighbors;
  bool flagged = false;  // k exceeded the index size
};

class EmbeddingIndex {
 public:
  EmbeddingIndex(int class_label, int d) : class_label_(class_label), d_(d) {}

  int class_label() const { return class_label_; }
  int dim() const { return d_; }
  size_t size() const { return entries_.size(); }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  const IndexEntry* find(const std::string& id) const;

  void add(IndexEntry entry);

  void save(const std::filesystem::path& path) const;
  static EmbeddingIndex load(const std::filesystem::path& path);

 private:
  int class_label_;
  int d_;
  std::vector<IndexEntry> entries_;
  std::vector<double> flat_;  // means, row-major
};

// Euclidean k-nearest means, ascending distance, ties by id.
RetrievalResult retrieve(const std::vector<double>& query, const EmbeddingIndex& index, int k);
RetrievalResult retrieve(const LatentPoint& query, const EmbeddingIndex& index, int k);

// ---------------------------------------------------------------- interpolation

struct InterpolationOptions {
  int n_samples = 5;
  // Explicit t values replace the uniform grid (i+1)/(n+1), i < n.
  std::vector<double> t_values;
  bool spherical = false;
  // Samples whose quality score exceeds this are dropped; unset keeps all.
  std::optional<double> quality_threshold;
};

struct InterpolationSample {
  double t = 0.0;
  std::vector<double> w;
  double distance_from_query = 0.0;
  vq::TokenGrid tokens;
  Raster image;
  double quality = 0.0;
};

struct InterpolationResult {
  std::vector<InterpolationSample> samples;
  size_t requested = 0;
  bool flagged = false;  // nothing survived the filter
};

// Frechet distance between a point mass at `features` and the class Gaussian.
double quality_score(const std::vector<double>& features, const metrics::GaussianStats& class_stats);
// Quantile of the class's own real-image quality scores.
double calibrate_quality_threshold(const std::vector<std::vector<double>>& real_features,
                                   const metrics::GaussianStats& class_stats, double quantile = 0.95);

std::vector<double> interpolate(const std::vector<double>& a, const std::vector<double>& b, double t,
                                bool spherical);

InterpolationResult interpolate_refine(const RefineVAE& vae, const std::vector<double>& w_query,
                                       const std::vector<double>& w_neighbor, const InterpolationOptions& opts,
                                       const vq::VQModel& image_vq, const style::StyleEncoder& encoder,
                                       const metrics::GaussianStats& class_stats);

}  // namespace cogs::vae
