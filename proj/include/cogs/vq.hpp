#pragma once

// Discrete-codebook autoencoder: a strided conv encoder to an h x w grid of
// n_z-dim cells, nearest-entry quantization against K learned codes, and an
// upsampling conv decoder. One instance per domain (sketch, image).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cogs/dataset.hpp"
#include "cogs/image.hpp"
#include "cogs/nn.hpp"
#include "cogs/style_encoder.hpp"
#include "json.hpp"

namespace cogs::vq {

enum class Domain { kSketch, kImage };

std::string domain_name(Domain d);
Domain parse_domain(const std::string& s);

struct VQConfig {
  int resolution = 32;
  int h = 8;
  int w = 8;
  int n_z = 64;
  int K = 128;
  int hidden = 32;  // channel width of the downsampled stages
  double commitment_beta = 0.25;
  double perceptual_weight = 0.1;
  // Sketch domain only: weight stroke and background pixels by half their
  // inverse frequency so sparse strokes are not reconstructed as blank.
  bool balance_strokes = true;
  int epochs = 20;
  int batch_size = 16;
  double lr = 2e-3;
  uint64_t seed = 1;

  int factor() const { return resolution / h; }
  void validate() const;
};

VQConfig vq_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VQConfig& c);

struct Codebook {
  int K = 0;
  int n_z = 0;
  std::vector<double> entries;  // K x n_z, row-major

  const double* row(int k) const { return entries.data() + size_t(k) * n_z; }
  // True when two rows lie within `tol` (Euclidean) of each other.
  bool has_duplicates(double tol = 1e-6) const;
};

// h x w x n_z, cell-major.
struct LatentGrid {
  int h = 0;
  int w = 0;
  int n_z = 0;
  std::vector<double> values;

  const double* cell(int i) const { return values.data() + size_t(i) * n_z; }
  bool operator==(const LatentGrid&) const = default;
};

struct TokenGrid {
  int h = 0;
  int w = 0;
  std::vector<int32_t> indices;  // row-major h x w

  bool operator==(const TokenGrid&) const = default;
};

struct Quantized {
  TokenGrid tokens;
  LatentGrid grid;
};

// Nearest-row quantization; ties go to the lowest index.
Quantized quantize(const LatentGrid& z, const Codebook& cb);

// Tensor-level quantization used in training.
struct QuantizedCells {
  ag::Tensor straight_through;  // forward = z_q, gradient flows to z unchanged
  ag::Tensor selected;          // gathered codebook rows (gradient to codebook)
  std::vector<int32_t> indices;
};
QuantizedCells quantize_cells(const ag::Tensor& z, const ag::Tensor& codebook);

struct LossTerms {
  ag::Tensor total;
  double reconstruction = 0.0;  // L1
  double codebook = 0.0;
  double commitment = 0.0;
  double perceptual = 0.0;
};

class VQModel {
 public:
  VQModel(const VQConfig& cfg, Domain domain);

  const VQConfig& config() const { return cfg_; }
  Domain domain() const { return domain_; }
  int channels() const { return domain_ == Domain::kSketch ? 1 : 3; }
  int tokens() const { return cfg_.h * cfg_.w; }

  // images[B,C,H,W] -> cells[B*h*w, n_z]
  ag::Tensor encode_cells(const ag::Tensor& images) const;
  // cells[B*h*w, n_z] -> images[B,C,H,W] in (0,1)
  ag::Tensor decode_cells(const ag::Tensor& cells, int batch) const;
  ag::Tensor codebook_tensor() const { return params_.get("codebook"); }

  LatentGrid encode(const Raster& image) const;
  Raster decode(const TokenGrid& tokens) const;
  Codebook codebook() const;
  // encode followed by quantize.
  TokenGrid tokenize(const Raster& image) const;

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  // Independent copy whose parameters take no gradient.
  VQModel frozen() const;

  nlohmann::json metadata() const;
  void save(const std::filesystem::path& path) const;
  static VQModel load(const std::filesystem::path& path);

 private:
  void check_input(const ag::Tensor& images) const;

  VQConfig cfg_;
  Domain domain_;
  nn::ParamStore params_;
};

// x[B,C,H,W] against its reconstruction, plus the quantizer terms on z / z_q.
// The perceptual term is skipped when `style` is null or its weight is 0.
LossTerms vq_loss_terms(const ag::Tensor& x, const ag::Tensor& recon, const ag::Tensor& z,
                        const ag::Tensor& selected, const VQConfig& cfg,
                        const style::StyleEncoder* style, bool balanced = false);

// Per-pixel weights of the balanced L1: 0.5/p on strokes (x > 0.5) and
// 0.5/(1-p) elsewhere, p the batch stroke fraction. All ones when p is 0 or 1.
std::vector<double> stroke_weights(const std::vector<double>& x);

// Full training-mode forward on a batch.
LossTerms vq_loss(const VQModel& model, const ag::Tensor& x, const style::StyleEncoder* style);

std::vector<int64_t> codebook_usage(const std::vector<TokenGrid>& grids, int K);
// Shannon entropy (nats) of a usage histogram.
double usage_entropy(const std::vector<int64_t>& counts);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double reconstruction = 0.0;
  double usage_entropy = 0.0;
  int reinitialized = 0;
};

struct TrainOptions {
  std::function<void(const EpochLog&)> on_epoch;
  // Entropy of the freshly initialized model's assignments on the training set.
  double* initial_entropy = nullptr;
};

// Rasters of one domain from a manifest (sketches as 1-channel strokes).
std::vector<Raster> domain_rasters(const data::Manifest& manifest, Domain domain);

VQModel train_vq(const std::vector<Raster>& data, const VQConfig& cfg, Domain domain,
                 const style::StyleEncoder* style, const TrainOptions& opts = {});
VQModel train_vq(const data::Manifest& manifest, const VQConfig& cfg, Domain domain,
                 const style::StyleEncoder* style, const TrainOptions& opts = {});

}  // namespace cogs::vq
