#pragma once

// Conditional autoregressive model over image tokens. The conditioning prefix
// is sketch tokens, style tokens and (optionally) one class token; the model
// predicts the target image's token grid left to right.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cogs/dataset.hpp"
#include "cogs/nn.hpp"
#include "cogs/style_encoder.hpp"
#include "cogs/vq.hpp"
#include "json.hpp"

namespace cogs::tf {

struct TransformerConfig {
  int layers = 2;
  int heads = 4;
  int embed_dim = 64;
  int mlp_ratio = 4;
  double dropout = 0.0;
  bool use_class_token = true;
  double lambda_t = 1.0;
  double gumbel_tau = 1.0;
  double temperature = 1.0;
  int top_k = 32;
  int epochs = 20;
  int batch_size = 8;
  double lr = 1e-3;
  uint64_t seed = 1;

  void validate() const;
};

TransformerConfig transformer_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TransformerConfig& c);

// Vocabulary and grid sizes fixed by the frozen tokenizers.
struct Vocab {
  int k_sketch = 0;
  int k_image = 0;
  int classes = 0;
  int tokens = 0;  // h * w
  int grid_h = 0;
  int grid_w = 0;
};

struct TokenSequence {
  std::vector<int32_t> sketch_tokens;
  std::vector<int32_t> style_tokens;
  int class_token = 0;
  bool operator==(const TokenSequence&) const = default;
};

struct GenerationResult {
  vq::TokenGrid tokens;
  Raster image;
  TokenSequence condition;
  uint64_t sample_seed = 0;
  std::string config_hash;
};

// Frozen pieces the transformer is trained and run against.
struct Frozen {
  const vq::VQModel* sketch_vq = nullptr;
  const vq::VQModel* image_vq = nullptr;
  const style::StyleEncoder* style = nullptr;
  Vocab vocab(int classes) const;
};

// A tokenized training triple.
struct Example {
  TokenSequence cond;
  std::vector<int32_t> target;
  std::vector<double> style_embedding;  // embedding of the style image
};

struct LossBreakdown {
  ag::Tensor total;
  double codebook = 0.0;
  double style = 0.0;
};

class CogsTransformer {
 public:
  CogsTransformer(const TransformerConfig& cfg, const Vocab& vocab);

  const TransformerConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  int cond_length() const { return 2 * vocab_.tokens + (cfg_.use_class_token ? 1 : 0); }
  int context_length() const { return cond_length() + vocab_.tokens - 1; }

  // Logits for target positions 0..prefix_len of every sequence, stacked
  // [B*(prefix_len+1), k_image]. All prefixes must share one length.
  ag::Tensor forward_batch(const std::vector<const TokenSequence*>& conds,
                           const std::vector<std::vector<int32_t>>& prefixes, Rng* dropout_rng = nullptr) const;
  ag::Tensor forward(const TokenSequence& cond, const std::vector<int32_t>& prefix) const;

  // Autoregressive sampling with cached keys/values. top_k = 1 is greedy.
  std::vector<int32_t> sample_tokens(const TokenSequence& cond, double temperature, int top_k,
                                     uint64_t seed) const;

  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  nlohmann::json metadata() const;
  std::string config_hash() const;
  void save(const std::filesystem::path& path) const;
  static CogsTransformer load(const std::filesystem::path& path);

 private:
  void check_cond(const TokenSequence& cond) const;
  // Embedding-table rows, positions and segments for one sequence.
  void layout(const TokenSequence& cond, const std::vector<int32_t>& prefix, std::vector<int32_t>& rows,
              std::vector<int32_t>& segments) const;

  TransformerConfig cfg_;
  Vocab vocab_;
  nn::ParamStore params_;
};

TokenSequence build_condition(const Raster& sketch, const Raster& style_image, int class_label,
                              const Frozen& frozen, int classes);

// Mean negative log-likelihood of the true tokens.
ag::Tensor codebook_loss(const ag::Tensor& logits, const std::vector<int32_t>& targets);

// MSE between style embeddings; images are [B,C,H,W].
ag::Tensor style_loss(const ag::Tensor& generated, const ag::Tensor& style_images,
                      const style::StyleEncoder& encoder);
double style_loss(const Raster& generated, const Raster& style_image, const style::StyleEncoder& encoder);

// L_codebook + lambda * L_style.
ag::Tensor combine_losses(const ag::Tensor& codebook, const ag::Tensor& style, double lambda);

// Teacher-forced loss on a batch. The style term decodes a straight-through
// Gumbel-softmax mixture of image codebook rows; `gumbel_rng` drives the noise.
LossBreakdown transformer_loss(const CogsTransformer& model, const Frozen& frozen,
                               const std::vector<const Example*>& batch, Rng& gumbel_rng,
                               Rng* dropout_rng = nullptr);

Example make_example(const data::Triple& triple, const data::Manifest& manifest, const Frozen& frozen);
std::vector<Example> make_examples(const std::vector<data::Triple>& triples, const data::Manifest& manifest,
                                   const Frozen& frozen);

GenerationResult generate(const CogsTransformer& model, const Frozen& frozen, const Raster& sketch,
                          const Raster& style_image, int class_label, double temperature, int top_k,
                          uint64_t seed);
// Sampling from an existing condition, then decoding.
GenerationResult generate(const CogsTransformer& model, const Frozen& frozen, const TokenSequence& cond,
                          double temperature, int top_k, uint64_t seed);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double codebook = 0.0;
  double style = 0.0;
};

CogsTransformer train_transformer(const std::vector<Example>& examples, const TransformerConfig& cfg,
                                  const Frozen& frozen, int classes,
                                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Fraction of positions where greedy decoding matches the target.
double greedy_token_accuracy(const CogsTransformer& model, const std::vector<Example>& examples);
// Mean teacher-forced codebook loss, no gradient.
double mean_codebook_loss(const CogsTransformer& model, const std::vector<Example>& examples);

}  // namespace cogs::tf
