#include "cogs/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cogs/checkpoint.hpp"
#include "cogs/error.hpp"
#include "cogs/raster_tensor.hpp"

namespace cogs::tf {

using ag::Tensor;
using nlohmann::json;

namespace {

enum Segment : int32_t { kSketchSeg = 0, kStyleSeg = 1, kClassSeg = 2, kTargetSeg = 3 };

std::string layer_key(int l, const char* name) { return "h" + std::to_string(l) + "." + name; }

}  // namespace

void TransformerConfig::validate() const {
  COGS_CHECK(layers >= 1 && heads >= 1 && embed_dim >= heads && embed_dim % heads == 0, ErrorKind::kConfig,
             "transformer: embed_dim must be a positive multiple of heads");
  COGS_CHECK(mlp_ratio >= 1, ErrorKind::kConfig, "transformer: mlp_ratio must be >= 1");
  COGS_CHECK(dropout >= 0.0 && dropout < 1.0, ErrorKind::kConfig, "transformer: dropout must lie in [0,1)");
  COGS_CHECK(lambda_t >= 0.0, ErrorKind::kConfig, "transformer: lambda_t must be >= 0");
  COGS_CHECK(gumbel_tau > 0.0 && temperature > 0.0, ErrorKind::kConfig, "transformer: temperatures must be > 0");
  COGS_CHECK(top_k >= 1, ErrorKind::kConfig, "transformer: top_k must be >= 1");
  COGS_CHECK(epochs >= 0 && batch_size >= 1 && lr > 0.0, ErrorKind::kConfig, "transformer: bad optimizer settings");
}

TransformerConfig transformer_config_from_json(const json& j) {
  TransformerConfig c;
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.dropout = j.value("dropout", c.dropout);
  c.use_class_token = j.value("use_class_token", c.use_class_token);
  c.lambda_t = j.value("lambda_t", c.lambda_t);
  c.gumbel_tau = j.value("gumbel_tau", c.gumbel_tau);
  c.temperature = j.value("temperature", c.temperature);
  c.top_k = j.value("top_k", c.top_k);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

json to_json(const TransformerConfig& c) {
  return {{"layers", c.layers}, {"heads", c.heads}, {"embed_dim", c.embed_dim}, {"mlp_ratio", c.mlp_ratio},
          {"dropout", c.dropout}, {"use_class_token", c.use_class_token}, {"lambda_t", c.lambda_t},
          {"gumbel_tau", c.gumbel_tau}, {"temperature", c.temperature}, {"top_k", c.top_k},
          {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}

Vocab Frozen::vocab(int classes) const {
  COGS_CHECK(sketch_vq && image_vq, ErrorKind::kConfig, "frozen tokenizers not loaded");
  const auto& s = sketch_vq->config();
  const auto& i = image_vq->config();
  COGS_CHECK(s.h == i.h && s.w == i.w, ErrorKind::kShape, "sketch and image token grids differ in size");
  return {s.K, i.K, classes, i.h * i.w, i.h, i.w};
}

// ---------------------------------------------------------------- model

CogsTransformer::CogsTransformer(const TransformerConfig& cfg, const Vocab& vocab) : cfg_(cfg), vocab_(vocab) {
  cfg_.validate();
  COGS_CHECK(vocab_.k_sketch > 0 && vocab_.k_image > 0 && vocab_.classes > 0 && vocab_.tokens > 0,
             ErrorKind::kConfig, "transformer: empty vocabulary");
  Rng rng(derive_seed(cfg_.seed, "transformer"));
  const int d = cfg_.embed_dim, f = cfg_.embed_dim * cfg_.mlp_ratio;
  const int rows = vocab_.k_sketch + vocab_.k_image + vocab_.classes;
  params_.add("tok_emb", {rows, d}, nn::Init::kNormal, rng, 0.02);
  params_.add("pos_emb", {context_length(), d}, nn::Init::kNormal, rng, 0.02);
  params_.add("seg_emb", {4, d}, nn::Init::kNormal, rng, 0.02);
  const double proj_scale = 0.02 / std::sqrt(2.0 * cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    params_.add(layer_key(l, "ln1.g"), {d}, nn::Init::kOnes, rng);
    params_.add(layer_key(l, "ln1.b"), {d}, nn::Init::kZeros, rng);
    params_.add(layer_key(l, "attn.w"), {d, 3 * d}, nn::Init::kNormal, rng, 0.02);
    params_.add(layer_key(l, "attn.b"), {3 * d}, nn::Init::kZeros, rng);
    params_.add(layer_key(l, "proj.w"), {d, d}, nn::Init::kNormal, rng, proj_scale);
    params_.add(layer_key(l, "proj.b"), {d}, nn::Init::kZeros, rng);
    params_.add(layer_key(l, "ln2.g"), {d}, nn::Init::kOnes, rng);
    params_.add(layer_key(l, "ln2.b"), {d}, nn::Init::kZeros, rng);
    params_.add(layer_key(l, "fc1.w"), {d, f}, nn::Init::kNormal, rng, 0.02);
    params_.add(layer_key(l, "fc1.b"), {f}, nn::Init::kZeros, rng);
    params_.add(layer_key(l, "fc2.w"), {f, d}, nn::Init::kNormal, rng, proj_scale);
    params_.add(layer_key(l, "fc2.b"), {d}, nn::Init::kZeros, rng);
  }
  params_.add("ln_f.g", {d}, nn::Init::kOnes, rng);
  params_.add("ln_f.b", {d}, nn::Init::kZeros, rng);
  // Zero head: an untrained model predicts the uniform distribution.
  params_.add("head.w", {d, vocab_.k_image}, nn::Init::kZeros, rng);
  params_.add("head.b", {vocab_.k_image}, nn::Init::kZeros, rng);
  params_.round_to_float();
}

void CogsTransformer::check_cond(const TokenSequence& cond) const {
  COGS_CHECK(int(cond.sketch_tokens.size()) == vocab_.tokens && int(cond.style_tokens.size()) == vocab_.tokens,
             ErrorKind::kShape, "condition segments must hold " + std::to_string(vocab_.tokens) + " tokens each");
  for (int32_t t : cond.sketch_tokens)
    COGS_CHECK(t >= 0 && t < vocab_.k_sketch, ErrorKind::kRange, "sketch token out of range");
  for (int32_t t : cond.style_tokens)
    COGS_CHECK(t >= 0 && t < vocab_.k_image, ErrorKind::kRange, "style token out of range");
  COGS_CHECK(cond.class_token >= 0 && cond.class_token < vocab_.classes, ErrorKind::kRange,
             "class " + std::to_string(cond.class_token) + " out of range");
}

void CogsTransformer::layout(const TokenSequence& cond, const std::vector<int32_t>& prefix,
                             std::vector<int32_t>& rows, std::vector<int32_t>& segments) const {
  const int ks = vocab_.k_sketch, ki = vocab_.k_image;
  for (int32_t t : cond.sketch_tokens) {
    rows.push_back(t);
    segments.push_back(kSketchSeg);
  }
  for (int32_t t : cond.style_tokens) {
    rows.push_back(ks + t);
    segments.push_back(kStyleSeg);
  }
  if (cfg_.use_class_token) {
    rows.push_back(ks + ki + cond.class_token);
    segments.push_back(kClassSeg);
  }
  for (int32_t t : prefix) {
    COGS_CHECK(t >= 0 && t < ki, ErrorKind::kRange, "target token out of range");
    rows.push_back(ks + t);
    segments.push_back(kTargetSeg);
  }
}

namespace {

Tensor dropout(const Tensor& x, double p, Rng* rng) {
  if (p <= 0.0 || rng == nullptr) return x;
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = uniform(*rng) < p ? 0.0 : 1.0 / (1.0 - p);
  return ag::mul(x, Tensor::from(x.shape(), std::move(mask)));
}

}  // namespace

Tensor CogsTransformer::forward_batch(const std::vector<const TokenSequence*>& conds,
                                      const std::vector<std::vector<int32_t>>& prefixes, Rng* dropout_rng) const {
  COGS_CHECK(!conds.empty() && conds.size() == prefixes.size(), ErrorKind::kShape,
             "forward_batch: one prefix per condition required");
  const int p = int(prefixes[0].size());
  COGS_CHECK(p < vocab_.tokens, ErrorKind::kRange, "prefix must be shorter than the token grid");
  const int L = cond_length(), T = L + p, B = int(conds.size());
  std::vector<int32_t> rows, segs, pos, pick;
  for (int b = 0; b < B; ++b) {
    check_cond(*conds[size_t(b)]);
    COGS_CHECK(int(prefixes[size_t(b)].size()) == p, ErrorKind::kShape, "forward_batch: ragged prefixes");
    layout(*conds[size_t(b)], prefixes[size_t(b)], rows, segs);
    for (int t = 0; t < T; ++t) pos.push_back(t);
    for (int t = 0; t <= p; ++t) pick.push_back(b * T + L - 1 + t);
  }
  const auto& P = params_;
  Tensor x = ag::add(ag::add(ag::gather_rows(P.get("tok_emb"), rows), ag::gather_rows(P.get("pos_emb"), pos)),
                     ag::gather_rows(P.get("seg_emb"), segs));
  const double drop = dropout_rng ? cfg_.dropout : 0.0;
  for (int l = 0; l < cfg_.layers; ++l) {
    Tensor h = ag::layer_norm(x, P.get(layer_key(l, "ln1.g")), P.get(layer_key(l, "ln1.b")));
    Tensor qkv = ag::linear(h, P.get(layer_key(l, "attn.w")), P.get(layer_key(l, "attn.b")));
    Tensor a = ag::attention(qkv, B, T, cfg_.heads, L);
    x = ag::add(x, dropout(ag::linear(a, P.get(layer_key(l, "proj.w")), P.get(layer_key(l, "proj.b"))), drop,
                           dropout_rng));
    Tensor h2 = ag::layer_norm(x, P.get(layer_key(l, "ln2.g")), P.get(layer_key(l, "ln2.b")));
    Tensor m = ag::gelu(ag::linear(h2, P.get(layer_key(l, "fc1.w")), P.get(layer_key(l, "fc1.b"))));
    x = ag::add(x, dropout(ag::linear(m, P.get(layer_key(l, "fc2.w")), P.get(layer_key(l, "fc2.b"))), drop,
                           dropout_rng));
  }
  Tensor out = ag::gather_rows(x, pick);
  out = ag::layer_norm(out, P.get("ln_f.g"), P.get("ln_f.b"));
  return ag::linear(out, P.get("head.w"), P.get("head.b"));
}

Tensor CogsTransformer::forward(const TokenSequence& cond, const std::vector<int32_t>& prefix) const {
  return forward_batch({&cond}, {prefix});
}

namespace {

// Keys and values of every processed position, per layer.
struct KVCache {
  std::vector<std::vector<double>> k, v;
  int length = 0;
};

// Attention of `rows` new query rows (positions start..start+rows-1) over all
// cached positions, matching ag::attention's arithmetic.
std::vector<double> cached_attention(const std::vector<double>& qkv, int rows, int start, const KVCache& cache,
                                     int layer, int d, int heads, int visible_prefix) {
  const int dh = d / heads, n = cache.length;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& K = cache.k[size_t(layer)];
  const auto& V = cache.v[size_t(layer)];
  std::vector<double> out(size_t(rows) * d, 0.0), s(static_cast<size_t>(n)), p(static_cast<size_t>(n));
  for (int r = 0; r < rows; ++r) {
    const int i = start + r;
    const double* q = qkv.data() + size_t(r) * 3 * d;
    for (int h = 0; h < heads; ++h) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int e = 0; e < dh; ++e) acc += q[h * dh + e] * K[size_t(j) * d + h * dh + e];
        s[size_t(j)] = acc;
        if (j < visible_prefix || j <= i) mx = std::max(mx, acc * sc);
      }
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        p[size_t(j)] = 0.0;
        if (j < visible_prefix || j <= i) z += (p[size_t(j)] = std::exp(s[size_t(j)] * sc - mx));
      }
      for (int j = 0; j < n; ++j) p[size_t(j)] /= z;
      for (int e = 0; e < dh; ++e) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += p[size_t(j)] * V[size_t(j) * d + h * dh + e];
        out[size_t(r) * d + h * dh + e] = acc;
      }
    }
  }
  return out;
}

int pick_token(const std::span<const double> logits, double temperature, int top_k, Rng& rng) {
  const int K = int(logits.size());
  std::vector<int> order(static_cast<size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[size_t(a)] > logits[size_t(b)]; });
  if (top_k == 1) return order[0];
  const int k = std::min(top_k, K);
  std::vector<double> w(static_cast<size_t>(k));
  const double mx = logits[size_t(order[0])] / temperature;
  double total = 0.0;
  for (int i = 0; i < k; ++i) total += (w[size_t(i)] = std::exp(logits[size_t(order[size_t(i)])] / temperature - mx));
  double u = uniform(rng, 0.0, total);
  for (int i = 0; i < k; ++i) {
    u -= w[size_t(i)];
    if (u < 0.0) return order[size_t(i)];
  }
  return order[size_t(k - 1)];
}

}  // namespace

std::vector<int32_t> CogsTransformer::sample_tokens(const TokenSequence& cond, double temperature, int top_k,
                                                    uint64_t seed) const {
  COGS_CHECK(temperature > 0.0, ErrorKind::kRange, "temperature must be > 0");
  COGS_CHECK(top_k >= 1 && top_k <= vocab_.k_image, ErrorKind::kRange,
             "top_k must lie in [1," + std::to_string(vocab_.k_image) + "]");
  check_cond(cond);
  ag::NoGradGuard guard;
  Rng rng(derive_seed(seed, "sample"));
  const auto& P = params_;
  const int d = cfg_.embed_dim, L = cond_length();
  KVCache cache;
  cache.k.resize(size_t(cfg_.layers));
  cache.v.resize(size_t(cfg_.layers));

  // Runs new positions through the stack; returns the head logits of the last.
  auto advance = [&](const std::vector<int32_t>& rows, const std::vector<int32_t>& segs) {
    const int n = int(rows.size()), start = cache.length;
    std::vector<int32_t> pos(static_cast<size_t>(n));
    std::iota(pos.begin(), pos.end(), start);
    Tensor x = ag::add(ag::add(ag::gather_rows(P.get("tok_emb"), rows), ag::gather_rows(P.get("pos_emb"), pos)),
                       ag::gather_rows(P.get("seg_emb"), segs));
    cache.length += n;
    for (int l = 0; l < cfg_.layers; ++l) {
      Tensor h = ag::layer_norm(x, P.get(layer_key(l, "ln1.g")), P.get(layer_key(l, "ln1.b")));
      Tensor qkv = ag::linear(h, P.get(layer_key(l, "attn.w")), P.get(layer_key(l, "attn.b")));
      auto& K = cache.k[size_t(l)];
      auto& V = cache.v[size_t(l)];
      for (int r = 0; r < n; ++r) {
        const double* row = qkv.values().data() + size_t(r) * 3 * d;
        K.insert(K.end(), row + d, row + 2 * d);
        V.insert(V.end(), row + 2 * d, row + 3 * d);
      }
      Tensor a = Tensor::from({n, d}, cached_attention(qkv.values(), n, start, cache, l, d, cfg_.heads, L));
      x = ag::add(x, ag::linear(a, P.get(layer_key(l, "proj.w")), P.get(layer_key(l, "proj.b"))));
      Tensor h2 = ag::layer_norm(x, P.get(layer_key(l, "ln2.g")), P.get(layer_key(l, "ln2.b")));
      Tensor m = ag::gelu(ag::linear(h2, P.get(layer_key(l, "fc1.w")), P.get(layer_key(l, "fc1.b"))));
      x = ag::add(x, ag::linear(m, P.get(layer_key(l, "fc2.w")), P.get(layer_key(l, "fc2.b"))));
    }
    Tensor last = ag::layer_norm(ag::slice_rows(x, n - 1, 1), P.get("ln_f.g"), P.get("ln_f.b"));
    return ag::linear(last, P.get("head.w"), P.get("head.b"));
  };

  std::vector<int32_t> rows, segs;
  layout(cond, {}, rows, segs);
  std::vector<int32_t> out;
  Tensor logits = advance(rows, segs);
  for (int t = 0; t < vocab_.tokens; ++t) {
    out.push_back(pick_token(logits.value(), temperature, top_k, rng));
    if (t + 1 < vocab_.tokens) logits = advance({vocab_.k_sketch + out.back()}, {kTargetSeg});
  }
  return out;
}

json CogsTransformer::metadata() const {
  return {{"kind", "transformer"},
          {"config", to_json(cfg_)},
          {"vocab",
           {{"k_sketch", vocab_.k_sketch}, {"k_image", vocab_.k_image}, {"classes", vocab_.classes},
            {"tokens", vocab_.tokens}, {"grid_h", vocab_.grid_h}, {"grid_w", vocab_.grid_w}}}};
}

std::string CogsTransformer::config_hash() const { return ckpt::digest(metadata().dump()); }

void CogsTransformer::save(const std::filesystem::path& path) const { ckpt::save(path, params_, metadata()); }

CogsTransformer CogsTransformer::load(const std::filesystem::path& path) {
  ckpt::Archive a = ckpt::load(path);
  COGS_CHECK(a.metadata.value("kind", "") == "transformer", ErrorKind::kFormat,
             path.string() + " is not a transformer checkpoint");
  const json& v = a.metadata.at("vocab");
  Vocab vocab{v.at("k_sketch"), v.at("k_image"), v.at("classes"), v.at("tokens"), v.at("grid_h"), v.at("grid_w")};
  CogsTransformer m(transformer_config_from_json(a.metadata.at("config")), vocab);
  ckpt::assign(m.params_, a.tensors, path.string());
  return m;
}

// ---------------------------------------------------------------- losses

TokenSequence build_condition(const Raster& sketch, const Raster& style_image, int class_label,
                              const Frozen& frozen, int classes) {
  COGS_CHECK(class_label >= 0 && class_label < classes, ErrorKind::kRange,
             "class " + std::to_string(class_label) + " out of range [0," + std::to_string(classes) + ")");
  COGS_CHECK(frozen.sketch_vq && frozen.image_vq, ErrorKind::kConfig, "frozen tokenizers not loaded");
  TokenSequence s;
  s.sketch_tokens = frozen.sketch_vq->tokenize(sketch).indices;
  s.style_tokens = frozen.image_vq->tokenize(style_image).indices;
  s.class_token = class_label;
  return s;
}

Tensor codebook_loss(const Tensor& logits, const std::vector<int32_t>& targets) {
  COGS_CHECK(logits.rank() == 2 && logits.dim(0) == int(targets.size()), ErrorKind::kShape,
             "codebook_loss: one target per logit row required");
  return ag::cross_entropy(logits, targets);
}

Tensor style_loss(const Tensor& generated, const Tensor& style_images, const style::StyleEncoder& encoder) {
  COGS_CHECK(generated.shape() == style_images.shape(), ErrorKind::kShape, "style_loss: image shapes differ");
  return ag::mean(ag::square(ag::sub(encoder.embed_batch(generated), encoder.embed_batch(style_images))));
}

double style_loss(const Raster& generated, const Raster& style_image, const style::StyleEncoder& encoder) {
  ag::NoGradGuard guard;
  const std::vector<double> a = encoder.embed(generated).values, b = encoder.embed(style_image).values;
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / double(a.size());
}

Tensor combine_losses(const Tensor& codebook, const Tensor& style, double lambda) {
  if (lambda == 0.0) return codebook;
  return ag::add(codebook, ag::scale(style, lambda));
}

LossBreakdown transformer_loss(const CogsTransformer& model, const Frozen& frozen,
                               const std::vector<const Example*>& batch, Rng& gumbel_rng, Rng* dropout_rng) {
  COGS_CHECK(!batch.empty(), ErrorKind::kConfig, "transformer_loss: empty batch");
  const int n = model.vocab().tokens, B = int(batch.size());
  std::vector<const TokenSequence*> conds;
  std::vector<std::vector<int32_t>> prefixes;
  std::vector<int32_t> targets;
  for (const Example* e : batch) {
    COGS_CHECK(int(e->target.size()) == n, ErrorKind::kShape, "example target has the wrong token count");
    conds.push_back(&e->cond);
    prefixes.emplace_back(e->target.begin(), e->target.end() - 1);
    targets.insert(targets.end(), e->target.begin(), e->target.end());
  }
  const Tensor logits = model.forward_batch(conds, prefixes, dropout_rng);
  LossBreakdown out;
  const Tensor cb = codebook_loss(logits, targets);
  out.codebook = cb.item();
  const double lambda = model.config().lambda_t;
  if (lambda == 0.0) {
    out.total = cb;
    return out;
  }
  COGS_CHECK(frozen.image_vq && frozen.style, ErrorKind::kConfig, "style loss needs the image decoder and style encoder");

  // Straight-through Gumbel-softmax: the forward value is the one-hot sample,
  // the gradient is that of the relaxed softmax.
  const int K = model.vocab().k_image;
  std::vector<double> noise(logits.numel());
  for (double& g : noise) {
    const double u = std::clamp(uniform(gumbel_rng), 1e-12, 1.0 - 1e-12);
    g = -std::log(-std::log(u));
  }
  const Tensor perturbed = ag::add(logits, Tensor::from(logits.shape(), noise));
  std::vector<int32_t> hard(size_t(B) * n);
  for (size_t r = 0; r < hard.size(); ++r) {
    const double* row = perturbed.values().data() + r * size_t(K);
    hard[r] = int32_t(std::max_element(row, row + K) - row);
  }
  ag::tape_choices(hard);
  std::vector<double> onehot(perturbed.numel(), 0.0);
  for (size_t r = 0; r < hard.size(); ++r) onehot[r * size_t(K) + size_t(hard[r])] = 1.0;
  const Tensor soft = ag::softmax_rows(ag::scale(perturbed, 1.0 / model.config().gumbel_tau));
  const Tensor st = ag::add(ag::sub(soft, ag::stop_gradient(soft)), Tensor::from(soft.shape(), std::move(onehot)));
  const Tensor cells = ag::matmul(st, frozen.image_vq->codebook_tensor());
  const Tensor images = frozen.image_vq->decode_cells(cells, B);
  std::vector<double> target_emb;
  for (const Example* e : batch) target_emb.insert(target_emb.end(), e->style_embedding.begin(), e->style_embedding.end());
  const Tensor emb = frozen.style->embed_batch(images);
  const Tensor sl = ag::mean(ag::square(ag::sub(emb, Tensor::from(emb.shape(), std::move(target_emb)))));
  out.style = sl.item();
  out.total = combine_losses(cb, sl, lambda);
  return out;
}

Example make_example(const data::Triple& triple, const data::Manifest& manifest, const Frozen& frozen) {
  const data::Record* sk = manifest.find_sketch(triple.sketch_id);
  COGS_CHECK(sk != nullptr, ErrorKind::kNotFound, "unknown sketch " + triple.sketch_id);
  const data::Record& style_rec = manifest.by_image_id(triple.style_image_id);
  const data::Record& target = manifest.by_image_id(triple.target_image_id);
  Example e;
  e.cond = build_condition(bitmap_to_raster(sk->sketch.pixels), style_rec.image.pixels, triple.class_label, frozen,
                           manifest.num_classes());
  e.target = frozen.image_vq->tokenize(target.image.pixels).indices;
  if (frozen.style) e.style_embedding = frozen.style->embed(style_rec.image.pixels).values;
  return e;
}

std::vector<Example> make_examples(const std::vector<data::Triple>& triples, const data::Manifest& manifest,
                                   const Frozen& frozen) {
  std::vector<Example> out(triples.size());
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < triples.size(); ++i) out[i] = make_example(triples[i], manifest, frozen);
  return out;
}

GenerationResult generate(const CogsTransformer& model, const Frozen& frozen, const TokenSequence& cond,
                          double temperature, int top_k, uint64_t seed) {
  GenerationResult r;
  r.condition = cond;
  r.sample_seed = seed;
  r.config_hash = model.config_hash();
  r.tokens = {model.vocab().grid_h, model.vocab().grid_w, model.sample_tokens(cond, temperature, top_k, seed)};
  r.image = frozen.image_vq->decode(r.tokens);
  return r;
}

GenerationResult generate(const CogsTransformer& model, const Frozen& frozen, const Raster& sketch,
                          const Raster& style_image, int class_label, double temperature, int top_k,
                          uint64_t seed) {
  return generate(model, frozen,
                  build_condition(sketch, style_image, class_label, frozen, model.vocab().classes), temperature,
                  top_k, seed);
}

// ---------------------------------------------------------------- training

CogsTransformer train_transformer(const std::vector<Example>& examples, const TransformerConfig& cfg,
                                  const Frozen& frozen, int classes,
                                  const std::function<void(const EpochLog&)>& on_epoch) {
  COGS_CHECK(!examples.empty(), ErrorKind::kConfig, "train_transformer: no training triples");
  CogsTransformer model(cfg, frozen.vocab(classes));
  nn::Adam adam(nn::params_of(model.params()), {.lr = cfg.lr, .clip_norm = 1.0});
  Rng shuffle_rng(derive_seed(cfg.seed, "tf-shuffle"));
  Rng gumbel_rng(derive_seed(cfg.seed, "tf-gumbel"));
  Rng dropout_rng(derive_seed(cfg.seed, "tf-dropout"));
  std::vector<size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochLog log{epoch, 0.0, 0.0, 0.0};
    int steps = 0;
    for (size_t s = 0; s < order.size(); s += size_t(cfg.batch_size)) {
      std::vector<const Example*> batch;
      for (size_t i = s; i < std::min(order.size(), s + size_t(cfg.batch_size)); ++i)
        batch.push_back(&examples[order[i]]);
      adam.zero_grad();
      LossBreakdown l = transformer_loss(model, frozen, batch, gumbel_rng, &dropout_rng);
      const double v = l.total.item();
      COGS_CHECK(std::isfinite(v), ErrorKind::kNumeric,
                 "transformer training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                     std::to_string(steps));
      l.total.backward();
      adam.step();
      log.loss += v;
      log.codebook += l.codebook;
      log.style += l.style;
      ++steps;
    }
    log.loss /= steps;
    log.codebook /= steps;
    log.style /= steps;
    if (on_epoch) on_epoch(log);
  }
  model.params().round_to_float();
  return model;
}

double greedy_token_accuracy(const CogsTransformer& model, const std::vector<Example>& examples) {
  COGS_CHECK(!examples.empty(), ErrorKind::kConfig, "greedy_token_accuracy: no examples");
  std::vector<double> hits(examples.size());
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < examples.size(); ++i) {
    const auto tokens = model.sample_tokens(examples[i].cond, 1.0, 1, 0);
    for (size_t t = 0; t < tokens.size(); ++t) hits[i] += tokens[t] == examples[i].target[t];
  }
  return std::accumulate(hits.begin(), hits.end(), 0.0) / double(examples.size() * size_t(model.vocab().tokens));
}

double mean_codebook_loss(const CogsTransformer& model, const std::vector<Example>& examples) {
  COGS_CHECK(!examples.empty(), ErrorKind::kConfig, "mean_codebook_loss: no examples");
  ag::NoGradGuard guard;
  double total = 0.0;
  for (size_t s = 0; s < examples.size(); s += 16) {
    std::vector<const TokenSequence*> conds;
    std::vector<std::vector<int32_t>> prefixes;
    std::vector<int32_t> targets;
    for (size_t i = s; i < std::min(examples.size(), s + 16); ++i) {
      conds.push_back(&examples[i].cond);
      prefixes.emplace_back(examples[i].target.begin(), examples[i].target.end() - 1);
      targets.insert(targets.end(), examples[i].target.begin(), examples[i].target.end());
    }
    total += codebook_loss(model.forward_batch(conds, prefixes), targets).item() * double(conds.size());
  }
  return total / double(examples.size());
}

}  // namespace cogs::tf
