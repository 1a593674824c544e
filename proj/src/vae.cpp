#include "cogs/vae.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "cogs/checkpoint.hpp"
#include "cogs/error.hpp"
#include "cogs/kernels.hpp"

namespace cogs::vae {

using ag::Tensor;
using nlohmann::json;

void VAEConfig::validate() const {
  COGS_CHECK(d >= 1 && channels >= 1 && hidden >= 1, ErrorKind::kConfig, "vae: layer sizes must be positive");
  COGS_CHECK(tau > 0.0, ErrorKind::kConfig, "vae: tau must be > 0");
  COGS_CHECK(lambda_v >= 0.0, ErrorKind::kConfig, "vae: lambda_v must be >= 0");
  COGS_CHECK(token_noise >= 0.0 && token_noise < 1.0, ErrorKind::kConfig, "vae: token_noise must lie in [0,1)");
  COGS_CHECK(pairs_per_batch >= 2, ErrorKind::kConfig, "vae: a batch needs at least two pairs (2N >= 4)");
  COGS_CHECK(bootstrap_epochs >= 0 && epochs >= 0 && patience >= 1 && plateau_tol >= 0.0 && lr > 0.0,
             ErrorKind::kConfig, "vae: bad schedule settings");
}

VAEConfig vae_config_from_json(const json& j) {
  VAEConfig c;
  c.d = j.value("d", c.d);
  c.channels = j.value("channels", c.channels);
  c.hidden = j.value("hidden", c.hidden);
  c.tau = j.value("tau", c.tau);
  c.lambda_v = j.value("lambda_v", c.lambda_v);
  c.token_noise = j.value("token_noise", c.token_noise);
  c.pairs_per_batch = j.value("pairs_per_batch", c.pairs_per_batch);
  c.bootstrap_epochs = j.value("bootstrap_epochs", c.bootstrap_epochs);
  c.patience = j.value("patience", c.patience);
  c.plateau_tol = j.value("plateau_tol", c.plateau_tol);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

json to_json(const VAEConfig& c) {
  return {{"d", c.d},
          {"channels", c.channels},
          {"hidden", c.hidden},
          {"tau", c.tau},
          {"lambda_v", c.lambda_v},
          {"token_noise", c.token_noise},
          {"pairs_per_batch", c.pairs_per_batch},
          {"bootstrap_epochs", c.bootstrap_epochs},
          {"patience", c.patience},
          {"plateau_tol", c.plateau_tol},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"seed", c.seed}};
}

vq::LatentGrid grid_from_tokens(const vq::TokenGrid& tokens, const vq::Codebook& codebook) {
  COGS_CHECK(tokens.indices.size() == size_t(tokens.h) * tokens.w, ErrorKind::kShape,
             "token grid size differs from h*w");
  vq::LatentGrid z{tokens.h, tokens.w, codebook.n_z, {}};
  z.values.reserve(tokens.indices.size() * size_t(codebook.n_z));
  for (int32_t t : tokens.indices) {
    COGS_CHECK(t >= 0 && t < codebook.K, ErrorKind::kRange, "token " + std::to_string(t) + " outside codebook");
    z.values.insert(z.values.end(), codebook.row(t), codebook.row(t) + codebook.n_z);
  }
  return z;
}

// ---------------------------------------------------------------- model

RefineVAE::RefineVAE(const VAEConfig& cfg, int class_label, const vq::Codebook& image_codebook, int grid_h,
                     int grid_w)
    : cfg_(cfg), class_label_(class_label), codebook_(image_codebook), grid_h_(grid_h), grid_w_(grid_w) {
  cfg_.validate();
  COGS_CHECK(codebook_.K > 0 && codebook_.n_z > 0 && grid_h > 0 && grid_w > 0, ErrorKind::kConfig,
             "vae: empty codebook or grid");
  Rng rng(derive_seed(cfg_.seed, "vae/" + std::to_string(class_label)));
  const int in = input_dim(), h = cfg_.hidden, d = cfg_.d, c = cfg_.channels, n_z = codebook_.n_z;
  const int pooled = c * ((grid_h + 1) / 2) * ((grid_w + 1) / 2);
  params_.add("enc.conv1.w", {c, n_z, 3, 3}, nn::Init::kNormal, rng, 1.0 / std::sqrt(9.0 * n_z));
  params_.add("enc.conv1.b", {c}, nn::Init::kZeros, rng);
  params_.add("enc.conv2.w", {c, c, 3, 3}, nn::Init::kNormal, rng, 1.0 / std::sqrt(9.0 * c));
  params_.add("enc.conv2.b", {c}, nn::Init::kZeros, rng);
  params_.add("enc.fc.w", {pooled, h}, nn::Init::kNormal, rng, 1.0 / std::sqrt(double(pooled)));
  params_.add("enc.fc.b", {h}, nn::Init::kZeros, rng);
  params_.add("enc.mean.w", {h, d}, nn::Init::kNormal, rng, 1.0 / std::sqrt(double(h)));
  params_.add("enc.mean.b", {d}, nn::Init::kZeros, rng);
  params_.add("enc.log_sigma.w", {h, d}, nn::Init::kNormal, rng, 0.1 / std::sqrt(double(h)));
  params_.add("enc.log_sigma.b", {d}, nn::Init::kZeros, rng);
  params_.add("dec.fc.w", {d, h}, nn::Init::kNormal, rng, 1.0 / std::sqrt(double(d)));
  params_.add("dec.fc.b", {h}, nn::Init::kZeros, rng);
  params_.add("dec.out.w", {h, in}, nn::Init::kNormal, rng, 1.0 / std::sqrt(double(h)));
  params_.add("dec.out.b", {in}, nn::Init::kZeros, rng);
}

std::vector<Tensor> RefineVAE::encoder_params() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_.items())
    if (name.rfind("enc.", 0) == 0) out.push_back(t);
  return out;
}

Encoded RefineVAE::encode_batch(const Tensor& grids) const {
  COGS_CHECK(grids.rank() == 2 && grids.dim(1) == input_dim(), ErrorKind::kShape,
             "vae encoder expects [B," + std::to_string(input_dim()) + "], got " + ag::shape_str(grids.shape()));
  const int b = grids.dim(0);
  Tensor x = ag::cells_to_nchw(ag::reshape(grids, {b * grid_h_ * grid_w_, codebook_.n_z}), b, grid_h_, grid_w_);
  x = ag::silu(ag::conv2d(x, params_.get("enc.conv1.w"), params_.get("enc.conv1.b"), 1, 1));
  x = ag::silu(ag::conv2d(x, params_.get("enc.conv2.w"), params_.get("enc.conv2.b"), 2, 1));
  x = ag::reshape(x, {b, int(x.numel()) / b});
  const Tensor h = ag::silu(ag::linear(x, params_.get("enc.fc.w"), params_.get("enc.fc.b")));
  return {ag::linear(h, params_.get("enc.mean.w"), params_.get("enc.mean.b")),
          ag::linear(h, params_.get("enc.log_sigma.w"), params_.get("enc.log_sigma.b"))};
}

Tensor RefineVAE::decode_batch(const Tensor& w) const {
  COGS_CHECK(w.rank() == 2 && w.dim(1) == cfg_.d, ErrorKind::kShape, "vae decoder expects [B,d]");
  const Tensor h = ag::silu(ag::linear(w, params_.get("dec.fc.w"), params_.get("dec.fc.b")));
  return ag::linear(h, params_.get("dec.out.w"), params_.get("dec.out.b"));
}

void RefineVAE::check_grid(const vq::LatentGrid& z) const {
  COGS_CHECK(z.h == grid_h_ && z.w == grid_w_ && z.n_z == codebook_.n_z &&
                 z.values.size() == size_t(input_dim()),
             ErrorKind::kShape,
             "vae: grid " + std::to_string(z.h) + "x" + std::to_string(z.w) + "x" + std::to_string(z.n_z) +
                 " does not match " + std::to_string(grid_h_) + "x" + std::to_string(grid_w_) + "x" +
                 std::to_string(codebook_.n_z));
}

LatentPoint RefineVAE::encode(const vq::LatentGrid& z) const {
  check_grid(z);
  ag::NoGradGuard guard;
  const Encoded e = encode_batch(Tensor::from({1, input_dim()}, z.values));
  LatentPoint p{e.mean.values(), e.log_sigma.values(), class_label_};
  for (double& s : p.stddev) s = std::exp(s);
  return p;
}

LatentPoint RefineVAE::encode(const vq::TokenGrid& tokens) const {
  return encode(grid_from_tokens(tokens, codebook_));
}

std::vector<double> RefineVAE::sample(const LatentPoint& p, uint64_t noise_seed) const {
  COGS_CHECK(p.mean.size() == size_t(cfg_.d) && p.stddev.size() == p.mean.size(), ErrorKind::kShape,
             "vae: latent point has wrong dimension");
  Rng rng(derive_seed(noise_seed, "vae-sample"));
  std::vector<double> w(p.mean.size());
  for (size_t i = 0; i < w.size(); ++i) w[i] = p.mean[i] + p.stddev[i] * normal(rng);
  return w;
}

Decoded RefineVAE::decode(const std::vector<double>& w) const {
  COGS_CHECK(w.size() == size_t(cfg_.d), ErrorKind::kShape,
             "vae: expected a " + std::to_string(cfg_.d) + "-dim vector, got " + std::to_string(w.size()));
  ag::NoGradGuard guard;
  Decoded out;
  out.grid = {grid_h_, grid_w_, codebook_.n_z, decode_batch(Tensor::from({1, cfg_.d}, w)).values()};
  out.tokens = vq::quantize(out.grid, codebook_).tokens;
  return out;
}

json RefineVAE::metadata() const {
  return {{"kind", "vae"},
          {"class_label", class_label_},
          {"config", to_json(cfg_)},
          {"grid", {{"h", grid_h_}, {"w", grid_w_}, {"n_z", codebook_.n_z}, {"K", codebook_.K}}}};
}

void RefineVAE::save(const std::filesystem::path& path) const {
  nn::ParamStore all = params_.clone();
  all.insert("image_codebook", {codebook_.K, codebook_.n_z}, codebook_.entries);
  ckpt::save(path, all, metadata());
}

RefineVAE RefineVAE::load(const std::filesystem::path& path) {
  ckpt::Archive a = ckpt::load(path);
  COGS_CHECK(a.metadata.value("kind", "") == "vae", ErrorKind::kFormat, path.string() + " is not a vae checkpoint");
  const json& g = a.metadata.at("grid");
  COGS_CHECK(a.tensors.contains("image_codebook"), ErrorKind::kFormat, path.string() + ": missing image_codebook");
  const Tensor cb = a.tensors.get("image_codebook");
  COGS_CHECK(cb.shape() == ag::Shape({g.at("K").get<int>(), g.at("n_z").get<int>()}), ErrorKind::kShape,
             path.string() + ": image_codebook shape disagrees with header");
  vq::Codebook codebook{g.at("K"), g.at("n_z"), cb.values()};
  RefineVAE m(vae_config_from_json(a.metadata.at("config")), a.metadata.at("class_label"), codebook, g.at("h"),
              g.at("w"));
  ckpt::assign(m.params_, a.tensors, path.string());
  return m;
}

// ---------------------------------------------------------------- losses

Tensor elbo_loss(const Tensor& z, const Encoded& encoded, const Tensor& decoded) {
  COGS_CHECK(z.shape() == decoded.shape(), ErrorKind::kShape, "elbo_loss: reconstruction shape differs from input");
  const Tensor rec = ag::scale(ag::sum(ag::square(ag::sub(decoded, z))), 1.0 / z.dim(0));
  return ag::add(rec, ag::gaussian_kl(encoded.mean, encoded.log_sigma));
}

Tensor contrastive_loss(const Tensor& embeddings, const std::vector<int32_t>& positives, double tau) {
  COGS_CHECK(tau > 0.0, ErrorKind::kConfig, "contrastive_loss: tau must be > 0");
  COGS_CHECK(embeddings.rank() == 2, ErrorKind::kShape, "contrastive_loss: embeddings must be [2N,d]");
  const int n = embeddings.dim(0);
  COGS_CHECK(n >= 4 && n % 2 == 0, ErrorKind::kRange, "contrastive_loss: need an even batch of at least 4");
  COGS_CHECK(positives.size() == size_t(n), ErrorKind::kShape, "contrastive_loss: one positive per anchor required");
  for (int i = 0; i < n; ++i)
    COGS_CHECK(positives[i] >= 0 && positives[i] < n && positives[i] != i, ErrorKind::kRange,
               "contrastive_loss: anchor " + std::to_string(i) + " has no positive");
  const Tensor e = ag::l2_normalize_rows(embeddings);
  const Tensor logits = ag::scale(ag::matmul(e, e, false, true), 1.0 / tau);
  return ag::cross_entropy(logits, positives, true);
}

Tensor vae_loss(const Tensor& elbo, const Tensor& contrastive, double lambda) {
  if (lambda == 0.0) return elbo;
  return ag::add(elbo, ag::scale(contrastive, lambda));
}

// ---------------------------------------------------------------- data

std::vector<GeneratedSample> generate_corpus(const tf::CogsTransformer& model, const tf::Frozen& frozen,
                                             const data::Manifest& manifest, int class_label, int per_sketch,
                                             uint64_t seed, std::optional<double> temperature,
                                             std::optional<int> top_k) {
  COGS_CHECK(per_sketch >= 2, ErrorKind::kConfig, "generate_corpus: need at least two generations per sketch");
  std::map<int, std::vector<const data::Record*>> by_class;
  for (const auto& r : manifest.records)
    if (class_label < 0 || r.image.class_label == class_label) by_class[r.image.class_label].push_back(&r);

  struct Job {
    const data::Record* sketch;
    const data::Record* style;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  Rng rng(derive_seed(seed, "vae-corpus"));
  for (const auto& [c, recs] : by_class) {
    for (const data::Record* sk : recs) {
      // Styles from other images of the class, distinct within a sketch.
      std::vector<const data::Record*> pool;
      for (const data::Record* r : recs)
        if (r != sk) pool.push_back(r);
      COGS_CHECK(pool.size() >= size_t(per_sketch), ErrorKind::kRange,
                 "generate_corpus: class " + std::to_string(c) + " has too few style images");
      std::shuffle(pool.begin(), pool.end(), rng);
      for (int j = 0; j < per_sketch; ++j) jobs.push_back({sk, pool[size_t(j)], rng()});
    }
  }
  const double temp = temperature.value_or(model.config().temperature);
  const int k = top_k.value_or(model.config().top_k);
  std::vector<GeneratedSample> out(jobs.size());
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < jobs.size(); ++i) {
    const Job& job = jobs[i];
    const tf::TokenSequence cond =
        tf::build_condition(bitmap_to_raster(job.sketch->sketch.pixels), job.style->image.pixels,
                            job.sketch->image.class_label, frozen, model.vocab().classes);
    GeneratedSample& s = out[i];
    s.id = "gen-" + job.sketch->sketch.id + "-" + job.style->image.id;
    s.sketch_id = job.sketch->sketch.id;
    s.style_id = job.style->image.id;
    s.class_label = job.sketch->image.class_label;
    s.tokens = {model.vocab().grid_h, model.vocab().grid_w,
                model.sample_tokens(cond, temp, k, job.seed)};
  }
  return out;
}

std::vector<PairBatch> make_pair_batches(const std::vector<GeneratedSample>& samples, int pairs_per_batch,
                                         Rng& rng) {
  COGS_CHECK(pairs_per_batch >= 2, ErrorKind::kConfig, "make_pair_batches: need at least two pairs per batch");
  std::map<std::string, std::vector<const GeneratedSample*>> by_sketch;
  for (const auto& s : samples) by_sketch[s.sketch_id].push_back(&s);
  std::vector<std::vector<const GeneratedSample*>> groups;
  for (auto& [id, g] : by_sketch)
    if (g.size() >= 2) groups.push_back(std::move(g));
  std::shuffle(groups.begin(), groups.end(), rng);

  // Greedy fill: a group joins a batch only if its styles are new to it, so
  // negatives never share a style image with the anchor pair.
  std::vector<PairBatch> batches;
  std::vector<std::set<std::string>> styles;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    const GeneratedSample* a = g[0];
    const GeneratedSample* b = g[1];
    size_t slot = batches.size();
    for (size_t i = 0; i < batches.size(); ++i)
      if (batches[i].items.size() < size_t(2 * pairs_per_batch) && !styles[i].count(a->style_id) &&
          !styles[i].count(b->style_id)) {
        slot = i;
        break;
      }
    if (slot == batches.size()) {
      batches.emplace_back();
      styles.emplace_back();
    }
    PairBatch& pb = batches[slot];
    const auto base = int32_t(pb.items.size());
    pb.items.push_back(a);
    pb.items.push_back(b);
    pb.positives.push_back(base + 1);
    pb.positives.push_back(base);
    styles[slot].insert(a->style_id);
    styles[slot].insert(b->style_id);
  }
  // A lone pair has no negatives.
  std::erase_if(batches, [](const PairBatch& b) { return b.items.size() < 4; });
  return batches;
}

// ---------------------------------------------------------------- training

namespace {

Tensor stack_grids(const RefineVAE& vae, const std::vector<const GeneratedSample*>& items, Rng& rng) {
  const double p = vae.config().token_noise;
  std::uniform_int_distribution<int32_t> any(0, vae.codebook().K - 1);
  std::vector<double> flat;
  flat.reserve(items.size() * size_t(vae.input_dim()));
  for (const GeneratedSample* s : items) {
    vq::TokenGrid tokens = s->tokens;
    if (p > 0.0)
      for (int32_t& t : tokens.indices)
        if (uniform(rng) < p) t = any(rng);
    const vq::LatentGrid z = grid_from_tokens(tokens, vae.codebook());
    flat.insert(flat.end(), z.values.begin(), z.values.end());
  }
  return Tensor::from({int(items.size()), vae.input_dim()}, std::move(flat));
}

Tensor reparameterize(const Encoded& e, Rng& rng) {
  std::vector<double> eps(e.mean.numel());
  for (double& v : eps) v = normal(rng);
  return ag::add(e.mean, ag::mul(ag::exp(e.log_sigma), Tensor::from(e.mean.shape(), std::move(eps))));
}

void check_finite(double v, int stage, int epoch) {
  COGS_CHECK(std::isfinite(v), ErrorKind::kNumeric,
             "vae training diverged: non-finite loss in stage " + std::to_string(stage) + ", epoch " +
                 std::to_string(epoch));
}

}  // namespace

RefineVAE train_refine_vae(int class_label, const std::vector<GeneratedSample>& corpus, const VAEConfig& cfg,
                           const vq::Codebook& image_codebook, int grid_h, int grid_w,
                           const std::function<void(const EpochLog&)>& on_epoch, const RefineVAE* init) {
  std::vector<GeneratedSample> samples;
  for (const auto& s : corpus)
    if (class_label < 0 || s.class_label == class_label) samples.push_back(s);
  COGS_CHECK(!samples.empty(), ErrorKind::kConfig,
             "train_refine_vae: no generations for class " + std::to_string(class_label));
  RefineVAE vae(cfg, class_label, image_codebook, grid_h, grid_w);
  if (init != nullptr) {
    COGS_CHECK(init->codebook().entries == image_codebook.entries, ErrorKind::kConfig,
               "train_refine_vae: initial model uses a different codebook");
    ckpt::assign(vae.params(), init->params(), "train_refine_vae init");
  }
  Rng batch_rng(derive_seed(cfg.seed, "vae-batches/" + std::to_string(class_label)));
  Rng noise_rng(derive_seed(cfg.seed, "vae-noise/" + std::to_string(class_label)));
  COGS_CHECK(!make_pair_batches(samples, cfg.pairs_per_batch, batch_rng).empty(), ErrorKind::kConfig,
             "train_refine_vae: not enough sketches with two generations to form a batch");

  // Stage 1: encoder only, contrastive loss, until the loss plateaus.
  {
    nn::Adam adam(vae.encoder_params(), {.lr = cfg.lr, .clip_norm = 1.0});
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;
    for (int epoch = 0; epoch < cfg.bootstrap_epochs; ++epoch) {
      EpochLog log{1, epoch, 0.0, 0.0, 0.0};
      const auto batches = make_pair_batches(samples, cfg.pairs_per_batch, batch_rng);
      for (const PairBatch& b : batches) {
        adam.zero_grad();
        const Encoded e = vae.encode_batch(stack_grids(vae, b.items, noise_rng));
        const Tensor loss = contrastive_loss(reparameterize(e, noise_rng), b.positives, cfg.tau);
        check_finite(loss.item(), 1, epoch);
        loss.backward();
        adam.step();
        log.contrastive += loss.item();
      }
      log.contrastive /= double(batches.size());
      log.loss = log.contrastive;
      if (on_epoch) on_epoch(log);
      if (log.loss < best * (1.0 - cfg.plateau_tol)) {
        best = log.loss;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
  }

  // Stage 2: encoder and decoder on the weighted sum.
  nn::Adam adam(nn::params_of(vae.params()), {.lr = cfg.lr, .clip_norm = 1.0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog log{2, epoch, 0.0, 0.0, 0.0};
    const auto batches = make_pair_batches(samples, cfg.pairs_per_batch, batch_rng);
    for (const PairBatch& b : batches) {
      adam.zero_grad();
      const Tensor x = stack_grids(vae, b.items, noise_rng);
      const Encoded e = vae.encode_batch(x);
      const Tensor w = reparameterize(e, noise_rng);
      const Tensor elbo = elbo_loss(x, e, vae.decode_batch(w));
      const Tensor con = contrastive_loss(w, b.positives, cfg.tau);
      const Tensor loss = vae_loss(elbo, con, cfg.lambda_v);
      check_finite(loss.item(), 2, epoch);
      loss.backward();
      adam.step();
      log.loss += loss.item();
      log.elbo += elbo.item();
      log.contrastive += con.item();
    }
    log.loss /= double(batches.size());
    log.elbo /= double(batches.size());
    log.contrastive /= double(batches.size());
    if (on_epoch) on_epoch(log);
  }
  vae.params().round_to_float();
  return vae;
}

double positive_precision_at_1(const RefineVAE& vae, const std::vector<PairBatch>& batches) {
  COGS_CHECK(!batches.empty(), ErrorKind::kConfig, "positive_precision_at_1: no batches");
  long hits = 0, anchors = 0;
  for (const PairBatch& b : batches) {
    std::vector<std::vector<double>> means;
    for (const GeneratedSample* s : b.items) means.push_back(vae.encode(s->tokens).mean);
    for (size_t i = 0; i < means.size(); ++i, ++anchors) {
      const double dp = style::euclidean(means[i], means[size_t(b.positives[i])]);
      bool best = true;
      for (size_t j = 0; j < means.size() && best; ++j)
        if (j != i && j != size_t(b.positives[i])) best = dp < style::euclidean(means[i], means[j]);
      hits += best;
    }
  }
  return double(hits) / double(anchors);
}

// ---------------------------------------------------------------- index

const IndexEntry* EmbeddingIndex::find(const std::string& id) const {
  for (const auto& e : entries_)
    if (e.id == id) return &e;
  return nullptr;
}

void EmbeddingIndex::add(IndexEntry entry) {
  COGS_CHECK(entry.mean.size() == size_t(d_), ErrorKind::kShape,
             "index: vector has dimension " + std::to_string(entry.mean.size()) + ", index expects " +
                 std::to_string(d_));
  COGS_CHECK(find(entry.id) == nullptr, ErrorKind::kConflict, "index: duplicate id " + entry.id);
  flat_.insert(flat_.end(), entry.mean.begin(), entry.mean.end());
  entries_.push_back(std::move(entry));
}

void EmbeddingIndex::save(const std::filesystem::path& path) const {
  nn::ParamStore t;
  t.insert("means", {int(entries_.size()), d_}, flat_);
  json ids = json::array();
  for (const auto& e : entries_) ids.push_back({{"id", e.id}, {"metadata", e.metadata}});
  ckpt::save(path, t, {{"kind", "embedding-index"}, {"class_label", class_label_}, {"d", d_}, {"entries", ids}});
}

EmbeddingIndex EmbeddingIndex::load(const std::filesystem::path& path) {
  ckpt::Archive a = ckpt::load(path);
  COGS_CHECK(a.metadata.value("kind", "") == "embedding-index", ErrorKind::kFormat,
             path.string() + " is not an embedding index");
  EmbeddingIndex idx(a.metadata.at("class_label"), a.metadata.at("d"));
  const json& ids = a.metadata.at("entries");
  const Tensor means = a.tensors.get("means");
  COGS_CHECK(means.shape() == ag::Shape({int(ids.size()), idx.d_}), ErrorKind::kFormat,
             path.string() + ": id map and vector table disagree");
  for (size_t i = 0; i < ids.size(); ++i) {
    const auto begin = means.values().begin() + long(i * size_t(idx.d_));
    idx.add({ids[i].at("id"), std::vector<double>(begin, begin + idx.d_), ids[i].value("metadata", json::object())});
  }
  return idx;
}

RetrievalResult retrieve(const std::vector<double>& query, const EmbeddingIndex& index, int k) {
  COGS_CHECK(k >= 0, ErrorKind::kRange, "retrieve: k must be >= 0");
  COGS_CHECK(query.size() == size_t(index.dim()), ErrorKind::kShape,
             "retrieve: query has dimension " + std::to_string(query.size()) + ", index expects " +
                 std::to_string(index.dim()));
  RetrievalResult r;
  const size_t n = index.size();
  r.flagged = size_t(k) > n;
  if (k == 0 || n == 0) return r;
  std::vector<double> flat;
  flat.reserve(n * query.size());
  for (const auto& e : index.entries()) flat.insert(flat.end(), e.mean.begin(), e.mean.end());
  std::vector<double> d2(n);
  kernels::sq_distances(query.data(), flat.data(), int(n), index.dim(), d2.data());
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto& es = index.entries();
  const size_t take = std::min(n, size_t(k));
  std::partial_sort(order.begin(), order.begin() + long(take), order.end(), [&](size_t a, size_t b) {
    return d2[a] != d2[b] ? d2[a] < d2[b] : es[a].id < es[b].id;
  });
  for (size_t i = 0; i < take; ++i) r.neighbors.push_back({es[order[i]].id, std::sqrt(d2[order[i]])});
  return r;
}

RetrievalResult retrieve(const LatentPoint& query, const EmbeddingIndex& index, int k) {
  COGS_CHECK(index.class_label() < 0 || query.class_label == index.class_label(), ErrorKind::kConflict,
             "retrieve: query class " + std::to_string(query.class_label) + " does not match index class " +
                 std::to_string(index.class_label()));
  return retrieve(query.mean, index, k);
}

// ---------------------------------------------------------------- interpolation

double quality_score(const std::vector<double>& features, const metrics::GaussianStats& class_stats) {
  metrics::GaussianStats point{features, std::vector<double>(features.size() * features.size(), 0.0), 1};
  return metrics::frechet_distance(point, class_stats);
}

double calibrate_quality_threshold(const std::vector<std::vector<double>>& real_features,
                                   const metrics::GaussianStats& class_stats, double quantile) {
  COGS_CHECK(!real_features.empty(), ErrorKind::kRange, "calibrate_quality_threshold: no features");
  COGS_CHECK(quantile >= 0.0 && quantile <= 1.0, ErrorKind::kRange, "quantile must lie in [0,1]");
  std::vector<double> s;
  for (const auto& f : real_features) s.push_back(quality_score(f, class_stats));
  std::sort(s.begin(), s.end());
  return s[std::min(s.size() - 1, size_t(std::ceil(quantile * double(s.size() - 1))))];
}

std::vector<double> interpolate(const std::vector<double>& a, const std::vector<double>& b, double t,
                                bool spherical) {
  COGS_CHECK(a.size() == b.size(), ErrorKind::kShape, "interpolate: endpoint dimensions differ");
  if (t == 0.0) return a;
  if (t == 1.0) return b;
  std::vector<double> out(a.size());
  double wa = 1.0 - t, wb = t;
  if (spherical) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    const double omega = std::acos(std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0));
    if (std::sin(omega) > 1e-9) {
      wa = std::sin((1.0 - t) * omega) / std::sin(omega);
      wb = std::sin(t * omega) / std::sin(omega);
    }
  }
  for (size_t i = 0; i < a.size(); ++i) out[i] = wa * a[i] + wb * b[i];
  return out;
}

InterpolationResult interpolate_refine(const RefineVAE& vae, const std::vector<double>& w_query,
                                       const std::vector<double>& w_neighbor, const InterpolationOptions& opts,
                                       const vq::VQModel& image_vq, const style::StyleEncoder& encoder,
                                       const metrics::GaussianStats& class_stats) {
  std::vector<double> ts = opts.t_values;
  if (ts.empty()) {
    COGS_CHECK(opts.n_samples >= 1, ErrorKind::kRange, "interpolate: n_samples must be >= 1");
    for (int i = 0; i < opts.n_samples; ++i) ts.push_back(double(i + 1) / double(opts.n_samples + 1));
  }
  for (double t : ts) COGS_CHECK(t >= 0.0 && t <= 1.0, ErrorKind::kRange, "interpolate: t must lie in [0,1]");

  InterpolationResult r;
  r.requested = ts.size();
  std::vector<InterpolationSample> all(ts.size());
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < ts.size(); ++i) {
    InterpolationSample& s = all[i];
    s.t = ts[i];
    s.w = interpolate(w_query, w_neighbor, s.t, opts.spherical);
    s.distance_from_query = style::euclidean(s.w, w_query);
    s.tokens = vae.decode(s.w).tokens;
    s.image = image_vq.decode(s.tokens);
    s.quality = quality_score(encoder.features(s.image), class_stats);
  }
  for (auto& s : all)
    if (!opts.quality_threshold || s.quality <= *opts.quality_threshold) r.samples.push_back(std::move(s));
  r.flagged = r.samples.empty();
  return r;
}

}  // namespace cogs::vae
