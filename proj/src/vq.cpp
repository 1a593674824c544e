#include "cogs/vq.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cogs/checkpoint.hpp"
#include "cogs/error.hpp"
#include "cogs/kernels.hpp"
#include "cogs/raster_tensor.hpp"

namespace cogs::vq {

using ag::Tensor;
using nlohmann::json;

std::string domain_name(Domain d) { return d == Domain::kSketch ? "sketch" : "image"; }

Domain parse_domain(const std::string& s) {
  if (s == "sketch") return Domain::kSketch;
  if (s == "image") return Domain::kImage;
  throw Error(ErrorKind::kConfig, "unknown domain '" + s + "' (expected sketch or image)");
}

void VQConfig::validate() const {
  COGS_CHECK(resolution > 0 && h > 0 && w > 0 && h == w, ErrorKind::kConfig, "vq: token grid must be square");
  COGS_CHECK(resolution % h == 0, ErrorKind::kConfig, "vq: resolution must be a multiple of the grid size");
  const int f = factor();
  COGS_CHECK((f & (f - 1)) == 0, ErrorKind::kConfig, "vq: downsampling factor must be a power of two");
  COGS_CHECK(n_z > 0 && K > 0 && hidden >= 2, ErrorKind::kConfig, "vq: n_z, K and hidden must be positive");
  COGS_CHECK(commitment_beta >= 0 && perceptual_weight >= 0, ErrorKind::kConfig, "vq: loss weights must be >= 0");
  COGS_CHECK(epochs >= 0 && batch_size > 0 && lr > 0, ErrorKind::kConfig, "vq: bad optimizer settings");
}

VQConfig vq_config_from_json(const json& j) {
  VQConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.h = j.value("h", c.h);
  c.w = j.value("w", c.w);
  c.n_z = j.value("n_z", c.n_z);
  c.K = j.value("K", c.K);
  c.hidden = j.value("hidden", c.hidden);
  c.commitment_beta = j.value("commitment_beta", c.commitment_beta);
  c.perceptual_weight = j.value("perceptual_weight", c.perceptual_weight);
  c.balance_strokes = j.value("balance_strokes", c.balance_strokes);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

json to_json(const VQConfig& c) {
  return {{"resolution", c.resolution}, {"h", c.h}, {"w", c.w}, {"n_z", c.n_z}, {"K", c.K},
          {"hidden", c.hidden}, {"commitment_beta", c.commitment_beta},
          {"perceptual_weight", c.perceptual_weight}, {"balance_strokes", c.balance_strokes},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}

bool Codebook::has_duplicates(double tol) const {
  for (int a = 0; a < K; ++a)
    for (int b = a + 1; b < K; ++b) {
      double d = 0.0;
      for (int j = 0; j < n_z; ++j) d += (row(a)[j] - row(b)[j]) * (row(a)[j] - row(b)[j]);
      if (std::sqrt(d) <= tol) return true;
    }
  return false;
}

Quantized quantize(const LatentGrid& z, const Codebook& cb) {
  COGS_CHECK(cb.K > 0 && !cb.entries.empty(), ErrorKind::kRange, "quantize: empty codebook");
  COGS_CHECK(z.n_z == cb.n_z, ErrorKind::kShape,
             "quantize: latent dim " + std::to_string(z.n_z) + " vs codebook dim " + std::to_string(cb.n_z));
  const int n = z.h * z.w;
  Quantized q;
  q.tokens = {z.h, z.w, std::vector<int32_t>(size_t(n))};
  std::vector<double> dist(static_cast<size_t>(n));
  kernels::nearest_rows(z.values.data(), n, cb.entries.data(), cb.K, cb.n_z, q.tokens.indices.data(),
                        dist.data());
  q.grid = {z.h, z.w, z.n_z, std::vector<double>(z.values.size())};
  for (int i = 0; i < n; ++i)
    std::copy_n(cb.row(q.tokens.indices[size_t(i)]), cb.n_z, q.grid.values.begin() + long(i) * cb.n_z);
  return q;
}

QuantizedCells quantize_cells(const Tensor& z, const Tensor& codebook) {
  COGS_CHECK(z.rank() == 2 && codebook.rank() == 2 && z.dim(1) == codebook.dim(1), ErrorKind::kShape,
             "quantize_cells: shape mismatch");
  COGS_CHECK(codebook.dim(0) > 0, ErrorKind::kRange, "quantize_cells: empty codebook");
  QuantizedCells q;
  q.indices.resize(size_t(z.dim(0)));
  std::vector<double> dist(q.indices.size());
  kernels::nearest_rows(z.values().data(), z.dim(0), codebook.values().data(), codebook.dim(0), z.dim(1),
                        q.indices.data(), dist.data());
  ag::tape_choices(q.indices);
  q.selected = ag::gather_rows(codebook, q.indices);
  q.straight_through = ag::add(z, ag::stop_gradient(ag::sub(q.selected, z)));
  return q;
}

// ---------------------------------------------------------------- model

namespace {

int log2i(int v) {
  int n = 0;
  while ((1 << n) < v) ++n;
  return n;
}

}  // namespace

VQModel::VQModel(const VQConfig& cfg, Domain domain) : cfg_(cfg), domain_(domain) {
  cfg_.validate();
  Rng rng(derive_seed(cfg_.seed, "vq/" + domain_name(domain)));
  const int C = channels(), c1 = cfg_.hidden / 2, hid = cfg_.hidden;
  auto he = [](int fan_in) { return std::sqrt(2.0 / fan_in); };
  params_.add("enc.in.w", {c1, C, 3, 3}, nn::Init::kNormal, rng, he(C * 9));
  params_.add("enc.in.b", {c1}, nn::Init::kZeros, rng);
  const int stages = log2i(cfg_.factor());
  int in = c1;
  for (int i = 0; i < stages; ++i) {
    params_.add("enc.down" + std::to_string(i) + ".w", {hid, in, 4, 4}, nn::Init::kNormal, rng, he(in * 16));
    params_.add("enc.down" + std::to_string(i) + ".b", {hid}, nn::Init::kZeros, rng);
    in = hid;
  }
  params_.add("enc.out.w", {cfg_.n_z, in, 1, 1}, nn::Init::kNormal, rng, 1.0 / std::sqrt(in));
  params_.add("enc.out.b", {cfg_.n_z}, nn::Init::kZeros, rng);

  params_.add("dec.in.w", {hid, cfg_.n_z, 3, 3}, nn::Init::kNormal, rng, he(cfg_.n_z * 9));
  params_.add("dec.in.b", {hid}, nn::Init::kZeros, rng);
  for (int i = 0; i < stages; ++i) {
    const int out = i + 1 == stages ? c1 : hid;
    params_.add("dec.up" + std::to_string(i) + ".w", {out, hid, 3, 3}, nn::Init::kNormal, rng, he(hid * 9));
    params_.add("dec.up" + std::to_string(i) + ".b", {out}, nn::Init::kZeros, rng);
  }
  const int last = stages > 0 ? c1 : hid;
  params_.add("dec.out.w", {C, last, 3, 3}, nn::Init::kNormal, rng, 1.0 / std::sqrt(last * 9.0));
  params_.add("dec.out.b", {C}, nn::Init::kZeros, rng);

  params_.add("codebook", {cfg_.K, cfg_.n_z}, nn::Init::kUniform, rng, 1.0 / cfg_.K);
  params_.round_to_float();
}

void VQModel::check_input(const Tensor& images) const {
  COGS_CHECK(images.rank() == 4 && images.dim(1) == channels() && images.dim(2) == cfg_.resolution &&
                 images.dim(3) == cfg_.resolution,
             ErrorKind::kShape,
             domain_name(domain_) + " encoder expects [B," + std::to_string(channels()) + "," +
                 std::to_string(cfg_.resolution) + "," + std::to_string(cfg_.resolution) + "], got " +
                 ag::shape_str(images.shape()));
}

Tensor VQModel::encode_cells(const Tensor& images) const {
  check_input(images);
  const auto& p = params_;
  Tensor x = ag::silu(ag::conv2d(images, p.get("enc.in.w"), p.get("enc.in.b"), 1, 1));
  for (int i = 0; p.contains("enc.down" + std::to_string(i) + ".w"); ++i)
    x = ag::silu(ag::conv2d(x, p.get("enc.down" + std::to_string(i) + ".w"),
                            p.get("enc.down" + std::to_string(i) + ".b"), 2, 1));
  x = ag::conv2d(x, p.get("enc.out.w"), p.get("enc.out.b"), 1, 0);
  return ag::nchw_to_cells(x);
}

Tensor VQModel::decode_cells(const Tensor& cells, int batch) const {
  COGS_CHECK(cells.rank() == 2 && cells.dim(1) == cfg_.n_z && cells.dim(0) == batch * tokens(),
             ErrorKind::kShape, "decode_cells: expected [" + std::to_string(batch * tokens()) + "," +
                                    std::to_string(cfg_.n_z) + "], got " + ag::shape_str(cells.shape()));
  const auto& p = params_;
  Tensor x = ag::cells_to_nchw(cells, batch, cfg_.h, cfg_.w);
  x = ag::silu(ag::conv2d(x, p.get("dec.in.w"), p.get("dec.in.b"), 1, 1));
  for (int i = 0; p.contains("dec.up" + std::to_string(i) + ".w"); ++i)
    x = ag::silu(ag::conv2d(ag::upsample2x(x), p.get("dec.up" + std::to_string(i) + ".w"),
                            p.get("dec.up" + std::to_string(i) + ".b"), 1, 1));
  return ag::sigmoid(ag::conv2d(x, p.get("dec.out.w"), p.get("dec.out.b"), 1, 1));
}

LatentGrid VQModel::encode(const Raster& image) const {
  ag::NoGradGuard guard;
  const Raster* p = &image;
  Tensor cells = encode_cells(stack_rasters(std::vector<const Raster*>{p}));
  return {cfg_.h, cfg_.w, cfg_.n_z, cells.values()};
}

Codebook VQModel::codebook() const {
  const Tensor cb = codebook_tensor();
  return {cb.dim(0), cb.dim(1), cb.values()};
}

TokenGrid VQModel::tokenize(const Raster& image) const { return quantize(encode(image), codebook()).tokens; }

Raster VQModel::decode(const TokenGrid& tokens) const {
  COGS_CHECK(tokens.h == cfg_.h && tokens.w == cfg_.w && int(tokens.indices.size()) == this->tokens(),
             ErrorKind::kShape, "decode: token grid shape does not match the model");
  for (int32_t t : tokens.indices)
    COGS_CHECK(t >= 0 && t < cfg_.K, ErrorKind::kRange,
               "decode: token " + std::to_string(t) + " outside [0," + std::to_string(cfg_.K) + ")");
  ag::NoGradGuard guard;
  Tensor img = decode_cells(ag::gather_rows(codebook_tensor(), tokens.indices), 1);
  Raster r = raster_from_tensor(img, 0);
  for (double& v : r.data) v = std::clamp(v, 0.0, 1.0);
  return r;
}

VQModel VQModel::frozen() const {
  VQModel m = *this;
  m.params_ = params_.clone();
  m.params_.set_requires_grad(false);
  return m;
}

json VQModel::metadata() const {
  return {{"kind", "vq"}, {"domain", domain_name(domain_)}, {"config", to_json(cfg_)}};
}

void VQModel::save(const std::filesystem::path& path) const { ckpt::save(path, params_, metadata()); }

VQModel VQModel::load(const std::filesystem::path& path) {
  ckpt::Archive a = ckpt::load(path);
  COGS_CHECK(a.metadata.value("kind", "") == "vq", ErrorKind::kFormat, path.string() + " is not a vq checkpoint");
  VQModel m(vq_config_from_json(a.metadata.at("config")), parse_domain(a.metadata.at("domain")));
  ckpt::assign(m.params_, a.tensors, path.string());
  return m;
}

// ---------------------------------------------------------------- loss

std::vector<double> stroke_weights(const std::vector<double>& x) {
  const double strokes = double(std::count_if(x.begin(), x.end(), [](double v) { return v > 0.5; }));
  const double p = strokes / double(x.size());
  std::vector<double> w(x.size(), 1.0);
  if (p <= 0.0 || p >= 1.0) return w;
  for (size_t i = 0; i < x.size(); ++i) w[i] = x[i] > 0.5 ? 0.5 / p : 0.5 / (1.0 - p);
  return w;
}

LossTerms vq_loss_terms(const Tensor& x, const Tensor& recon, const Tensor& z, const Tensor& selected,
                        const VQConfig& cfg, const style::StyleEncoder* style, bool balanced) {
  COGS_CHECK(x.shape() == recon.shape(), ErrorKind::kShape, "vq_loss: reconstruction shape differs from input");
  LossTerms t;
  Tensor err = ag::abs(ag::sub(recon, x));
  if (balanced) err = ag::mul(err, Tensor::from(x.shape(), stroke_weights(x.values())));
  Tensor rec = ag::mean(err);
  Tensor cb = ag::mean(ag::square(ag::sub(ag::stop_gradient(z), selected)));
  Tensor commit = ag::mean(ag::square(ag::sub(z, ag::stop_gradient(selected))));
  t.total = ag::add(ag::add(rec, cb), ag::scale(commit, cfg.commitment_beta));
  if (style != nullptr && cfg.perceptual_weight > 0.0) {
    Tensor perc = ag::mean(ag::square(ag::sub(style->embed_batch(recon), style->embed_batch(x))));
    t.perceptual = perc.item();
    t.total = ag::add(t.total, ag::scale(perc, cfg.perceptual_weight));
  }
  t.reconstruction = rec.item();
  t.codebook = cb.item();
  t.commitment = commit.item();
  return t;
}

namespace {

bool balanced_for(const VQModel& model) {
  return model.domain() == Domain::kSketch && model.config().balance_strokes;
}

}  // namespace

LossTerms vq_loss(const VQModel& model, const Tensor& x, const style::StyleEncoder* style) {
  Tensor z = model.encode_cells(x);
  QuantizedCells q = quantize_cells(z, model.codebook_tensor());
  Tensor recon = model.decode_cells(q.straight_through, x.dim(0));
  return vq_loss_terms(x, recon, z, q.selected, model.config(), style, balanced_for(model));
}

std::vector<int64_t> codebook_usage(const std::vector<TokenGrid>& grids, int K) {
  std::vector<int64_t> counts(size_t(std::max(K, 0)), 0);
  for (const TokenGrid& g : grids)
    for (int32_t t : g.indices) {
      COGS_CHECK(t >= 0 && t < K, ErrorKind::kRange, "codebook_usage: token out of range");
      ++counts[size_t(t)];
    }
  return counts;
}

double usage_entropy(const std::vector<int64_t>& counts) {
  const double total = double(std::accumulate(counts.begin(), counts.end(), int64_t{0}));
  if (total <= 0) return 0.0;
  double h = 0.0;
  for (int64_t c : counts)
    if (c > 0) h -= (c / total) * std::log(c / total);
  return h;
}

// ---------------------------------------------------------------- training

std::vector<Raster> domain_rasters(const data::Manifest& manifest, Domain domain) {
  std::vector<Raster> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records)
    out.push_back(domain == Domain::kSketch ? bitmap_to_raster(r.sketch.pixels) : r.image.pixels);
  return out;
}

namespace {

std::vector<int64_t> assignment_counts(const VQModel& model, const std::vector<Raster>& data, int batch) {
  ag::NoGradGuard guard;
  std::vector<int64_t> counts(size_t(model.config().K), 0);
  const Tensor cb = model.codebook_tensor();
  for (size_t s = 0; s < data.size(); s += size_t(batch)) {
    std::vector<const Raster*> ptrs;
    for (size_t i = s; i < std::min(data.size(), s + size_t(batch)); ++i) ptrs.push_back(&data[i]);
    const Tensor z = model.encode_cells(stack_rasters(ptrs));
    std::vector<int32_t> idx(size_t(z.dim(0)));
    std::vector<double> dist(idx.size());
    kernels::nearest_rows(z.values().data(), z.dim(0), cb.values().data(), cb.dim(0), cb.dim(1), idx.data(),
                          dist.data());
    for (int32_t t : idx) ++counts[size_t(t)];
  }
  return counts;
}

}  // namespace

VQModel train_vq(const std::vector<Raster>& data, const VQConfig& cfg, Domain domain,
                 const style::StyleEncoder* style, const TrainOptions& opts) {
  COGS_CHECK(!data.empty(), ErrorKind::kConfig, "train_vq: empty training set");
  VQModel model(cfg, domain);
  Rng rng(derive_seed(cfg.seed, "vq-train/" + domain_name(domain)));
  if (opts.initial_entropy != nullptr)
    *opts.initial_entropy = usage_entropy(assignment_counts(model, data, cfg.batch_size));

  // Codebook rows start at random encoder outputs. Rows far from every output
  // make the first quantizer terms dominate and can saturate the decoder.
  {
    ag::NoGradGuard guard;
    std::vector<size_t> pick(data.size());
    std::iota(pick.begin(), pick.end(), 0);
    std::shuffle(pick.begin(), pick.end(), rng);
    pick.resize(std::min<size_t>(pick.size(), 64));
    std::vector<const Raster*> ptrs;
    for (size_t i : pick) ptrs.push_back(&data[i]);
    const std::vector<double> cells = model.encode_cells(stack_rasters(ptrs)).values();
    const size_t n = cells.size() / size_t(cfg.n_z);
    std::vector<size_t> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    std::shuffle(rows.begin(), rows.end(), rng);
    Tensor cb = model.codebook_tensor();
    for (int k = 0; k < cfg.K; ++k) {
      const size_t c = rows[size_t(k) % n];
      for (int j = 0; j < cfg.n_z; ++j)
        cb.mutable_value()[size_t(k) * cfg.n_z + size_t(j)] =
            cells[c * size_t(cfg.n_z) + size_t(j)] + normal(rng, 0.0, 1e-3);
    }
  }

  nn::Adam adam(nn::params_of(model.params()), {.lr = cfg.lr, .clip_norm = 1.0});
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const int n_z = cfg.n_z;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int64_t> usage(size_t(cfg.K), 0);
    std::vector<double> recent;  // encoder outputs of the latest batch
    double loss_sum = 0.0, rec_sum = 0.0;
    int steps = 0;
    for (size_t s = 0; s < order.size(); s += size_t(cfg.batch_size)) {
      std::vector<const Raster*> ptrs;
      for (size_t i = s; i < std::min(order.size(), s + size_t(cfg.batch_size)); ++i)
        ptrs.push_back(&data[order[i]]);
      const Tensor x = stack_rasters(ptrs);
      adam.zero_grad();
      const Tensor z = model.encode_cells(x);
      QuantizedCells q = quantize_cells(z, model.codebook_tensor());
      const Tensor recon = model.decode_cells(q.straight_through, x.dim(0));
      LossTerms t = vq_loss_terms(x, recon, z, q.selected, model.config(), style, balanced_for(model));
      const double loss = t.total.item();
      COGS_CHECK(std::isfinite(loss), ErrorKind::kNumeric,
                 "vq training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                     std::to_string(steps));
      t.total.backward();
      adam.step();
      for (int32_t k : q.indices) ++usage[size_t(k)];
      recent = z.values();
      loss_sum += loss;
      rec_sum += t.reconstruction;
      ++steps;
    }

    EpochLog log{epoch, loss_sum / steps, rec_sum / steps, usage_entropy(usage), 0};
    if (epoch + 1 < cfg.epochs) {
      // Unused entries restart at random encoder outputs.
      Tensor cb = model.codebook_tensor();
      const size_t cells = recent.size() / size_t(n_z);
      std::vector<size_t> pool(cells);
      std::iota(pool.begin(), pool.end(), 0);
      std::shuffle(pool.begin(), pool.end(), rng);
      for (int k = 0; k < cfg.K; ++k) {
        if (usage[size_t(k)] > 0) continue;
        const size_t c = pool[size_t(log.reinitialized) % cells];
        auto dst = cb.mutable_value().begin() + long(k) * n_z;
        for (int j = 0; j < n_z; ++j) dst[j] = recent[c * size_t(n_z) + size_t(j)] + normal(rng, 0.0, 1e-3);
        ++log.reinitialized;
      }
    }
    if (opts.on_epoch) opts.on_epoch(log);
  }
  model.params().round_to_float();
  return model;
}

VQModel train_vq(const data::Manifest& manifest, const VQConfig& cfg, Domain domain,
                 const style::StyleEncoder* style, const TrainOptions& opts) {
  COGS_CHECK(!manifest.records.empty(), ErrorKind::kConfig, "train_vq: empty manifest");
  return train_vq(domain_rasters(manifest, domain), cfg, domain, style, opts);
}

}  // namespace cogs::vq
