// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. The training criteria (10-15) build the toy
// corpus in memory and train every stage from scratch.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "cogs/error.hpp"
#include "cogs/metrics.hpp"
#include "cogs/raster_tensor.hpp"
#include "cogs/transformer.hpp"
#include "cogs/vae.hpp"
#include "fd.hpp"

using namespace cogs;

namespace {

using Clock = std::chrono::steady_clock;
const Clock::time_point kStart = Clock::now();

double elapsed() { return std::chrono::duration<double>(Clock::now() - kStart).count(); }

void progress(const std::string& msg) {
  std::fprintf(stderr, "[%7.1fs] %s\n", elapsed(), msg.c_str());
}

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("%s %2d %s (%s)\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

// Runs one criterion; an exception counts as a failure.
void check(int id, const std::string& what, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    auto [ok, detail] = body();
    report(id, ok, what, detail);
  } catch (const std::exception& e) {
    report(id, false, what, std::string("threw: ") + e.what());
  }
}

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

// ---------------------------------------------------------------- 1-9

std::pair<bool, std::string> quantize_vs_exhaustive() {
  Rng rng(101);
  const int K = 128, n_z = 8;
  vq::Codebook cb{K, n_z, std::vector<double>(size_t(K) * n_z)};
  for (double& v : cb.entries) v = normal(rng);
  vq::LatentGrid z{40, 25, n_z, std::vector<double>(size_t(1000) * n_z)};
  for (double& v : z.values) v = normal(rng);
  const vq::Quantized q = vq::quantize(z, cb);
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      double d = 0.0;
      for (int c = 0; c < n_z; ++c) d += (z.cell(i)[c] - cb.row(k)[c]) * (z.cell(i)[c] - cb.row(k)[c]);
      if (d < bd) bd = d, best = k;
    }
    bool same = q.tokens.indices[size_t(i)] == best;
    for (int c = 0; c < n_z; ++c) same = same && q.grid.cell(i)[c] == cb.row(best)[c];
    mismatches += !same;
  }
  return {mismatches == 0, std::to_string(mismatches) + " of 1000 cells differ"};
}

std::pair<bool, std::string> distance_transform_vs_brute() {
  Rng rng(102);
  int mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Bitmap e(16, 16);
    for (auto& v : e.data) v = uniform(rng) < 0.06;
    e.data[rng() % 256] = 1;
    const metrics::DistanceField f = metrics::distance_transform(e);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        double best = std::numeric_limits<double>::infinity();
        for (int yy = 0; yy < 16; ++yy)
          for (int xx = 0; xx < 16; ++xx)
            if (e.at(yy, xx)) best = std::min(best, std::hypot(double(y - yy), double(x - xx)));
        mismatches += f.at(y, x) != best;
      }
  }
  return {mismatches == 0, std::to_string(mismatches) + " of 12800 pixels differ"};
}

std::pair<bool, std::string> retrieve_vs_brute() {
  Rng rng(103);
  const int n = 10000, d = 16;
  vae::EmbeddingIndex index(0, d);
  std::vector<std::vector<double>> rows;
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    std::vector<double> v(d);
    for (double& x : v) x = normal(rng);
    // A few duplicates exercise the tie rule.
    if (i % 997 == 5) v = rows[size_t(i - 1)];
    char id[16];
    std::snprintf(id, sizeof id, "g%05d", (i * 7919) % n);
    ids.emplace_back(id);
    rows.push_back(v);
    index.add({id, v, {}});
  }
  int bad_queries = 0;
  for (int q = 0; q < 20; ++q) {
    std::vector<double> query(d);
    if (q % 5 == 0) {
      query = rows[rng() % size_t(n)];
    } else {
      for (double& x : query) x = normal(rng);
    }
    std::vector<std::pair<double, std::string>> brute;
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += (query[size_t(c)] - rows[size_t(i)][size_t(c)]) * (query[size_t(c)] - rows[size_t(i)][size_t(c)]);
      brute.emplace_back(std::sqrt(s), ids[size_t(i)]);
    }
    std::sort(brute.begin(), brute.end());
    const int k = 50;
    const vae::RetrievalResult r = vae::retrieve(query, index, k);
    bool ok = int(r.neighbors.size()) == k && !r.flagged;
    for (int i = 0; ok && i < k; ++i)
      ok = r.neighbors[size_t(i)].id == brute[size_t(i)].second &&
           std::abs(r.neighbors[size_t(i)].distance - brute[size_t(i)].first) <= 1e-12;
    bad_queries += !ok;
  }
  return {bad_queries == 0, std::to_string(bad_queries) + " of 20 queries ordered differently, k=50 over 1e4"};
}

std::pair<bool, std::string> frechet_1d() {
  Rng rng(104);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double m1 = normal(rng, 0, 3), m2 = normal(rng, 0, 3);
    const double s1 = 0.1 + uniform(rng, 0, 4), s2 = 0.1 + uniform(rng, 0, 4);
    metrics::GaussianStats a{{m1}, {s1 * s1}, 10}, b{{m2}, {s2 * s2}, 10};
    const double expect = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    worst = std::max(worst, std::abs(metrics::frechet_distance(a, b) - expect));
  }
  return {worst < 1e-9, fmt("max error %.2e over 100 pairs", worst)};
}

std::pair<bool, std::string> uniform_codebook_loss() {
  const int K = vq::VQConfig{}.K, B = 24;
  std::vector<int32_t> targets(B);
  for (int i = 0; i < B; ++i) targets[size_t(i)] = int32_t((i * 37) % K);
  const double l = tf::codebook_loss(ag::Tensor::zeros({B, K}), targets).item();
  const double err = std::abs(l - std::log(double(K)));
  return {err < 1e-10, fmt("|loss - ln %.0f| = %.2e", double(K), err)};
}

std::pair<bool, std::string> infonce_identical() {
  Rng rng(105);
  std::vector<double> row(8);
  for (double& v : row) v = normal(rng);
  std::vector<double> all;
  for (int i = 0; i < 4; ++i) all.insert(all.end(), row.begin(), row.end());
  double worst = 0.0;
  for (double tau : {0.1, 0.5, 1.0}) {
    const double l = vae::contrastive_loss(ag::Tensor::from({4, 8}, all), {1, 0, 3, 2}, tau).item();
    worst = std::max(worst, std::abs(l - std::log(3.0)));
  }
  return {worst < 1e-10, fmt("|loss - ln 3| = %.2e", worst)};
}

std::pair<bool, std::string> kl_unit_shift() {
  const double kl = ag::gaussian_kl(ag::Tensor::from({1, 1}, {1.0}), ag::Tensor::from({1, 1}, {0.0})).item();
  return {std::abs(kl - 0.5) < 1e-10, fmt("KL = %.12f", kl)};
}

// Untrained 8px tokenizers with 2x2 grids; enough to exercise every loss.
struct ToyStack {
  static vq::VQConfig config() {
    vq::VQConfig c;
    c.resolution = 8;
    c.h = c.w = 2;
    c.n_z = 4;
    c.K = 6;
    c.hidden = 4;
    return c;
  }
  vq::VQModel sketch_vq{config(), vq::Domain::kSketch};
  vq::VQModel image_vq{config(), vq::Domain::kImage};
  style::StyleEncoder style;
  tf::Frozen frozen{&sketch_vq, &image_vq, &style};
  tf::Vocab vocab{6, 6, 3, 4, 2, 2};

  tf::CogsTransformer model(double lambda, uint64_t seed) const {
    tf::TransformerConfig c;
    c.layers = 1;
    c.heads = 2;
    c.embed_dim = 8;
    c.mlp_ratio = 2;
    c.top_k = 6;
    c.lambda_t = lambda;
    tf::CogsTransformer m(c, vocab);
    Rng rng(seed);
    for (auto& [name, t] : m.params().items()) {
      ag::Tensor p = t;
      for (double& v : p.mutable_value()) v += normal(rng, 0.0, 0.3);
    }
    return m;
  }

  std::vector<tf::Example> examples(int n, uint64_t seed) const {
    Rng rng(seed);
    std::vector<tf::Example> out;
    for (int i = 0; i < n; ++i) {
      tf::Example e;
      for (int t = 0; t < 4; ++t) {
        e.cond.sketch_tokens.push_back(int32_t(rng() % 6));
        e.cond.style_tokens.push_back(int32_t(rng() % 6));
        e.target.push_back(int32_t(rng() % 6));
      }
      e.cond.class_token = int(rng() % 3);
      Raster s(8, 8, 3);
      for (double& v : s.data) v = uniform(rng);
      e.style_embedding = style.embed(s).values;
      out.push_back(e);
    }
    return out;
  }
};

vq::Codebook float_codebook(int K, int n_z, uint64_t seed) {
  Rng rng(seed);
  vq::Codebook cb{K, n_z, std::vector<double>(size_t(K) * n_z)};
  for (double& v : cb.entries) v = double(float(normal(rng)));
  return cb;
}

vae::VAEConfig toy_vae_config(int d) {
  vae::VAEConfig c;
  c.d = d;
  c.channels = 4;
  c.hidden = 16;
  return c;
}

std::pair<bool, std::string> lambda_zero_reductions() {
  ToyStack toy;
  const tf::CogsTransformer m = toy.model(0.0, 6);
  const auto ex = toy.examples(3, 6);
  std::vector<const tf::Example*> batch{&ex[0], &ex[1], &ex[2]};
  Rng g(1);
  const double total = tf::transformer_loss(m, toy.frozen, batch, g).total.item();
  std::vector<const tf::TokenSequence*> conds;
  std::vector<std::vector<int32_t>> prefixes;
  std::vector<int32_t> targets;
  for (const tf::Example* e : batch) {
    conds.push_back(&e->cond);
    prefixes.emplace_back(e->target.begin(), e->target.end() - 1);
    targets.insert(targets.end(), e->target.begin(), e->target.end());
  }
  const double cb = tf::codebook_loss(m.forward_batch(conds, prefixes), targets).item();

  const vae::RefineVAE v(toy_vae_config(4), 0, float_codebook(8, 3, 21), 4, 4);
  Rng rng(9);
  const ag::Tensor z = cogs::testing::random_tensor({4, v.input_dim()}, rng, 1.0, false);
  const vae::Encoded enc = v.encode_batch(z);
  const ag::Tensor elbo = vae::elbo_loss(z, enc, v.decode_batch(enc.mean));
  const ag::Tensor con = vae::contrastive_loss(enc.mean, {1, 0, 3, 2}, 0.1);
  const double reduced = vae::vae_loss(elbo, con, 0.0).item();

  const bool ok = total == cb && reduced == elbo.item();
  return {ok, fmt("transformer minus codebook %.3g, vae minus elbo %.3g", total - cb, reduced - elbo.item())};
}

std::pair<bool, std::string> gradient_checks() {
  std::map<std::string, double> err;
  std::map<std::string, double> bound;
  using cogs::testing::finite_difference;

  {
    ToyStack toy;
    Rng rng(11);
    for (vq::Domain d : {vq::Domain::kSketch, vq::Domain::kImage}) {
      vq::VQModel m(ToyStack::config(), d);
      ag::Tensor x = cogs::testing::random_tensor({2, m.channels(), 8, 8}, rng, 1.0, false);
      for (double& v : x.mutable_value()) v = uniform(rng) < 0.3 ? 1.0 : uniform(rng, 0.0, 0.4);
      const auto r = finite_difference([&] { return vq::vq_loss(m, x, &toy.style).total; },
                                       nn::params_of(m.params()), 1e-6, 15);
      const std::string key = "vq_loss/" + vq::domain_name(d);
      err[key] = r.rel_error;
      bound[key] = 1e-4;
    }
  }
  {
    ToyStack toy;
    tf::CogsTransformer m = toy.model(1.0, 7);
    const auto ex = toy.examples(2, 7);
    std::vector<const tf::Example*> batch{&ex[0], &ex[1]};
    auto loss = [&] {
      Rng g(9);
      return tf::transformer_loss(m, toy.frozen, batch, g).total;
    };
    err["transformer_loss"] = finite_difference(loss, nn::params_of(m.params()), 1e-6, 12).rel_error;
    bound["transformer_loss"] = 1e-3;

    Rng rng(12);
    ag::Tensor x = cogs::testing::random_tensor({2, 3, 8, 8}, rng, 0.2);
    for (double& v : x.mutable_value()) v += 0.5;
    ag::Tensor y = cogs::testing::random_tensor({2, 3, 8, 8}, rng, 0.2, false);
    for (double& v : y.mutable_value()) v += 0.5;
    err["style_loss"] = finite_difference([&] { return tf::style_loss(x, y, toy.style); }, {x}, 1e-6, 60).rel_error;
    bound["style_loss"] = 1e-4;
  }
  {
    const vae::RefineVAE v(toy_vae_config(2), 0, float_codebook(8, 3, 21), 4, 4);
    Rng rng(13);
    const ag::Tensor z = cogs::testing::random_tensor({4, v.input_dim()}, rng, 1.0, false);
    const ag::Tensor eps = cogs::testing::random_tensor({4, 2}, rng, 1.0, false);
    auto elbo = [&] {
      const vae::Encoded enc = v.encode_batch(z);
      const ag::Tensor w = ag::add(enc.mean, ag::mul(ag::exp(enc.log_sigma), eps));
      return vae::elbo_loss(z, enc, v.decode_batch(w));
    };
    err["elbo_loss"] = finite_difference(elbo, nn::params_of(v.params()), 1e-6, 10).rel_error;
    bound["elbo_loss"] = 1e-4;
    auto con = [&] { return vae::contrastive_loss(v.encode_batch(z).mean, {1, 0, 3, 2}, 0.2); };
    err["contrastive_loss"] = finite_difference(con, v.encoder_params(), 1e-6, 10).rel_error;
    bound["contrastive_loss"] = 1e-4;
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : err) {
    ok = ok && e < bound[name];
    if (!detail.empty()) detail += ", ";
    detail += name + fmt(" %.1e", e);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------- 10-15

struct Pipeline {
  data::Manifest corpus, train, val;
  style::StyleEncoder style;
  std::unique_ptr<vq::VQModel> sketch_vq, image_vq;
  std::vector<tf::Example> train_examples, val_examples;
  std::vector<data::Triple> val_triples;

  tf::Frozen frozen() const { return {sketch_vq.get(), image_vq.get(), &style}; }
  int classes() const { return corpus.num_classes(); }
};

// Per-pixel L1 of the model's reconstruction and of the training-mean image
// on the validation split.
std::pair<double, double> reconstruction_vs_mean(const vq::VQModel& m, const Pipeline& p, vq::Domain d) {
  const auto tr = vq::domain_rasters(p.train, d), va = vq::domain_rasters(p.val, d);
  std::vector<double> mean(tr[0].data.size(), 0.0);
  for (const Raster& r : tr)
    for (size_t i = 0; i < mean.size(); ++i) mean[i] += r.data[i] / double(tr.size());
  double rec = 0.0, base = 0.0;
  for (const Raster& r : va) {
    const Raster out = m.decode(m.tokenize(r));
    for (size_t i = 0; i < mean.size(); ++i) {
      rec += std::abs(out.data[i] - r.data[i]);
      base += std::abs(mean[i] - r.data[i]);
    }
  }
  const double n = double(va.size() * mean.size());
  return {rec / n, base / n};
}

double mean_style_distance(const tf::CogsTransformer& m, const Pipeline& p, uint64_t seed) {
  double total = 0.0;
  int i = 0;
  for (const data::Triple& t : p.val_triples) {
    const auto g = tf::generate(m, p.frozen(), p.val_examples[size_t(i)].cond, m.config().temperature,
                                m.config().top_k, derive_seed(seed, t.sketch_id));
    const auto& style_img = p.val.by_image_id(t.style_image_id).image.pixels;
    total += style::style_distance(p.style.embed(g.image), p.style.embed(style_img));
    ++i;
  }
  return total / double(i);
}

}  // namespace

int main() {
  check(1, "quantize equals exhaustive nearest search", quantize_vs_exhaustive);
  check(2, "distance transform equals brute force", distance_transform_vs_brute);
  check(3, "retrieve equals brute-force k-NN ordering", retrieve_vs_brute);
  check(4, "Frechet distance matches the 1-D closed form", frechet_1d);
  check(5, "uniform logits give codebook loss ln K", uniform_codebook_loss);
  check(6, "InfoNCE over identical embeddings is ln 3", infonce_identical);
  check(7, "KL(N(1,1) || N(0,1)) = 0.5", kl_unit_shift);
  check(8, "zero weights reduce the combined losses exactly", lambda_zero_reductions);
  progress("analytic criteria done");
  check(9, "gradients match finite differences", gradient_checks);
  progress("gradient checks done");

  Pipeline p;
  p.corpus = data::build_corpus(data::CorpusConfig{});
  p.train = p.corpus.subset(data::Split::kTrain);
  p.val = p.corpus.subset(data::Split::kVal);
  progress("corpus: " + std::to_string(p.train.records.size()) + " train, " + std::to_string(p.val.records.size()) +
           " val");

  check(10, "VQ reconstruction beats the mean-image baseline", [&] {
    std::string detail;
    bool ok = true;
    for (vq::Domain d : {vq::Domain::kSketch, vq::Domain::kImage}) {
      auto m = std::make_unique<vq::VQModel>(vq::train_vq(p.train, vq::VQConfig{}, d, &p.style));
      const auto [rec, base] = reconstruction_vs_mean(*m, p, d);
      ok = ok && rec < base;
      if (!detail.empty()) detail += ", ";
      detail += vq::domain_name(d) + fmt(" L1 %.4f vs mean %.4f", rec, base);
      (d == vq::Domain::kSketch ? p.sketch_vq : p.image_vq) = std::make_unique<vq::VQModel>(m->frozen());
      progress("trained " + vq::domain_name(d) + " tokenizer");
    }
    return std::make_pair(ok, detail);
  });
  if (!p.sketch_vq || !p.image_vq) {
    for (int id = 11; id <= 15; ++id) report(id, false, "pipeline", "tokenizers unavailable");
    return 1;
  }

  const auto embed = [&](const data::ImageRecord& r) { return p.style.embed(r.pixels).values; };
  p.train_examples = tf::make_examples(data::pair_styles(p.train, embed).triples, p.train, p.frozen());
  p.val_triples = data::pair_styles(p.val, embed).triples;
  p.val_examples = tf::make_examples(p.val_triples, p.val, p.frozen());

  check(11, "transformer overfits 32 triples", [&] {
    std::vector<tf::Example> few(p.train_examples.begin(), p.train_examples.begin() + 32);
    tf::TransformerConfig c;
    c.lr = 3e-3;
    c.epochs = 50;
    const auto m = tf::train_transformer(few, c, p.frozen(), p.classes());
    const double acc = tf::greedy_token_accuracy(m, few);
    progress("overfit run done");
    return std::make_pair(acc >= 0.9, fmt("greedy token accuracy %.3f", acc));
  });

  check(12, "class token and style loss help in most seeds", [&] {
    const int seeds = 5, epochs = 8;
    int class_wins = 0, style_wins = 0;
    std::string detail;
    for (int s = 1; s <= seeds; ++s) {
      tf::TransformerConfig full;
      full.epochs = epochs;
      full.seed = uint64_t(s);
      tf::TransformerConfig no_class = full, no_style = full;
      no_class.use_class_token = false;
      no_style.lambda_t = 0.0;
      const auto m_full = tf::train_transformer(p.train_examples, full, p.frozen(), p.classes());
      const auto m_nc = tf::train_transformer(p.train_examples, no_class, p.frozen(), p.classes());
      const auto m_ns = tf::train_transformer(p.train_examples, no_style, p.frozen(), p.classes());
      // The no-class model reads conditions without the class token.
      const double l_full = tf::mean_codebook_loss(m_full, p.val_examples);
      const double l_nc = tf::mean_codebook_loss(m_nc, p.val_examples);
      const double d_full = mean_style_distance(m_full, p, uint64_t(s));
      const double d_ns = mean_style_distance(m_ns, p, uint64_t(s));
      class_wins += l_full <= l_nc;
      style_wins += d_full <= d_ns;
      detail += "seed " + std::to_string(s) + fmt(": loss %.3f/%.3f", l_full, l_nc) +
                fmt(" style %.4f/%.4f; ", d_full, d_ns);
      progress("ablation seed " + std::to_string(s) + " done");
    }
    detail += "class token wins " + std::to_string(class_wins) + "/5, style loss wins " + std::to_string(style_wins) + "/5";
    return std::make_pair(2 * class_wins > seeds && 2 * style_wins > seeds, detail);
  });

  std::unique_ptr<tf::CogsTransformer> model;
  try {
    tf::TransformerConfig c;
    c.epochs = 16;
    model = std::make_unique<tf::CogsTransformer>(tf::train_transformer(p.train_examples, c, p.frozen(), p.classes()));
    progress("main transformer trained");
  } catch (const std::exception& e) {
    for (int id = 13; id <= 15; ++id) report(id, false, "pipeline", std::string("transformer training threw: ") + e.what());
    return 1;
  }

  check(13, "generations follow their own sketch", [&] {
    Rng rng(31);
    int wins = 0, n = 0;
    for (size_t i = 0; i < p.val_triples.size(); ++i) {
      const data::Triple& t = p.val_triples[i];
      const data::Record* own = p.val.find_sketch(t.sketch_id);
      std::vector<const data::Record*> others;
      for (const data::Record& r : p.val.records)
        if (r.image.class_label == t.class_label && &r != own) others.push_back(&r);
      const data::Record* other = others[rng() % others.size()];
      const auto g = tf::generate(*model, p.frozen(), p.val_examples[i].cond, model->config().temperature,
                                  model->config().top_k, derive_seed(13, t.sketch_id));
      wins += metrics::chamfer_structure(own->sketch, g.image).distance <
              metrics::chamfer_structure(other->sketch, g.image).distance;
      ++n;
    }
    const double rate = double(wins) / n;
    return std::make_pair(rate >= 0.7, fmt("own sketch closer on %.3f of %.0f inputs", rate, double(n)));
  });

  // One embedding model over every class's generations.
  vae::VAEConfig vc;
  const int per_sketch = 12;
  std::unique_ptr<vae::RefineVAE> embedder;
  std::vector<std::vector<vae::GeneratedSample>> held_out(size_t(p.classes()));
  check(14, "held-out positives rank first among in-batch negatives", [&] {
    const auto corpus = vae::generate_corpus(*model, p.frozen(), p.train, -1, per_sketch, vc.seed);
    progress("generated " + std::to_string(corpus.size()) + " training samples");
    embedder = std::make_unique<vae::RefineVAE>(vae::train_refine_vae(
        -1, corpus, vc, p.image_vq->codebook(), p.image_vq->config().h, p.image_vq->config().w));
    progress("embedding model trained");
    double hits = 0.0, anchors = 0.0;
    for (int c = 0; c < p.classes(); ++c) {
      held_out[size_t(c)] = vae::generate_corpus(*model, p.frozen(), p.val, c, 2, 2);
      Rng rng(5);
      const auto batches = vae::make_pair_batches(held_out[size_t(c)], vc.pairs_per_batch, rng);
      size_t items = 0;
      for (const auto& b : batches) items += b.items.size();
      hits += vae::positive_precision_at_1(*embedder, batches) * double(items);
      anchors += double(items);
    }
    const double prec = hits / anchors;
    return std::make_pair(prec > 0.8, fmt("precision@1 %.4f over %.0f anchors", prec, anchors));
  });

  check(15, "interpolation endpoints decode to the endpoints", [&] {
    if (!embedder) return std::make_pair(false, std::string("no embedding model"));
    int checked = 0, bad = 0;
    for (int c = 0; c < p.classes(); ++c) {
      std::vector<Raster> real;
      for (const data::Record& r : p.train.records)
        if (r.image.class_label == c) real.push_back(r.image.pixels);
      const auto stats = metrics::gaussian_stats(metrics::embed_features(real, p.style));
      vae::EmbeddingIndex index(c, embedder->config().d);
      for (const auto& s : held_out[size_t(c)]) index.add({s.id, embedder->encode(s.tokens).mean, {}});
      for (size_t i = 0; i < held_out[size_t(c)].size(); i += 4) {
        const auto q = embedder->encode(held_out[size_t(c)][i].tokens).mean;
        const auto r = vae::retrieve(q, index, 2);
        const auto* n = index.find(r.neighbors.back().id);
        vae::InterpolationOptions opts;
        opts.t_values = {0.0, 1.0};
        const auto out = vae::interpolate_refine(*embedder, q, n->mean, opts, *p.image_vq, p.style, stats);
        bad += out.samples.size() != 2 || out.samples[0].tokens != embedder->decode(q).tokens ||
               out.samples[1].tokens != embedder->decode(n->mean).tokens;
        ++checked;
      }
    }
    return std::make_pair(bad == 0 && checked > 0,
                          std::to_string(bad) + " of " + std::to_string(checked) + " pairs differ at an endpoint");
  });

  progress("done");
  return failures == 0 ? 0 : 1;
}
