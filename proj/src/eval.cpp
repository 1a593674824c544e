#include "cogs/eval.hpp"

#include <algorithm>
#include <numeric>

#include "cogs/error.hpp"

namespace cogs::eval {

using nlohmann::json;

Run load_run(const service::RunConfig& cfg) {
  cfg.validate();
  Run r;
  r.manifest = data::load_manifest(cfg.resolve(cfg.manifest));
  r.sketch_vq = std::make_unique<vq::VQModel>(vq::VQModel::load(cfg.resolve(cfg.sketch_vq)).frozen());
  r.image_vq = std::make_unique<vq::VQModel>(vq::VQModel::load(cfg.resolve(cfg.image_vq)).frozen());
  r.style = std::make_unique<style::StyleEncoder>(cfg.style_seed);
  r.transformer = std::make_unique<tf::CogsTransformer>(tf::CogsTransformer::load(cfg.resolve(cfg.transformer)));
  for (int c = 0; c < r.manifest.num_classes(); ++c)
    if (const auto path = cfg.vae_for(c)) r.vaes.emplace(c, vae::RefineVAE::load(*path));
  return r;
}

std::vector<data::Triple> heldout_triples(const Run& run) {
  const data::Manifest val = run.manifest.subset(data::Split::kVal);
  return data::pair_styles(val, [&](const data::ImageRecord& r) { return run.style->embed(r.pixels).values; })
      .triples;
}

namespace {

struct Sample {
  data::Triple triple;
  Raster image;
};

std::vector<data::Triple> limited(const Run& run, const SuiteOptions& opts) {
  std::vector<data::Triple> t = heldout_triples(run);
  if (opts.max_inputs > 0 && t.size() > size_t(opts.max_inputs)) t.resize(size_t(opts.max_inputs));
  return t;
}

Sample generate_one(const Run& run, const data::Triple& t, uint64_t seed) {
  const tf::Frozen fr = run.frozen();
  const data::Record* sk = run.manifest.find_sketch(t.sketch_id);
  COGS_CHECK(sk != nullptr, ErrorKind::kNotFound, "unknown sketch " + t.sketch_id);
  const auto& cfg = run.transformer->config();
  const tf::GenerationResult g =
      tf::generate(*run.transformer, fr, bitmap_to_raster(sk->sketch.pixels),
                   run.manifest.by_image_id(t.style_image_id).image.pixels, t.class_label, cfg.temperature, cfg.top_k,
                   seed);
  return {t, g.image};
}

std::vector<Sample> generate_all(const Run& run, const std::vector<data::Triple>& triples, uint64_t seed) {
  std::vector<Sample> out(triples.size());
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < triples.size(); ++i) out[i] = generate_one(run, triples[i], derive_seed(seed, triples[i].sketch_id));
  return out;
}

json summary(const std::vector<double>& v) {
  const double mean = v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  return {{"mean", mean}, {"count", v.size()}};
}

std::map<int, double> per_class_fid(const Run& run, const SuiteOptions& opts) {
  const auto samples = generate_all(run, limited(run, opts), opts.seed);
  std::map<int, std::vector<Raster>> real, fake;
  for (const auto& r : run.manifest.records)
    if (r.image.split == data::Split::kVal) real[r.image.class_label].push_back(r.image.pixels);
  for (const auto& s : samples) fake[s.triple.class_label].push_back(s.image);
  std::map<int, double> fid;
  for (const auto& [c, imgs] : fake) {
    if (imgs.size() < 2 || real[c].size() < 2) continue;
    fid[c] = metrics::frechet_distance(metrics::gaussian_stats(metrics::embed_features(real[c], *run.style)),
                                       metrics::gaussian_stats(metrics::embed_features(imgs, *run.style)));
  }
  return fid;
}

}  // namespace

json fid_suite(const Run& run, const SuiteOptions& opts) {
  const auto fid = per_class_fid(run, opts);
  json per = json::object();
  std::vector<double> all;
  for (const auto& [c, v] : fid) {
    per[run.manifest.class_names[size_t(c)]] = v;
    all.push_back(v);
  }
  return {{"suite", "fid"}, {"per_class", per}, {"mean", summary(all)["mean"]}};
}

json diversity_suite(const Run& run, const SuiteOptions& opts) {
  COGS_CHECK(opts.samples_per_input >= 2, ErrorKind::kConfig, "diversity needs at least two samples per input");
  const auto triples = limited(run, opts);
  std::vector<double> scores(triples.size());
  for (size_t i = 0; i < triples.size(); ++i) {
    std::vector<Raster> outs;
    for (int s = 0; s < opts.samples_per_input; ++s)
      outs.push_back(generate_one(run, triples[i], derive_seed(opts.seed, triples[i].sketch_id + "/" + std::to_string(s))).image);
    scores[i] = metrics::diversity_score(outs, *run.style);
  }
  return {{"suite", "diversity"}, {"samples_per_input", opts.samples_per_input}, {"score", summary(scores)}};
}

json style_suite(const Run& run, const SuiteOptions& opts) {
  const auto samples = generate_all(run, limited(run, opts), opts.seed);
  std::vector<double> d;
  for (const auto& s : samples)
    d.push_back(style::style_distance(run.style->embed(s.image),
                                      run.style->embed(run.manifest.by_image_id(s.triple.style_image_id).image.pixels)));
  return {{"suite", "style"}, {"style_distance", summary(d)}};
}

json structure_suite(const Run& run, const SuiteOptions& opts) {
  const auto samples = generate_all(run, limited(run, opts), opts.seed);
  Rng rng(derive_seed(opts.seed, "structure"));
  std::vector<double> own, other;
  long wins = 0, flagged = 0;
  for (const auto& s : samples) {
    const data::Record* sk = run.manifest.find_sketch(s.triple.sketch_id);
    std::vector<const data::Record*> pool;
    for (const auto& r : run.manifest.records)
      if (r.image.split == data::Split::kVal && r.image.class_label == s.triple.class_label && &r != sk)
        pool.push_back(&r);
    COGS_CHECK(!pool.empty(), ErrorKind::kRange, "structure: class has a single held-out sketch");
    const data::Record* o = pool[std::uniform_int_distribution<size_t>(0, pool.size() - 1)(rng)];
    const auto a = metrics::chamfer_structure(sk->sketch, s.image);
    const auto b = metrics::chamfer_structure(o->sketch, s.image);
    own.push_back(a.distance);
    other.push_back(b.distance);
    wins += a.distance < b.distance;
    flagged += a.flagged;
  }
  return {{"suite", "structure"},
          {"own_sketch", summary(own)},
          {"other_sketch", summary(other)},
          {"win_rate", own.empty() ? 0.0 : double(wins) / double(own.size())},
          {"no_edge_outputs", flagged}};
}

json partition_suite(const Run& run, const SuiteOptions& opts) {
  const auto fid = per_class_fid(run, opts);
  const metrics::Partitions p = metrics::partition_classes(fid);
  auto names = [&](const std::vector<int>& cs) {
    json out = json::array();
    for (int c : cs) out.push_back(run.manifest.class_names[size_t(c)]);
    return out;
  };
  return {{"suite", "partition"}, {"simple", names(p.simple)}, {"medium", names(p.medium)}, {"complex", names(p.complex)}};
}

json precision_suite(const Run& run, const SuiteOptions& opts) {
  COGS_CHECK(!run.vaes.empty(), ErrorKind::kConfig, "precision: no embedding models in this run");
  COGS_CHECK(opts.per_sketch >= 2, ErrorKind::kConfig, "precision: need at least two generations per sketch");
  const data::Manifest val = run.manifest.subset(data::Split::kVal);
  std::vector<std::vector<bool>> relevance;
  json per = json::object();
  for (const auto& [c, model] : run.vaes) {
    const auto gens = vae::generate_corpus(*run.transformer, run.frozen(), val, c, opts.per_sketch, opts.seed);
    vae::EmbeddingIndex index(c, model.config().d);
    for (const auto& g : gens) index.add({g.id, model.encode(g.tokens).mean, {{"sketch", g.sketch_id}}});
    std::vector<std::vector<bool>> rel;
    for (const auto& g : gens) {
      auto r = vae::retrieve(model.encode(g.tokens), index, opts.k + 1);
      std::erase_if(r.neighbors, [&](const vae::Neighbor& n) { return n.id == g.id; });
      std::vector<bool> row;
      for (size_t i = 0; i < size_t(opts.k) && i < r.neighbors.size(); ++i)
        row.push_back(index.find(r.neighbors[i].id)->metadata.at("sketch") == g.sketch_id);
      if (row.size() == size_t(opts.k)) rel.push_back(row);
    }
    if (rel.empty()) continue;
    per[run.manifest.class_names[size_t(c)]] = metrics::precision_at_k(rel, opts.k);
    relevance.insert(relevance.end(), rel.begin(), rel.end());
  }
  return {{"suite", "precision"},
          {"k", opts.k},
          {"per_class", per},
          {"precision", relevance.empty() ? 0.0 : metrics::precision_at_k(relevance, opts.k)}};
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"fid", "diversity", "style", "structure", "partition", "precision"};
  return names;
}

json run_suite(const std::string& name, const Run& run, const SuiteOptions& opts) {
  if (name == "fid") return fid_suite(run, opts);
  if (name == "diversity") return diversity_suite(run, opts);
  if (name == "style") return style_suite(run, opts);
  if (name == "structure") return structure_suite(run, opts);
  if (name == "partition") return partition_suite(run, opts);
  if (name == "precision") return precision_suite(run, opts);
  throw Error(ErrorKind::kConfig, "unknown suite " + name);
}

}  // namespace cogs::eval
