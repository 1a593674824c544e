// cogs: build the corpus, train each stage, sample, search and serve.

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "cogs/error.hpp"
#include "cogs/eval.hpp"
#include "cogs/service.hpp"

using namespace cogs;
using nlohmann::json;

namespace {

// One file configures every stage; each section is optional.
struct Settings {
  service::RunConfig run;
  data::CorpusConfig corpus;
  vq::VQConfig sketch_vq;
  vq::VQConfig image_vq;
  tf::TransformerConfig transformer;
  vae::VAEConfig vae;
  int vae_per_sketch = 12;
};

Settings load_settings(const std::string& path) {
  Settings s;
  std::optional<std::filesystem::path> p;
  if (!path.empty()) p = path;
  s.run = service::load_run_config(p);
  if (const char* env = std::getenv("COGS_CONFIG"); env != nullptr && *env != '\0') p = env;
  if (!p) return s;
  std::ifstream f(*p);
  const json j = json::parse(f);
  if (j.contains("corpus")) s.corpus = data::corpus_config_from_json(j.at("corpus"));
  const json vq_common = j.value("vq", json::object());
  auto vq_for = [&](const char* key) {
    json merged = vq_common;
    if (j.contains(key)) merged.update(j.at(key));
    return vq::vq_config_from_json(merged);
  };
  s.sketch_vq = vq_for("sketch_vq");
  s.image_vq = vq_for("image_vq");
  if (j.contains("transformer")) s.transformer = tf::transformer_config_from_json(j.at("transformer"));
  if (j.contains("vae")) {
    s.vae = vae::vae_config_from_json(j.at("vae"));
    s.vae_per_sketch = j.at("vae").value("per_sketch", s.vae_per_sketch);
  }
  return s;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

data::Manifest load_corpus(const Settings& s) { return data::load_manifest(s.run.resolve(s.run.manifest)); }

void cmd_data_build(const Settings& s) {
  Stopwatch sw;
  const data::Manifest m = data::build_corpus(s.corpus);
  data::save_manifest(m, s.run.resolve(s.run.manifest));
  std::cout << "corpus: " << m.records.size() << " pairs, " << m.num_classes() << " classes -> "
            << s.run.resolve(s.run.manifest).string() << " (" << sw.seconds() << " s)\n";
}

void cmd_train_vq(const Settings& s, const std::string& domain_name) {
  const vq::Domain domain = vq::parse_domain(domain_name);
  const data::Manifest train = load_corpus(s).subset(data::Split::kTrain);
  const style::StyleEncoder encoder(s.run.style_seed);
  vq::TrainOptions opts;
  opts.on_epoch = [](const vq::EpochLog& l) {
    std::cout << "epoch " << l.epoch << "  loss " << l.loss << "  recon " << l.reconstruction << "  usage "
              << l.usage_entropy << " nats  reinit " << l.reinitialized << "\n";
  };
  const vq::VQConfig& cfg = domain == vq::Domain::kSketch ? s.sketch_vq : s.image_vq;
  const vq::VQModel model = vq::train_vq(train, cfg, domain, &encoder, opts);
  const auto path = s.run.resolve(domain == vq::Domain::kSketch ? s.run.sketch_vq : s.run.image_vq);
  model.save(path);
  std::cout << "saved " << path.string() << "\n";
}

struct Frozen {
  vq::VQModel sketch, image;
  style::StyleEncoder style;
  tf::Frozen view() const { return {&sketch, &image, &style}; }
};

Frozen load_frozen(const Settings& s) {
  return {vq::VQModel::load(s.run.resolve(s.run.sketch_vq)).frozen(),
          vq::VQModel::load(s.run.resolve(s.run.image_vq)).frozen(), style::StyleEncoder(s.run.style_seed)};
}

void cmd_train_transformer(const Settings& s) {
  const data::Manifest m = load_corpus(s);
  const data::Manifest train = m.subset(data::Split::kTrain);
  const Frozen fr = load_frozen(s);
  const auto pairing =
      data::pair_styles(train, [&](const data::ImageRecord& r) { return fr.style.embed(r.pixels).values; });
  for (const auto& w : pairing.warnings) std::cerr << "warning: " << w << "\n";
  const auto examples = tf::make_examples(pairing.triples, train, fr.view());
  std::cout << examples.size() << " training triples\n";
  const tf::CogsTransformer model =
      tf::train_transformer(examples, s.transformer, fr.view(), m.num_classes(), [](const tf::EpochLog& l) {
        std::cout << "epoch " << l.epoch << "  loss " << l.loss << "  codebook " << l.codebook << "  style "
                  << l.style << "\n";
      });
  const auto path = s.run.resolve(s.run.transformer);
  model.save(path);
  std::cout << "saved " << path.string() << " (config " << model.config_hash() << ")\n";
}

void cmd_train_vae(const Settings& s, const std::string& class_name) {
  const data::Manifest m = load_corpus(s);
  const data::Manifest train = m.subset(data::Split::kTrain);
  const Frozen fr = load_frozen(s);
  const auto model = tf::CogsTransformer::load(s.run.resolve(s.run.transformer));
  // "all" trains one shared model; a class name trains that class alone,
  // starting from the shared model when there is one.
  int c = -1;
  std::optional<vae::RefineVAE> init;
  if (class_name != "all") {
    c = m.class_index(class_name);
    COGS_CHECK(c >= 0, ErrorKind::kRange, "unknown class " + class_name);
    if (std::filesystem::exists(s.run.vae_path(-1))) init = vae::RefineVAE::load(s.run.vae_path(-1));
  }
  const auto corpus = vae::generate_corpus(model, fr.view(), train, c, s.vae_per_sketch, s.vae.seed);
  std::cout << class_name << ": " << corpus.size() << " generations\n";
  const vae::RefineVAE v = vae::train_refine_vae(
      c, corpus, s.vae, fr.image.codebook(), fr.image.config().h, fr.image.config().w,
      [](const vae::EpochLog& l) {
        std::cout << "  stage " << l.stage << " epoch " << l.epoch << "  loss " << l.loss << "  contrastive "
                  << l.contrastive << "  elbo " << l.elbo << "\n";
      },
      init ? &*init : nullptr);
  std::filesystem::create_directories(s.run.resolve(s.run.vae_dir));
  v.save(s.run.vae_path(c));
  std::cout << "saved " << s.run.vae_path(c).string() << "\n";
}

Raster read_image(const std::string& path) { return read_png(path); }

void cmd_generate(const Settings& s, const std::string& sketch, const std::string& style_png,
                  const std::string& style_id, const std::string& class_name, std::optional<uint64_t> seed,
                  const std::string& out) {
  const data::Manifest m = load_corpus(s);
  const Frozen fr = load_frozen(s);
  const auto model = tf::CogsTransformer::load(s.run.resolve(s.run.transformer));
  const int c = m.class_index(class_name);
  COGS_CHECK(c >= 0, ErrorKind::kRange, "unknown class " + class_name);
  COGS_CHECK(!style_png.empty() || !style_id.empty(), ErrorKind::kConfig, "give --style or --style-id");
  const Raster style = !style_png.empty() ? to_rgb(read_image(style_png)) : m.by_image_id(style_id).image.pixels;
  const Raster sk = bitmap_to_raster(raster_to_bitmap(read_image(sketch)));
  const uint64_t used = seed.value_or(std::random_device{}());
  const auto g = tf::generate(model, fr.view(), sk, style, c, s.run.temperature, s.run.top_k, used);
  write_png(out, g.image);
  std::cout << "wrote " << out << "  seed " << used << "  config " << g.config_hash << "\n";
}

// Query image -> class embedding, searched against the class's held-out images.
struct Query {
  vae::RefineVAE model;
  vae::EmbeddingIndex index;
  vae::LatentPoint point;
};

Query make_query(const Settings& s, const data::Manifest& m, const vq::VQModel& image_vq, const std::string& png,
                 int c) {
  vae::RefineVAE model = vae::RefineVAE::load(s.run.vae_path(c));
  vae::EmbeddingIndex index(c, model.config().d);
  for (const auto& r : m.records)
    if (r.image.class_label == c && r.image.split == data::Split::kVal)
      index.add({r.image.id, model.encode(image_vq.tokenize(r.image.pixels)).mean, {}});
  vae::LatentPoint p = model.encode(image_vq.tokenize(to_rgb(read_image(png))));
  p.class_label = c;
  return {std::move(model), std::move(index), std::move(p)};
}

void cmd_retrieve(const Settings& s, const std::string& query, const std::string& class_name, int k) {
  const data::Manifest m = load_corpus(s);
  const int c = m.class_index(class_name);
  COGS_CHECK(c >= 0, ErrorKind::kRange, "unknown class " + class_name);
  const vq::VQModel image_vq = vq::VQModel::load(s.run.resolve(s.run.image_vq));
  const Query q = make_query(s, m, image_vq, query, c);
  const auto r = vae::retrieve(q.point, q.index, k);
  for (const auto& n : r.neighbors) std::cout << n.id << "\t" << n.distance << "\n";
  if (r.flagged) std::cerr << "note: index holds only " << q.index.size() << " entries\n";
}

void cmd_interpolate(const Settings& s, const std::string& query, const std::string& class_name,
                     const std::string& neighbor, int samples, const std::string& out_dir) {
  const data::Manifest m = load_corpus(s);
  const int c = m.class_index(class_name);
  COGS_CHECK(c >= 0, ErrorKind::kRange, "unknown class " + class_name);
  const vq::VQModel image_vq = vq::VQModel::load(s.run.resolve(s.run.image_vq));
  const style::StyleEncoder encoder(s.run.style_seed);
  const Query q = make_query(s, m, image_vq, query, c);
  const vae::IndexEntry* n = q.index.find(neighbor);
  COGS_CHECK(n != nullptr, ErrorKind::kNotFound, "neighbor " + neighbor + " is not a held-out image of " + class_name);
  std::vector<Raster> real;
  for (const auto& r : m.records)
    if (r.image.class_label == c && r.image.split == data::Split::kTrain) real.push_back(r.image.pixels);
  const auto feats = metrics::embed_features(real, encoder);
  const auto stats = metrics::gaussian_stats(feats);
  vae::InterpolationOptions opts;
  opts.n_samples = samples;
  if (s.run.quality_quantile) opts.quality_threshold = vae::calibrate_quality_threshold(feats, stats, *s.run.quality_quantile);
  const auto r = vae::interpolate_refine(q.model, q.point.mean, n->mean, opts, image_vq, encoder, stats);
  std::filesystem::create_directories(out_dir);
  for (size_t i = 0; i < r.samples.size(); ++i) {
    const auto path = std::filesystem::path(out_dir) / ("interp_" + std::to_string(i) + ".png");
    write_png(path, r.samples[i].image);
    std::cout << path.string() << "\tt=" << r.samples[i].t << "\tquality=" << r.samples[i].quality << "\n";
  }
  std::cout << r.samples.size() << " of " << r.requested << " samples kept\n";
}

void cmd_eval(const Settings& s, const std::string& suite, const std::string& out, const eval::SuiteOptions& opts) {
  const eval::Run run = eval::load_run(s.run);
  const json report = eval::run_suite(suite, run, opts);
  if (out.empty()) {
    std::cout << report.dump(2) << "\n";
  } else {
    std::ofstream f(out);
    f << report.dump(2) << "\n";
    std::cout << "wrote " << out << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cogs: sketch-and-style conditioned image generation"};
  app.require_subcommand(1);
  std::string config;
  app.add_option("-c,--config", config, "settings file (COGS_CONFIG overrides)");

  auto* data_cmd = app.add_subcommand("data", "corpus tools");
  data_cmd->require_subcommand(1);
  auto* build = data_cmd->add_subcommand("build", "render, extract and filter the toy corpus");

  auto* train = app.add_subcommand("train", "train a stage");
  train->require_subcommand(1);
  std::string domain = "image";
  auto* train_vq = train->add_subcommand("vq", "train a tokenizer");
  train_vq->add_option("--domain", domain, "sketch or image")->check(CLI::IsMember({"sketch", "image"}));
  auto* train_tf = train->add_subcommand("transformer", "train the conditional transformer");
  std::string vae_class = "all";
  auto* train_vae = train->add_subcommand("vae", "train the shared embedding model, or one class's");
  train_vae->add_option("--class", vae_class, "class name or 'all'");
  auto* train_all = train->add_subcommand("all", "every stage in order");

  std::string sketch, style_png, style_id, class_name, out = "out.png";
  std::optional<uint64_t> seed;
  auto* gen = app.add_subcommand("generate", "sample one image");
  gen->add_option("--sketch", sketch, "sketch PNG (bright strokes)")->required();
  gen->add_option("--style", style_png, "style image PNG");
  gen->add_option("--style-id", style_id, "style image id from the corpus");
  gen->add_option("--class", class_name, "class name")->required();
  gen->add_option("--seed", seed, "sampling seed (drawn when omitted)");
  gen->add_option("-o,--out", out, "output PNG");

  std::string query;
  int k = 5;
  auto* ret = app.add_subcommand("retrieve", "nearest held-out images to a query");
  ret->add_option("--query", query, "query image PNG")->required();
  ret->add_option("--class", class_name, "class name")->required();
  ret->add_option("--k", k, "neighbors")->check(CLI::NonNegativeNumber);

  std::string neighbor, out_dir = "interpolation";
  int samples = 5;
  auto* interp = app.add_subcommand("interpolate", "decode points between a query and a neighbor");
  interp->add_option("--query", query, "query image PNG")->required();
  interp->add_option("--class", class_name, "class name")->required();
  interp->add_option("--neighbor", neighbor, "held-out image id")->required();
  interp->add_option("--samples", samples, "number of interior points")->check(CLI::PositiveNumber);
  interp->add_option("--out-dir", out_dir, "output directory");

  std::string suite, report;
  eval::SuiteOptions eval_opts;
  auto* ev = app.add_subcommand("eval", "run an evaluation suite");
  ev->add_option("--suite", suite, "suite")->required()->check(CLI::IsMember(eval::suite_names()));
  ev->add_option("--out", report, "report JSON (stdout when omitted)");
  ev->add_option("--k", eval_opts.k, "k for precision@k")->check(CLI::PositiveNumber);
  ev->add_option("--max-inputs", eval_opts.max_inputs, "cap on held-out inputs (0 = all)");
  ev->add_option("--seed", eval_opts.seed, "sampling seed");

  int port = -1;
  auto* srv = app.add_subcommand("serve", "run the HTTP service");
  srv->add_option("--port", port, "port (overrides the config)");

  CLI11_PARSE(app, argc, argv);

  try {
    Settings s = load_settings(config);
    if (build->parsed()) cmd_data_build(s);
    if (train_vq->parsed()) cmd_train_vq(s, domain);
    if (train_tf->parsed()) cmd_train_transformer(s);
    if (train_vae->parsed()) cmd_train_vae(s, vae_class);
    if (train_all->parsed()) {
      if (!std::filesystem::exists(s.run.resolve(s.run.manifest) / "manifest.json")) cmd_data_build(s);
      cmd_train_vq(s, "sketch");
      cmd_train_vq(s, "image");
      cmd_train_transformer(s);
      cmd_train_vae(s, "all");
    }
    if (gen->parsed()) cmd_generate(s, sketch, style_png, style_id, class_name, seed, out);
    if (ret->parsed()) cmd_retrieve(s, query, class_name, k);
    if (interp->parsed()) cmd_interpolate(s, query, class_name, neighbor, samples, out_dir);
    if (ev->parsed()) cmd_eval(s, suite, report, eval_opts);
    if (srv->parsed()) {
      if (port >= 0) s.run.port = port;
      service::serve(s.run);
    }
  } catch (const Error& e) {
    std::cerr << "cogs: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "cogs: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
