#include "cogs/service.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

#include "cogs/checkpoint.hpp"
#include "cogs/error.hpp"
#include "cogs/imgproc.hpp"
#include "httplib.h"

namespace cogs::service {

using nlohmann::json;

// ---------------------------------------------------------------- config

std::filesystem::path RunConfig::vae_path(int class_index) const {
  if (class_index < 0) return resolve(vae_dir) / "shared.ckpt";
  return resolve(vae_dir) / ("class_" + std::to_string(class_index) + ".ckpt");
}

std::optional<std::filesystem::path> RunConfig::vae_for(int class_index) const {
  for (const auto& p : {vae_path(class_index), vae_path(-1)})
    if (std::filesystem::exists(p)) return p;
  return std::nullopt;
}

void RunConfig::validate() const {
  auto need = [&](const std::filesystem::path& p, const char* what) {
    COGS_CHECK(std::filesystem::exists(resolve(p)), ErrorKind::kIo,
               std::string("run config: ") + what + " not found at " + resolve(p).string());
  };
  need(manifest / "manifest.json", "manifest");
  need(sketch_vq, "sketch tokenizer");
  need(image_vq, "image tokenizer");
  need(transformer, "transformer");
  need(vae_dir, "vae directory");
  COGS_CHECK(seed_policy == "random" || seed_policy == "fixed", ErrorKind::kConfig,
             "run config: seed_policy must be \"random\" or \"fixed\"");
  COGS_CHECK(temperature > 0.0 && top_k >= 1 && interpolation_samples >= 1, ErrorKind::kConfig,
             "run config: bad sampling defaults");
  COGS_CHECK(style_pool >= style_count && style_count >= 1, ErrorKind::kConfig,
             "run config: style_pool must be >= style_count >= 1");
  COGS_CHECK(port >= 0 && port < 65536, ErrorKind::kConfig, "run config: port out of range");
  if (quality_quantile)
    COGS_CHECK(*quality_quantile >= 0.0 && *quality_quantile <= 1.0, ErrorKind::kConfig,
               "run config: quality_quantile must lie in [0,1]");
}

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base) {
  RunConfig c;
  c.root = base / j.value("root", c.root.string());
  c.manifest = j.value("manifest", c.manifest.string());
  c.sketch_vq = j.value("sketch_vq", c.sketch_vq.string());
  c.image_vq = j.value("image_vq", c.image_vq.string());
  c.transformer = j.value("transformer", c.transformer.string());
  c.vae_dir = j.value("vae_dir", c.vae_dir.string());
  c.style_seed = j.value("style_seed", c.style_seed);
  c.temperature = j.value("temperature", c.temperature);
  c.top_k = j.value("top_k", c.top_k);
  c.seed_policy = j.value("seed_policy", c.seed_policy);
  c.base_seed = j.value("base_seed", c.base_seed);
  c.interpolation_samples = j.value("interpolation_samples", c.interpolation_samples);
  if (j.contains("quality_quantile") && !j.at("quality_quantile").is_null())
    c.quality_quantile = j.at("quality_quantile").get<double>();
  c.style_pool = j.value("style_pool", c.style_pool);
  c.style_count = j.value("style_count", c.style_count);
  c.host = j.value("host", c.host);
  c.port = j.value("port", c.port);
  return c;
}

json to_json(const RunConfig& c) {
  return {{"root", c.root.string()},
          {"manifest", c.manifest.string()},
          {"sketch_vq", c.sketch_vq.string()},
          {"image_vq", c.image_vq.string()},
          {"transformer", c.transformer.string()},
          {"vae_dir", c.vae_dir.string()},
          {"style_seed", c.style_seed},
          {"temperature", c.temperature},
          {"top_k", c.top_k},
          {"seed_policy", c.seed_policy},
          {"base_seed", c.base_seed},
          {"interpolation_samples", c.interpolation_samples},
          {"quality_quantile", c.quality_quantile ? json(*c.quality_quantile) : json(nullptr)},
          {"style_pool", c.style_pool},
          {"style_count", c.style_count},
          {"host", c.host},
          {"port", c.port}};
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path) {
  std::optional<std::filesystem::path> p = path;
  if (const char* env = std::getenv("COGS_CONFIG"); env != nullptr && *env != '\0') p = env;
  if (!p) return RunConfig{};
  std::ifstream f(*p);
  COGS_CHECK(f.good(), ErrorKind::kIo, "cannot open config " + p->string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, p->string() + ": " + e.what());
  }
  // Paths in a config file are relative to the file.
  return run_config_from_json(j.contains("run") ? j.at("run") : j, p->parent_path());
}

// ---------------------------------------------------------------- helpers

namespace {

Reply error_reply(int status, const std::string& message) { return {status, {{"error", message}}}; }

int status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNotFound:
      return 404;
    case ErrorKind::kConflict:
      return 409;
    case ErrorKind::kIo:
    case ErrorKind::kNumeric:
      return 500;
    default:
      return 400;
  }
}

std::string file_digest(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return ckpt::digest(bytes);
}

std::string tokens_digest(const vq::TokenGrid& t) {
  return ckpt::hex64(ckpt::fnv1a(t.indices.data(), t.indices.size() * sizeof(int32_t)));
}

Raster decode_png_field(const json& request, const char* field) {
  COGS_CHECK(request.contains(field) && request.at(field).is_string(), ErrorKind::kRange,
             std::string("missing base64 PNG field '") + field + "'");
  try {
    return decode_png(base64_decode(request.at(field).get<std::string>()));
  } catch (const Error& e) {
    throw Error(ErrorKind::kFormat, std::string("field '") + field + "' is not a valid PNG: " + e.what());
  }
}

std::string b64png(const Raster& r) { return base64_encode(encode_png(r)); }

std::string png_digest(const Raster& r) {
  const std::vector<uint8_t> bytes = encode_png(r);
  return ckpt::hex64(ckpt::fnv1a(bytes.data(), bytes.size()));
}

}  // namespace

// ---------------------------------------------------------------- service

Service::Service(const RunConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  manifest_ = data::load_manifest(cfg_.resolve(cfg_.manifest));
  sketch_vq_ = std::make_unique<vq::VQModel>(vq::VQModel::load(cfg_.resolve(cfg_.sketch_vq)).frozen());
  image_vq_ = std::make_unique<vq::VQModel>(vq::VQModel::load(cfg_.resolve(cfg_.image_vq)).frozen());
  style_ = std::make_unique<style::StyleEncoder>(cfg_.style_seed);
  transformer_ = std::make_unique<tf::CogsTransformer>(tf::CogsTransformer::load(cfg_.resolve(cfg_.transformer)));
  frozen_ = {sketch_vq_.get(), image_vq_.get(), style_.get()};
  COGS_CHECK(sketch_vq_->domain() == vq::Domain::kSketch && image_vq_->domain() == vq::Domain::kImage,
             ErrorKind::kConfig, "checkpoint mismatch: tokenizer domains are swapped or wrong");

  const tf::Vocab expect = frozen_.vocab(manifest_.num_classes());
  const tf::Vocab& got = transformer_->vocab();
  COGS_CHECK(got.k_sketch == expect.k_sketch && got.k_image == expect.k_image && got.classes == expect.classes &&
                 got.tokens == expect.tokens,
             ErrorKind::kConfig,
             "checkpoint mismatch: transformer vocabulary (" + std::to_string(got.k_sketch) + "," +
                 std::to_string(got.k_image) + "," + std::to_string(got.classes) + ") does not fit tokenizers (" +
                 std::to_string(expect.k_sketch) + "," + std::to_string(expect.k_image) + "," +
                 std::to_string(expect.classes) + ")");

  model_hashes_ = {{"sketch_vq", file_digest(cfg_.resolve(cfg_.sketch_vq))},
                   {"image_vq", file_digest(cfg_.resolve(cfg_.image_vq))},
                   {"transformer", file_digest(cfg_.resolve(cfg_.transformer))},
                   {"vae", json::object()}};

  const vq::Codebook codebook = image_vq_->codebook();
  for (int c = 0; c < manifest_.num_classes(); ++c) {
    ClassState& st = per_class_[c];
    std::vector<Raster> real;
    for (const auto& r : manifest_.records)
      if (r.image.class_label == c && r.image.split == data::Split::kTrain) real.push_back(r.image.pixels);
    const auto feats = metrics::embed_features(real, *style_);
    st.stats = metrics::gaussian_stats(feats);
    if (cfg_.quality_quantile)
      st.quality_threshold = vae::calibrate_quality_threshold(feats, st.stats, *cfg_.quality_quantile);

    const auto found = cfg_.vae_for(c);
    if (!found) continue;
    const auto& path = *found;
    st.vae = std::make_unique<vae::RefineVAE>(vae::RefineVAE::load(path));
    COGS_CHECK(st.vae->class_label() == c || st.vae->class_label() < 0, ErrorKind::kConfig,
               "checkpoint mismatch: " + path.string() + " was trained for class " +
                   std::to_string(st.vae->class_label()));
    COGS_CHECK(st.vae->codebook().entries == codebook.entries, ErrorKind::kConfig,
               "checkpoint mismatch: " + path.string() + " was trained against a different image codebook");
    model_hashes_["vae"][std::to_string(c)] = file_digest(path);
    st.index = std::make_unique<vae::EmbeddingIndex>(c, st.vae->config().d);
    for (const auto& r : manifest_.records)
      if (r.image.class_label == c && r.image.split == data::Split::kVal)
        st.index->add({r.image.id, st.vae->encode(image_vq_->tokenize(r.image.pixels)).mean,
                       {{"kind", "image"}}});
  }
  json sampling = {{"temperature", cfg_.temperature}, {"top_k", cfg_.top_k}, {"style_seed", cfg_.style_seed}};
  config_hash_ = ckpt::digest(json{{"models", model_hashes_}, {"sampling", sampling}}.dump());
  seed_rng_.seed(cfg_.seed_policy == "fixed" ? cfg_.base_seed : std::random_device{}());
}

int Service::parse_class(const json& v) const {
  int c = -1;
  if (v.is_number_integer()) {
    c = v.get<int>();
  } else if (v.is_string()) {
    const std::string s = v.get<std::string>();
    const auto& names = manifest_.class_names;
    if (auto it = std::find(names.begin(), names.end(), s); it != names.end()) c = int(it - names.begin());
    else if (!s.empty() && s.size() < 9 && std::all_of(s.begin(), s.end(), ::isdigit)) c = std::stoi(s);
  }
  COGS_CHECK(c >= 0 && c < manifest_.num_classes(), ErrorKind::kRange, "unknown class " + v.dump());
  return c;
}

uint64_t Service::draw_seed() {
  std::lock_guard lock(mu_);
  return seed_rng_() >> 1;  // keep it exact in a JSON double
}

Reply Service::health() const {
  return {200, {{"status", "ok"}, {"config_hash", config_hash_}, {"models", model_hashes_}}};
}

Reply Service::classes() const {
  json out = json::array();
  for (int c = 0; c < manifest_.num_classes(); ++c)
    out.push_back({{"index", c},
                   {"name", manifest_.class_names[size_t(c)]},
                   {"has_vae", per_class_.at(c).vae != nullptr}});
  return {200, {{"classes", out}}};
}

Reply Service::styles(const std::string& class_name, const std::string& target) const {
  const int c = parse_class(json(class_name));
  json list = json::array();
  bool flagged = false;
  if (!target.empty()) {
    const data::Record* rec = manifest_.find_image(target);
    COGS_CHECK(rec != nullptr, ErrorKind::kNotFound, "unknown target image " + target);
    COGS_CHECK(rec->image.class_label == c, ErrorKind::kConflict, "target " + target + " is not in class " + class_name);
    const auto sel = style::select_diverse_styles(rec->image, manifest_, cfg_.style_pool, cfg_.style_count, *style_,
                                                  cfg_.base_seed);
    flagged = sel.flagged;
    for (const auto& id : sel.ids) list.push_back({{"id", id}, {"thumbnail", b64png(manifest_.by_image_id(id).image.pixels)}});
  } else {
    for (const auto& r : manifest_.records)
      if (r.image.class_label == c)
        list.push_back({{"id", r.image.id}, {"thumbnail", b64png(r.image.pixels)}});
  }
  return {200, {{"class", c}, {"styles", list}, {"flagged", flagged}}};
}

Reply Service::generate(const json& request) {
  COGS_CHECK(request.is_object(), ErrorKind::kFormat, "request body must be a JSON object");
  COGS_CHECK(request.contains("class"), ErrorKind::kRange, "missing 'class'");
  const int c = parse_class(request.at("class"));

  const Raster sketch_png = decode_png_field(request, "sketch");
  COGS_CHECK(sketch_png.height == manifest_.height && sketch_png.width == manifest_.width, ErrorKind::kShape,
             "sketch must be " + std::to_string(manifest_.height) + "x" + std::to_string(manifest_.width));
  const Raster sketch = bitmap_to_raster(raster_to_bitmap(sketch_png));

  Raster style_image;
  std::string style_id;
  if (request.contains("style_id")) {
    style_id = request.at("style_id").get<std::string>();
    const data::Record* rec = manifest_.find_image(style_id);
    COGS_CHECK(rec != nullptr, ErrorKind::kNotFound, "unknown style image " + style_id);
    style_image = rec->image.pixels;
  } else {
    style_image = decode_png_field(request, "style");
    if (style_image.channels == 1) style_image = to_rgb(style_image);
    COGS_CHECK(style_image.height == manifest_.height && style_image.width == manifest_.width, ErrorKind::kShape,
               "style image must match the corpus resolution");
  }

  std::string session_id = request.value("session_id", "");
  if (!session_id.empty()) {
    std::lock_guard lock(mu_);
    COGS_CHECK(sessions_.count(session_id), ErrorKind::kNotFound, "unknown session " + session_id);
  }

  Generation g;
  g.class_label = c;
  g.seed = request.contains("seed") && !request.at("seed").is_null() ? request.at("seed").get<uint64_t>() : draw_seed();
  g.temperature = request.value("temperature", cfg_.temperature);
  g.top_k = request.value("top_k", cfg_.top_k);
  COGS_CHECK(g.temperature > 0.0 && g.top_k >= 1, ErrorKind::kRange, "temperature must be > 0 and top_k >= 1");
  g.style_id = style_id;
  g.sketch_digest = png_digest(sketch);
  g.style_digest = png_digest(style_image);

  const tf::GenerationResult r =
      tf::generate(*transformer_, frozen_, sketch, style_image, c, g.temperature, g.top_k, g.seed);
  g.tokens = r.tokens;
  g.png = encode_png(r.image);
  const ClassState& st = per_class_.at(c);
  if (st.vae) g.latent = st.vae->encode(g.tokens);

  std::lock_guard lock(mu_);
  g.id = "gen-" + std::to_string(next_id_++);
  if (session_id.empty()) {
    session_id = "session-" + std::to_string(sessions_.size() + 1);
    sessions_[session_id].session_id = session_id;
  }
  SessionState& session = sessions_[session_id];
  session.history.push_back(g.id);
  session.active_class = c;
  g.session_id = session_id;
  if (st.index && g.latent) st.index->add({g.id, g.latent->mean, {{"kind", "generation"}}});
  json body = {{"generation_id", g.id},
               {"session_id", session_id},
               {"class", c},
               {"image", base64_encode(g.png)},
               {"tokens_digest", tokens_digest(g.tokens)},
               {"seed", g.seed},
               {"temperature", g.temperature},
               {"top_k", g.top_k},
               {"config_hash", config_hash_}};
  generations_.emplace(g.id, std::move(g));
  return {200, body};
}

std::optional<Service::Resolved> Service::resolve(const std::string& id) const {
  // Caller holds mu_.
  if (auto it = generations_.find(id); it != generations_.end()) {
    const Generation& g = it->second;
    if (!g.latent) return std::nullopt;
    return Resolved{g.class_label, g.png, g.latent->mean};
  }
  const data::Record* rec = manifest_.find_image(id);
  if (rec == nullptr) return std::nullopt;
  const ClassState& st = per_class_.at(rec->image.class_label);
  if (!st.vae) return std::nullopt;
  Resolved r{rec->image.class_label, encode_png(rec->image.pixels), {}};
  if (const vae::IndexEntry* e = st.index->find(id)) r.mean = e->mean;
  else r.mean = st.vae->encode(image_vq_->tokenize(rec->image.pixels)).mean;
  return r;
}

Reply Service::retrieve(const json& request) const {
  COGS_CHECK(request.is_object() && request.contains("generation_id"), ErrorKind::kRange, "missing 'generation_id'");
  const std::string id = request.at("generation_id").get<std::string>();
  const int k = request.value("k", 5);
  COGS_CHECK(k >= 0, ErrorKind::kRange, "k must be >= 0");
  std::lock_guard lock(mu_);
  auto it = generations_.find(id);
  COGS_CHECK(it != generations_.end(), ErrorKind::kNotFound, "unknown generation " + id);
  const ClassState& st = per_class_.at(it->second.class_label);
  COGS_CHECK(st.vae && it->second.latent, ErrorKind::kConflict,
             "no embedding model loaded for class " + std::to_string(it->second.class_label));
  // The query is itself indexed; ask for one extra and drop it.
  vae::RetrievalResult r = vae::retrieve(*it->second.latent, *st.index, k == 0 ? 0 : k + 1);
  std::erase_if(r.neighbors, [&](const vae::Neighbor& n) { return n.id == id; });
  if (r.neighbors.size() > size_t(k)) r.neighbors.resize(size_t(k));
  json out = json::array();
  for (const auto& n : r.neighbors) {
    const auto res = resolve(n.id);
    out.push_back({{"id", n.id},
                   {"distance", n.distance},
                   {"kind", st.index->find(n.id)->metadata.value("kind", "")},
                   {"thumbnail", res ? base64_encode(res->png) : ""}});
  }
  return {200, {{"generation_id", id}, {"results", out}, {"flagged", size_t(k) > st.index->size() - 1}}};
}

Reply Service::interpolate(const json& request) const {
  COGS_CHECK(request.is_object() && request.contains("generation_id") && request.contains("neighbor_id"),
             ErrorKind::kRange, "need 'generation_id' and 'neighbor_id'");
  const std::string qid = request.at("generation_id").get<std::string>();
  const std::string nid = request.at("neighbor_id").get<std::string>();
  vae::InterpolationOptions opts;
  opts.n_samples = request.value("n_samples", cfg_.interpolation_samples);
  if (request.contains("t")) {
    const json& t = request.at("t");
    opts.t_values = t.is_array() ? t.get<std::vector<double>>() : std::vector<double>{t.get<double>()};
  }
  opts.spherical = request.value("spherical", false);

  std::unique_lock lock(mu_);
  auto it = generations_.find(qid);
  COGS_CHECK(it != generations_.end(), ErrorKind::kNotFound, "unknown generation " + qid);
  const bool neighbor_known = generations_.count(nid) || manifest_.find_image(nid) != nullptr;
  COGS_CHECK(neighbor_known, ErrorKind::kNotFound, "unknown neighbor " + nid);
  const auto q = resolve(qid);
  COGS_CHECK(q.has_value(), ErrorKind::kConflict, "no embedding model loaded for class " + std::to_string(it->second.class_label));
  const auto n = resolve(nid);
  COGS_CHECK(n.has_value() && n->class_label == q->class_label, ErrorKind::kConflict,
             "neighbor " + nid + " is not in the query's class " + std::to_string(q->class_label));
  lock.unlock();

  const ClassState& st = per_class_.at(q->class_label);
  opts.quality_threshold = st.quality_threshold;
  const vae::InterpolationResult r =
      vae::interpolate_refine(*st.vae, q->mean, n->mean, opts, *image_vq_, *style_, st.stats);
  json out = json::array();
  for (const auto& s : r.samples) {
    // The endpoints are the stored images themselves.
    const std::vector<uint8_t> png = s.t == 0.0 ? q->png : s.t == 1.0 ? n->png : encode_png(s.image);
    out.push_back({{"t", s.t},
                   {"image", base64_encode(png)},
                   {"distance_from_query", s.distance_from_query},
                   {"quality", s.quality},
                   {"tokens_digest", tokens_digest(s.tokens)}});
  }
  return {200,
          {{"generation_id", qid}, {"neighbor_id", nid}, {"requested", r.requested}, {"flagged", r.flagged},
           {"results", out}}};
}

Reply Service::generation(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = generations_.find(id);
  if (it == generations_.end()) return error_reply(404, "unknown generation " + id);
  const Generation& g = it->second;
  return {200,
          {{"generation_id", g.id},
           {"session_id", g.session_id},
           {"class", g.class_label},
           {"image", base64_encode(g.png)},
           {"tokens", g.tokens.indices},
           {"tokens_digest", tokens_digest(g.tokens)},
           {"provenance",
            {{"config_hash", config_hash_},
             {"seed", g.seed},
             {"temperature", g.temperature},
             {"top_k", g.top_k},
             {"style_id", g.style_id},
             {"sketch_digest", g.sketch_digest},
             {"style_digest", g.style_digest}}}}};
}

size_t Service::index_size(int class_label) const {
  std::lock_guard lock(mu_);
  const auto& st = per_class_.at(class_label);
  return st.index ? st.index->size() : 0;
}

size_t Service::generation_count() const {
  std::lock_guard lock(mu_);
  return generations_.size();
}

// ---------------------------------------------------------------- http

namespace {

template <typename F>
void respond(httplib::Response& res, F&& handler) {
  Reply r;
  try {
    r = handler();
  } catch (const Error& e) {
    r = error_reply(status_for(e.kind()), e.what());
  } catch (const json::exception& e) {
    r = error_reply(400, std::string("bad request: ") + e.what());
  } catch (const std::exception& e) {
    r = error_reply(500, e.what());
  }
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("body is not valid JSON: ") + e.what());
  }
}

}  // namespace

void mount(httplib::Server& server, Service& service) {
  server.Get("/health", [&](const httplib::Request&, httplib::Response& res) {
    respond(res, [&] { return service.health(); });
  });
  server.Get("/classes", [&](const httplib::Request&, httplib::Response& res) {
    respond(res, [&] { return service.classes(); });
  });
  server.Get("/styles", [&](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] {
      COGS_CHECK(req.has_param("class"), ErrorKind::kRange, "missing query parameter 'class'");
      return service.styles(req.get_param_value("class"), req.get_param_value("target"));
    });
  });
  server.Get(R"(/generations/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { return service.generation(req.matches[1]); });
  });
  server.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { return service.generate(parse_body(req)); });
  });
  server.Post("/retrieve", [&](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { return service.retrieve(parse_body(req)); });
  });
  server.Post("/interpolate", [&](const httplib::Request& req, httplib::Response& res) {
    respond(res, [&] { return service.interpolate(parse_body(req)); });
  });
}

void serve(const RunConfig& cfg) {
  Service service(cfg);
  httplib::Server server;
  mount(server, service);
  std::cerr << "cogs: serving on http://" << cfg.host << ":" << cfg.port << " (config " << service.config_hash()
            << ")\n";
  COGS_CHECK(server.listen(cfg.host, cfg.port), ErrorKind::kIo,
             "cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
}

}  // namespace cogs::service
