#include "cogs/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "cogs/error.hpp"
#include "cogs/nn.hpp"

namespace cogs::data {

using nlohmann::json;

std::string split_name(Split s) { return s == Split::kTrain ? "train" : "val"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  throw Error(ErrorKind::kFormat, "unknown split '" + s + "'");
}

const Record& Manifest::by_image_id(const std::string& id) const {
  const Record* r = find_image(id);
  COGS_CHECK(r != nullptr, ErrorKind::kNotFound, "no image with id " + id);
  return *r;
}

const Record* Manifest::find_image(const std::string& id) const {
  for (const Record& r : records)
    if (r.image.id == id) return &r;
  return nullptr;
}

const Record* Manifest::find_sketch(const std::string& id) const {
  for (const Record& r : records)
    if (r.sketch.id == id) return &r;
  return nullptr;
}

int Manifest::class_index(const std::string& name) const {
  for (size_t i = 0; i < class_names.size(); ++i)
    if (class_names[i] == name) return static_cast<int>(i);
  throw Error(ErrorKind::kNotFound, "unknown class '" + name + "'");
}

Manifest Manifest::subset(Split split) const {
  Manifest out = *this;
  out.records.clear();
  for (const Record& r : records)
    if (r.image.split == split) out.records.push_back(r);
  return out;
}

void Manifest::validate() const {
  std::set<std::string> ids;
  std::set<int> labels;
  for (const Record& r : records) {
    const auto& im = r.image;
    COGS_CHECK(im.pixels.height == height && im.pixels.width == width && im.pixels.channels == 3,
               ErrorKind::kShape, "image " + im.id + " does not match the corpus resolution");
    COGS_CHECK(ids.insert(im.id).second, ErrorKind::kFormat, "duplicate image id " + im.id);
    COGS_CHECK(im.class_label >= 0 && im.class_label < num_classes(), ErrorKind::kRange,
               "class label out of range for " + im.id);
    for (double v : im.pixels.data)
      COGS_CHECK(v >= 0.0 && v <= 1.0, ErrorKind::kRange, "pixel outside [0,1] in " + im.id);
    COGS_CHECK(r.sketch.source_image_id == im.id, ErrorKind::kFormat,
               "sketch " + r.sketch.id + " does not resolve to its image");
    COGS_CHECK(r.sketch.pixels.height == height && r.sketch.pixels.width == width, ErrorKind::kShape,
               "sketch " + r.sketch.id + " does not match the corpus resolution");
    labels.insert(im.class_label);
  }
  COGS_CHECK(records.empty() || int(labels.size()) == num_classes(), ErrorKind::kFormat,
             "class indices are not dense");
}

// ---------------------------------------------------------------- config

std::vector<Color> CorpusConfig::default_palette() {
  return {{0.85, 0.20, 0.20}, {0.20, 0.70, 0.30}, {0.20, 0.35, 0.85},
          {0.95, 0.85, 0.20}, {0.60, 0.30, 0.70}, {0.95, 0.55, 0.15}};
}

void CorpusConfig::validate() const {
  COGS_CHECK(n_classes >= 2, ErrorKind::kConfig, "n_classes must be >= 2");
  COGS_CHECK(n_classes <= int(shape_families().size()), ErrorKind::kConfig,
             "n_classes exceeds the " + std::to_string(shape_families().size()) + " shape families");
  COGS_CHECK(per_class_count >= 8, ErrorKind::kConfig, "per_class_count must be >= 8");
  COGS_CHECK(resolution >= 32 && (resolution & (resolution - 1)) == 0, ErrorKind::kConfig,
             "resolution must be a power of two >= 32");
  COGS_CHECK(texture_palette.size() >= 2, ErrorKind::kConfig,
             "texture_palette needs at least two colors");
  COGS_CHECK(blur_sigma > 0.0, ErrorKind::kConfig, "blur_sigma must be positive");
  COGS_CHECK(val_every >= 2, ErrorKind::kConfig, "val_every must be >= 2");
  COGS_CHECK(quality_threshold >= 1.0 && quality_threshold <= 5.0, ErrorKind::kConfig,
             "quality_threshold must lie in [1,5]");
}

CorpusConfig corpus_config_from_json(const json& j) {
  CorpusConfig c;
  c.n_classes = j.value("n_classes", c.n_classes);
  c.per_class_count = j.value("per_class_count", c.per_class_count);
  c.resolution = j.value("resolution", c.resolution);
  c.seed = j.value("seed", c.seed);
  c.val_every = j.value("val_every", c.val_every);
  c.blur_sigma = j.value("blur_sigma", c.blur_sigma);
  c.quality_threshold = j.value("quality_threshold", c.quality_threshold);
  if (j.contains("texture_palette")) c.texture_palette = j.at("texture_palette").get<std::vector<Color>>();
  if (j.contains("canny")) {
    const auto& k = j.at("canny");
    c.canny.low = k.value("low", c.canny.low);
    c.canny.high = k.value("high", c.canny.high);
    c.canny.sigma = k.value("sigma", c.canny.sigma);
  }
  c.validate();
  return c;
}

json to_json(const CorpusConfig& c) {
  return {{"n_classes", c.n_classes},
          {"per_class_count", c.per_class_count},
          {"resolution", c.resolution},
          {"seed", c.seed},
          {"val_every", c.val_every},
          {"blur_sigma", c.blur_sigma},
          {"quality_threshold", c.quality_threshold},
          {"texture_palette", c.texture_palette},
          {"canny", {{"low", c.canny.low}, {"high", c.canny.high}, {"sigma", c.canny.sigma}}}};
}

// ---------------------------------------------------------------- rendering

const std::vector<std::string>& shape_families() {
  static const std::vector<std::string> kFamilies = {"disc",  "square",   "triangle", "star",
                                                     "ring",  "cross",    "crescent", "hexagon"};
  return kFamilies;
}

namespace {

bool in_polygon(double u, double v, const std::vector<std::pair<double, double>>& poly) {
  bool inside = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto [xi, yi] = poly[i];
    const auto [xj, yj] = poly[j];
    if (((yi > v) != (yj > v)) && (u < (xj - xi) * (v - yi) / (yj - yi) + xi)) inside = !inside;
  }
  return inside;
}

std::vector<std::pair<double, double>> regular_polygon(int n, double r_outer, double r_inner) {
  std::vector<std::pair<double, double>> poly;
  const int verts = r_inner > 0 ? 2 * n : n;
  for (int i = 0; i < verts; ++i) {
    const double a = M_PI / 2 + 2 * M_PI * i / verts;
    const double r = (r_inner > 0 && i % 2 == 1) ? r_inner : r_outer;
    poly.emplace_back(r * std::cos(a), r * std::sin(a));
  }
  return poly;
}

// Inside test in the object frame, u and v roughly in [-1, 1].
bool inside_family(int family, double u, double v) {
  static const auto kTriangle = regular_polygon(3, 1.0, 0.0);
  static const auto kStar = regular_polygon(5, 1.0, 0.45);
  static const auto kHexagon = regular_polygon(6, 1.0, 0.0);
  const double r2 = u * u + v * v;
  switch (family) {
    case 0: return r2 <= 1.0;
    case 1: return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    case 2: return in_polygon(u, v, kTriangle);
    case 3: return in_polygon(u, v, kStar);
    case 4: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case 5: return (std::abs(u) <= 0.3 && std::abs(v) <= 0.9) || (std::abs(v) <= 0.3 && std::abs(u) <= 0.9);
    case 6: return r2 <= 1.0 && ((u - 0.45) * (u - 0.45) + v * v) > 0.75 * 0.75;
    case 7: return in_polygon(u, v, kHexagon);
    default: throw Error(ErrorKind::kConfig, "unknown shape family");
  }
}

struct Texture {
  int kind = 0;  // 0 solid, 1 stripes, 2 checker
  Color a{}, b{};
  double period = 6.0;
  double angle = 0.0;
};

Color texture_at(const Texture& t, double x, double y) {
  switch (t.kind) {
    case 1: {
      const double s = x * std::cos(t.angle) + y * std::sin(t.angle);
      return std::fmod(std::floor(s / (t.period / 2)), 2.0) == 0.0 ? t.a : t.b;
    }
    case 2: {
      const int cx = static_cast<int>(std::floor(x / (t.period / 2)));
      const int cy = static_cast<int>(std::floor(y / (t.period / 2)));
      return ((cx + cy) % 2 == 0) ? t.a : t.b;
    }
    default: return t.a;
  }
}

ImageRecord render_image(const CorpusConfig& cfg, int label, int index) {
  Rng rng(derive_seed(cfg.seed, "img/" + std::to_string(label) + "/" + std::to_string(index)));
  const int R = cfg.resolution;
  const auto& pal = cfg.texture_palette;
  auto pick = [&](int exclude) {
    std::uniform_int_distribution<int> d(0, int(pal.size()) - 1);
    int k;
    do k = d(rng);
    while (k == exclude);
    return k;
  };
  Texture tex;
  tex.kind = std::uniform_int_distribution<int>(0, 2)(rng);
  const int ia = pick(-1);
  const int ib = pick(ia);
  tex.a = pal[ia];
  tex.b = pal[ib];
  tex.period = R / 32.0 * std::uniform_int_distribution<int>(4, 8)(rng);
  tex.angle = uniform(rng, 0.0, M_PI);
  const int ibg = pick(ia);
  Color bg = pal[ibg];
  for (double& c : bg) c = 0.35 * c + 0.65;  // light tint

  const double cx = R / 2.0 + uniform(rng, -0.15, 0.15) * R;
  const double cy = R / 2.0 + uniform(rng, -0.15, 0.15) * R;
  const double radius = uniform(rng, 0.25, 0.4) * R;
  const double theta = uniform(rng, 0.0, 2 * M_PI);
  const double ct = std::cos(theta), st = std::sin(theta);

  ImageRecord rec;
  rec.class_label = label;
  rec.pixels = Raster(R, R, 3);
  Bitmap mask(R, R);
  for (int y = 0; y < R; ++y)
    for (int x = 0; x < R; ++x) {
      const double dx = (x + 0.5 - cx) / radius, dy = (y + 0.5 - cy) / radius;
      const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
      const bool in = inside_family(label, u, v);
      mask.at(y, x) = in ? 1 : 0;
      Color col;
      if (in) {
        col = texture_at(tex, x, y);
      } else {
        const double n = uniform(rng, -0.04, 0.04);
        col = {bg[0] + n, bg[1] + n, bg[2] + n};
      }
      for (int c = 0; c < 3; ++c) rec.pixels.at(c, y, x) = col[c];
    }
  quantize_8bit(rec.pixels);
  rec.truth_mask = std::move(mask);
  return rec;
}

std::string image_id(const std::string& family, int index) {
  std::ostringstream os;
  os << family << "-";
  os.width(4);
  os.fill('0');
  os << index;
  return os.str();
}

}  // namespace

Manifest generate_toy_corpus(const CorpusConfig& config) {
  config.validate();
  Manifest m;
  m.height = m.width = config.resolution;
  m.seed = config.seed;
  m.class_names.assign(shape_families().begin(), shape_families().begin() + config.n_classes);
  const int total = config.n_classes * config.per_class_count;
  m.records.resize(total);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < total; ++i) {
    const int label = i / config.per_class_count;
    const int index = i % config.per_class_count;
    Record& r = m.records[i];
    r.image = render_image(config, label, index);
    r.image.id = image_id(m.class_names[label], index);
    r.image.split = ((index + 1) % config.val_every == 0) ? Split::kVal : Split::kTrain;
    const SaliencyResult sal = estimate_saliency(r.image);
    r.sketch = extract_pseudosketch(r.image, sal.mask, config.blur_sigma, config.canny);
    const Bitmap ref = reference_edges(r.image.pixels, sal.mask, config.blur_sigma, config.canny);
    r.sketch.quality_score = quality_from_f1(edge_f1(r.sketch.pixels, ref));
  }
  std::sort(m.records.begin(), m.records.end(),
            [](const Record& a, const Record& b) { return a.image.id < b.image.id; });
  return m;
}

// ---------------------------------------------------------------- saliency

SaliencyResult heuristic_saliency(const Raster& image) {
  const int h = image.height, w = image.width;
  SaliencyResult res;
  const auto [lo, hi] = std::minmax_element(image.data.begin(), image.data.end());
  if (image.data.empty() || *lo == *hi) {
    res.mask = Bitmap(h, w, 1);
    res.warning = true;
    return res;
  }
  std::vector<double> mean(image.channels, 0.0);
  for (int c = 0; c < image.channels; ++c) {
    for (size_t i = 0; i < image.plane(); ++i) mean[c] += image.data[c * image.plane() + i];
    mean[c] /= double(image.plane());
  }
  const double sigma = 0.3 * std::min(h, w);
  std::vector<double> score(image.plane());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double contrast = 0.0;
      for (int c = 0; c < image.channels; ++c) {
        const double d = image.at(c, y, x) - mean[c];
        contrast += d * d;
      }
      const double dy = y + 0.5 - h / 2.0, dx = x + 0.5 - w / 2.0;
      const double prior = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      score[size_t(y) * w + x] = prior * std::sqrt(contrast);
    }
  std::vector<double> sorted = score;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double median = sorted[sorted.size() / 2];
  res.mask = Bitmap(h, w);
  for (size_t i = 0; i < score.size(); ++i) res.mask.data[i] = score[i] > median ? 1 : 0;
  if (res.mask.count() == 0) {
    const double top = *std::max_element(score.begin(), score.end());
    for (size_t i = 0; i < score.size(); ++i) res.mask.data[i] = score[i] >= top ? 1 : 0;
  }
  return res;
}

SaliencyResult estimate_saliency(const ImageRecord& image) {
  if (image.truth_mask && image.truth_mask->count() > 0) return {*image.truth_mask, false};
  return heuristic_saliency(image.pixels);
}

// ---------------------------------------------------------------- pseudosketch

SketchRecord extract_pseudosketch(const ImageRecord& image, const Bitmap& mask, double blur_sigma,
                                  const CannyParams& canny_params) {
  COGS_CHECK(blur_sigma > 0.0, ErrorKind::kConfig, "blur_sigma must be positive");
  COGS_CHECK(mask.height == image.pixels.height && mask.width == image.pixels.width,
             ErrorKind::kShape, "mask shape differs from image");
  COGS_CHECK(mask.count() > 0, ErrorKind::kRange,
             "empty saliency mask for " + image.id + "; use the heuristic fallback");
  const Raster blurred = gaussian_blur(image.pixels, blur_sigma);
  Raster composite = image.pixels;
  for (int c = 0; c < composite.channels; ++c)
    for (int y = 0; y < composite.height; ++y)
      for (int x = 0; x < composite.width; ++x)
        if (!mask.at(y, x)) composite.at(c, y, x) = blurred.at(c, y, x);
  Bitmap edges = canny(composite, canny_params);
  const Bitmap keep = dilate(mask, blur_sigma);
  for (size_t i = 0; i < edges.data.size(); ++i) edges.data[i] &= keep.data[i];

  SketchRecord s;
  s.id = "sk-" + image.id;
  s.source_image_id = image.id;
  s.pixels = std::move(edges);
  return s;
}

Bitmap reference_edges(const Raster& image, const Bitmap& mask, double blur_sigma,
                       const CannyParams& canny_params) {
  Bitmap edges = canny(image, canny_params);
  const Bitmap keep = dilate(mask, blur_sigma);
  for (size_t i = 0; i < edges.data.size(); ++i) edges.data[i] &= keep.data[i];
  return edges;
}

double edge_f1(const Bitmap& predicted, const Bitmap& reference) {
  COGS_CHECK(predicted.data.size() == reference.data.size(), ErrorKind::kShape,
             "edge_f1: shape mismatch");
  size_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < predicted.data.size(); ++i) {
    const bool p = predicted.data[i] != 0, r = reference.data[i] != 0;
    tp += p && r;
    fp += p && !r;
    fn += !p && r;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * double(tp) / double(2 * tp + fp + fn);
}

double quality_from_f1(double f1) { return 1.0 + 4.0 * std::clamp(f1, 0.0, 1.0); }

FilterResult score_and_filter(const Manifest& pairs, double threshold, double blur_sigma,
                              const CannyParams& canny) {
  COGS_CHECK(threshold >= 1.0 && threshold <= 5.0, ErrorKind::kConfig,
             "threshold must lie in [1,5]");
  std::vector<Record> scored = pairs.records;
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < scored.size(); ++i) {
    Record& r = scored[i];
    const SaliencyResult sal = estimate_saliency(r.image);
    const Bitmap ref = reference_edges(r.image.pixels, sal.mask, blur_sigma, canny);
    r.sketch.quality_score = quality_from_f1(edge_f1(r.sketch.pixels, ref));
  }
  FilterResult out;
  out.manifest = pairs;
  out.manifest.records.clear();
  for (Record& r : scored) {
    if (r.sketch.quality_score >= threshold)
      out.manifest.records.push_back(std::move(r));
    else
      ++out.dropped;
  }
  std::sort(out.manifest.records.begin(), out.manifest.records.end(),
            [](const Record& a, const Record& b) { return a.image.id < b.image.id; });
  out.empty = out.manifest.records.empty();
  return out;
}

Manifest build_corpus(const CorpusConfig& config) {
  Manifest raw = generate_toy_corpus(config);
  return score_and_filter(raw, config.quality_threshold, config.blur_sigma, config.canny).manifest;
}

// ---------------------------------------------------------------- pairing

PairingResult pair_styles(const Manifest& manifest, const Embedder& embedder) {
  const size_t n = manifest.records.size();
  std::vector<std::vector<double>> emb(n);
#pragma omp parallel for schedule(dynamic)
  for (size_t i = 0; i < n; ++i) emb[i] = embedder(manifest.records[i].image);

  PairingResult out;
  for (size_t i = 0; i < n; ++i) {
    const ImageRecord& target = manifest.records[i].image;
    long best = -1;
    double best_d = 0.0;
    for (size_t j = 0; j < n; ++j) {
      const ImageRecord& cand = manifest.records[j].image;
      if (j == i || cand.class_label != target.class_label) continue;
      COGS_CHECK(emb[j].size() == emb[i].size(), ErrorKind::kShape, "embedding dimensions differ");
      double d = 0.0;
      for (size_t k = 0; k < emb[i].size(); ++k) d += (emb[i][k] - emb[j][k]) * (emb[i][k] - emb[j][k]);
      if (best < 0 || d < best_d ||
          (d == best_d && cand.id < manifest.records[size_t(best)].image.id)) {
        best = long(j);
        best_d = d;
      }
    }
    if (best < 0) {
      out.warnings.push_back("image " + target.id + " is alone in its class; skipped");
      continue;
    }
    out.triples.push_back({manifest.records[i].sketch.id, manifest.records[size_t(best)].image.id,
                           target.id, target.class_label});
  }
  return out;
}

// ---------------------------------------------------------------- persistence

json manifest_json(const Manifest& m) {
  json records = json::array();
  for (const Record& r : m.records) {
    json image = {{"id", r.image.id},
                  {"class_label", r.image.class_label},
                  {"split", split_name(r.image.split)},
                  {"path", "images/" + r.image.id + ".png"}};
    if (r.image.truth_mask) image["mask_path"] = "masks/" + r.image.id + ".png";
    records.push_back({{"image", image},
                       {"sketch",
                        {{"id", r.sketch.id},
                         {"source_image_id", r.sketch.source_image_id},
                         {"quality_score", r.sketch.quality_score},
                         {"path", "sketches/" + r.sketch.id + ".png"}}}});
  }
  return {{"format", "cogs-manifest"},
          {"version", 1},
          {"class_names", m.class_names},
          {"resolution", {m.height, m.width}},
          {"seed", m.seed},
          {"records", records}};
}

void save_manifest(const Manifest& m, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "sketches");
  fs::create_directories(root / "masks");
  for (const Record& r : m.records) {
    write_png(root / "images" / (r.image.id + ".png"), r.image.pixels);
    write_png(root / "sketches" / (r.sketch.id + ".png"), bitmap_to_raster(r.sketch.pixels));
    if (r.image.truth_mask)
      write_png(root / "masks" / (r.image.id + ".png"), bitmap_to_raster(*r.image.truth_mask));
  }
  std::ofstream out(root / "manifest.json");
  COGS_CHECK(out.good(), ErrorKind::kIo, "cannot write manifest under " + root.string());
  out << manifest_json(m).dump(2) << "\n";
}

Manifest load_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  COGS_CHECK(in.good(), ErrorKind::kIo, "cannot read " + (root / "manifest.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("manifest.json: ") + e.what());
  }
  Manifest m;
  try {
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.height = j.at("resolution").at(0).get<int>();
    m.width = j.at("resolution").at(1).get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    for (const json& rj : j.at("records")) {
      Record r;
      const json& ij = rj.at("image");
      r.image.id = ij.at("id").get<std::string>();
      r.image.class_label = ij.at("class_label").get<int>();
      r.image.split = parse_split(ij.at("split").get<std::string>());
      r.image.pixels = to_rgb(read_png(root / ij.at("path").get<std::string>()));
      if (ij.contains("mask_path"))
        r.image.truth_mask = raster_to_bitmap(read_png(root / ij.at("mask_path").get<std::string>()));
      const json& sj = rj.at("sketch");
      r.sketch.id = sj.at("id").get<std::string>();
      r.sketch.source_image_id = sj.at("source_image_id").get<std::string>();
      r.sketch.quality_score = sj.at("quality_score").get<double>();
      r.sketch.pixels = raster_to_bitmap(read_png(root / sj.at("path").get<std::string>()));
      m.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("manifest.json: ") + e.what());
  }
  m.validate();
  return m;
}

}  // namespace cogs::data
