#pragma once

// Paired sketch / image / style corpus: procedural toy corpus, pseudosketch
// extraction (saliency mask, background blur, edges), proxy quality scoring,
// and within-class style pairing.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cogs/image.hpp"
#include "cogs/imgproc.hpp"
#include "json.hpp"

namespace cogs::data {

enum class Split { kTrain, kVal };

std::string split_name(Split s);
Split parse_split(const std::string& s);

struct ImageRecord {
  std::string id;
  int class_label = 0;
  Raster pixels;  // 3 channels
  Split split = Split::kTrain;
  // Rendered object footprint, available for generated images.
  std::optional<Bitmap> truth_mask;
};

struct SketchRecord {
  std::string id;
  std::string source_image_id;
  Bitmap pixels;  // 1 = stroke
  double quality_score = 1.0;
};

struct Record {
  ImageRecord image;
  SketchRecord sketch;
};

struct Manifest {
  std::vector<Record> records;
  std::vector<std::string> class_names;
  int height = 0;
  int width = 0;
  uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  const Record& by_image_id(const std::string& id) const;
  const Record* find_image(const std::string& id) const;
  const Record* find_sketch(const std::string& id) const;
  int class_index(const std::string& name) const;
  // Records whose image is in `split`.
  Manifest subset(Split split) const;
  // Checks resolution, id uniqueness, label density and sketch linkage.
  void validate() const;
};

struct Triple {
  std::string sketch_id;
  std::string style_image_id;
  std::string target_image_id;
  int class_label = 0;
  bool operator==(const Triple&) const = default;
};

using Color = std::array<double, 3>;

struct CorpusConfig {
  int n_classes = 6;
  int per_class_count = 64;
  int resolution = 32;
  std::vector<Color> texture_palette = default_palette();
  uint64_t seed = 1;
  // Every `val_every`-th image of a class (1-based position) goes to val.
  int val_every = 5;
  double blur_sigma = 2.0;
  CannyParams canny{};
  double quality_threshold = 3.0;

  static std::vector<Color> default_palette();
  void validate() const;
};

CorpusConfig corpus_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CorpusConfig& c);

// Available shape families, in class-index order.
const std::vector<std::string>& shape_families();

// Renders the corpus, extracts a pseudosketch per image and scores it. No
// filtering happens here; see score_and_filter / build_corpus.
Manifest generate_toy_corpus(const CorpusConfig& config);

struct SaliencyResult {
  Bitmap mask;
  bool warning = false;  // degenerate input, full-frame mask returned
};

// Ground-truth footprint when present, otherwise a center-prior x
// color-contrast heuristic thresholded at its median.
SaliencyResult estimate_saliency(const ImageRecord& image);
SaliencyResult heuristic_saliency(const Raster& image);

SketchRecord extract_pseudosketch(const ImageRecord& image, const Bitmap& mask,
                                  double blur_sigma,
                                  const CannyParams& canny = {});

// Edge map of the unblurred image restricted to the dilated mask.
Bitmap reference_edges(const Raster& image, const Bitmap& mask,
                       double blur_sigma, const CannyParams& canny);
double edge_f1(const Bitmap& predicted, const Bitmap& reference);
// 1 + 4 * F1
double quality_from_f1(double f1);

struct FilterResult {
  Manifest manifest;
  size_t dropped = 0;
  bool empty = false;
};

// Rescores every pair and keeps those with quality_score >= threshold.
FilterResult score_and_filter(const Manifest& pairs, double threshold,
                              double blur_sigma, const CannyParams& canny = {});

// generate_toy_corpus followed by score_and_filter at the configured
// threshold.
Manifest build_corpus(const CorpusConfig& config);

using Embedder = std::function<std::vector<double>(const ImageRecord&)>;

struct PairingResult {
  std::vector<Triple> triples;
  std::vector<std::string> warnings;
};

// Within-class nearest style neighbour for every target; ties go to the
// lexicographically smallest id.
PairingResult pair_styles(const Manifest& manifest, const Embedder& embedder);

// On-disk layout: <root>/manifest.json, images/<id>.png, sketches/<id>.png,
// masks/<id>.png.
void save_manifest(const Manifest& manifest, const std::filesystem::path& root);
Manifest load_manifest(const std::filesystem::path& root);

nlohmann::json manifest_json(const Manifest& manifest);

}  // namespace cogs::data
