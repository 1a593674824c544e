#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "cogs/dataset.hpp"
#include "cogs/error.hpp"

using namespace cogs;
using namespace cogs::data;

namespace {

CorpusConfig small(uint64_t seed) {
  CorpusConfig c;
  c.n_classes = 2;
  c.per_class_count = 8;
  c.resolution = 32;
  c.seed = seed;
  return c;
}

ImageRecord image_of(const Raster& r, int label = 0, std::string id = "x") {
  ImageRecord rec;
  rec.id = std::move(id);
  rec.class_label = label;
  rec.pixels = r;
  return rec;
}

}  // namespace

TEST(ToyCorpus, DeterministicAndSeeded) {
  const Manifest a = generate_toy_corpus(small(7)), b = generate_toy_corpus(small(7));
  ASSERT_EQ(a.records.size(), 16u);
  EXPECT_EQ(manifest_json(a), manifest_json(b));
  bool same = true;
  for (size_t i = 0; i < a.records.size(); ++i) same = same && a.records[i].image.pixels == b.records[i].image.pixels;
  EXPECT_TRUE(same);
  const Manifest c = generate_toy_corpus(small(8));
  bool differs = false;
  for (size_t i = 0; i < a.records.size(); ++i) differs = differs || a.records[i].image.pixels != c.records[i].image.pixels;
  EXPECT_TRUE(differs);
}

TEST(ToyCorpus, UniformClassHistogram) {
  CorpusConfig cfg;
  cfg.n_classes = 6;
  cfg.per_class_count = 64;
  cfg.resolution = 64;
  const Manifest m = generate_toy_corpus(cfg);
  ASSERT_EQ(m.records.size(), 384u);
  std::map<int, int> hist;
  for (const Record& r : m.records) ++hist[r.image.class_label];
  for (int c = 0; c < 6; ++c) EXPECT_EQ(hist[c], 64);
  m.validate();
}

TEST(ToyCorpus, RejectsBadConfig) {
  CorpusConfig cfg = small(1);
  cfg.n_classes = 0;
  EXPECT_THROW(generate_toy_corpus(cfg), Error);
}

TEST(Saliency, GroundTruthFootprintIsUsed) {
  const Manifest m = generate_toy_corpus(small(3));
  const ImageRecord& img = m.records[0].image;
  ASSERT_TRUE(img.truth_mask.has_value());
  const SaliencyResult s = estimate_saliency(img);
  EXPECT_EQ(s.mask, *img.truth_mask);
  EXPECT_FALSE(s.warning);
}

TEST(Saliency, UniformImageWarns) {
  const SaliencyResult s = heuristic_saliency(Raster(6, 6, 3, 0.5));
  EXPECT_TRUE(s.warning);
  EXPECT_EQ(s.mask.count(), 36u);
}

TEST(Saliency, BrightCenterPixelIsSalient) {
  Raster r(5, 5, 3, 0.1);
  for (int c = 0; c < 3; ++c) r.at(c, 2, 2) = 1.0;
  const SaliencyResult s = heuristic_saliency(r);
  EXPECT_FALSE(s.warning);
  EXPECT_EQ(s.mask.at(2, 2), 1);
}

TEST(Pseudosketch, UniformImageHasNoStrokes) {
  const ImageRecord img = image_of(Raster(16, 16, 3, 1.0));
  EXPECT_EQ(extract_pseudosketch(img, Bitmap(16, 16, 1), 2.0).pixels.count(), 0u);
}

TEST(Pseudosketch, SquareStrokesHugThePerimeter) {
  Raster r(32, 32, 3, 1.0);
  Bitmap mask(32, 32);
  for (int y = 10; y < 22; ++y)
    for (int x = 10; x < 22; ++x) {
      for (int c = 0; c < 3; ++c) r.at(c, y, x) = 0.0;
      mask.at(y, x) = 1;
    }
  const SketchRecord s = extract_pseudosketch(image_of(r), mask, 2.0);
  ASSERT_GT(s.pixels.count(), 0u);
  // Every stroke within one pixel of the square's boundary band (rows/cols 9..10 and 21..22).
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      if (!s.pixels.at(y, x)) continue;
      const bool inside_outer = y >= 8 && y <= 23 && x >= 8 && x <= 23;
      const bool inside_inner = y >= 12 && y <= 19 && x >= 12 && x <= 19;
      EXPECT_TRUE(inside_outer && !inside_inner) << y << "," << x;
    }
}

TEST(Pseudosketch, HalfMaskSuppressesRightSide) {
  Raster r(32, 32, 3, 1.0);
  for (int y = 10; y < 22; ++y)
    for (int x = 6; x < 26; ++x)
      for (int c = 0; c < 3; ++c) r.at(c, y, x) = 0.0;
  Bitmap left(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 16; ++x) left.at(y, x) = 1;
  const SketchRecord s = extract_pseudosketch(image_of(r), left, 2.0);
  const Bitmap band = dilate(left, 2.0);
  size_t outside = 0;
  for (size_t i = 0; i < band.data.size(); ++i) outside += s.pixels.data[i] && !band.data[i];
  EXPECT_EQ(outside, 0u);
  EXPECT_GT(s.pixels.count(), 0u);
}

TEST(Quality, F1ScaleEndpointsAndMiddle) {
  Bitmap ref(8, 8), pred(8, 8);
  ref.at(1, 1) = ref.at(2, 2) = 1;
  EXPECT_EQ(quality_from_f1(edge_f1(ref, ref)), 5.0);
  EXPECT_EQ(quality_from_f1(edge_f1(pred, ref)), 1.0);
  pred.at(1, 1) = pred.at(5, 5) = 1;  // P = R = 1/2
  EXPECT_DOUBLE_EQ(edge_f1(pred, ref), 0.5);
  EXPECT_DOUBLE_EQ(quality_from_f1(0.5), 3.0);
}

TEST(Quality, FilterDropsLowScores) {
  Manifest m = generate_toy_corpus(small(5));
  for (Record& r : m.records) r.sketch.pixels = Bitmap(32, 32);
  const FilterResult f = score_and_filter(m, 3.0, 2.0);
  EXPECT_TRUE(f.empty);
  EXPECT_EQ(f.dropped, m.records.size());
  EXPECT_THROW(score_and_filter(m, 7.0, 2.0), Error);
}

TEST(Pairing, ForcedAndNearest) {
  Manifest m;
  m.class_names = {"a", "b"};
  m.height = m.width = 4;
  auto add = [&](const std::string& id, int label) {
    Record r;
    r.image = image_of(Raster(4, 4, 3), label, id);
    r.sketch.id = "s-" + id;
    r.sketch.source_image_id = id;
    r.sketch.pixels = Bitmap(4, 4);
    m.records.push_back(r);
  };
  add("p0", 0);
  add("p1", 0);
  add("p10", 0);
  add("q", 1);
  add("r", 1);
  add("near", 1);
  const std::map<std::string, double> pos{{"p0", 0}, {"p1", 1}, {"p10", 10}, {"q", 0.4}, {"r", 50}, {"near", 0.5}};
  const PairingResult res = pair_styles(m, [&](const ImageRecord& r) { return std::vector<double>{pos.at(r.id)}; });
  std::map<std::string, std::string> partner;
  for (const Triple& t : res.triples) {
    partner[t.target_image_id] = t.style_image_id;
    EXPECT_EQ(m.find_image(t.style_image_id)->image.class_label, t.class_label);
  }
  EXPECT_EQ(partner["p0"], "p1");
  EXPECT_EQ(partner["p1"], "p0");
  EXPECT_EQ(partner["p10"], "p1");
  // q's nearest overall is p0 (0.4) but it must stay in class 1.
  EXPECT_EQ(partner["q"], "near");
}

TEST(Manifest, SaveLoadRoundTrip) {
  const Manifest m = generate_toy_corpus(small(11));
  const auto dir = std::filesystem::temp_directory_path() / "cogs_manifest_test";
  std::filesystem::remove_all(dir);
  save_manifest(m, dir);
  const Manifest back = load_manifest(dir);
  EXPECT_EQ(manifest_json(back), manifest_json(m));
  for (size_t i = 0; i < m.records.size(); ++i) {
    EXPECT_EQ(back.records[i].image.pixels, m.records[i].image.pixels);
    EXPECT_EQ(back.records[i].sketch.pixels, m.records[i].sketch.pixels);
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_manifest(dir), Error);
}
