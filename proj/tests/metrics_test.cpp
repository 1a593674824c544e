#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cogs/error.hpp"
#include "cogs/kernels.hpp"
#include "cogs/metrics.hpp"

using namespace cogs;
using namespace cogs::metrics;

namespace {

GaussianStats stats1(double mu, double var) { return {{mu}, {var}, 10}; }

GaussianStats random_stats(int m, Rng& rng) {
  std::vector<std::vector<double>> pts(3 * m);
  for (auto& p : pts) {
    p.resize(size_t(m));
    for (double& v : p) v = normal(rng);
  }
  return gaussian_stats(pts);
}

}  // namespace

TEST(Frechet, OneDimensionalClosedForm) {
  EXPECT_NEAR(frechet_distance(stats1(0, 1), stats1(3, 4)), 10.0, 1e-9);
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double m1 = normal(rng), m2 = normal(rng), s1 = uniform(rng, 0.1, 3), s2 = uniform(rng, 0.1, 3);
    const double expected = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    EXPECT_NEAR(frechet_distance(stats1(m1, s1 * s1), stats1(m2, s2 * s2)), expected, 1e-9);
  }
}

TEST(Frechet, IdentityAndSymmetry) {
  Rng rng(4);
  for (int i = 0; i < 5; ++i) {
    const GaussianStats a = random_stats(6, rng), b = random_stats(6, rng);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-9);
    EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-8);
    EXPECT_GE(frechet_distance(a, b), 0.0);
  }
}

TEST(Frechet, DiagonalMatchesPerAxisSum) {
  GaussianStats a{{0, 1}, {1, 0, 0, 9}, 5}, b{{2, 1}, {4, 0, 0, 1}, 5};
  EXPECT_NEAR(frechet_distance(a, b), 4 + 1 + 4, 1e-9);
}

TEST(Frechet, RejectsNonPsdAndDimensionMismatch) {
  GaussianStats bad{{0, 0}, {1, 0, 0, -0.5}, 5}, ok{{0, 0}, {1, 0, 0, 1}, 5};
  EXPECT_THROW(frechet_distance(bad, ok), Error);
  EXPECT_THROW(frechet_distance(stats1(0, 1), ok), Error);
}

TEST(GaussianStats, UnbiasedCovariance) {
  const GaussianStats s = gaussian_stats({{0, 1}, {2, 1}, {4, 4}});
  EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(s.covariance[0], 4.0);
  EXPECT_DOUBLE_EQ(s.covariance[1], 3.0);
  EXPECT_DOUBLE_EQ(s.covariance[3], 3.0);
  EXPECT_THROW(gaussian_stats({{1.0}}), Error);
}

TEST(Diversity, PairsAveraged) {
  EXPECT_EQ(diversity_score({{1, 1}, {1, 1}, {1, 1}}), 0.0);
  EXPECT_DOUBLE_EQ(diversity_score({{0, 0}, {3, 4}}), 5.0);
  Rng rng(5);
  std::vector<std::vector<double>> f(5, std::vector<double>(3));
  for (auto& v : f)
    for (double& x : v) x = normal(rng);
  double total = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j) total += std::hypot(f[i][0] - f[j][0], f[i][1] - f[j][1], f[i][2] - f[j][2]);
  EXPECT_NEAR(diversity_score(f), total / 10, 1e-12);
}

TEST(Diversity, IdenticalImagesScoreZero) {
  style::StyleEncoder enc;
  std::vector<Raster> imgs(3, Raster(16, 16, 3, 0.4));
  EXPECT_EQ(diversity_score(imgs, enc), 0.0);
}

TEST(DistanceTransform, HandExamples) {
  Bitmap all(4, 4, 1);
  for (double v : distance_transform(all).values) EXPECT_EQ(v, 0.0);
  Bitmap corner(3, 3);
  corner.at(0, 0) = 1;
  const std::vector<double> expected{0, 1, 2, 1, std::sqrt(2.0), std::sqrt(5.0), 2, std::sqrt(5.0), std::sqrt(8.0)};
  const DistanceField f = distance_transform(corner);
  for (size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(f.values[i], expected[i]);
  EXPECT_THROW(distance_transform(Bitmap(3, 3)), Error);
}

TEST(DistanceTransform, RandomMapsMatchExhaustiveOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Bitmap e(16, 16);
    for (auto& v : e.data) v = uniform(rng) < 0.05;
    e.data[size_t(trial) * 5 % 256] = 1;
    const DistanceField f = distance_transform(e);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        double best = 1e9;
        for (int yy = 0; yy < 16; ++yy)
          for (int xx = 0; xx < 16; ++xx)
            if (e.at(yy, xx)) best = std::min(best, std::sqrt(double((y - yy) * (y - yy) + (x - xx) * (x - xx))));
        ASSERT_EQ(f.at(y, x), best);
      }
  }
}

TEST(Chamfer, HandInstanceOnFiveByFive) {
  // Edge column x = 0; strokes at distances 1 and 3.
  Bitmap edges(5, 5);
  for (int y = 0; y < 5; ++y) edges.at(y, 0) = 1;
  const DistanceField f = distance_transform(edges);
  EXPECT_DOUBLE_EQ((f.at(2, 1) + f.at(4, 3)) / 2.0, 2.0);
}

TEST(Chamfer, SketchEqualToEdgeMapScoresZero) {
  Raster img(24, 24, 3, 0.9);
  for (int c = 0; c < 3; ++c)
    for (int y = 7; y < 17; ++y)
      for (int x = 5; x < 19; ++x) img.at(c, y, x) = 0.1;
  const Bitmap sketch = canny(img, {});
  ASSERT_GT(sketch.count(), 0u);
  const ChamferResult r = chamfer_structure(sketch, img);
  EXPECT_EQ(r.distance, 0.0);
  EXPECT_FALSE(r.flagged);
}

TEST(Chamfer, IsOneSided) {
  Raster img(24, 24, 3, 0.9);
  for (int c = 0; c < 3; ++c)
    for (int y = 4; y < 20; ++y)
      for (int x = 4; x < 20; ++x) img.at(c, y, x) = 0.1;
  Bitmap dot(24, 24);
  dot.at(4, 4) = 1;
  // The dot sits on the square's edge; the square's edges are far from the dot.
  Raster dot_img = bitmap_to_raster(dot);
  const double forward = chamfer_structure(dot, img).distance;
  const double backward = chamfer_structure(canny(img, {}), to_rgb(dot_img)).distance;
  EXPECT_NE(forward, backward);
}

TEST(Chamfer, FlatGenerationIsFlagged) {
  Bitmap sketch(10, 10);
  sketch.at(5, 5) = 1;
  const ChamferResult r = chamfer_structure(sketch, Raster(10, 10, 3, 0.5));
  EXPECT_TRUE(r.flagged);
  EXPECT_DOUBLE_EQ(r.distance, std::hypot(10.0, 10.0));
}

TEST(Partition, Tertiles) {
  const Partitions p3 = partition_classes({{0, 5.0}, {1, 1.0}, {2, 3.0}});
  EXPECT_EQ(p3.simple, std::vector<int>{1});
  EXPECT_EQ(p3.medium, std::vector<int>{2});
  EXPECT_EQ(p3.complex, std::vector<int>{0});
  const Partitions p6 = partition_classes({{1, 1}, {2, 2}, {3, 3}, {4, 4}, {5, 5}, {6, 6}});
  EXPECT_EQ(p6.simple, (std::vector<int>{1, 2}));
  EXPECT_EQ(p6.medium, (std::vector<int>{3, 4}));
  EXPECT_EQ(p6.complex, (std::vector<int>{5, 6}));
  EXPECT_THROW(partition_classes({{0, 1.0}, {1, 2.0}}), Error);
}

TEST(Partition, RandomMapsAreDisjointCovers) {
  Rng rng(9);
  for (int n = 3; n < 20; ++n) {
    std::map<int, double> m;
    for (int i = 0; i < n; ++i) m[i * 3] = std::floor(uniform(rng, 0, 4));
    const Partitions p = partition_classes(m);
    std::set<int> all;
    for (const auto* part : {&p.simple, &p.medium, &p.complex}) all.insert(part->begin(), part->end());
    EXPECT_EQ(all.size(), size_t(n));
    EXPECT_EQ(p.simple.size() + p.medium.size() + p.complex.size(), size_t(n));
    for (int c : p.simple)
      for (int d : p.complex) EXPECT_LE(m[c], m[d]);
  }
}

TEST(Precision, Arithmetic) {
  EXPECT_EQ(precision_at_k({{true, true}, {true, true, false}}, 2), 1.0);
  EXPECT_EQ(precision_at_k({{false, false}}, 2), 0.0);
  EXPECT_DOUBLE_EQ(precision_at_k({{true, false}, {true, true}}, 2), 0.75);
  EXPECT_THROW(precision_at_k({{true}}, 2), Error);
}

TEST(Features, DeterministicWithFixedDimension) {
  style::StyleEncoder enc;
  Raster a(16, 16, 3, 0.2), b(16, 16, 3, 0.8);
  const auto f = embed_features({a, a, b}, enc);
  EXPECT_EQ(f[0], f[1]);
  EXPECT_EQ(f[0].size(), size_t(enc.feature_dim()));
  EXPECT_NE(f[0], f[2]);
}
