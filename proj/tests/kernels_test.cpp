#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "cogs/kernels.hpp"
#include "cogs/nn.hpp"

using namespace cogs;
namespace k = cogs::kernels;

namespace {

std::vector<double> randn(size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

}  // namespace

TEST(Kernels, GemmParallelMatchesSerialBitwise) {
  Rng rng(5);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const int m = 37, n = 29, kk = 41;
      auto a = randn(size_t(m) * kk, rng), b = randn(size_t(kk) * n, rng);
      std::vector<double> c1(size_t(m) * n, 0.5), c2 = c1;
      k::gemm(ta, tb, m, n, kk, a.data(), b.data(), c1.data(), true);
      k::serial::gemm(ta, tb, m, n, kk, a.data(), b.data(), c2.data(), true);
      EXPECT_EQ(c1, c2);
    }
}

TEST(Kernels, ConvParallelMatchesSerialBitwise) {
  Rng rng(6);
  k::ConvShape s{3, 4, 9, 9, 5, 3, 2, 1};
  auto x = randn(size_t(s.batch) * s.in_channels * s.height * s.width, rng);
  auto w = randn(size_t(s.out_channels) * s.patch(), rng);
  auto bias = randn(size_t(s.out_channels), rng);
  const size_t ny = size_t(s.batch) * s.out_channels * s.out_height() * s.out_width();
  std::vector<double> y1(ny), y2(ny);
  k::conv2d_forward(x.data(), w.data(), bias.data(), s, y1.data());
  k::serial::conv2d_forward(x.data(), w.data(), bias.data(), s, y2.data());
  EXPECT_EQ(y1, y2);
}

TEST(Kernels, NearestRowsMatchesExhaustiveSearch) {
  Rng rng(7);
  const int n = 300, kk = 40, d = 6;
  auto q = randn(size_t(n) * d, rng), t = randn(size_t(kk) * d, rng);
  std::vector<int32_t> i1(n), i2(n);
  std::vector<double> d1(n), d2(n);
  k::nearest_rows(q.data(), n, t.data(), kk, d, i1.data(), d1.data());
  k::serial::nearest_rows(q.data(), n, t.data(), kk, d, i2.data(), d2.data());
  EXPECT_EQ(i1, i2);
  for (int i = 0; i < n; ++i) {
    int best = -1;
    double bd = std::numeric_limits<double>::infinity();
    for (int j = 0; j < kk; ++j) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += (q[i * d + c] - t[j * d + c]) * (q[i * d + c] - t[j * d + c]);
      if (acc < bd) bd = acc, best = j;
    }
    EXPECT_EQ(i1[i], best);
  }
}

TEST(Kernels, NearestRowsTieGoesToLowestIndex) {
  const std::vector<double> table{1, 0, -1, 0, 0, 1};
  const std::vector<double> q{0, 0};
  int32_t idx = -1;
  double dist = 0;
  k::nearest_rows(q.data(), 1, table.data(), 3, 2, &idx, &dist);
  EXPECT_EQ(idx, 0);
  EXPECT_EQ(dist, 1.0);
}

TEST(Kernels, DistanceTransformMatchesBruteForce) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 5 + trial % 7, w = 13 - trial % 5;
    std::vector<uint8_t> e(size_t(h) * w);
    for (auto& v : e) v = uniform(rng) < 0.1;
    e[size_t(trial) % e.size()] = 1;
    std::vector<double> a(e.size()), b(e.size());
    k::distance_transform(e.data(), h, w, a.data());
    k::serial::distance_transform(e.data(), h, w, b.data());
    EXPECT_EQ(a, b);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double best = std::numeric_limits<double>::infinity();
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx)
            if (e[size_t(yy) * w + xx]) best = std::min(best, std::hypot(double(y - yy), double(x - xx)));
        EXPECT_DOUBLE_EQ(a[size_t(y) * w + x], best);
      }
  }
}

TEST(Kernels, SqDistances) {
  const std::vector<double> rows{0, 0, 3, 4, 1, 1};
  const std::vector<double> q{0, 0};
  std::vector<double> out(3);
  k::sq_distances(q.data(), rows.data(), 3, 2, out.data());
  EXPECT_EQ(out, (std::vector<double>{0, 25, 2}));
}
