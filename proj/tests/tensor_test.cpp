#include <cmath>

#include "cogs/error.hpp"
#include "support.hpp"

using namespace cogs;
using namespace cogs::ag;
using cogs::testing::finite_difference;
using cogs::testing::random_tensor;

TEST(Tensor, FromChecksElementCount) {
  EXPECT_THROW(Tensor::from({2, 3}, std::vector<double>(5)), Error);
  Tensor t = Tensor::from({2, 3}, std::vector<double>(6, 1.5));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3);
}

TEST(Tensor, MatmulMatchesHandProduct) {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(matmul(a, b).values(), (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(matmul(a, b, true, false).values(), (std::vector<double>{26, 30, 38, 44}));
  EXPECT_EQ(matmul(a, b, false, true).values(), (std::vector<double>{17, 23, 39, 53}));
}

TEST(Tensor, NoGradBuildsNoGraph) {
  Rng rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  NoGradGuard guard;
  Tensor y = tanh(x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Tensor, CrossEntropyUniformLogitsIsLogK) {
  Tensor logits = Tensor::zeros({5, 7});
  std::vector<int32_t> targets{0, 1, 2, 3, 6};
  EXPECT_NEAR(cross_entropy(logits, targets).item(), std::log(7.0), 1e-14);
}

TEST(Tensor, CrossEntropyExcludesDiagonal) {
  Tensor logits = Tensor::from({3, 3}, {100, 0, 0, 0, 100, 0, 0, 0, 100});
  std::vector<int32_t> targets{1, 2, 0};
  EXPECT_NEAR(cross_entropy(logits, targets, true).item(), std::log(2.0), 1e-12);
}

TEST(Tensor, GaussianKlStandardNormalIsZero) {
  Tensor mu = Tensor::zeros({2, 3}), ls = Tensor::zeros({2, 3});
  EXPECT_EQ(gaussian_kl(mu, ls).item(), 0.0);
}

TEST(Tensor, StopGradientBlocksFlow) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor y = sum(mul(x, stop_gradient(x)));
  y.backward();
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 2.0);
}

TEST(Tensor, AttentionIsCausalAfterPrefix) {
  Rng rng(3);
  const int seq = 6, d = 8, prefix = 2;
  Tensor qkv = random_tensor({seq, 3 * d}, rng, 1.0, false);
  std::vector<double> base = attention(qkv, 1, seq, 2, prefix).values();
  // Changing row 4 may only affect rows >= 4.
  std::vector<double> v = qkv.values();
  for (int c = 0; c < 3 * d; ++c) v[4 * 3 * d + c] += 0.7;
  std::vector<double> moved = attention(Tensor::from({seq, 3 * d}, v), 1, seq, 2, prefix).values();
  for (int r = 0; r < seq; ++r)
    for (int c = 0; c < d; ++c) {
      const bool same = base[r * d + c] == moved[r * d + c];
      if (r < 4) EXPECT_TRUE(same) << "row " << r;
    }
}

struct OpCase {
  const char* name;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
  std::vector<Shape> shapes;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  Rng rng(11);
  std::vector<Tensor> in;
  for (const Shape& s : c.shapes) in.push_back(random_tensor(s, rng, 0.6));
  auto r = finite_difference([&] { return c.fn(in); }, in, 1e-6);
  EXPECT_LT(r.rel_error, 1e-6) << c.name;
  EXPECT_GT(r.analytic_norm, 0.0);
}

Tensor weighted_sum(const Tensor& t) {
  std::vector<double> w(t.numel());
  for (size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + double(i));
  return sum(mul(t, Tensor::from(t.shape(), w)));
}

INSTANTIATE_TEST_SUITE_P(
    Ops, OpGradient,
    ::testing::Values(
        OpCase{"matmul", [](auto& v) { return weighted_sum(matmul(v[0], v[1], true, true)); }, {{4, 3}, {5, 4}}},
        OpCase{"linear_gelu", [](auto& v) { return weighted_sum(gelu(linear(v[0], v[1], v[2]))); },
               {{3, 4}, {4, 5}, {5}}},
        OpCase{"silu_sigmoid", [](auto& v) { return weighted_sum(mul(silu(v[0]), sigmoid(v[1]))); }, {{6}, {6}}},
        OpCase{"exp_log", [](auto& v) { return weighted_sum(log(add_scalar(exp(v[0]), 1.0))); }, {{7}}},
        OpCase{"layer_norm",
               [](auto& v) { return weighted_sum(layer_norm(v[0], v[1], v[2])); }, {{3, 6}, {6}, {6}}},
        OpCase{"softmax", [](auto& v) { return weighted_sum(softmax_rows(v[0])); }, {{3, 5}}},
        OpCase{"cross_entropy",
               [](auto& v) {
                 const int32_t t[] = {1, 0, 3};
                 return cross_entropy(v[0], t);
               },
               {{3, 4}}},
        OpCase{"cross_entropy_diag",
               [](auto& v) {
                 const int32_t t[] = {1, 0, 3, 2};
                 return cross_entropy(v[0], t, true);
               },
               {{4, 4}}},
        OpCase{"attention",
               [](auto& v) { return weighted_sum(attention(v[0], 2, 4, 2, 1)); }, {{8, 12}}},
        OpCase{"conv2d_s2",
               [](auto& v) { return weighted_sum(conv2d(v[0], v[1], v[2], 2, 1)); },
               {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}},
        OpCase{"upsample_cells",
               [](auto& v) { return weighted_sum(nchw_to_cells(upsample2x(v[0]))); }, {{1, 2, 3, 3}}},
        OpCase{"channel_stats",
               [](auto& v) { return weighted_sum(channel_mean_std(v[0])); }, {{2, 3, 4, 4}}},
        OpCase{"region_mean", [](auto& v) { return weighted_sum(region_mean(v[0], 2)); }, {{1, 2, 4, 4}}},
        OpCase{"soft_histogram",
               [](auto& v) { return weighted_sum(soft_histogram(sigmoid(v[0]), 4, 0.25)); }, {{1, 1, 3, 3}}},
        OpCase{"l2_normalize", [](auto& v) { return weighted_sum(l2_normalize_rows(v[0])); }, {{3, 4}}},
        OpCase{"gaussian_kl", [](auto& v) { return gaussian_kl(v[0], v[1]); }, {{2, 3}, {2, 3}}},
        OpCase{"gather_concat",
               [](auto& v) {
                 const int32_t ids[] = {2, 0, 2};
                 return weighted_sum(concat_cols({gather_rows(v[0], ids), slice_rows(v[1], 1, 3)}));
               },
               {{3, 2}, {4, 3}}}),
    [](const auto& info) { return std::string(info.param.name); });
