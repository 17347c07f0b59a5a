#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "osad/autograd.hpp"

namespace osad {
namespace {

using testing::gradcheck;
using testing::random_tensor;

class AutogradTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{42};
};

TEST_F(AutogradTest, ElementwiseChainMatchesFiniteDifferences) {
  auto a = ad::parameter(random_tensor({3, 4}, rng));
  auto b = ad::parameter(random_tensor({3, 4}, rng));
  auto f = [&] {
    auto s = ad::sigmoid(ad::mul(a, b));
    auto q = ad::div(ad::square(ad::sub(a, b)), ad::add_scalar(ad::exp(b), 1.0));
    auto r = ad::add(ad::softplus(a), ad::abs(ad::scale(b, 0.5)));
    return ad::sum(ad::add(ad::add(ad::add(s, q), ad::silu(ad::sub(a, b))), ad::log(ad::add_scalar(ad::relu(r), 1.0))));
  };
  auto res = gradcheck(f, {a, b}, 20, 1e-5);
  EXPECT_LT(res.max_rel_error, 1e-6) << res.worst;
}

TEST_F(AutogradTest, MatrixOpsMatchFiniteDifferences) {
  auto x = ad::parameter(random_tensor({5, 3}, rng));
  auto w = ad::parameter(random_tensor({3, 4}, rng));
  auto bias = ad::parameter(random_tensor({4}, rng));
  Tensor m = random_tensor({2, 5}, rng);
  std::vector<std::size_t> idx{0, 3, 1, 2, 3};
  auto f = [&] {
    auto h = ad::linear(x, w, bias);
    auto ls = ad::log_softmax_rows(h);
    auto sm = ad::softmax_rows(ad::matmul(x, w));
    auto g = ad::gather_cols(ls, idx);
    auto mixed = ad::combine_rows(m, h);
    std::vector<ad::Var> parts{h, sm};
    auto cat = ad::concat_cols(parts);
    auto centered = ad::sub_row_broadcast(cat, ad::col_mean(cat));
    auto sc = ad::div_by_scalar(ad::slice_cols(centered, 1, 5), ad::add_scalar(ad::sum(ad::square(bias)), 1.0));
    std::vector<ad::Var> rows{mixed, ad::scale(h, 0.5)};
    auto stacked = ad::concat_rows(rows);
    std::vector<ad::Var> terms{ad::sum(g), ad::sum(ad::square(mixed)), ad::sum(ad::row_sum(ad::square(sc))),
                               ad::mean(ad::slice_rows(h, 1, 2)), ad::sum(ad::square(stacked))};
    std::vector<double> weights{1.0, 0.1, 2.0, -0.5, 0.3};
    return ad::weighted_sum(terms, weights);
  };
  auto res = gradcheck(f, {x, w, bias});
  EXPECT_LT(res.max_rel_error, 1e-6) << res.worst;
}

TEST_F(AutogradTest, ConvolutionMatchesFiniteDifferences) {
  auto x = ad::parameter(random_tensor({2, 3, 6, 6}, rng));
  auto w = ad::parameter(random_tensor({4, 3, 3, 3}, rng, 0.3));
  auto bias = ad::parameter(random_tensor({4}, rng));
  auto att_w = ad::parameter(random_tensor({1, 4, 1, 1}, rng));
  auto f = [&] {
    auto z = ad::relu(ad::conv2d(x, w, bias, 2, 1));
    auto a = ad::sigmoid(ad::conv2d(z, att_w, nullptr, 1, 0));
    auto pooled = ad::spatial_mean(ad::mul_channel_broadcast(a, z));
    auto rest = ad::spatial_mean(ad::mul_channel_broadcast(ad::one_minus(a), z));
    return ad::sum(ad::add(ad::square(pooled), rest));
  };
  auto res = gradcheck(f, {x, w, bias, att_w}, 30, 1e-5);
  EXPECT_LT(res.max_rel_error, 1e-5) << res.worst;
}

TEST_F(AutogradTest, ConstantsReceiveNoGradient) {
  auto p = ad::parameter(Tensor({2}, std::vector<double>{1.0, 2.0}));
  auto c = ad::constant(Tensor({2}, std::vector<double>{3.0, 4.0}));
  auto loss = ad::sum(ad::mul(p, c));
  EXPECT_FALSE(c->requires_grad);
  ad::backward(loss);
  EXPECT_EQ(c->grad.numel(), 0u);
  EXPECT_DOUBLE_EQ(p->grad[0], 3.0);
  EXPECT_DOUBLE_EQ(p->grad[1], 4.0);
}

TEST_F(AutogradTest, DetachCutsTheGraph) {
  auto p = ad::parameter(Tensor({1}, std::vector<double>{2.0}));
  auto loss = ad::sum(ad::mul(ad::detach(ad::square(p)), p));
  ad::backward(loss);
  EXPECT_DOUBLE_EQ(p->grad[0], 4.0);
}

TEST_F(AutogradTest, LeafGradientsAccumulateAcrossPasses) {
  auto p = ad::parameter(Tensor({1}, std::vector<double>{1.5}));
  ad::backward(ad::sum(ad::scale(p, 2.0)));
  ad::backward(ad::sum(ad::scale(p, 3.0)));
  EXPECT_DOUBLE_EQ(p->grad[0], 5.0);
  ad::zero_grad(p);
  EXPECT_DOUBLE_EQ(p->grad[0], 0.0);
}

TEST_F(AutogradTest, ShapeMismatchThrows) {
  auto a = ad::constant(Tensor({2, 3}));
  auto b = ad::constant(Tensor({3, 2}));
  EXPECT_THROW(ad::add(a, b), std::invalid_argument);
  EXPECT_THROW(ad::matmul(a, a), std::invalid_argument);
  EXPECT_THROW(ad::conv2d(ad::constant(Tensor({1, 2, 4, 4})), ad::constant(Tensor({1, 3, 3, 3})), nullptr, 1, 0),
               std::invalid_argument);
}

TEST_F(AutogradTest, ConvolutionMatchesDirectSum) {
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  auto out = ad::conv2d(ad::constant(x), ad::constant(w), nullptr, 2, 1)->value;
  ASSERT_EQ(out.shape, (Shape{1, 3, 3, 3}));
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double s = 0.0;
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
              if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) continue;
              s += x.data[(c * 5 + iy) * 5 + ix] * w.data[((o * 2 + c) * 3 + ky) * 3 + kx];
            }
        EXPECT_NEAR(out.data[(o * 3 + oy) * 3 + ox], s, 1e-12);
      }
}

}  // namespace
}  // namespace osad
