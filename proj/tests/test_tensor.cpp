#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "oracles.hpp"
#include "pentimento/ops.hpp"

using namespace pentimento;

namespace {

ConvParams<float> random_conv(std::mt19937_64& rng, std::size_t co, std::size_t ci, std::size_t k,
                              Padding padding = Padding::reflect) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ConvParams<float> p{oracle::random_tensor({co, ci, k, k}, rng), std::vector<float>(co), 1, padding};
  for (auto& b : p.bias) b = float(u(rng));
  return p;
}

}  // namespace

TEST(Tensor, LengthMustMatchDims) {
  EXPECT_THROW(Tensor(Dims{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
  Tensor t(Dims{2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  t.at(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t[119], 7.0f);
}

TEST(Conv, IdentityKernelOnOnes) {
  const Tensor x(Dims{1, 1, 3, 3}, 1.0f);
  for (Padding padding : {Padding::zero, Padding::reflect}) {
    const ConvParams<float> p{Tensor(Dims{1, 1, 1, 1}, 1.0f), {0.0f}, 1, padding};
    const Tensor y = conv2d_forward(x, p);
    EXPECT_EQ(y.dims(), x.dims());
    EXPECT_EQ(y, x);
  }
}

TEST(Conv, EvenKernelRejected) {
  const Tensor x(Dims{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const ConvParams<float> p{Tensor(Dims{1, 1, 2, 2}, 1.0f), {0.0f}};
  EXPECT_THROW(conv2d_forward(x, p), ShapeError);
}

TEST(Conv, ChannelMismatchNamesBothShapes) {
  std::mt19937_64 rng(1);
  const Tensor x(Dims{1, 2, 5, 5}, 0.5f);
  const auto p = random_conv(rng, 4, 3, 3);
  try {
    conv2d_forward(x, p);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(x.dims().str()), std::string::npos) << msg;
    EXPECT_NE(msg.find(p.kernel.dims().str()), std::string::npos) << msg;
  }
}

TEST(Conv, ZeroPaddingNeedsInputAtLeastKernel) {
  std::mt19937_64 rng(2);
  const auto p = random_conv(rng, 1, 1, 5, Padding::zero);
  EXPECT_THROW(conv2d_forward(Tensor(Dims{1, 1, 4, 4}, 1.0f), p), ShapeError);
  EXPECT_NO_THROW(conv2d_forward(Tensor(Dims{1, 1, 5, 5}, 1.0f), p));
}

TEST(Conv, NonFiniteInputIsNumericError) {
  std::mt19937_64 rng(3);
  Tensor x(Dims{1, 3, 4, 4}, 0.5f);
  x[5] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(conv2d_forward(x, random_conv(rng, 2, 3, 3)), NumericError);
  x[5] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(conv2d_forward(x, random_conv(rng, 2, 3, 3)), NumericError);
}

TEST(Conv, MatchesDirectLoopOracle) {
  std::mt19937_64 rng(4);
  for (Padding padding : {Padding::reflect, Padding::zero}) {
    const Tensor x = oracle::random_tensor({2, 3, 8, 8}, rng);
    const auto p = random_conv(rng, 4, 3, 3, padding);
    const Tensor y = conv2d_forward(x, p);
    const auto want = oracle::direct_conv(x, p.kernel, p.bias, padding == Padding::reflect);
    EXPECT_LE(oracle::max_rel_err(oracle::doubles(y), want), 1e-5);
  }
}

TEST(Conv, LargerKernelMatchesOracle) {
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({1, 2, 7, 9}, rng);
  const auto p = random_conv(rng, 3, 2, 5);
  EXPECT_LE(oracle::max_rel_err(oracle::doubles(conv2d_forward(x, p)), oracle::direct_conv(x, p.kernel, p.bias, true)),
            1e-5);
}

TEST(ConvBackward, ZeroGradGivesZero) {
  std::mt19937_64 rng(6);
  const auto p = random_conv(rng, 4, 3, 3);
  const Dims in{1, 3, 6, 6};
  const Tensor g = conv2d_backward_input(Tensor(conv2d_output_dims(in, p)), p, in);
  for (float v : g.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ConvBackward, IdentityKernelIsIdentityAdjoint) {
  std::mt19937_64 rng(7);
  const ConvParams<float> p{Tensor(Dims{1, 1, 1, 1}, 1.0f), {0.0f}};
  const Tensor g = oracle::random_tensor({1, 1, 5, 4}, rng);
  EXPECT_EQ(conv2d_backward_input(g, p, g.dims()), g);
}

TEST(ConvBackward, AdjointIdentity) {
  std::mt19937_64 rng(8);
  for (Padding padding : {Padding::reflect, Padding::zero}) {
    auto p = random_conv(rng, 4, 3, 3, padding);
    std::fill(p.bias.begin(), p.bias.end(), 0.0f);
    const Tensor x = oracle::random_tensor({2, 3, 7, 6}, rng);
    const Tensor y = oracle::random_tensor(conv2d_output_dims(x.dims(), p), rng);
    const double lhs = dot(conv2d_forward(x, p), y);
    const double rhs = dot(x, conv2d_backward_input(y, p, x.dims()));
    EXPECT_LE(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-12), 1e-5);
  }
}

TEST(ConvBackward, LinearInGradOut) {
  std::mt19937_64 rng(9);
  const auto pf = random_conv(rng, 4, 3, 3);
  const auto p = pf.cast<double>();
  const Dims in{1, 3, 6, 6};
  const Dims out = conv2d_output_dims(in, p);
  const auto g1 = oracle::random_tensor(out, rng).cast<double>(), g2 = oracle::random_tensor(out, rng).cast<double>();
  const double a = 0.7, b = -1.3;
  BasicTensor<double> mix(out);
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * g1[i] + b * g2[i];
  const auto lhs = conv2d_backward_input(mix, p, in);
  const auto r1 = conv2d_backward_input(g1, p, in), r2 = conv2d_backward_input(g2, p, in);
  std::vector<double> got(lhs.vec()), rhs(lhs.size());
  for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * r1[i] + b * r2[i];
  EXPECT_LE(oracle::max_rel_err(got, rhs), 1e-6);

  // Single precision: relative to the largest component.
  const Tensor f1 = g1.cast<float>(), f2 = g2.cast<float>(), fmix = mix.cast<float>();
  const Tensor flhs = conv2d_backward_input(fmix, pf, in);
  const Tensor fr1 = conv2d_backward_input(f1, pf, in), fr2 = conv2d_backward_input(f2, pf, in);
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < flhs.size(); ++i) {
    const double want = a * fr1[i] + b * fr2[i];
    scale = std::max(scale, std::abs(want));
    worst = std::max(worst, std::abs(flhs[i] - want));
  }
  EXPECT_LE(worst / scale, 1e-6);
}

TEST(ConvBackward, WrongGradDimsRejected) {
  std::mt19937_64 rng(10);
  const auto p = random_conv(rng, 4, 3, 3);
  EXPECT_THROW(conv2d_backward_input(Tensor(Dims{1, 3, 6, 6}), p, Dims{1, 3, 6, 6}), ShapeError);
}

TEST(Pool, ConstantStaysConstant) {
  const Tensor y = avg_pool_forward(Tensor(Dims{1, 2, 4, 6}, 0.3f), 2, 2);
  EXPECT_EQ(y.dims(), (Dims{1, 2, 2, 3}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.3f);
}

TEST(Pool, ArithmeticMean) {
  const Tensor y = avg_pool_forward(Tensor(Dims{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}), 2, 2);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_EQ(y[0], 2.5f);
}

TEST(Pool, MassConservation) {
  std::mt19937_64 rng(11);
  const Tensor x = oracle::random_tensor({2, 3, 8, 10}, rng);
  const Tensor y = avg_pool_forward(x, 2, 2);
  double sx = 0.0, sy = 0.0;
  for (float v : x.data()) sx += v;
  for (float v : y.data()) sy += v;
  EXPECT_LE(std::abs(sy * 4.0 - sx) / std::abs(sx), 1e-6);
}

TEST(Pool, BackwardSpreadsUniformly) {
  const Tensor g(Dims{1, 1, 1, 1}, 8.0f);
  const Tensor gi = avg_pool_backward(g, Dims{1, 1, 2, 2}, 2, 2);
  for (float v : gi.data()) EXPECT_EQ(v, 2.0f);
}

TEST(Pool, IndivisibleRejected) {
  EXPECT_THROW(avg_pool_forward(Tensor(Dims{1, 1, 3, 4}), 2, 2), ShapeError);
}

TEST(Relu, Forward) {
  const Tensor x(Dims{1, 1, 1, 3}, std::vector<float>{-1, 0, 2});
  EXPECT_EQ(relu_forward(x).vec(), (std::vector<float>{0, 0, 2}));
  const Tensor pos(Dims{1, 2, 2, 2}, 0.25f);
  EXPECT_EQ(relu_forward(pos), pos);
}

TEST(Relu, SubgradientZeroAtZero) {
  const Tensor x(Dims{1, 1, 1, 3}, std::vector<float>{-1, 0, 2});
  const Tensor g(Dims{1, 1, 1, 3}, 5.0f);
  EXPECT_EQ(relu_backward(g, x).vec(), (std::vector<float>{0, 0, 5}));
}

TEST(Parallel, MatchesAcrossRepeatedCalls) {
  std::mt19937_64 rng(12);
  const Tensor x = oracle::random_tensor({1, 16, 32, 32}, rng);
  const auto p = random_conv(rng, 32, 16, 3);
  EXPECT_EQ(conv2d_forward(x, p), conv2d_forward(x, p));
}
