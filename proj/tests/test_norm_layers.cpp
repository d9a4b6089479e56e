#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "normlab/norm_layers.hpp"
#include "normlab/random.hpp"

using namespace normlab;

namespace {

Tensor64 normal_tensor(std::uint64_t seed, Shape s, double mu = 0.0, double sigma = 1.0) {
  Rng rng(seed);
  Tensor64 t(s);
  for (auto& v : t.data()) v = mu + sigma * rng.normal();
  return t;
}

std::vector<double> values(const Tensor64& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(BatchNorm, ConstantChannelMapsToZero) {
  auto p = BatchNormParams<double>::make(1, 1e-5);
  const auto r = batch_norm_forward(Tensor64({4, 1, 2, 2}, 2.0), p, Mode::train);
  for (double v : r.out.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, HandEvaluatedThreeValues) {
  auto p = BatchNormParams<double>::make(1, 0.0);
  const auto r = batch_norm_forward(Tensor64({3, 1, 1, 1}, {1, 2, 3}), p, Mode::train);
  EXPECT_NEAR(r.batch_var[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.out[0], -1.224745, 1e-6);
  EXPECT_NEAR(r.out[1], 0.0, 1e-15);
  EXPECT_NEAR(r.out[2], 1.224745, 1e-6);
  EXPECT_NEAR(r.out[2], std::sqrt(1.5), 1e-15);
}

TEST(BatchNorm, OutputNormIsSqrtD) {
  auto p = BatchNormParams<double>::make(2, 1e-14);
  const auto r = batch_norm_forward(normal_tensor(3, {4, 2, 1, 1}, 0.5, 3.0), p, Mode::train);
  EXPECT_NEAR(l2_norm(r.out), std::sqrt(8.0), 1e-6);
  EXPECT_NEAR(l2_norm(r.out), 2.828427, 1e-6);
}

TEST(BatchNorm, ExplicitNormalizationExactness) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = BatchNormParams<double>::make(4, 1e-12);
    const auto x = normal_tensor(seed, {8, 4, 5, 5}, 3.0, 2.5);
    const auto r = batch_norm_forward(x, p, Mode::train);
    for (std::size_t c = 0; c < 4; ++c) {
      double mean = 0.0, sq = 0.0;
      for (std::size_t n = 0; n < 8; ++n)
        for (std::size_t i = 0; i < 25; ++i) mean += r.out.at(n, c, i / 5, i % 5);
      mean /= 200.0;
      for (std::size_t n = 0; n < 8; ++n)
        for (std::size_t i = 0; i < 25; ++i) sq += std::pow(r.out.at(n, c, i / 5, i % 5) - mean, 2);
      EXPECT_LE(std::abs(mean), 1e-9);
      EXPECT_NEAR(sq / 200.0, 1.0, 1e-6);
    }
    EXPECT_NEAR(l2_norm(r.out) / std::sqrt(static_cast<double>(x.size())), 1.0, 1e-6);
  }
}

TEST(BatchNorm, RejectsSinglePixelBatchInTrainMode) {
  auto p = BatchNormParams<double>::make(3);
  EXPECT_THROW(batch_norm_forward(Tensor64({1, 3, 1, 1}), p, Mode::train), rejected_input);
  EXPECT_NO_THROW(batch_norm_forward(Tensor64({1, 3, 1, 1}), p, Mode::infer));
  EXPECT_NO_THROW(batch_norm_forward(Tensor64({1, 3, 1, 2}, {1, 2, 3, 4, 5, 6}), p, Mode::train));
}

TEST(BatchNorm, RunningStatisticsUpdate) {
  auto p = BatchNormParams<double>::make(1);
  EXPECT_EQ(p.rho, 0.99);
  EXPECT_EQ(p.running_mean[0], 0.0);
  EXPECT_EQ(p.running_var[0], 1.0);
  batch_norm_forward(Tensor64({2, 1, 1, 1}, {1.0, 3.0}), p, Mode::train);  // mean 2, var 1
  EXPECT_NEAR(p.running_mean[0], 0.01 * 2.0, 1e-15);
  EXPECT_NEAR(p.running_var[0], 0.99 * 1.0 + 0.01 * 1.0, 1e-15);
  const auto before = p.running_mean;
  batch_norm_forward(Tensor64({2, 1, 1, 1}, {5.0, 9.0}), p, Mode::infer);
  EXPECT_EQ(p.running_mean, before);
}

TEST(BatchNorm, InferModeUsesRunningStatistics) {
  auto p = BatchNormParams<double>::make(1, 0.0);
  p.running_mean[0] = 1.0;
  p.running_var[0] = 4.0;
  p.gamma[0] = 3.0;
  p.beta[0] = -1.0;
  const auto r = batch_norm_forward(Tensor64({1, 1, 1, 2}, {1.0, 5.0}), p, Mode::infer);
  EXPECT_DOUBLE_EQ(r.out[0], -1.0);
  EXPECT_DOUBLE_EQ(r.out[1], 3.0 * 2.0 - 1.0);
}

TEST(BatchNorm, TrainInferConsistencyOnStationaryInput) {
  // The running mean keeps rho^500 ~ 0.0066 of its zero start, i.e. a
  // residual gap of 0.0066 |mu| / sd, so the input is kept within |mu| / sd <= 1.
  auto p = BatchNormParams<double>::make(2);
  Rng rng(21);
  const double mu[2] = {1.5, -0.5}, sd[2] = {2.0, 0.5};
  auto batch = [&](std::size_t m) {
    Tensor64 x({m, 2, 2, 2});
    for (std::size_t n = 0; n < m; ++n)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < 4; ++i) x.at(n, c, i / 2, i % 2) = mu[c] + sd[c] * rng.normal();
    return x;
  };
  for (int b = 0; b < 500; ++b) batch_norm_forward(batch(64), p, Mode::train);
  const auto x = batch(8192);
  auto q = p;
  const auto tr = batch_norm_forward(x, q, Mode::train);
  const auto in = batch_norm_forward(x, p, Mode::infer);
  for (std::size_t c = 0; c < 2; ++c) {
    double mt = 0.0, mi = 0.0, vt = 0.0, vi = 0.0;
    const double cnt = 8192.0 * 4.0;
    for (std::size_t n = 0; n < 8192; ++n)
      for (std::size_t i = 0; i < 4; ++i) {
        mt += tr.out.at(n, c, i / 2, i % 2);
        mi += in.out.at(n, c, i / 2, i % 2);
      }
    mt /= cnt;
    mi /= cnt;
    for (std::size_t n = 0; n < 8192; ++n)
      for (std::size_t i = 0; i < 4; ++i) {
        vt += std::pow(tr.out.at(n, c, i / 2, i % 2) - mt, 2);
        vi += std::pow(in.out.at(n, c, i / 2, i % 2) - mi, 2);
      }
    EXPECT_LE(std::abs(mt - mi), 0.02) << "channel " << c;
    EXPECT_LE(std::abs(vt / cnt - vi / cnt), 0.05) << "channel " << c;
  }
}

TEST(WeightNormalize, Examples) {
  const Tensor64 unit({1, 2, 1, 1}, {0.6, 0.8});
  EXPECT_EQ(values(weight_normalize(unit, 0.0)), values(unit));
  const auto w = weight_normalize(Tensor64({1, 2, 1, 1}, {3, 4}), 0.0);
  EXPECT_DOUBLE_EQ(w[0], 0.6);
  EXPECT_DOUBLE_EQ(w[1], 0.8);
  const auto x = normal_tensor(2, {3, 2, 3, 3});
  const auto a = weight_normalize(x, 0.0);
  const auto b = weight_normalize(scale(x, 7.5), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(sum_squares(a.item(j)), 1.0, 1e-14);
}

TEST(WeightNormalize, ZeroRow) {
  Tensor64 w({2, 2, 1, 1}, {0, 0, 1, 1});
  EXPECT_THROW(weight_normalize(w, 0.0), rejected_input);
  const auto g = weight_normalize(w, 1e-6);
  EXPECT_EQ(g[0], 0.0);
  EXPECT_NEAR(g[2], 1.0 / (std::sqrt(2.0) + 1e-6), 1e-15);
}

TEST(WnLayer, ReducesToPlainConvForUnitWeights) {
  const auto spec = ConvSpec::square(3, 2, 3, 1, 1);
  const auto w = weight_normalize(normal_tensor(4, spec.kernel_shape()), 0.0);
  const auto x = normal_tensor(5, {2, 2, 4, 4});
  const auto p = WeightNormParams<double>::make(w, spec, true, true, 0.0);
  const auto a = wn_layer_forward(x, p);
  const auto b = conv2d(x, spec, w);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(WnLayer, HandEvaluatedRow) {
  auto p = WeightNormParams<double>::make(Tensor64({1, 2, 1, 1}, {3, 4}), std::nullopt, true, true, 0.0);
  p.gamma[0] = 2.0;
  p.beta[0] = 1.0;
  EXPECT_NEAR(wn_layer_forward(Tensor64({1, 2, 1, 1}, {1, 1}), p)[0], 3.8, 1e-15);
}

TEST(WnLayer, ImplicitNormalizationScaleInvariance) {
  const auto spec = ConvSpec::square(4, 3, 3, 1, 1);
  const auto w = normal_tensor(6, spec.kernel_shape());
  const auto x = normal_tensor(7, {2, 3, 5, 5});
  auto p = WeightNormParams<double>::make(w, spec, true, true, 0.0);
  p.gamma = normal_tensor(8, {1, 4, 1, 1});
  p.beta = normal_tensor(9, {1, 4, 1, 1});
  const auto a = wn_layer_forward(x, p);
  for (double c : {10.0, 0.125, 3.7e3}) {
    auto q = p;
    q.direction = scale(w, c);
    const auto b = wn_layer_forward(x, q);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(std::abs(a[i] - b[i]), 1e-12 * std::max(1.0, std::abs(a[i])));
  }
}

TEST(NPConstants, ClosedForms) {
  const NPConstants k;
  EXPECT_NEAR(k.c_var, 1.712859, 1e-6);
  EXPECT_NEAR(k.c_mean, 0.398942, 1e-6);
  EXPECT_NEAR(k.c_var, 1.0 / std::sqrt(0.5 * (1.0 - 1.0 / std::numbers::pi)), 1e-12);
  EXPECT_NEAR(k.c_mean, 1.0 / std::sqrt(2.0 * std::numbers::pi), 1e-12);
}

TEST(NpLayer, FixedPointsOfRenormalization) {
  // Identity direction so the pre-activation equals the input.
  const auto p = WeightNormParams<double>::make(Tensor64({1, 1, 1, 1}, 1.0), std::nullopt, true, true, 0.0);
  const NPConstants k;
  EXPECT_NEAR(np_layer_forward(Tensor64({1, 1, 1, 1}, 0.0), p)[0], -0.683332, 1e-6);
  EXPECT_NEAR(np_layer_forward(Tensor64({1, 1, 1, 1}, 0.0), p)[0], -k.c_var * k.c_mean, 1e-15);
  EXPECT_EQ(np_layer_forward(Tensor64({1, 1, 1, 1}, k.c_mean), p)[0], 0.0);
}

TEST(NpLayer, GaussianInputGivesStandardizedOutput) {
  const auto p = WeightNormParams<double>::make(Tensor64({1, 1, 1, 1}, 1.0), std::nullopt, true, true, 0.0);
  const auto o = np_layer_forward(normal_tensor(31, {1000000, 1, 1, 1}), p);
  double mean = 0.0;
  for (double v : o.data()) mean += v;
  mean /= 1e6;
  double var = 0.0;
  for (double v : o.data()) var += (v - mean) * (v - mean);
  var /= 1e6;
  EXPECT_LE(std::abs(mean), 0.005);
  EXPECT_NEAR(var, 1.0, 0.01);
}

TEST(TReluWnLayer, Examples) {
  // WN of a single positive weight is 1, so the pre-activation equals the input.
  const auto p = WeightNormParams<double>::make(Tensor64({1, 1, 1, 1}, 2.0), std::nullopt, false, false, 0.0);
  TReLUParams<double> t = TReLUParams<double>::make(1);
  t.alpha[0] = -1.0;
  EXPECT_DOUBLE_EQ(trelu_wn_layer_forward(Tensor64({1, 1, 1, 1}, -0.5), p, t)[0], -0.5);
  EXPECT_DOUBLE_EQ(trelu_wn_layer_forward(Tensor64({1, 1, 1, 1}, -2.0), p, t)[0], -1.0);

  const auto spec = ConvSpec::square(3, 2, 3, 1, 1);
  const auto q = WeightNormParams<double>::make(normal_tensor(1, spec.kernel_shape()), spec, false, false);
  const auto x = normal_tensor(2, {2, 2, 4, 4});
  const auto zero = TReLUParams<double>::make(3);
  EXPECT_EQ(trelu_wn_layer_forward(x, q, zero), relu(conv2d(x, spec, weight_normalize(q.direction, q.eps))));
}

TEST(TReluWnLayer, OutputBoundedByAlpha) {
  const auto spec = ConvSpec::square(4, 3, 3, 1, 1);
  const auto q = WeightNormParams<double>::make(normal_tensor(3, spec.kernel_shape()), spec, false, false);
  TReLUParams<double> t = TReLUParams<double>::make(4);
  const double alpha[4] = {-0.4, 0.1, 0.0, 0.9};
  for (std::size_t c = 0; c < 4; ++c) t.alpha[c] = alpha[c];
  const auto y = trelu_wn_layer_forward(normal_tensor(4, {3, 3, 5, 5}), q, t);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 25; ++i) EXPECT_GE(y.at(n, c, i / 5, i % 5), alpha[c]);
}

TEST(LastLayerAffine, Examples) {
  const auto x = normal_tensor(5, {2, 3, 2, 2});
  EXPECT_EQ(last_layer_affine(x, Tensor64({1, 3, 1, 1}, 1.0), Tensor64({1, 3, 1, 1}, 0.0)), x);
  EXPECT_EQ(last_layer_affine(Tensor64({1, 1, 1, 1}, 3.0), Tensor64({1, 1, 1, 1}, 2.0), Tensor64({1, 1, 1, 1}, -1.0))[0],
            5.0);
  const Tensor64 beta({1, 3, 1, 1}, {0.5, -2.0, 7.0});
  const auto y = last_layer_affine(x, Tensor64({1, 3, 1, 1}, 0.0), beta);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.at(n, c, i / 2, i % 2), beta[c]);
}

TEST(Dropout, IdentityCases) {
  const auto x = normal_tensor(6, {4, 3, 2, 2});
  EXPECT_EQ(dropout(x, 0.0, Mode::train, 1), x);
  EXPECT_EQ(dropout(x, 0.0, Mode::infer, 1), x);
  EXPECT_EQ(dropout(x, 0.7, Mode::infer, 1), x);
}

TEST(Dropout, InvertedScalingIsUnbiased) {
  const auto y = dropout(Tensor64({1000000, 1, 1, 1}, 1.0), 0.5, Mode::train, 99);
  double mean = 0.0;
  std::size_t zeros = 0;
  for (double v : y.data()) {
    mean += v;
    if (v == 0.0) ++zeros;
    else EXPECT_EQ(v, 2.0);
  }
  mean /= 1e6;
  EXPECT_GE(mean, 0.997);
  EXPECT_LE(mean, 1.003);
  EXPECT_GT(zeros, 0u);
}

TEST(Dropout, MaskFixedBySeed) {
  const auto x = normal_tensor(7, {8, 8, 1, 1});
  EXPECT_EQ(dropout(x, 0.3, Mode::train, 5), dropout(x, 0.3, Mode::train, 5));
  EXPECT_FALSE(dropout(x, 0.3, Mode::train, 5) == dropout(x, 0.3, Mode::train, 6));
}

TEST(Dropout, RejectsRateOfOne) {
  const Tensor64 x({1, 1, 1, 1}, 1.0);
  EXPECT_THROW(dropout(x, 1.0, Mode::train, 1), rejected_input);
  EXPECT_THROW(dropout(x, 1.5, Mode::infer, 1), rejected_input);
  EXPECT_THROW(dropout(x, -0.1, Mode::train, 1), rejected_input);
}
