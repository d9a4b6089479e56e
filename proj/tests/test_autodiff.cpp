#include <gtest/gtest.h>

#include <cmath>

#include "normlab/gradient_suite.hpp"

using namespace normlab;

TEST(Backward, SumGivesOnes) {
  Tape<double> t;
  const Var x = t.leaf(Tensor64({2, 3, 1, 1}, {1, -2, 3, 4, 5, -6}));
  const auto g = backward(t, ad::sum(t, x));
  for (double v : g[x].data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquaredNormGivesTwiceInput) {
  Tape<double> t;
  const Tensor64 xv({1, 4, 1, 1}, {0.5, -1.25, 3.0, 1e-3});
  const Var x = t.leaf(xv);
  const auto g = backward(t, ad::sum_squares(t, x));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_LE(std::abs(g[x][i] - 2 * xv[i]), 1e-12 * std::abs(2 * xv[i]));
}

TEST(Backward, DisconnectedParameterGetsExactZero) {
  Tape<double> t;
  const Var a = t.leaf(Tensor64({1, 3, 1, 1}, 1.0));
  const Var b = t.leaf(Tensor64({1, 2, 1, 1}, 7.0));
  const auto g = backward(t, ad::sum_squares(t, a));
  ASSERT_EQ(g[b].shape(), (Shape{1, 2, 1, 1}));
  for (double v : g[b].data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<double> t;
  const Var x = t.leaf(Tensor64({1, 3, 1, 1}, 1.0));
  const Var y = ad::relu(t, x);
  EXPECT_THROW(backward(t, y), rejected_input);
}

TEST(Backward, LinearInSeed) {
  const auto c = gradient_suite()[0].make(3);  // conv2d
  Tape<double> t1, t2;
  std::vector<Var> v1, v2;
  for (const auto& in : c.inputs) {
    v1.push_back(t1.leaf(in));
    v2.push_back(t2.leaf(in));
  }
  const auto g1 = backward(t1, c.build(t1, v1), 1.0);
  const auto g2 = backward(t2, c.build(t2, v2), 2.0);
  for (std::size_t k = 0; k < v1.size(); ++k)
    for (std::size_t i = 0; i < g1[v1[k]].size(); ++i) EXPECT_EQ(g2[v2[k]][i], 2.0 * g1[v1[k]][i]);
}

TEST(Backward, GradientShapesMatchParameters) {
  for (const auto& e : gradient_suite()) {
    const auto c = e.make(1);
    Tape<double> t;
    std::vector<Var> v;
    for (const auto& in : c.inputs) v.push_back(t.leaf(in));
    const auto g = backward(t, c.build(t, v));
    for (std::size_t k = 0; k < v.size(); ++k) {
      EXPECT_EQ(g[v[k]].shape(), c.inputs[k].shape()) << e.name;
      EXPECT_TRUE(g[v[k]].all_finite()) << e.name;
    }
  }
}

TEST(GradCheck, ReluAwayFromKink) {
  const LossBuilder f = [](Tape<double>& t, std::span<const Var> v) { return ad::sum(t, ad::relu(t, v[0])); };
  const auto r = grad_check(f, {Tensor64({1, 1, 1, 1}, 2.0)});
  EXPECT_TRUE(r.passed);
  EXPECT_LE(r.max_rel_error, 1e-9);
  EXPECT_EQ(r.checked, 1u);
}

TEST(GradCheck, SkipsCoordinatesAtKinks) {
  const LossBuilder f = [](Tape<double>& t, std::span<const Var> v) { return ad::sum(t, ad::relu(t, v[0])); };
  const auto r = grad_check(f, {Tensor64({1, 3, 1, 1}, {0.0, 5e-5, 1.0})});
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.skipped, 2u);
  EXPECT_EQ(r.checked, 1u);
}

TEST(GradCheck, SkipsMaxPoolTies) {
  const LossBuilder f = [](Tape<double>& t, std::span<const Var> v) {
    return ad::sum(t, ad::pool(t, v[0], PoolSpec{PoolKind::max, 2, 2, 0}));
  };
  const auto r = grad_check(f, {Tensor64({1, 1, 2, 2}, {1.0, 1.0, 0.0, 0.0})});
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.skipped, 2u);
}

TEST(GradCheck, CatchesAWrongBackwardRule) {
  // y = x^2 recorded with a backward rule that is off by a factor of 3.
  const LossBuilder f = [](Tape<double>& t, std::span<const Var> v) {
    const Var x = v[0];
    Tensor64 y = t.value(x);
    for (auto& e : y.data()) e = e * e;
    const Var out = t.record(std::move(y), [&t, x](const Tensor64& g, GradientSet<double>& gs) {
      Tensor64 gx = t.value(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = 6.0 * gx[i] * g[i];
      gs.accumulate(x, gx);
    });
    return ad::sum(t, out);
  };
  const auto r = grad_check(f, {Tensor64({1, 2, 1, 1}, {0.7, -1.1})});
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 2.0 / 3.0, 1e-6);
  EXPECT_EQ(r.worst_input, 0u);
}

TEST(GradCheck, ReportsNonFiniteGradient) {
  const LossBuilder f = [](Tape<double>& t, std::span<const Var> v) {
    const Var x = v[0];
    Tensor64 y = t.value(x);
    const Var out = t.record(std::move(y), [x](const Tensor64& g, GradientSet<double>& gs) {
      Tensor64 gx(g.shape(), std::numeric_limits<double>::quiet_NaN());
      gs.accumulate(x, gx);
    });
    return ad::sum(t, out);
  };
  const auto r = grad_check(f, {Tensor64({1, 2, 1, 1}, 1.0)});
  EXPECT_FALSE(r.passed);
  EXPECT_FALSE(r.failure.empty());
}

TEST(GradCheck, BatchNormRandomInput) {
  Rng rng(17);
  auto rnd = [&](Shape s) {
    Tensor64 x(s);
    for (auto& v : x.data()) v = rng.uniform(-1, 1);
    return x;
  };
  const Tensor64 r = rnd({4, 3, 2, 2});
  const LossBuilder f = [r](Tape<double>& t, std::span<const Var> v) {
    auto p = BatchNormParams<double>::make(3);
    return ad::project(t, ad::batch_norm(t, v[0], v[1], v[2], p, Mode::train), r);
  };
  const auto rep = grad_check(f, {rnd({4, 3, 2, 2}), rnd({1, 3, 1, 1}), rnd({1, 3, 1, 1})});
  EXPECT_TRUE(rep.passed) << rep.failure;
  EXPECT_LE(rep.max_rel_error, 1e-5);
}

TEST(GradCheck, WeightNormRowThreeFour) {
  // o = 2 * (W x) / ||W|| + 1 with W = [3, 4]; loss = o^2 so dL/dW is non-trivial.
  const LossBuilder f = [](Tape<double>& t, std::span<const Var> v) {
    const Var x = t.leaf(Tensor64({1, 2, 1, 1}, {1.0, -2.0}));
    const Var g = t.leaf(Tensor64({1, 1, 1, 1}, 2.0));
    const Var b = t.leaf(Tensor64({1, 1, 1, 1}, 1.0));
    return ad::sum_squares(t, ad::wn_layer(t, x, v[0], g, b, 0.0, std::nullopt));
  };
  const Tensor64 w({1, 2, 1, 1}, {3.0, 4.0});
  const auto rep = grad_check(f, {w});
  EXPECT_TRUE(rep.passed) << rep.failure;
  EXPECT_LE(rep.max_rel_error, 1e-5);

  // Closed form: u = (w.x)/|w|, du/dw = x/|w| - (w.x) w/|w|^3, o = 2u + 1, dL/dw = 2 o * 2 du/dw.
  Tape<double> t;
  const Var wv = t.leaf(w);
  const auto gs = backward(t, f(t, std::vector<Var>{wv}));
  const double wx = 3.0 * 1.0 + 4.0 * -2.0, nw = 5.0;
  const double o = 2.0 * wx / nw + 1.0;
  const double x[2] = {1.0, -2.0};
  for (std::size_t i = 0; i < 2; ++i) {
    const double du = x[i] / nw - wx * w[i] / (nw * nw * nw);
    EXPECT_NEAR(gs[wv][i], 4.0 * o * du, 1e-12);
  }
}

TEST(GradCheck, WeightNormGradientOrthogonalToRows) {
  // Loss depends on W only through W / ||W|| (eps = 0, gamma absorbs scale).
  Rng rng(5);
  Tensor64 w({4, 3, 3, 3});
  for (auto& v : w.data()) v = rng.normal();
  Tensor64 r({4, 3, 3, 3});
  for (auto& v : r.data()) v = rng.normal();
  Tape<double> t;
  const Var wv = t.leaf(w);
  const auto g = backward(t, ad::project(t, ad::weight_normalize(t, wv, 0.0), r));
  for (std::size_t j = 0; j < 4; ++j) {
    const double d = dot(g[wv].item(j), w.item(j));
    const double scale = std::sqrt(sum_squares(g[wv].item(j)) * sum_squares(w.item(j)));
    EXPECT_LE(std::abs(d), 1e-9 * scale);
  }
}

class LayerGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LayerGradients, PassAtTolerance) {
  const auto entry = gradient_suite().at(GetParam());
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = entry.make(seed);
    const auto rep = grad_check(c.build, c.inputs);
    EXPECT_TRUE(rep.passed) << entry.name << " seed " << seed << ": " << rep.failure;
    EXPECT_LE(rep.max_rel_error, 1e-5) << entry.name << " seed " << seed;
    EXPECT_GT(rep.checked, 0u) << entry.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Suite, LayerGradients, ::testing::Range<std::size_t>(0, gradient_suite().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return gradient_suite()[info.param].name;
                         });

TEST(GradientSuite, CoversEveryLayerOp) {
  std::vector<std::string> names;
  for (const auto& e : gradient_suite()) names.push_back(e.name);
  for (const char* need : {"conv2d", "fully_connected", "relu", "trelu", "max_pool", "avg_pool",
                           "softmax_cross_entropy", "batch_norm_train", "weight_normalize", "wn_layer",
                           "np_layer", "trelu_wn_layer", "last_layer_affine", "dropout_train"})
    EXPECT_NE(std::find(names.begin(), names.end(), need), names.end()) << need;
}
