#include <gtest/gtest.h>

#include <cmath>

#include "normlab/optim.hpp"

using namespace normlab;

TEST(Schedule, Endpoints) {
  for (auto kind : {DecayKind::linear, DecayKind::poly2}) {
    const Schedule s{kind, 0.01, 1e-5, 1000};
    EXPECT_NEAR(lr_at(s, 0), 0.01, 1e-12);
    EXPECT_NEAR(lr_at(s, 1000), 1e-5, 1e-12);
    EXPECT_EQ(lr_at(s, 1000), 1e-5);
    EXPECT_EQ(lr_at(s, 5000), 1e-5);
  }
}

TEST(Schedule, Poly2Midpoint) {
  const Schedule s{DecayKind::poly2, 0.01, 1e-5, 1000};
  EXPECT_NEAR(lr_at(s, 500), 0.0025075, 1e-12);
  EXPECT_NEAR(lr_at({DecayKind::linear, 0.01, 1e-5, 1000}, 500), 1e-5 + 0.00999 * 0.5, 1e-12);
}

TEST(Schedule, MonotoneAndPoly2BelowLinear) {
  const Schedule lin{DecayKind::linear, 0.1, 1e-4, 257};
  const Schedule p2{DecayKind::poly2, 0.1, 1e-4, 257};
  for (std::size_t t = 1; t <= 257; ++t) {
    EXPECT_LE(lr_at(lin, t), lr_at(lin, t - 1));
    EXPECT_LE(lr_at(p2, t), lr_at(p2, t - 1));
    if (t < 257) EXPECT_LT(lr_at(p2, t), lr_at(lin, t));
  }
}

TEST(Schedule, ParseNames) {
  EXPECT_EQ(parse_decay("linear"), DecayKind::linear);
  EXPECT_EQ(parse_decay("poly2"), DecayKind::poly2);
  EXPECT_THROW(parse_decay("cosine"), rejected_input);
}

namespace {

struct One {
  Tensor64 p, g;
  OptState<double> st;
  One(double p0, double mu, double wd) : p({1, 1, 1, 1}, p0), g({1, 1, 1, 1}, 0.0), st{mu, wd, {}} {}
  StepStatus step(double grad, double lr, bool decay = true) {
    g[0] = grad;
    std::vector<ParamRef<double>> refs{{&p, &g, decay}};
    return sgd_momentum_step<double>(refs, st, lr);
  }
};

}  // namespace

TEST(Sgd, NullStep) {
  One o(1.5, 0.9, 0.0);
  EXPECT_TRUE(o.step(0.0, 0.1).applied);
  EXPECT_EQ(o.p[0], 1.5);
}

TEST(Sgd, HandEvaluatedSteps) {
  One o(1.0, 0.9, 0.0);
  o.step(0.1, 0.1);
  EXPECT_NEAR(o.st.velocity[0][0], 0.1, 1e-15);
  EXPECT_NEAR(o.p[0], 0.99, 1e-15);
  o.step(0.1, 0.1);
  EXPECT_NEAR(o.st.velocity[0][0], 0.19, 1e-15);
  EXPECT_NEAR(o.p[0], 0.971, 1e-15);
}

TEST(Sgd, ZeroMomentumIsPlainGradientDescent) {
  One o(2.0, 0.0, 0.0);
  double p = 2.0;
  for (double g : {0.3, -1.2, 0.7, 0.01}) {
    o.step(g, 0.05);
    p -= 0.05 * g;
    EXPECT_EQ(o.p[0], p);
  }
}

TEST(Sgd, WeightDecayShrinksMonotonically) {
  One o(3.0, 0.9, 0.01);
  double prev = 3.0;
  for (int i = 0; i < 50; ++i) {
    o.step(0.0, 0.1);
    EXPECT_LT(std::abs(o.p[0]), prev);
    prev = std::abs(o.p[0]);
  }
}

TEST(Sgd, WeightDecaySkipsNonDecayParameters) {
  Tensor64 w({1, 2, 1, 1}, 1.0), gamma({1, 2, 1, 1}, 1.0), gw({1, 2, 1, 1}, 0.0), gg({1, 2, 1, 1}, 0.0);
  OptState<double> st{0.0, 0.5, {}};
  std::vector<ParamRef<double>> refs{{&w, &gw, true}, {&gamma, &gg, false}};
  sgd_momentum_step<double>(refs, st, 0.1);
  EXPECT_NEAR(w[0], 1.0 - 0.1 * 0.5, 1e-15);
  EXPECT_EQ(gamma[0], 1.0);
}

TEST(Sgd, NonFiniteGradientAbortsWholeStep) {
  Tensor64 a({1, 1, 1, 1}, 1.0), b({1, 1, 1, 1}, 1.0), ga({1, 1, 1, 1}, 0.5),
      gb({1, 1, 1, 1}, std::numeric_limits<double>::infinity());
  OptState<double> st{0.9, 0.0, {}};
  std::vector<ParamRef<double>> refs{{&a, &ga, true}, {&b, &gb, true}};
  const auto s = sgd_momentum_step<double>(refs, st, 0.1);
  EXPECT_FALSE(s.applied);
  EXPECT_TRUE(s.non_finite_gradient);
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(b[0], 1.0);
}

TEST(Sgd, RejectsShapeMismatchAndBadMomentum) {
  Tensor64 a({1, 2, 1, 1}), g({1, 3, 1, 1});
  OptState<double> st{0.9, 0.0, {}};
  std::vector<ParamRef<double>> refs{{&a, &g, true}};
  EXPECT_THROW(sgd_momentum_step<double>(refs, st, 0.1), rejected_input);
  Tensor64 g2({1, 2, 1, 1});
  std::vector<ParamRef<double>> ok{{&a, &g2, true}};
  OptState<double> bad{1.0, 0.0, {}};
  EXPECT_THROW(sgd_momentum_step<double>(ok, bad, 0.1), rejected_input);
}
