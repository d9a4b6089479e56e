#pragma once

// The layer gradient certification suite: every differentiable layer op,
// checked against central differences on random inputs.

#include <functional>
#include <string>
#include <vector>

#include "normlab/gradcheck.hpp"
#include "normlab/random.hpp"

namespace normlab {

struct GradCase {
  std::vector<Tensor64> inputs;
  LossBuilder build;
};

struct GradSuiteEntry {
  std::string name;
  std::function<GradCase(std::uint64_t seed)> make;
};

namespace detail {

inline Tensor64 random_tensor(Rng& rng, const Shape& s, double lo = -1.0, double hi = 1.0) {
  Tensor64 t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Wraps a tensor-valued op into the scalar <op(inputs), R> with fixed R.
inline LossBuilder projected(std::function<Var(Tape<double>&, std::span<const Var>)> op,
                             Shape out_shape, Rng& rng) {
  Tensor64 r = random_tensor(rng, out_shape);
  return [op = std::move(op), r = std::move(r)](Tape<double>& t, std::span<const Var> v) {
    return ad::project(t, op(t, v), r);
  };
}

}  // namespace detail

inline std::vector<GradSuiteEntry> gradient_suite() {
  using detail::projected;
  using detail::random_tensor;
  std::vector<GradSuiteEntry> suite;

  suite.push_back({"conv2d", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto spec = ConvSpec::square(4, 3, 3, 1, 1);
                     GradCase c{{random_tensor(rng, {2, 3, 5, 5}), random_tensor(rng, spec.kernel_shape())}, {}};
                     c.build = projected([spec](Tape<double>& t, std::span<const Var> v) {
                       return ad::conv2d(t, v[0], v[1], spec);
                     }, spec.output_shape(c.inputs[0].shape()), rng);
                     return c;
                   }});
  suite.push_back({"conv2d_strided", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto spec = ConvSpec::square(3, 2, 3, 2, 0);
                     GradCase c{{random_tensor(rng, {2, 2, 7, 7}), random_tensor(rng, spec.kernel_shape())}, {}};
                     c.build = projected([spec](Tape<double>& t, std::span<const Var> v) {
                       return ad::conv2d(t, v[0], v[1], spec);
                     }, spec.output_shape(c.inputs[0].shape()), rng);
                     return c;
                   }});
  suite.push_back({"fully_connected", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {3, 6, 1, 1}), random_tensor(rng, {4, 6, 1, 1})}, {}};
                     c.build = projected([](Tape<double>& t, std::span<const Var> v) {
                       return ad::fully_connected(t, v[0], v[1]);
                     }, {3, 4, 1, 1}, rng);
                     return c;
                   }});
  suite.push_back({"relu", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {2, 3, 4, 4})}, {}};
                     c.build = projected([](Tape<double>& t, std::span<const Var> v) {
                       return ad::relu(t, v[0]);
                     }, {2, 3, 4, 4}, rng);
                     return c;
                   }});
  suite.push_back({"trelu", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {2, 3, 4, 4}), random_tensor(rng, {1, 3, 1, 1}, -0.5, 0.5)}, {}};
                     c.build = projected([](Tape<double>& t, std::span<const Var> v) {
                       return ad::trelu(t, v[0], v[1]);
                     }, {2, 3, 4, 4}, rng);
                     return c;
                   }});
  suite.push_back({"max_pool", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const PoolSpec spec{PoolKind::max, 3, 2, 1};
                     GradCase c{{random_tensor(rng, {2, 2, 6, 6})}, {}};
                     c.build = projected([spec](Tape<double>& t, std::span<const Var> v) {
                       return ad::pool(t, v[0], spec);
                     }, spec.output_shape({2, 2, 6, 6}), rng);
                     return c;
                   }});
  suite.push_back({"avg_pool", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const PoolSpec spec{PoolKind::avg, 3, 2, 1};
                     GradCase c{{random_tensor(rng, {2, 2, 6, 6})}, {}};
                     c.build = projected([spec](Tape<double>& t, std::span<const Var> v) {
                       return ad::pool(t, v[0], spec);
                     }, spec.output_shape({2, 2, 6, 6}), rng);
                     return c;
                   }});
  suite.push_back({"softmax_cross_entropy", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {4, 5, 1, 1}, -2.0, 2.0)}, {}};
                     std::vector<int> labels(4);
                     for (auto& l : labels) l = static_cast<int>(rng.below(5));
                     c.build = [labels](Tape<double>& t, std::span<const Var> v) {
                       return ad::softmax_cross_entropy(t, v[0], labels);
                     };
                     return c;
                   }});
  suite.push_back({"batch_norm_train", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {4, 3, 2, 2}), random_tensor(rng, {1, 3, 1, 1}, 0.5, 1.5),
                                 random_tensor(rng, {1, 3, 1, 1})}, {}};
                     c.build = projected([](Tape<double>& t, std::span<const Var> v) {
                       auto p = BatchNormParams<double>::make(3);
                       return ad::batch_norm(t, v[0], v[1], v[2], p, Mode::train);
                     }, {4, 3, 2, 2}, rng);
                     return c;
                   }});
  suite.push_back({"batch_norm_infer", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {4, 3, 2, 2}), random_tensor(rng, {1, 3, 1, 1}, 0.5, 1.5),
                                 random_tensor(rng, {1, 3, 1, 1})}, {}};
                     auto base = BatchNormParams<double>::make(3);
                     for (auto& m : base.running_mean) m = rng.uniform(-0.5, 0.5);
                     for (auto& v : base.running_var) v = rng.uniform(0.5, 2.0);
                     c.build = projected([base](Tape<double>& t, std::span<const Var> v) {
                       auto p = base;
                       return ad::batch_norm(t, v[0], v[1], v[2], p, Mode::infer);
                     }, {4, 3, 2, 2}, rng);
                     return c;
                   }});
  suite.push_back({"weight_normalize", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {3, 2, 3, 3})}, {}};
                     c.build = projected([](Tape<double>& t, std::span<const Var> v) {
                       return ad::weight_normalize(t, v[0], 1e-6);
                     }, {3, 2, 3, 3}, rng);
                     return c;
                   }});
  suite.push_back({"wn_layer", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto spec = ConvSpec::square(3, 2, 3, 1, 1);
                     GradCase c{{random_tensor(rng, {2, 2, 4, 4}), random_tensor(rng, spec.kernel_shape()),
                                 random_tensor(rng, {1, 3, 1, 1}, 0.5, 1.5), random_tensor(rng, {1, 3, 1, 1})}, {}};
                     c.build = projected([spec](Tape<double>& t, std::span<const Var> v) {
                       return ad::wn_layer(t, v[0], v[1], v[2], v[3], 1e-6, spec);
                     }, spec.output_shape({2, 2, 4, 4}), rng);
                     return c;
                   }});
  suite.push_back({"np_layer", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto spec = ConvSpec::square(3, 2, 3, 1, 1);
                     GradCase c{{random_tensor(rng, {2, 2, 4, 4}), random_tensor(rng, spec.kernel_shape()),
                                 random_tensor(rng, {1, 3, 1, 1}, 0.5, 1.5), random_tensor(rng, {1, 3, 1, 1}, -0.2, 0.2)}, {}};
                     c.build = projected([spec](Tape<double>& t, std::span<const Var> v) {
                       return ad::np_layer(t, v[0], v[1], v[2], v[3], 1e-6, spec);
                     }, spec.output_shape({2, 2, 4, 4}), rng);
                     return c;
                   }});
  suite.push_back({"trelu_wn_layer", [](std::uint64_t seed) {
                     Rng rng(seed);
                     const auto spec = ConvSpec::square(3, 2, 3, 1, 1);
                     GradCase c{{random_tensor(rng, {2, 2, 4, 4}), random_tensor(rng, spec.kernel_shape()),
                                 random_tensor(rng, {1, 3, 1, 1}, -0.5, 0.5)}, {}};
                     c.build = projected([spec](Tape<double>& t, std::span<const Var> v) {
                       return ad::trelu_wn_layer(t, v[0], v[1], v[2], 1e-6, spec);
                     }, spec.output_shape({2, 2, 4, 4}), rng);
                     return c;
                   }});
  suite.push_back({"last_layer_affine", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {3, 4, 2, 2}), random_tensor(rng, {1, 4, 1, 1}),
                                 random_tensor(rng, {1, 4, 1, 1})}, {}};
                     c.build = projected([](Tape<double>& t, std::span<const Var> v) {
                       return ad::channel_affine(t, v[0], v[1], v[2]);
                     }, {3, 4, 2, 2}, rng);
                     return c;
                   }});
  suite.push_back({"dropout_train", [](std::uint64_t seed) {
                     Rng rng(seed);
                     GradCase c{{random_tensor(rng, {3, 4, 2, 2})}, {}};
                     const std::uint64_t mask_seed = rng.next();
                     c.build = projected([mask_seed](Tape<double>& t, std::span<const Var> v) {
                       return ad::dropout(t, v[0], 0.3, Mode::train, mask_seed);
                     }, {3, 4, 2, 2}, rng);
                     return c;
                   }});
  return suite;
}

struct SuiteResult {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckReport report;
};

/// Runs every suite entry for seeds 1..n_seeds.
inline std::vector<SuiteResult> run_gradient_suite(std::size_t n_seeds = 5,
                                                   const GradCheckOptions& opt = {}) {
  std::vector<SuiteResult> out;
  for (const auto& entry : gradient_suite()) {
    for (std::uint64_t s = 1; s <= n_seeds; ++s) {
      const GradCase c = entry.make(s);
      out.push_back({entry.name, s, grad_check(c.build, c.inputs, opt)});
    }
  }
  return out;
}

}  // namespace normlab
