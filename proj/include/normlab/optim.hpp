#pragma once

// SGD with momentum and coupled weight decay, and the learning-rate decay
// laws used by the training protocols.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "normlab/errors.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

enum class DecayKind { linear, poly2 };

inline DecayKind parse_decay(const std::string& s) {
  if (s == "linear") return DecayKind::linear;
  if (s == "poly2") return DecayKind::poly2;
  throw rejected_input("unknown schedule '" + s + "' (expected linear or poly2)");
}

inline const char* to_string(DecayKind k) { return k == DecayKind::linear ? "linear" : "poly2"; }

struct Schedule {
  DecayKind kind = DecayKind::linear;
  double lr_initial = 0.01;
  double lr_final = 1e-5;
  std::size_t total_steps = 1;
};

/// linear: lr_T + (lr_0 - lr_T)(1 - t/T); poly2: lr_T + (lr_0 - lr_T)(1 - t/T)^2.
/// Steps past T clamp to lr_final.
inline double lr_at(const Schedule& s, std::size_t step) {
  if (s.total_steps == 0 || step >= s.total_steps) return s.lr_final;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(s.total_steps);
  const double shape = s.kind == DecayKind::linear ? frac : frac * frac;
  return s.lr_final + (s.lr_initial - s.lr_final) * shape;
}

/// One parameter tensor seen by the optimizer. Weight decay applies only
/// where `decay` is set (direction weights, never gamma/beta/alpha).
template <typename T>
struct ParamRef {
  Tensor<T>* value;
  const Tensor<T>* grad;
  bool decay = true;
};

template <typename T>
struct OptState {
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::vector<Tensor<T>> velocity;
};

struct StepStatus {
  bool applied = true;
  bool non_finite_gradient = false;
};

/// g' = g + wd * p; v <- mu v + g'; p <- p - lr v.
/// A non-finite gradient anywhere aborts the whole step before any update.
template <typename T>
StepStatus sgd_momentum_step(std::span<ParamRef<T>> params, OptState<T>& state, double lr) {
  detail::require(state.momentum >= 0.0 && state.momentum < 1.0, "sgd: momentum must lie in [0, 1)");
  for (const auto& p : params) {
    detail::require(p.value->shape() == p.grad->shape(), "sgd: gradient shape " +
                                                             to_string(p.grad->shape()) +
                                                             " != parameter " +
                                                             to_string(p.value->shape()));
    if (!p.grad->all_finite()) return {false, true};
  }
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.value->shape());
  }
  detail::require(state.velocity.size() == params.size(), "sgd: parameter list changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& w = *params[k].value;
    const Tensor<T>& g = *params[k].grad;
    Tensor<T>& v = state.velocity[k];
    detail::require(v.shape() == w.shape(), "sgd: velocity shape mismatch");
    const double wd = params[k].decay ? state.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]) + wd * static_cast<double>(w[i]);
      const double vi = state.momentum * static_cast<double>(v[i]) + gi;
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * vi);
    }
  }
  return {};
}

}  // namespace normlab
