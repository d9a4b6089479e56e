#pragma once

// Central-difference certification of the analytic backward rules.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "normlab/autodiff.hpp"

namespace normlab {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Coordinates whose +-(kink_radius * step) perturbation changes a
  /// ReLU/TReLU mask or a max-pool winner are skipped.
  double kink_radius = 10.0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_coord = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string failure;  // set when a gradient is non-finite or the tolerance is breached
};

/// Builds a scalar loss on the tape from leaves holding `inputs`.
using LossBuilder = std::function<Var(Tape<double>&, std::span<const Var>)>;

namespace detail {

struct Evaluation {
  double loss;
  std::vector<std::uint32_t> branches;
};

inline Evaluation evaluate(const LossBuilder& build, const std::vector<Tensor64>& inputs) {
  Tape<double> tape;
  tape.set_record_branches(true);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  const Var loss = build(tape, vars);
  return {tape.value(loss)[0], tape.branch_signature()};
}

}  // namespace detail

/// relative error = |a - n| / max(|a|, |n|, 1e-8) per coordinate, with
/// n = (f(x + h e_i) - f(x - h e_i)) / 2h.
inline GradCheckReport grad_check(const LossBuilder& build, const std::vector<Tensor64>& inputs,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;

  Tape<double> tape;
  tape.set_record_branches(true);
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x));
  const Var loss = build(tape, vars);
  const auto base_branches = tape.branch_signature();
  const GradientSet<double> grads = backward(tape, loss);

  std::vector<Tensor64> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor64& analytic = grads[vars[k]];
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      auto at = [&](double delta) {
        probe[k][i] = x0 + delta;
        auto e = detail::evaluate(build, probe);
        probe[k][i] = x0;
        return e;
      };
      const double r = opt.kink_radius * opt.step;
      if (!base_branches.empty()) {
        if (at(r).branches != base_branches || at(-r).branches != base_branches) {
          ++report.skipped;
          continue;
        }
      }
      const double numeric = (at(opt.step).loss - at(-opt.step).loss) / (2.0 * opt.step);
      const double a = analytic[i];
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        report.passed = false;
        report.failure = "non-finite gradient at input " + std::to_string(k) + " coordinate " +
                         std::to_string(i);
        report.worst_input = k;
        report.worst_coord = i;
        return report;
      }
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = k;
        report.worst_coord = i;
      }
    }
  }
  if (report.max_rel_error > opt.tolerance) {
    report.passed = false;
    report.failure = "relative error " + std::to_string(report.max_rel_error) + " at input " +
                     std::to_string(report.worst_input) + " coordinate " +
                     std::to_string(report.worst_coord);
  }
  return report;
}

}  // namespace normlab
