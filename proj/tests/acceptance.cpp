// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

#include "normlab/experiments.hpp"
#include "normlab/gradient_suite.hpp"

using namespace normlab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = budget_s <= 0.0 || secs < budget_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("%s  %2d %-24s %s  [%.2f s%s]\n", pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs,
              in_time ? "" : ", over budget");
  std::fflush(stdout);
}

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

Tensor64 normal_tensor(Rng& rng, Shape s) {
  Tensor64 t(s);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

Outcome bn_exactness() {
  Rng rng(1);
  Tensor64 x(Shape{8, 4, 5, 5});
  for (auto& v : x.data()) v = 3.0 + 2.0 * rng.normal();
  auto p = BatchNormParams<double>::make(4, 1e-12);
  const Tensor64 o = batch_norm_forward(x, p, Mode::train).out;
  double worst_mean = 0.0, worst_var = 0.0;
  const double cnt = 8 * 25;
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t i = 0; i < 25; ++i) m += o.at(n, c, i / 5, i % 5);
    m /= cnt;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t i = 0; i < 25; ++i) v += std::pow(o.at(n, c, i / 5, i % 5) - m, 2);
    worst_mean = std::max(worst_mean, std::abs(m));
    worst_var = std::max(worst_var, std::abs(v / cnt - 1.0));
  }
  const double nn = output_norm_stats(o).normalized_norm;
  return {worst_mean <= 1e-9 && worst_var <= 1e-6 && std::abs(nn - 1.0) <= 1e-6,
          fmt("max|mean| %.2e  max|var-1| %.2e  |nnorm-1| %.2e", worst_mean, worst_var, std::abs(nn - 1.0))};
}

Outcome relu_halving() {
  const std::size_t d = std::size_t{1} << 16;
  double lo = 1e9, hi = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Tensor64 x = normal_tensor(rng, {1, d, 1, 1});
    double m = 0.0, v = 0.0;
    for (double e : x.data()) m += e;
    m /= static_cast<double>(d);
    for (double e : x.data()) v += (e - m) * (e - m);
    const double sd = std::sqrt(v / static_cast<double>(d));
    for (auto& e : x.data()) e = (e - m) / sd;
    const double r = l2_norm(relu(x)) / std::sqrt(static_cast<double>(d) / 2.0);
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  return {lo >= 0.97 && hi <= 1.03, fmt("ratio range [%.4f, %.4f] over 20 seeds", lo, hi)};
}

Outcome rectified_gaussian() {
  const auto r = run_rectified_gaussian_check(1000000, 1);
  const bool ok = std::abs(r.relu_mean - 0.398942) <= 0.005 && std::abs(r.relu_var - 0.340845) <= 0.005 &&
                  std::abs(r.np_mean) <= 0.005 && std::abs(r.np_var - 1.0) <= 0.01;
  return {ok && r.passed, fmt("E[relu] %.5f  Var[relu] %.5f  NP mean %.5f  NP var %.5f", r.relu_mean, r.relu_var,
                              r.np_mean, r.np_var)};
}

Outcome norm_propagation() {
  double worst_orth = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Tensor64 w = orthogonal_init<double>(64, 64, seed);
    Rng rng(100 + seed);
    const Tensor64 x = normal_tensor(rng, {1, 64, 1, 1});
    worst_orth = std::max(worst_orth, std::abs(l2_norm(fully_connected(x, w)) - l2_norm(x)));
  }
  const std::size_t din = 128, dout = 32, trials = 10000;
  Rng rng(7);
  std::vector<double> ratios;
  ratios.reserve(trials);
  Tensor64 w({dout, din, 1, 1});
  Tensor64 x({1, din, 1, 1});
  for (std::size_t t = 0; t < trials; ++t) {
    for (auto& v : w.data()) v = rng.normal();
    for (std::size_t r = 0; r < dout; ++r) {
      auto row = w.item(r);
      const double nrm = std::sqrt(sum_squares(row));
      for (auto& v : row) v /= nrm;
    }
    for (auto& v : x.data()) v = rng.normal();
    ratios.push_back(l2_norm(fully_connected(x, w)) / l2_norm(x));
  }
  std::nth_element(ratios.begin(), ratios.begin() + trials / 2, ratios.end());
  const double med = ratios[trials / 2];
  const double target = std::sqrt(static_cast<double>(dout) / static_cast<double>(din));
  return {worst_orth <= 1e-9 && med >= 0.9 * target && med <= 1.1 * target,
          fmt("orthogonal max |dnorm| %.2e  unit-row median %.4f vs %.4f", worst_orth, med, target)};
}

Outcome gradient_certification() {
  const auto results = run_gradient_suite(5);
  double worst = 0.0;
  std::string bad;
  bool ok = true;
  for (const auto& r : results) {
    worst = std::max(worst, r.report.max_rel_error);
    if (!r.report.passed || r.report.checked == 0) {
      ok = false;
      bad += " " + r.name + "/" + std::to_string(r.seed);
    }
  }
  return {ok && worst <= 1e-5,
          fmt("%zu cases x 5 seeds, worst rel error %.2e%s", gradient_suite().size(), worst,
              bad.empty() ? "" : (" failing:" + bad).c_str())};
}

std::vector<DivergenceRun> wn_runs, bn_runs;

Outcome divergence() {
  DivergenceConfig d;
  wn_runs = run_divergence_experiment(d);
  DivergenceConfig bn = d;
  bn.normalizer = Normalizer::batch_norm;
  bn_runs = run_divergence_experiment(bn);
  bool ok = true;
  std::ostringstream s;
  for (const auto& r : wn_runs) {
    const bool hit = r.result.diverged && *r.result.divergence_iteration < d.iters_max;
    ok = ok && hit;
    s << "wn lr " << r.lr << ": " << (hit ? "it " + std::to_string(*r.result.divergence_iteration) : "none") << "  ";
  }
  for (const auto& r : bn_runs) {
    ok = ok && !r.result.diverged;
    s << "bn lr " << r.lr << ": " << (r.result.diverged ? "TRIGGERED" : "stable") << "  ";
  }
  return {ok, s.str()};
}

Outcome coherence_growth() {
  if (wn_runs.empty()) return {false, "no divergence runs"};
  bool ok = true;
  std::ostringstream s;
  for (const auto& r : wn_runs) {
    ok = ok && r.coherence_growth() >= 2.0;
    s << "lr " << r.lr << ": " << r.hottest_layer << " " << fmt("%.3f -> %.3f (x%.2f)", r.hottest_initial,
                                                              r.hottest_final, r.coherence_growth())
      << "  ";
  }
  return {ok, s.str()};
}

Outcome norm_drift() {
  const auto wn = run_norm_drift(default_drift_config(Normalizer::weight_norm, 2));
  const auto bn = run_norm_drift(default_drift_config(Normalizer::batch_norm, 2));
  std::ostringstream s;
  s << "wn " << wn.summary.last_layer << "/" << wn.summary.first_layer << " ratio";
  for (double r : wn.summary.epoch_ratio) s << fmt(" %.4f", r);
  const bool bn_ok = bn.summary.bn_min && *bn.summary.bn_min >= 0.9 && *bn.summary.bn_max <= 1.1;
  s << fmt("  bn %s in [%.4f, %.4f]", bn.summary.bn_layer.c_str(), bn.summary.bn_min.value_or(NAN),
           bn.summary.bn_max.value_or(NAN));
  return {wn.summary.ratio_increasing && !wn.run.diverged && bn_ok, s.str()};
}

Outcome cost_scaling() {
  const auto rows = run_norm_cost_bench(BenchConfig{});
  const double bn = rows.back().bn_seconds / rows.front().bn_seconds;
  const double wn = rows.back().wn_seconds / rows.front().wn_seconds;
  return {bn >= 8.0 && wn <= 2.0, fmt("BN(256)/BN(16) %.2f  WN ratio %.2f", bn, wn)};
}

Outcome schedule_exactness() {
  double worst = 0.0;
  for (auto kind : {DecayKind::linear, DecayKind::poly2}) {
    const Schedule s{kind, 0.01, 1e-5, 1000};
    worst = std::max({worst, std::abs(lr_at(s, 0) - 0.01), std::abs(lr_at(s, 1000) - 1e-5)});
  }
  const double mid = lr_at({DecayKind::poly2, 0.01, 1e-5, 1000}, 500);
  return {worst <= 1e-12 && std::abs(mid - 0.0025075) <= 1e-12,
          fmt("endpoint error %.1e  poly2 midpoint %.10g", worst, mid)};
}

Outcome determinism() {
  std::vector<std::pair<std::string, std::function<std::string()>>> exps;
  exps.emplace_back("train", [] {
    TrainConfig c;
    c.normalizer = Normalizer::weight_norm;
    c.hidden = {32};
    c.dropout = 0.1;
    c.epochs = 2;
    c.seed = 11;
    c.cadence = 1;
    c.data.dim = 32;
    c.data.n_train = 512;
    return to_csv(run_training(c).records);
  });
  exps.emplace_back("diverge", [] {
    DivergenceConfig d;
    d.lrs = {0.1};
    const auto runs = run_divergence_experiment(d);
    return to_csv(runs[0].result.records) + divergence_summary_csv(runs);
  });
  exps.emplace_back("drift", [] {
    auto c = default_drift_config(Normalizer::weight_norm, 2);
    c.width_divisor = 16;
    c.data.n_train = 512;
    const auto d = run_norm_drift(c);
    return to_csv(d.run.records) + drift_summary_csv(d.summary);
  });
  exps.emplace_back("rgauss", [] { return rgauss_csv(run_rectified_gaussian_check(200000, 3)); });
  exps.emplace_back("gradcheck", [] {
    std::string s;
    for (const auto& r : run_gradient_suite(1)) s += r.name + detail::format_double(r.report.max_rel_error) + '\n';
    return s;
  });
  bool ok = true;
  std::string s;
  for (const auto& [name, fn] : exps) {
    const std::string a = fn(), b = fn();
    const bool same = a == b && !a.empty();
    ok = ok && same;
    s += name + (same ? " identical  " : " DIFFERS  ");
  }
  return {ok, s};
}

}  // namespace

int main() {
  criterion(1, "bn-exactness", 1.0, bn_exactness);
  criterion(2, "relu-norm-halving", 1.0, relu_halving);
  criterion(3, "np-rectified-gaussian", 5.0, rectified_gaussian);
  criterion(4, "norm-propagation", 5.0, norm_propagation);
  criterion(5, "gradient-certification", 60.0, gradient_certification);
  criterion(6, "wn-divergence", 120.0, divergence);
  criterion(7, "coherence-growth", 0.0, coherence_growth);
  criterion(8, "norm-drift", 600.0, norm_drift);
  criterion(9, "cost-scaling", 30.0, cost_scaling);
  criterion(10, "schedule-exactness", 0.0, schedule_exactness);
  criterion(11, "determinism", 0.0, determinism);
  std::printf("%s: %d of 11 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
