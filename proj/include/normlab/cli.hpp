#pragma once

// Command-line front end over the experiment drivers.
//
//   normlab_cli <train|gradcheck|diverge|rgauss|drift|bench> [flags]
//
// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure,
// 3 an experiment's acceptance check did not hold.

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "normlab/experiments.hpp"
#include "normlab/gradient_suite.hpp"

namespace normlab {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2, kExitCheckFailed = 3 };

namespace detail {

inline std::vector<double> parse_double_list(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(parse_double(tok, flag));
  if (out.empty()) throw rejected_input(flag + ": empty list");
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& flag) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(s, flag)) {
    if (v < 0 || v != std::floor(v)) throw rejected_input(flag + ": expected non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

/// "--config f.json" becomes a token list spliced in front of the command
/// line tokens, so explicit flags (parsed later, last one wins) override it.
inline std::vector<std::string> config_tokens(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw rejected_input("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw rejected_input("config " + path + ": top level must be an object");
  std::vector<std::string> toks;
  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    for (auto& ch : flag)
      if (ch == '_') ch = '-';
    if (value.is_boolean()) {
      if (value.get<bool>()) toks.push_back(flag);
    } else if (value.is_string()) {
      toks.push_back(flag);
      toks.push_back(value.get<std::string>());
    } else if (value.is_number_integer() || value.is_number_unsigned()) {
      toks.push_back(flag);
      toks.push_back(value.dump());
    } else if (value.is_number_float()) {
      toks.push_back(flag);
      toks.push_back(format_double(value.get<double>()));
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& e : value) {
        if (!e.is_number()) throw rejected_input("config " + path + ": '" + key + "' must hold numbers");
        joined += (joined.empty() ? "" : ",") + (e.is_number_float() ? format_double(e.get<double>()) : e.dump());
      }
      toks.push_back(flag);
      toks.push_back(joined);
    } else {
      throw rejected_input("config " + path + ": unsupported value for '" + key + "'");
    }
  }
  return toks;
}

inline void write_output(const std::string& path, const std::string& text) {
  if (!path.empty()) write_text_file(path, text);
}

inline std::string with_suffix(const std::string& path, const std::string& suffix) {
  const auto dot = path.rfind('.');
  const auto slash = path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path + suffix;
  return path.substr(0, dot) + suffix + path.substr(dot);
}

}  // namespace detail

struct GlobalFlags {
  std::uint64_t seed = 1;
  std::string out;
  std::string normalizer;
  std::optional<double> lr;
  std::string schedule = "linear";
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  double wd = 0.0;
  std::optional<std::size_t> cadence;
  std::string data;
  std::string config;
};

inline int cli_dispatch(const std::vector<std::string>& argv_in, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  CLI::App app{"normalization experiments: training, gradient checks, divergence, drift, cost scaling"};
  app.name(argv_in.empty() ? "normlab_cli" : argv_in[0]);
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GlobalFlags g;
  app.add_option("--seed", g.seed, "random seed (every run is a pure function of config + seed)");
  app.add_option("--out", g.out, "CSV output path");
  app.add_option("--normalizer", g.normalizer, "none, bn, wn, np, trelu-wn");
  app.add_option("--lr", g.lr, "initial learning rate");
  app.add_option("--schedule", g.schedule, "linear or poly2");
  app.add_option("--epochs", g.epochs, "training epochs");
  app.add_option("--batch-size", g.batch_size, "mini-batch size");
  app.add_option("--wd", g.wd, "weight decay (direction weights only)");
  app.add_option("--cadence", g.cadence, "record diagnostics every n iterations");
  app.add_option("--data", g.data, "blobs, image-blobs, or a CIFAR-10 batch file / directory");
  app.add_option("--config", g.config, "JSON file mirroring these flags; explicit flags win");

  // train
  auto* train = app.add_subcommand("train", "train a network and record diagnostics");
  std::string network = "mlp";
  std::optional<std::size_t> iterations;
  double momentum = 0.9, lr_final = 1e-5, separation = 10.0, dropout = 0.0;
  std::size_t classes = 4, dim = 128, samples = 2000, test_samples = 0, width_divisor = 1, depth = 50, width = 64;
  std::size_t subset = 0;
  int precision = 32;
  std::string hidden = "64", params_out;
  train->add_option("--network", network, "mlp, deep-linear, cifar10-nv");
  train->add_option("--iterations", iterations, "iteration budget (overrides --epochs)");
  train->add_option("--momentum", momentum);
  train->add_option("--lr-final", lr_final);
  train->add_option("--classes", classes);
  train->add_option("--dim", dim, "blob dimension");
  train->add_option("--samples", samples, "synthetic training samples");
  train->add_option("--test-samples", test_samples);
  train->add_option("--separation", separation);
  train->add_option("--subset", subset, "CIFAR-10: first n training records");
  train->add_option("--hidden", hidden, "mlp hidden widths, comma separated");
  train->add_option("--dropout", dropout);
  train->add_option("--depth", depth);
  train->add_option("--width", width);
  train->add_option("--width-divisor", width_divisor);
  train->add_option("--precision", precision, "32 or 64");
  train->add_option("--params-out", params_out, "write final parameters here");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every layer op");
  std::size_t gc_seeds = 5;
  double gc_tol = 1e-5;
  gradcheck->add_option("--seeds", gc_seeds);
  gradcheck->add_option("--tolerance", gc_tol);

  auto* diverge = app.add_subcommand("diverge", "deep linear WN divergence with a BN control");
  std::string lrs = "0.1,0.03,0.01";
  std::size_t div_iters = 500;
  bool no_control = false;
  diverge->add_option("--lrs", lrs, "learning-rate grid, comma separated");
  diverge->add_option("--iterations", div_iters, "iteration cap");
  diverge->add_flag("--no-control", no_control, "skip the BN control run");

  auto* rgauss = app.add_subcommand("rgauss", "rectified Gaussian moments against NP constants");
  std::size_t rg_samples = 1000000;
  rgauss->add_option("--samples", rg_samples);

  auto* drift = app.add_subcommand("drift", "first/last layer norm drift on cifar10-nv");
  std::size_t drift_samples = 5000, drift_divisor = 4;
  double drift_sep = 60.0;
  drift->add_option("--samples", drift_samples);
  drift->add_option("--width-divisor", drift_divisor);
  drift->add_option("--separation", drift_sep);

  auto* bench = app.add_subcommand("bench", "BN vs WN normalization cost scaling");
  std::string batch_sizes = "16,256";
  std::size_t channels = 64, spatial = 16, repeats = 9;
  bench->add_option("--batch-sizes", batch_sizes);
  bench->add_option("--channels", channels);
  bench->add_option("--spatial", spatial);
  bench->add_option("--repeats", repeats);

  std::vector<std::string> tokens(argv_in.begin() + (argv_in.empty() ? 0 : 1), argv_in.end());
  try {
    // Find --config before the real parse and splice its contents in.
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      std::string path;
      if (tokens[i] == "--config" && i + 1 < tokens.size()) path = tokens[i + 1];
      else if (tokens[i].rfind("--config=", 0) == 0) path = tokens[i].substr(9);
      if (path.empty()) continue;
      // Result: subcommand, file tokens, then every command-line token.
      std::size_t at = 0;
      while (at < tokens.size() && tokens[at].rfind("-", 0) == 0) at += tokens[at].find('=') == std::string::npos ? 2 : 1;
      if (at >= tokens.size()) break;
      std::vector<std::string> merged{tokens[at]};
      const auto extra = detail::config_tokens(path);
      merged.insert(merged.end(), extra.begin(), extra.end());
      merged.insert(merged.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(at));
      merged.insert(merged.end(), tokens.begin() + static_cast<std::ptrdiff_t>(at) + 1, tokens.end());
      tokens = std::move(merged);
      break;
    }
    std::vector<std::string> rev(tokens.rbegin(), tokens.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const rejected_input& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }

  auto data_config = [&](DataConfig& d) {
    if (g.data.empty() || g.data == "blobs") d.kind = DataKind::blobs;
    else if (g.data == "image-blobs") d.kind = DataKind::image_blobs;
    else {
      d.kind = DataKind::cifar10;
      d.path = g.data;
    }
  };

  try {
    if (train->parsed()) {
      TrainConfig c;
      c.network = parse_network(network);
      c.normalizer = parse_normalizer(g.normalizer.empty() ? "none" : g.normalizer);
      c.seed = g.seed;
      c.batch_size = g.batch_size.value_or(64);
      c.epochs = g.epochs.value_or(10);
      c.max_iterations = iterations;
      c.schedule = {parse_decay(g.schedule), g.lr.value_or(0.01), lr_final, 0};
      c.momentum = momentum;
      c.weight_decay = g.wd;
      c.cadence = g.cadence.value_or(10);
      data_config(c.data);
      c.data.n_classes = c.network == NetworkKind::cifar10_nv ? 10 : classes;
      c.data.dim = dim;
      c.data.n_train = samples;
      c.data.n_test = test_samples;
      c.data.separation = separation;
      c.data.subset = subset;
      c.data.standardize = c.data.kind == DataKind::image_blobs;
      c.hidden = detail::parse_size_list(hidden, "--hidden");
      c.dropout = dropout;
      c.depth = depth;
      c.width = width;
      c.width_divisor = width_divisor;
      c.precision = precision;
      c.keep_params = !params_out.empty();
      const RunResult r = run_training(c);
      if (!r.records.empty()) detail::write_output(g.out, to_csv(r.records));
      if (!params_out.empty()) save_records(r.final_params, params_out);
      out << "iterations " << r.iterations << "  final_loss " << detail::format_double(r.final_loss);
      if (r.train_accuracy) out << "  train_accuracy " << *r.train_accuracy;
      if (r.test_accuracy) out << "  test_accuracy " << *r.test_accuracy;
      if (r.diverged) out << "  diverged at " << *r.divergence_iteration << " (" << r.divergence_reason << ")";
      out << '\n';
      return kExitOk;
    }

    if (gradcheck->parsed()) {
      GradCheckOptions opt;
      opt.tolerance = gc_tol;
      const auto results = run_gradient_suite(gc_seeds, opt);
      bool ok = true;
      std::string csv = "case,seed,max_rel_error,checked,skipped,passed\n";
      for (const auto& r : results) {
        ok = ok && r.report.passed;
        csv += r.name + ',' + std::to_string(r.seed) + ',' + detail::format_double(r.report.max_rel_error) + ',' +
               std::to_string(r.report.checked) + ',' + std::to_string(r.report.skipped) + ',' +
               (r.report.passed ? "1" : "0") + '\n';
        out << (r.report.passed ? "ok    " : "FAIL  ") << r.name << " seed " << r.seed << "  max_rel_error "
            << r.report.max_rel_error;
        if (!r.report.failure.empty()) out << "  " << r.report.failure;
        out << '\n';
      }
      detail::write_output(g.out, csv);
      return ok ? kExitOk : kExitCheckFailed;
    }

    if (diverge->parsed()) {
      DivergenceConfig d;
      d.lrs = detail::parse_double_list(lrs, "--lrs");
      d.iters_max = div_iters;
      d.seed = g.seed;
      if (g.batch_size) d.batch_size = *g.batch_size;
      if (g.cadence) d.cadence = *g.cadence;
      if (!g.normalizer.empty()) d.normalizer = parse_normalizer(g.normalizer);
      const auto runs = run_divergence_experiment(d);
      bool ok = true;
      std::vector<DiagnosticsRecord> all;
      for (const auto& r : runs) {
        ok = ok && r.result.diverged;
        all.insert(all.end(), r.result.records.begin(), r.result.records.end());
        out << "lr " << r.lr << ": "
            << (r.result.diverged ? "diverged at iteration " + std::to_string(*r.result.divergence_iteration)
                                  : std::string("no divergence"))
            << "  coherence(" << r.hottest_layer << ") " << r.hottest_initial << " -> " << r.hottest_final << '\n';
      }
      detail::write_output(g.out, to_csv(all));
      if (!g.out.empty()) write_text_file(detail::with_suffix(g.out, ".summary"), divergence_summary_csv(runs));
      if (!no_control) {
        DivergenceConfig bn = d;
        bn.normalizer = Normalizer::batch_norm;
        const auto control = run_divergence_experiment(bn);
        std::vector<DiagnosticsRecord> crec;
        for (const auto& r : control) {
          ok = ok && !r.result.diverged;
          crec.insert(crec.end(), r.result.records.begin(), r.result.records.end());
          out << "control bn lr " << r.lr << ": " << (r.result.diverged ? "TRIGGERED" : "stable") << '\n';
        }
        if (!g.out.empty()) {
          write_text_file(detail::with_suffix(g.out, ".bn"), to_csv(crec));
          write_text_file(detail::with_suffix(g.out, ".bn.summary"), divergence_summary_csv(control));
        }
      }
      return ok ? kExitOk : kExitCheckFailed;
    }

    if (rgauss->parsed()) {
      const auto rep = run_rectified_gaussian_check(rg_samples, g.seed);
      out << "E[relu(z)] " << rep.relu_mean << " (expected " << rep.expected_mean << ")\n"
          << "Var[relu(z)] " << rep.relu_var << " (expected " << rep.expected_var << ")\n"
          << "NP output mean " << rep.np_mean << ", variance " << rep.np_var << '\n';
      detail::write_output(g.out, rgauss_csv(rep));
      return rep.passed ? kExitOk : kExitCheckFailed;
    }

    if (drift->parsed()) {
      const Normalizer norm = parse_normalizer(g.normalizer.empty() ? "wn" : g.normalizer);
      TrainConfig c = default_drift_config(norm, g.seed);
      if (g.epochs) c.epochs = *g.epochs;
      if (g.batch_size) c.batch_size = *g.batch_size;
      if (g.cadence) c.cadence = *g.cadence;
      if (g.lr) c.schedule.lr_initial = *g.lr;
      c.schedule.kind = parse_decay(g.schedule);
      c.weight_decay = g.wd;
      c.width_divisor = drift_divisor;
      c.data.n_train = drift_samples;
      c.data.separation = drift_sep;
      if (!g.data.empty() && g.data != "image-blobs") {
        data_config(c.data);
        c.data.subset = drift_samples;
      }
      const DriftResult d = run_norm_drift(c);
      detail::write_output(g.out, to_csv(d.run.records));
      if (!g.out.empty()) write_text_file(detail::with_suffix(g.out, ".summary"), drift_summary_csv(d.summary));
      for (std::size_t e = 0; e < d.summary.epoch_ratio.size(); ++e)
        out << "epoch " << e << "  " << d.summary.last_layer << "/" << d.summary.first_layer << " normalized norm "
            << d.summary.epoch_ratio[e] << '\n';
      bool ok;
      if (norm == Normalizer::batch_norm) {
        out << d.summary.bn_layer << " normalized norm in [" << d.summary.bn_min.value_or(NAN) << ", "
            << d.summary.bn_max.value_or(NAN) << "]\n";
        ok = d.summary.bn_min && *d.summary.bn_min >= 0.9 && *d.summary.bn_max <= 1.1;
      } else {
        ok = d.summary.ratio_increasing;
      }
      return ok ? kExitOk : kExitCheckFailed;
    }

    if (bench->parsed()) {
      BenchConfig b;
      b.batch_sizes = detail::parse_size_list(batch_sizes, "--batch-sizes");
      b.channels = channels;
      b.spatial = spatial;
      b.repeats = repeats;
      b.seed = g.seed;
      const auto rows = run_norm_cost_bench(b);
      detail::write_output(g.out, bench_csv(rows));
      for (const auto& r : rows)
        out << "m=" << r.batch_size << "  bn " << r.bn_seconds << " s  wn " << r.wn_seconds << " s\n";
      if (rows.size() < 2) return kExitOk;
      const double bn_ratio = rows.back().bn_seconds / rows.front().bn_seconds;
      const double wn_ratio = rows.back().wn_seconds / rows.front().wn_seconds;
      out << "bn ratio " << bn_ratio << "  wn ratio " << wn_ratio << '\n';
      const double m_ratio = static_cast<double>(rows.back().batch_size) / static_cast<double>(rows.front().batch_size);
      return bn_ratio >= m_ratio / 2.0 && wn_ratio <= 2.0 ? kExitOk : kExitCheckFailed;
    }
  } catch (const rejected_input& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

inline int cli_dispatch(int argc, char** argv) {
  return cli_dispatch(std::vector<std::string>(argv, argv + argc));
}

}  // namespace normlab
