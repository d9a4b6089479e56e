#pragma once

// Training loop and the experiment drivers built on it: divergence of deep
// linear WN networks, rectified-Gaussian moments, norm drift across depth,
// and the BN-vs-WN normalization cost measurement.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "normlab/data.hpp"
#include "normlab/diagnostics.hpp"
#include "normlab/network.hpp"
#include "normlab/optim.hpp"
#include "normlab/param_io.hpp"

namespace normlab {

enum class NetworkKind { mlp, deep_linear, cifar10_nv };
enum class DataKind { blobs, image_blobs, cifar10 };

inline NetworkKind parse_network(const std::string& s) {
  if (s == "mlp") return NetworkKind::mlp;
  if (s == "deep-linear") return NetworkKind::deep_linear;
  if (s == "cifar10-nv") return NetworkKind::cifar10_nv;
  throw rejected_input("unknown network '" + s + "' (expected mlp, deep-linear, cifar10-nv)");
}

inline DataKind parse_data_kind(const std::string& s) {
  if (s == "blobs") return DataKind::blobs;
  if (s == "image-blobs") return DataKind::image_blobs;
  if (s == "cifar10") return DataKind::cifar10;
  throw rejected_input("unknown data kind '" + s + "' (expected blobs, image-blobs, cifar10)");
}

struct DataConfig {
  DataKind kind = DataKind::blobs;
  std::string path;  // cifar10 only: a data_batch file or the extracted directory
  std::size_t n_classes = 4;
  std::size_t dim = 128;              // blobs
  std::size_t channels = 3;           // image blobs
  std::size_t side = 32;              // image blobs
  double separation = 10.0;
  std::size_t n_train = 2000;
  std::size_t n_test = 0;
  bool standardize = false;           // always on for cifar10
  std::size_t subset = 0;             // cifar10: keep the first n training records (0 = all)
};

struct TrainConfig {
  NetworkKind network = NetworkKind::mlp;
  Normalizer normalizer = Normalizer::none;
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  std::optional<std::size_t> max_iterations;  // overrides epochs when set
  std::optional<std::uint64_t> seed;          // mandatory
  Schedule schedule;                          // total_steps 0 = the run length
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t cadence = 10;
  DataConfig data;

  std::vector<std::size_t> hidden{64};  // mlp
  std::size_t depth = 50, width = 64;   // deep linear
  InitKind init = InitKind::xavier;
  double dropout = 0.0;                 // mlp
  std::size_t width_divisor = 1;        // cifar10-nv
  bool augment = true;                  // cifar10-nv: random crop + flip during training

  int precision = 32;
  bool detect_divergence = true;
  double divergence_factor = 1e3;       // last-layer normalized norm vs its initial value
  bool record_coherence = true;
  bool evaluate = true;
  bool keep_params = false;
};

struct PhaseTimes {
  double data = 0.0, setup = 0.0, train = 0.0, eval = 0.0;
};

struct RunResult {
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> train_accuracy, test_accuracy;
  bool diverged = false;
  std::optional<std::size_t> divergence_iteration;
  std::string divergence_reason;
  std::size_t iterations = 0;  // optimizer steps applied
  std::vector<DiagnosticsRecord> records;
  std::vector<std::size_t> epoch_starts;  // first iteration of every epoch
  std::vector<double> epoch_mean_loss;
  std::vector<std::string> weight_layers;
  std::vector<double> initial_coherence, final_coherence;  // per weight layer
  std::vector<NamedTensor> final_params;                   // when keep_params
  NetworkSpec spec;
  PhaseTimes times;
};

inline void validate(const TrainConfig& c) {
  auto req = [](bool ok, const std::string& m) {
    if (!ok) throw rejected_input("config: " + m);
  };
  req(c.seed.has_value(), "a seed is required");
  req(c.batch_size >= 1, "batch size must be >= 1");
  req(c.normalizer != Normalizer::batch_norm || c.batch_size >= 2, "batch norm needs batch size >= 2");
  req(c.max_iterations ? *c.max_iterations >= 1 : c.epochs >= 1, "need at least one epoch or iteration");
  req(c.momentum >= 0.0 && c.momentum < 1.0, "momentum must be in [0, 1)");
  req(c.weight_decay >= 0.0, "weight decay must be >= 0");
  req(c.schedule.lr_initial >= 0.0 && c.schedule.lr_final >= 0.0, "learning rates must be >= 0");
  req(std::isfinite(c.schedule.lr_initial) && std::isfinite(c.schedule.lr_final), "learning rates must be finite");
  req(c.cadence >= 1, "cadence must be >= 1");
  req(c.precision == 32 || c.precision == 64, "precision must be 32 or 64");
  req(c.divergence_factor > 1.0, "divergence factor must be > 1");
  req(c.dropout >= 0.0 && c.dropout < 1.0, "dropout rate must be in [0, 1)");
  req(c.data.n_classes >= 2, "need at least 2 classes");
  if (c.data.kind != DataKind::cifar10) {
    req(c.data.separation > 0.0, "separation must be > 0");
    req(c.data.n_train >= 1, "need at least one training sample");
  } else {
    req(!c.data.path.empty(), "cifar10 data needs a path");
  }
  if (c.network == NetworkKind::cifar10_nv) {
    req(c.data.kind != DataKind::blobs, "cifar10-nv needs image data");
    req(c.data.kind == DataKind::cifar10 || (c.data.channels == 3 && c.data.side >= kCropSide),
        "cifar10-nv needs 3-channel images of at least 28x28");
    req(c.width_divisor >= 1, "width divisor must be >= 1");
  }
  if (c.network == NetworkKind::deep_linear) req(c.depth >= 2 && c.width >= 1, "deep linear needs depth >= 2");
  if (c.data.kind == DataKind::blobs) req(c.data.n_classes <= c.data.dim, "blobs need n_classes <= dim");
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct LoadedData {
  Dataset train;
  std::optional<Dataset> test;
};

inline LoadedData load_data(const DataConfig& d, std::uint64_t seed) {
  LoadedData out;
  switch (d.kind) {
    case DataKind::blobs:
      out.train = gen_gaussian_blobs(d.n_classes, d.dim, d.separation, d.n_train, Rng::stream(seed, 101).next());
      if (d.n_test) out.test = gen_gaussian_blobs(d.n_classes, d.dim, d.separation, d.n_test, Rng::stream(seed, 102).next());
      break;
    case DataKind::image_blobs:
      out.train = gen_image_blobs(d.n_classes, d.channels, d.side, d.side, d.separation, d.n_train,
                                  Rng::stream(seed, 101).next());
      if (d.n_test)
        out.test = gen_image_blobs(d.n_classes, d.channels, d.side, d.side, d.separation, d.n_test,
                                   Rng::stream(seed, 102).next());
      break;
    case DataKind::cifar10: {
      TrainTest tt = load_cifar10(d.path);
      if (d.subset && d.subset < tt.train.size()) {
        const Dataset& t = tt.train;
        const Shape is = t.item_shape();
        Dataset sub;
        sub.images = Tensor<float>({d.subset, is.c, is.h, is.w},
                                   std::vector<float>(t.images.raw(), t.images.raw() + d.subset * is.per_item()));
        sub.labels.assign(t.labels.begin(), t.labels.begin() + static_cast<std::ptrdiff_t>(d.subset));
        tt.train = std::move(sub);
        // Second pass: statistics of the subset actually trained on. The
        // composition of the two affine maps is applied to the test split too.
        standardize(tt.train, &tt.test);
      }
      out.train = std::move(tt.train);
      if (tt.test.size()) out.test = std::move(tt.test);
      return out;
    }
  }
  if (d.standardize) standardize(out.train, out.test ? &*out.test : nullptr);
  return out;
}

inline NetworkSpec build_network(const TrainConfig& c, const Dataset& train) {
  const std::size_t in_dim = train.item_shape().per_item();
  switch (c.network) {
    case NetworkKind::mlp:
      return build_mlp(in_dim, c.hidden, c.data.n_classes, c.normalizer, c.dropout);
    case NetworkKind::deep_linear:
      return build_deep_linear(c.depth, c.width, in_dim, c.data.n_classes, c.normalizer, c.init);
    case NetworkKind::cifar10_nv:
      detail::require(c.data.n_classes <= 10, "cifar10-nv has 10 outputs");
      return build_cifar10_nv(c.normalizer, c.width_divisor);
  }
  throw rejected_input("config: unknown network");
}

/// Gathers the items `idx` into a batch shaped like the network input. For
/// image networks the item is cropped (randomly when `augment`).
template <typename T>
Tensor<T> gather(const Dataset& d, std::span<const std::size_t> idx, const Shape& net_in, bool crop,
                 bool augment, std::uint64_t aug_seed, std::vector<int>& labels) {
  const Shape item = d.item_shape();
  labels.resize(idx.size());
  Tensor<T> batch({idx.size(), net_in.c, net_in.h, net_in.w});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    labels[k] = d.labels[idx[k]];
    auto src = d.images.item(idx[k]);
    auto dst = batch.item(k);
    if (crop) {
      const AugmentParams p = augment_params(item, augment ? Split::train : Split::test,
                                             Rng::stream(aug_seed, idx[k]).next(), net_in.h);
      apply_augment<T, float>(src, item, p, dst, net_in.h);
    } else {
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
    }
  }
  return batch;
}

template <typename T>
double accuracy(Model<T>& model, const Dataset& d, bool crop) {
  if (d.size() == 0) return std::numeric_limits<double>::quiet_NaN();
  const Shape net_in = model.spec().input;
  std::size_t correct = 0;
  constexpr std::size_t chunk = 256;
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < d.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(d.size(), start + chunk); ++i) idx.push_back(i);
    const Tensor<T> batch = gather<T>(d, idx, net_in, crop, false, 0, labels);
    Tape<T> tape;
    const auto fp = model.forward(tape, batch, labels, Mode::infer);
    const Tensor<T>& logits = tape.value(fp.logits);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      auto row = logits.item(n);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == labels[n]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

template <typename T>
RunResult run_training_impl(const TrainConfig& cfg) {
  RunResult res;
  const std::uint64_t seed = *cfg.seed;
  auto t0 = std::chrono::steady_clock::now();
  LoadedData data = load_data(cfg.data, seed);
  res.times.data = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  res.spec = build_network(cfg, data.train);
  Model<T> model(res.spec, Rng::stream(seed, 1).next());
  const Shape net_in = res.spec.input;
  const bool crop = cfg.network == NetworkKind::cifar10_nv;
  if (!crop)
    detail::require(data.train.item_shape().per_item() == net_in.per_item(), "data does not fit the network input");
  for (std::size_t i = 0; i < res.spec.layers.size(); ++i)
    if (model.weight_index(i) && res.spec.layers[i].out_channels >= 2) res.weight_layers.push_back(res.spec.layers[i].name);
  res.initial_coherence = model.weight_coherences();

  const std::size_t n = data.train.size();
  const std::size_t full = n / cfg.batch_size;
  const std::size_t tail = n % cfg.batch_size;
  const std::size_t per_epoch = full + (tail >= 2 || (tail == 1 && full == 0 && cfg.normalizer != Normalizer::batch_norm) ? 1 : 0);
  detail::require(per_epoch >= 1, "config: dataset too small for one batch");
  const std::size_t total = cfg.max_iterations ? *cfg.max_iterations : cfg.epochs * per_epoch;
  Schedule sched = cfg.schedule;
  if (sched.total_steps == 0) sched.total_steps = total;

  OptState<T> opt{cfg.momentum, cfg.weight_decay, {}};
  Recorder rec(cfg.cadence);
  std::optional<double> initial_last_norm;
  res.times.setup = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(n);
  std::vector<int> labels;
  std::size_t iter = 0;
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t epoch = 0; iter < total && !res.diverged; ++epoch) {
    res.epoch_starts.push_back(iter);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuf = Rng::stream(seed, 1000 + epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuf.below(i)]);
    const std::uint64_t aug_seed = Rng::stream(seed, 500000 + epoch).next();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t b = 0; b < per_epoch && iter < total; ++b, ++iter) {
      const std::size_t start = b * cfg.batch_size;
      const std::size_t len = std::min(cfg.batch_size, n - start);
      const std::span<const std::size_t> idx(order.data() + start, len);
      const Tensor<T> batch = gather<T>(data.train, idx, net_in, crop, cfg.augment, aug_seed, labels);

      Tape<T> tape;
      const auto fp = model.forward(tape, batch, labels, Mode::train, Rng::stream(seed, 2000000 + iter).next());
      const double loss = static_cast<double>(tape.value(fp.loss)[0]);
      const double lr = lr_at(sched, iter);
      last_loss = loss;
      const double last_norm = output_norm_stats(tape.value(fp.logits)).normalized_norm;
      if (!initial_last_norm) initial_last_norm = last_norm;

      std::string reason;
      if (cfg.detect_divergence) {
        if (!std::isfinite(loss)) reason = "non-finite loss";
        else if (!std::isfinite(last_norm) || last_norm > cfg.divergence_factor * *initial_last_norm)
          reason = "last-layer norm above threshold";
      }
      if (rec.due(iter) || !reason.empty())
        rec.append({iter, loss, lr, model.layer_stats(tape, fp, cfg.record_coherence)});
      if (!reason.empty()) {
        res.diverged = true;
        res.divergence_iteration = iter;
        res.divergence_reason = reason;
        break;
      }
      loss_sum += loss;
      ++loss_count;

      GradientSet<T> grads = backward(tape, fp.loss);
      std::vector<ParamRef<T>> refs;
      auto& params = model.params();
      for (std::size_t k = 0; k < params.size(); ++k)
        refs.push_back({&params[k].value, &grads[fp.param_vars[k]], params[k].decay});
      const StepStatus st = sgd_momentum_step<T>(refs, opt, lr);
      if (!st.applied) {
        if (cfg.detect_divergence) {
          res.diverged = true;
          res.divergence_iteration = iter;
          res.divergence_reason = "non-finite gradient";
          break;
        }
        continue;
      }
      ++res.iterations;
    }
    if (loss_count) res.epoch_mean_loss.push_back(loss_sum / static_cast<double>(loss_count));
  }
  res.times.train = seconds_since(t0);
  res.final_loss = last_loss;
  res.records = rec.records();
  res.final_coherence = model.weight_coherences();

  t0 = std::chrono::steady_clock::now();
  if (cfg.evaluate && !res.diverged) {
    res.train_accuracy = accuracy(model, data.train, crop);
    if (data.test) res.test_accuracy = accuracy(model, *data.test, crop);
  }
  res.times.eval = seconds_since(t0);
  if (cfg.keep_params) res.final_params = snapshot(model);
  return res;
}

}  // namespace detail

/// Full training run; config errors are raised before any compute.
inline RunResult run_training(const TrainConfig& cfg) {
  validate(cfg);
  return cfg.precision == 64 ? detail::run_training_impl<double>(cfg) : detail::run_training_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// Divergence of deep linear networks

struct DivergenceConfig {
  std::vector<double> lrs{0.1, 0.03, 0.01};
  std::size_t depth = 50, width = 64, in_dim = 128, out_dim = 10;
  std::size_t iters_max = 500;
  std::size_t batch_size = 64;
  std::size_t n_samples = 2000;
  double separation = 10.0;
  double momentum = 0.9;
  std::size_t cadence = 10;
  std::uint64_t seed = 7;
  Normalizer normalizer = Normalizer::weight_norm;
  int precision = 64;
};

struct DivergenceRun {
  double lr = 0.0;
  RunResult result;
  std::string hottest_layer;              // most coherent weight layer when the run stopped
  double hottest_initial = 0.0, hottest_final = 0.0;
  double coherence_growth() const { return hottest_initial > 0.0 ? hottest_final / hottest_initial : 0.0; }
};

inline TrainConfig divergence_train_config(const DivergenceConfig& d, double lr) {
  TrainConfig c;
  c.network = NetworkKind::deep_linear;
  c.normalizer = d.normalizer;
  c.depth = d.depth;
  c.width = d.width;
  c.batch_size = d.batch_size;
  c.max_iterations = d.iters_max;
  c.seed = d.seed;
  c.schedule = {DecayKind::linear, lr, lr, 0};  // held constant
  c.momentum = d.momentum;
  c.cadence = d.cadence;
  c.data.kind = DataKind::blobs;
  c.data.n_classes = d.out_dim;
  c.data.dim = d.in_dim;
  c.data.separation = d.separation;
  c.data.n_train = d.n_samples;
  c.precision = d.precision;
  c.evaluate = false;
  return c;
}

/// One constant-lr run per grid entry on the deep linear network.
inline std::vector<DivergenceRun> run_divergence_experiment(const DivergenceConfig& d) {
  detail::require(!d.lrs.empty(), "diverge: empty learning-rate grid");
  std::vector<DivergenceRun> out;
  for (double lr : d.lrs) {
    DivergenceRun r;
    r.lr = lr;
    r.result = run_training(divergence_train_config(d, lr));
    const auto& fin = r.result.final_coherence;
    if (!fin.empty()) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < fin.size(); ++k)
        if (fin[k] > fin[best]) best = k;
      r.hottest_layer = r.result.weight_layers.at(best);
      r.hottest_initial = r.result.initial_coherence.at(best);
      r.hottest_final = fin[best];
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string divergence_summary_csv(std::span<const DivergenceRun> runs) {
  std::string s = "lr,diverged,divergence_iteration,reason,hottest_layer,coherence_initial,coherence_at_stop,coherence_growth\n";
  for (const auto& r : runs) {
    s += detail::format_double(r.lr) + ',' + (r.result.diverged ? "1" : "0") + ',' +
         (r.result.divergence_iteration ? std::to_string(*r.result.divergence_iteration) : "") + ',' +
         r.result.divergence_reason + ',' + r.hottest_layer + ',' + detail::format_double(r.hottest_initial) +
         ',' + detail::format_double(r.hottest_final) + ',' + detail::format_double(r.coherence_growth()) + '\n';
  }
  return s;
}

// ---------------------------------------------------------------------------
// Rectified Gaussian moments

struct RGaussReport {
  std::size_t n_samples = 0;
  double relu_mean = 0.0, relu_var = 0.0;
  double expected_mean = 0.0, expected_var = 0.0;
  double np_mean = 0.0, np_var = 0.0;
  bool passed = false;  // at the tolerances below
  static constexpr double mean_tol = 0.005, var_tol = 0.005, np_mean_tol = 0.005, np_var_tol = 0.01;
};

/// z ~ N(0, 1) through relu, and through a unit NP layer (direction [1],
/// gamma 1, beta 0) so the NP output uses the layer's own arithmetic.
inline RGaussReport run_rectified_gaussian_check(std::size_t n_samples, std::uint64_t seed = 1) {
  detail::require(n_samples >= 100000, "rgauss: need at least 1e5 samples");
  Rng rng(seed);
  Tensor64 z({n_samples, 1, 1, 1});
  for (auto& v : z.data()) v = rng.normal();
  const Tensor64 r = relu(z);
  const auto p = WeightNormParams<double>::make(Tensor64({1, 1, 1, 1}, 1.0), std::nullopt, true, true, 0.0);
  const Tensor64 o = np_layer_forward(z, p);
  auto moments = [](const Tensor64& t) {
    double mean = 0.0;
    for (double v : t.data()) mean += v;
    mean /= static_cast<double>(t.size());
    double var = 0.0;
    for (double v : t.data()) var += (v - mean) * (v - mean);
    return std::pair{mean, var / static_cast<double>(t.size())};
  };
  RGaussReport rep;
  rep.n_samples = n_samples;
  std::tie(rep.relu_mean, rep.relu_var) = moments(r);
  std::tie(rep.np_mean, rep.np_var) = moments(o);
  const NPConstants k;
  rep.expected_mean = k.c_mean;
  rep.expected_var = 1.0 / (k.c_var * k.c_var);
  rep.passed = std::abs(rep.relu_mean - rep.expected_mean) <= RGaussReport::mean_tol &&
               std::abs(rep.relu_var - rep.expected_var) <= RGaussReport::var_tol &&
               std::abs(rep.np_mean) <= RGaussReport::np_mean_tol &&
               std::abs(rep.np_var - 1.0) <= RGaussReport::np_var_tol;
  return rep;
}

inline std::string rgauss_csv(const RGaussReport& r) {
  using detail::format_double;
  std::string s = "quantity,empirical,expected,tolerance\n";
  s += "relu_mean," + format_double(r.relu_mean) + ',' + format_double(r.expected_mean) + ',' + format_double(RGaussReport::mean_tol) + '\n';
  s += "relu_var," + format_double(r.relu_var) + ',' + format_double(r.expected_var) + ',' + format_double(RGaussReport::var_tol) + '\n';
  s += "np_mean," + format_double(r.np_mean) + ",0," + format_double(RGaussReport::np_mean_tol) + '\n';
  s += "np_var," + format_double(r.np_var) + ",1," + format_double(RGaussReport::np_var_tol) + '\n';
  return s;
}

// ---------------------------------------------------------------------------
// Norm drift across depth

struct DriftSummary {
  std::string first_layer, last_layer;
  std::vector<double> epoch_first, epoch_last, epoch_ratio;  // epoch averages of normalized norms
  bool ratio_increasing = false;                             // strictly, epoch over epoch
  std::string bn_layer;                                      // last batch_norm layer, if any
  std::optional<double> bn_min, bn_max;                      // its normalized norm over all records
};

struct DriftResult {
  RunResult run;
  DriftSummary summary;
};

/// Desk-scale default: cifar10-nv-WN at a quarter of the reference width on
/// 5000 image blobs, 2 epochs, every iteration recorded.
inline TrainConfig default_drift_config(Normalizer norm = Normalizer::weight_norm, std::uint64_t seed = 2) {
  TrainConfig c;
  c.network = NetworkKind::cifar10_nv;
  c.normalizer = norm;
  c.width_divisor = 4;
  c.batch_size = 128;
  c.epochs = 2;
  c.seed = seed;
  c.schedule = {DecayKind::linear, 0.01, 1e-4, 0};
  c.momentum = 0.9;
  c.cadence = 1;
  c.data.kind = DataKind::image_blobs;
  c.data.n_classes = 10;
  c.data.channels = 3;
  c.data.side = 32;
  c.data.separation = 60.0;
  c.data.n_train = 5000;
  c.data.standardize = true;
  c.record_coherence = false;
  c.evaluate = false;
  return c;
}

inline DriftSummary summarize_drift(const RunResult& run) {
  DriftSummary s;
  const auto blocks = block_outputs(run.spec);
  detail::require(blocks.size() >= 2, "drift: need at least two weight blocks");
  s.first_layer = run.spec.layers[blocks.front()].name;
  s.last_layer = run.spec.layers[blocks.back()].name;
  for (std::size_t i = 0; i < run.spec.layers.size(); ++i)
    if (run.spec.layers[i].kind == LayerKind::batch_norm) s.bn_layer = run.spec.layers[i].name;

  const std::size_t epochs = run.epoch_starts.size();
  std::vector<double> sf(epochs, 0.0), sl(epochs, 0.0);
  std::vector<std::size_t> cnt(epochs, 0);
  for (const auto& r : run.records) {
    const auto e = static_cast<std::size_t>(
        std::upper_bound(run.epoch_starts.begin(), run.epoch_starts.end(), r.iteration) - run.epoch_starts.begin() - 1);
    const LayerStat* f = r.find(s.first_layer);
    const LayerStat* l = r.find(s.last_layer);
    if (f && l) {
      sf[e] += f->normalized_norm;
      sl[e] += l->normalized_norm;
      ++cnt[e];
    }
    if (!s.bn_layer.empty()) {
      if (const LayerStat* b = r.find(s.bn_layer)) {
        s.bn_min = std::min(s.bn_min.value_or(b->normalized_norm), b->normalized_norm);
        s.bn_max = std::max(s.bn_max.value_or(b->normalized_norm), b->normalized_norm);
      }
    }
  }
  for (std::size_t e = 0; e < epochs; ++e) {
    if (!cnt[e]) continue;
    s.epoch_first.push_back(sf[e] / static_cast<double>(cnt[e]));
    s.epoch_last.push_back(sl[e] / static_cast<double>(cnt[e]));
    s.epoch_ratio.push_back(s.epoch_last.back() / s.epoch_first.back());
  }
  s.ratio_increasing = s.epoch_ratio.size() >= 2;
  for (std::size_t e = 1; e < s.epoch_ratio.size(); ++e)
    if (!(s.epoch_ratio[e] > s.epoch_ratio[e - 1])) s.ratio_increasing = false;
  return s;
}

inline DriftResult run_norm_drift(const TrainConfig& cfg) {
  DriftResult d;
  d.run = run_training(cfg);
  d.summary = summarize_drift(d.run);
  return d;
}

inline std::string drift_summary_csv(const DriftSummary& s) {
  std::string out = "epoch,first_layer,last_layer,first_nnorm,last_nnorm,ratio\n";
  for (std::size_t e = 0; e < s.epoch_ratio.size(); ++e)
    out += std::to_string(e) + ',' + s.first_layer + ',' + s.last_layer + ',' + detail::format_double(s.epoch_first[e]) +
           ',' + detail::format_double(s.epoch_last[e]) + ',' + detail::format_double(s.epoch_ratio[e]) + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Normalization cost scaling

struct BenchConfig {
  std::vector<std::size_t> batch_sizes{16, 256};
  std::size_t channels = 64;
  std::size_t spatial = 16;
  std::size_t kernel = 3;
  std::size_t repeats = 9;
  std::size_t warmups = 3;
  std::uint64_t seed = 1;
};

struct BenchRow {
  std::size_t batch_size = 0;
  double bn_seconds = 0.0;  // median
  double wn_seconds = 0.0;  // median
};

/// Times only the normalization work: BN statistics + normalize over an
/// (m, C, S, S) activation, WN rescaling of a (C, C, k, k) weight. Runs on
/// the calling thread; convolution is not part of either measurement.
inline std::vector<BenchRow> run_norm_cost_bench(const BenchConfig& b) {
  detail::require(b.channels >= 1, "bench: channels must be >= 1");
  detail::require(b.spatial >= 1 && b.kernel >= 1, "bench: spatial and kernel sizes must be >= 1");
  detail::require(!b.batch_sizes.empty(), "bench: no batch sizes");
  detail::require(b.repeats >= 1, "bench: need at least one repetition");
  for (std::size_t m : b.batch_sizes) detail::require(m >= 2, "bench: batch sizes must be >= 2");

  auto median_time = [&](auto&& fn) {
    for (std::size_t i = 0; i < b.warmups; ++i) fn();
    std::vector<double> t;
    for (std::size_t i = 0; i < b.repeats; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      t.push_back(detail::seconds_since(t0));
    }
    std::nth_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(t.size() / 2), t.end());
    return t[t.size() / 2];
  };

  Rng rng(b.seed);
  Tensor32 w({b.channels, b.channels, b.kernel, b.kernel});
  for (auto& v : w.data()) v = static_cast<float>(rng.normal());
  std::vector<BenchRow> rows;
  volatile float sink = 0.0f;
  for (std::size_t m : b.batch_sizes) {
    Tensor32 x({m, b.channels, b.spatial, b.spatial});
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    auto bn = BatchNormParams<float>::make(b.channels);
    BenchRow row;
    row.batch_size = m;
    row.bn_seconds = median_time([&] { sink = sink + batch_norm_forward(x, bn, Mode::train).out[0]; });
    row.wn_seconds = median_time([&] { sink = sink + weight_normalize(w, 1e-6)[0]; });
    rows.push_back(row);
  }
  return rows;
}

inline std::string bench_csv(std::span<const BenchRow> rows) {
  std::string s = "batch_size,bn_seconds,wn_seconds\n";
  for (const auto& r : rows)
    s += std::to_string(r.batch_size) + ',' + detail::format_double(r.bn_seconds) + ',' +
         detail::format_double(r.wn_seconds) + '\n';
  return s;
}

}  // namespace normlab
