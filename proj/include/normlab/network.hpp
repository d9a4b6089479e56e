#pragma once

// Network descriptions, the two fixed architectures (cifar10-nv and the deep
// bias-free linear network), and a Model that owns parameters and records a
// forward pass on a Tape.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "normlab/autodiff.hpp"
#include "normlab/diagnostics.hpp"
#include "normlab/errors.hpp"
#include "normlab/norm_layers.hpp"
#include "normlab/ops.hpp"
#include "normlab/random.hpp"

namespace normlab {

enum class Normalizer { none, batch_norm, weight_norm, norm_prop, trelu_wn };

inline Normalizer parse_normalizer(const std::string& s) {
  if (s == "none") return Normalizer::none;
  if (s == "bn") return Normalizer::batch_norm;
  if (s == "wn") return Normalizer::weight_norm;
  if (s == "np") return Normalizer::norm_prop;
  if (s == "trelu-wn") return Normalizer::trelu_wn;
  throw rejected_input("unknown normalizer '" + s + "' (expected none, bn, wn, np, trelu-wn)");
}

inline const char* to_string(Normalizer n) {
  switch (n) {
    case Normalizer::none: return "none";
    case Normalizer::batch_norm: return "bn";
    case Normalizer::weight_norm: return "wn";
    case Normalizer::norm_prop: return "np";
    case Normalizer::trelu_wn: return "trelu-wn";
  }
  return "?";
}

enum class LayerKind { conv, fully_connected, batch_norm, relu, max_pool, avg_pool, affine, dropout, softmax_loss };

/// How a weight layer (conv / fully_connected) normalizes its weights.
///   plain:    W x (+ bias)
///   wn:       gamma * W_hat x + beta
///   np:       c_var * (relu(gamma * W_hat x + beta) - c_mean)
///   trelu_wn: trelu_alpha(W_hat x)
enum class WeightMode { plain, wn, np, trelu_wn };

enum class InitKind { xavier, orthogonal };

struct LayerDesc {
  LayerKind kind = LayerKind::relu;
  std::string name;
  // Weight layers.
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  WeightMode weight_mode = WeightMode::plain;
  bool gamma = false;  // wn / np scale
  bool bias = false;   // plain bias or wn / np beta
  // Pools.
  PoolSpec pool{};
  // Dropout.
  double rate = 0.0;

  bool has_weights() const { return kind == LayerKind::conv || kind == LayerKind::fully_connected; }
};

struct NetworkSpec {
  std::string name;
  Normalizer normalizer = Normalizer::none;
  Shape input{1, 1, 1, 1};  // per-sample extent, n = 1
  std::vector<LayerDesc> layers;
  InitKind init = InitKind::xavier;
  double bn_eps = 1e-5;
  double wn_eps = 1e-6;

  friend bool operator==(const NetworkSpec& a, const NetworkSpec& b) {
    if (a.name != b.name || a.normalizer != b.normalizer || !(a.input == b.input) ||
        a.init != b.init || a.bn_eps != b.bn_eps || a.wn_eps != b.wn_eps ||
        a.layers.size() != b.layers.size())
      return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const auto& x = a.layers[i];
      const auto& y = b.layers[i];
      if (x.kind != y.kind || x.name != y.name || x.out_channels != y.out_channels ||
          x.kernel != y.kernel || x.stride != y.stride || x.pad != y.pad ||
          x.weight_mode != y.weight_mode || x.gamma != y.gamma || x.bias != y.bias ||
          x.pool.kind != y.pool.kind || x.pool.window != y.pool.window ||
          x.pool.stride != y.pool.stride || x.pool.pad != y.pool.pad || x.rate != y.rate)
        return false;
    }
    return true;
  }
};

inline ConvSpec conv_spec_of(const LayerDesc& l, std::size_t in_channels) {
  return ConvSpec::square(l.out_channels, in_channels, l.kernel, l.stride, l.pad);
}

/// Output extent (per sample) of every layer; throws rejected_input on the
/// first incompatibility. The loss layer reports (1, 1, 1, 1).
inline std::vector<Shape> validate(const NetworkSpec& spec) {
  detail::require(!spec.layers.empty(), "network " + spec.name + ": no layers");
  detail::require(spec.layers.back().kind == LayerKind::softmax_loss,
                  "network " + spec.name + ": must end in a softmax loss");
  std::vector<Shape> shapes;
  Shape cur = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string where = "network " + spec.name + ", layer " + l.name + ": ";
    switch (l.kind) {
      case LayerKind::conv: {
        const ConvSpec cs = conv_spec_of(l, cur.c);
        detail::require(l.out_channels > 0 && l.stride >= 1, where + "bad convolution");
        detail::require(cur.h + 2 * l.pad >= l.kernel && cur.w + 2 * l.pad >= l.kernel,
                        where + "kernel larger than input " + to_string(cur));
        cur = cs.output_shape(cur);
        break;
      }
      case LayerKind::fully_connected:
        detail::require(l.out_channels > 0, where + "no outputs");
        cur = {1, l.out_channels, 1, 1};
        break;
      case LayerKind::max_pool:
      case LayerKind::avg_pool:
        detail::require(cur.h + 2 * l.pool.pad >= l.pool.window &&
                            cur.w + 2 * l.pool.pad >= l.pool.window,
                        where + "window does not fit input " + to_string(cur));
        cur = l.pool.output_shape(cur);
        break;
      case LayerKind::dropout:
        detail::require(l.rate >= 0.0 && l.rate < 1.0, where + "dropout rate outside [0, 1)");
        break;
      case LayerKind::softmax_loss:
        detail::require(i + 1 == spec.layers.size(), where + "loss must be the last layer");
        detail::require(cur.h == 1 && cur.w == 1, where + "loss needs (K, 1, 1) input, got " + to_string(cur));
        shapes.push_back({1, 1, 1, 1});
        continue;
      case LayerKind::batch_norm:
      case LayerKind::relu:
      case LayerKind::affine:
        break;
    }
    detail::require(cur.count() > 0, where + "empty output");
    shapes.push_back(cur);
  }
  return shapes;
}

/// Indices of the layers whose output ends a block: a weight layer plus any
/// directly following batch_norm / relu. Pools, dropout, affine and the loss
/// are not block outputs.
inline std::vector<std::size_t> block_outputs(const NetworkSpec& spec) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (!spec.layers[i].has_weights()) continue;
    std::size_t j = i;
    while (j + 1 < spec.layers.size() && (spec.layers[j + 1].kind == LayerKind::batch_norm ||
                                          spec.layers[j + 1].kind == LayerKind::relu))
      ++j;
    out.push_back(j);
  }
  return out;
}

namespace detail {

/// Weight layer (with normalizer-specific mode) and its trailing layers.
inline void push_weight_block(NetworkSpec& net, LayerKind kind, const std::string& name,
                              std::size_t out, std::size_t kernel, std::size_t pad,
                              Normalizer norm, bool bn_here, bool activation, bool bias_free) {
  LayerDesc l;
  l.kind = kind;
  l.name = name;
  l.out_channels = out;
  l.kernel = kernel;
  l.pad = pad;
  bool need_relu = activation;
  switch (norm) {
    case Normalizer::none:
    case Normalizer::batch_norm:
      l.weight_mode = WeightMode::plain;
      l.bias = !bias_free && !(norm == Normalizer::batch_norm && bn_here);
      break;
    case Normalizer::weight_norm:
      l.weight_mode = WeightMode::wn;
      l.gamma = true;
      l.bias = !bias_free;
      break;
    case Normalizer::norm_prop:
      l.weight_mode = activation ? WeightMode::np : WeightMode::wn;
      l.gamma = true;
      l.bias = !bias_free;
      need_relu = false;
      break;
    case Normalizer::trelu_wn:
      l.weight_mode = activation ? WeightMode::trelu_wn : WeightMode::wn;
      l.gamma = !activation;
      l.bias = !activation && !bias_free;
      need_relu = false;
      break;
  }
  net.layers.push_back(l);
  if (norm == Normalizer::batch_norm && bn_here) {
    LayerDesc bn;
    bn.kind = LayerKind::batch_norm;
    bn.name = "bn" + name.substr(name.find_first_of("0123456789"));
    net.layers.push_back(bn);
  }
  if (need_relu) {
    LayerDesc r;
    r.kind = LayerKind::relu;
    r.name = "relu" + name.substr(name.find_first_of("0123456789"));
    net.layers.push_back(r);
  }
}

inline LayerDesc pool_layer(const std::string& name, PoolKind kind, std::size_t window,
                            std::size_t stride, std::size_t pad) {
  LayerDesc l;
  l.kind = kind == PoolKind::max ? LayerKind::max_pool : LayerKind::avg_pool;
  l.name = name;
  l.pool = {kind, window, stride, pad};
  return l;
}

inline LayerDesc simple_layer(LayerKind kind, const std::string& name) {
  LayerDesc l;
  l.kind = kind;
  l.name = name;
  return l;
}

}  // namespace detail

/// The 12-layer cifar10-nv network on 3x28x28 crops:
///   conv1-3 3x3x128, max-pool 3x3/s2, conv4-6 3x3x256, max-pool 3x3/s2,
///   conv7 3x3x320 (valid), conv8 1x1x320, conv9 1x1x10, avg-pool 5x5, softmax.
/// BN sits after conv3 and conv6 only; the WN family replaces every conv.
/// `width_divisor` scales the hidden channel counts (conv9 keeps 10) for
/// desk-scale runs; 1 gives the reference widths.
inline NetworkSpec build_cifar10_nv(Normalizer norm, std::size_t width_divisor = 1) {
  detail::require(width_divisor >= 1, "build_cifar10_nv: width_divisor must be >= 1");
  NetworkSpec net;
  net.name = "cifar10-nv";
  net.normalizer = norm;
  net.input = {1, 3, 28, 28};
  auto w = [&](std::size_t c) { return std::max<std::size_t>(1, c / width_divisor); };
  using detail::push_weight_block;
  const auto conv = LayerKind::conv;
  push_weight_block(net, conv, "conv1", w(128), 3, 1, norm, false, true, false);
  push_weight_block(net, conv, "conv2", w(128), 3, 1, norm, false, true, false);
  push_weight_block(net, conv, "conv3", w(128), 3, 1, norm, true, true, false);
  net.layers.push_back(detail::pool_layer("pool3", PoolKind::max, 3, 2, 1));
  push_weight_block(net, conv, "conv4", w(256), 3, 1, norm, false, true, false);
  push_weight_block(net, conv, "conv5", w(256), 3, 1, norm, false, true, false);
  push_weight_block(net, conv, "conv6", w(256), 3, 1, norm, true, true, false);
  net.layers.push_back(detail::pool_layer("pool6", PoolKind::max, 3, 2, 1));
  push_weight_block(net, conv, "conv7", w(320), 3, 0, norm, false, true, false);
  push_weight_block(net, conv, "conv8", w(320), 1, 0, norm, false, true, false);
  push_weight_block(net, conv, "conv9", 10, 1, 0, norm, false, true, false);
  net.layers.push_back(detail::pool_layer("pool9", PoolKind::avg, 5, 1, 0));
  if (norm == Normalizer::trelu_wn) net.layers.push_back(detail::simple_layer(LayerKind::affine, "affine"));
  net.layers.push_back(detail::simple_layer(LayerKind::softmax_loss, "loss"));
  return net;
}

/// `depth` bias-free fully-connected layers in -> width -> ... -> width -> out
/// with no activations. WN layers keep their scale gamma; BN follows every
/// layer when selected.
inline NetworkSpec build_deep_linear(std::size_t depth, std::size_t width, std::size_t in_dim,
                                     std::size_t out_dim, Normalizer norm,
                                     InitKind init = InitKind::xavier) {
  detail::require(depth >= 2, "build_deep_linear: depth must be >= 2");
  NetworkSpec net;
  net.name = "deep-linear";
  net.normalizer = norm;
  net.input = {1, in_dim, 1, 1};
  net.init = init;
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t out = l + 1 == depth ? out_dim : width;
    detail::push_weight_block(net, LayerKind::fully_connected, "fc" + std::to_string(l + 1), out, 1,
                              0, norm, true, false, true);
  }
  net.layers.push_back(detail::simple_layer(LayerKind::softmax_loss, "loss"));
  return net;
}

/// Small perceptron: hidden layers carry the normalizer and a ReLU, the
/// output layer is linear (WN variants keep gamma/beta there).
inline NetworkSpec build_mlp(std::size_t in_dim, const std::vector<std::size_t>& hidden,
                             std::size_t out_dim, Normalizer norm, double dropout_rate = 0.0) {
  NetworkSpec net;
  net.name = "mlp";
  net.normalizer = norm;
  net.input = {1, in_dim, 1, 1};
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    detail::push_weight_block(net, LayerKind::fully_connected, "fc" + std::to_string(l + 1),
                              hidden[l], 1, 0, norm, true, true, false);
    if (dropout_rate > 0.0) {
      auto d = detail::simple_layer(LayerKind::dropout, "drop" + std::to_string(l + 1));
      d.rate = dropout_rate;
      net.layers.push_back(d);
    }
  }
  detail::push_weight_block(net, LayerKind::fully_connected, "fc" + std::to_string(hidden.size() + 1),
                            out_dim, 1, 0, norm == Normalizer::batch_norm ? Normalizer::none : norm,
                            false, false, false);
  net.layers.push_back(detail::simple_layer(LayerKind::softmax_loss, "loss"));
  return net;
}

/// Named parameter tensor owned by a Model.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool decay = false;  // only direction / plain weights decay
};

template <typename T>
struct ForwardPass {
  Var loss;
  Var logits;
  std::vector<Var> outputs;      // one per non-loss layer
  std::vector<Var> param_vars;   // aligned with Model::params()
};

/// Parameters and running statistics for a validated NetworkSpec.
template <typename T>
class Model {
 public:
  Model(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)), shapes_(validate(spec_)) {
    Shape cur = spec_.input;
    slots_.resize(spec_.layers.size());
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& l = spec_.layers[i];
      auto& slot = slots_[i];
      if (l.has_weights()) {
        const Shape ws = l.kind == LayerKind::conv ? Shape{l.out_channels, cur.c, l.kernel, l.kernel}
                                                   : Shape{l.out_channels, cur.per_item(), 1, 1};
        const std::uint64_t layer_seed = Rng::stream(seed, i).next();
        Tensor<T> w = spec_.init == InitKind::orthogonal && l.kind == LayerKind::fully_connected
                          ? orthogonal_init<T>(ws.n, ws.c, layer_seed)
                          : xavier_init<T>(ws, layer_seed);
        slot.weight = add_param(l.name + ".W", std::move(w), true);
        if (l.gamma) slot.gamma = add_param(l.name + ".gamma", Tensor<T>(channel_shape(l.out_channels), T(1)), false);
        if (l.bias) {
          slot.beta = add_param(l.name + (l.weight_mode == WeightMode::plain ? ".b" : ".beta"),
                                Tensor<T>(channel_shape(l.out_channels), T(0)), false);
        }
        if (l.weight_mode == WeightMode::trelu_wn)
          slot.alpha = add_param(l.name + ".alpha", Tensor<T>(channel_shape(l.out_channels), T(0)), false);
      } else if (l.kind == LayerKind::batch_norm) {
        slot.gamma = add_param(l.name + ".gamma", Tensor<T>(channel_shape(cur.c), T(1)), false);
        slot.beta = add_param(l.name + ".beta", Tensor<T>(channel_shape(cur.c), T(0)), false);
        slot.bn = BatchNormParams<T>::make(cur.c, spec_.bn_eps);
      } else if (l.kind == LayerKind::affine) {
        slot.gamma = add_param(l.name + ".gamma", Tensor<T>(channel_shape(cur.c), T(1)), false);
        slot.beta = add_param(l.name + ".beta", Tensor<T>(channel_shape(cur.c), T(0)), false);
      }
      slot.in_shape = cur;
      cur = shapes_[i];
    }
  }

  const NetworkSpec& spec() const noexcept { return spec_; }
  const std::vector<Shape>& shapes() const noexcept { return shapes_; }
  std::vector<Parameter<T>>& params() noexcept { return params_; }
  const std::vector<Parameter<T>>& params() const noexcept { return params_; }

  /// Index into params() of a layer's direction weights, if it has any.
  std::optional<std::size_t> weight_index(std::size_t layer) const { return slots_.at(layer).weight; }

  BatchNormParams<T>* batch_norm_state(std::size_t layer) {
    auto& s = slots_.at(layer);
    return s.bn ? &*s.bn : nullptr;
  }

  /// Records the forward pass for a batch. `dropout_seed` fixes dropout masks.
  ForwardPass<T> forward(Tape<T>& tape, const Tensor<T>& batch, std::vector<int> labels, Mode mode,
                         std::uint64_t dropout_seed = 0) {
    ForwardPass<T> fp;
    for (auto& p : params_) fp.param_vars.push_back(tape.leaf(p.value, p.name));
    auto pv = [&](std::optional<std::size_t> idx) -> std::optional<Var> {
      if (!idx) return std::nullopt;
      return fp.param_vars[*idx];
    };
    Var h = tape.leaf(batch, "input");
    const NPConstants np_k;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& l = spec_.layers[i];
      auto& slot = slots_[i];
      switch (l.kind) {
        case LayerKind::conv:
        case LayerKind::fully_connected: {
          std::optional<ConvSpec> cs;
          if (l.kind == LayerKind::conv) cs = conv_spec_of(l, slot.in_shape.c);
          const Var w = *pv(slot.weight);
          switch (l.weight_mode) {
            case WeightMode::plain:
              h = ad::linear(tape, h, w, cs);
              if (slot.beta) h = ad::channel_affine(tape, h, std::nullopt, pv(slot.beta));
              break;
            case WeightMode::wn:
              h = ad::wn_layer(tape, h, w, pv(slot.gamma), pv(slot.beta), spec_.wn_eps, cs);
              break;
            case WeightMode::np:
              h = ad::np_layer(tape, h, w, pv(slot.gamma), pv(slot.beta), spec_.wn_eps, cs, np_k);
              break;
            case WeightMode::trelu_wn:
              h = ad::trelu_wn_layer(tape, h, w, *pv(slot.alpha), spec_.wn_eps, cs);
              break;
          }
          break;
        }
        case LayerKind::batch_norm:
          h = ad::batch_norm(tape, h, *pv(slot.gamma), *pv(slot.beta), *slot.bn, mode);
          break;
        case LayerKind::relu:
          h = ad::relu(tape, h);
          break;
        case LayerKind::max_pool:
        case LayerKind::avg_pool:
          h = ad::pool(tape, h, l.pool);
          break;
        case LayerKind::affine:
          h = ad::channel_affine(tape, h, pv(slot.gamma), pv(slot.beta));
          break;
        case LayerKind::dropout:
          h = ad::dropout(tape, h, l.rate, mode, Rng::stream(dropout_seed, i).next());
          break;
        case LayerKind::softmax_loss:
          fp.logits = h;
          fp.loss = ad::softmax_cross_entropy(tape, h, std::move(labels));
          continue;
      }
      fp.outputs.push_back(h);
    }
    return fp;
  }

  /// Layer statistics for the recorded pass: norms of every non-loss layer
  /// output, coherence of the weights of every weight layer.
  std::vector<LayerStat> layer_stats(const Tape<T>& tape, const ForwardPass<T>& fp,
                                     bool with_coherence = true) const {
    std::vector<LayerStat> stats;
    for (std::size_t i = 0; i + 1 < spec_.layers.size(); ++i) {
      const auto ns = output_norm_stats(tape.value(fp.outputs[i]));
      LayerStat s{spec_.layers[i].name, ns.l2_norm, ns.normalized_norm, std::nullopt};
      if (with_coherence && slots_[i].weight && params_[*slots_[i].weight].value.shape().n >= 2)
        s.coherence = coherence(params_[*slots_[i].weight].value);
      stats.push_back(std::move(s));
    }
    return stats;
  }

  /// Coherence of each weight layer in layer order.
  std::vector<double> weight_coherences() const {
    std::vector<double> out;
    for (const auto& slot : slots_)
      if (slot.weight && params_[*slot.weight].value.shape().n >= 2)
        out.push_back(coherence(params_[*slot.weight].value));
    return out;
  }

 private:
  struct Slot {
    std::optional<std::size_t> weight, gamma, beta, alpha;
    std::optional<BatchNormParams<T>> bn;
    Shape in_shape{};
  };

  std::size_t add_param(std::string name, Tensor<T> value, bool decay) {
    params_.push_back({std::move(name), std::move(value), decay});
    return params_.size() - 1;
  }

  NetworkSpec spec_;
  std::vector<Shape> shapes_;
  std::vector<Parameter<T>> params_;
  std::vector<Slot> slots_;
};

}  // namespace normlab
