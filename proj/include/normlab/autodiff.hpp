#pragma once

// Reverse-mode differentiation over a recorded sequence of tensor operations.
//
// A Tape owns every value computed during a forward pass. Each recorded
// node keeps a closure that maps the gradient of its output to gradients of
// its inputs; `backward` replays those closures in reverse recording order,
// which is a valid topological order because inputs always precede outputs.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "normlab/errors.hpp"
#include "normlab/norm_layers.hpp"
#include "normlab/ops.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  friend bool operator==(const Var&, const Var&) = default;
};

template <typename T>
class GradientSet;

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, GradientSet<T>& grads)>;

  /// Leaf value (input or parameter). Leaves always receive a gradient.
  Var leaf(Tensor<T> value, std::string name = {}) {
    nodes_.push_back({std::move(value), nullptr, true, std::move(name)});
    return Var{nodes_.size() - 1};
  }

  Var record(Tensor<T> value, BackwardFn backward) {
    nodes_.push_back({std::move(value), std::move(backward), false, {}});
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool is_leaf(Var v) const { return nodes_.at(v.id).leaf; }
  const std::string& name(Var v) const { return nodes_.at(v.id).name; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// When enabled, non-smooth ops append their discrete decisions (ReLU
  /// masks, max-pool winners) so gradient checks can detect kink crossings.
  void set_record_branches(bool on) { record_branches_ = on; }
  bool recording_branches() const noexcept { return record_branches_; }
  void note_branch(std::uint32_t decision) {
    if (record_branches_) branches_.push_back(decision);
  }
  const std::vector<std::uint32_t>& branch_signature() const noexcept { return branches_; }

 private:
  friend class GradientSet<T>;
  template <typename U>
  friend GradientSet<U> backward(const Tape<U>&, Var, double);

  struct Node {
    Tensor<T> value;
    BackwardFn backward;
    bool leaf;
    std::string name;
  };

  std::vector<Node> nodes_;
  bool record_branches_ = false;
  std::vector<std::uint32_t> branches_;
};

/// Gradient for every node reached by a backward pass; leaves that the loss
/// does not depend on hold zeros of matching shape.
template <typename T>
class GradientSet {
 public:
  explicit GradientSet(std::size_t nodes) : grads_(nodes) {}

  void accumulate(Var v, Tensor<T> g) {
    auto& slot = grads_.at(v.id);
    if (!slot) {
      slot = std::move(g);
    } else {
      add_inplace(*slot, g);
    }
  }

  bool has(Var v) const { return grads_.at(v.id).has_value(); }

  const Tensor<T>& operator[](Var v) const {
    const auto& slot = grads_.at(v.id);
    detail::require(slot.has_value(), "gradient requested for node " + std::to_string(v.id) +
                                          " that the loss does not reach");
    return *slot;
  }

  Tensor<T>& mutable_grad(Var v) { return *grads_.at(v.id); }

 private:
  std::vector<std::optional<Tensor<T>>> grads_;
};

/// Seeds d(loss)/d(loss) = seed and propagates to every recorded node.
template <typename T>
GradientSet<T> backward(const Tape<T>& tape, Var loss, double seed = 1.0) {
  detail::require(tape.value(loss).size() == 1,
                  "backward: terminal node must be a scalar, got shape " +
                      to_string(tape.value(loss).shape()));
  GradientSet<T> grads(tape.size());
  grads.accumulate(loss, Tensor<T>(tape.value(loss).shape(), static_cast<T>(seed)));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    const auto& node = tape.nodes_[i];
    if (!node.backward || !grads.has(Var{i})) continue;
    node.backward(grads[Var{i}], grads);
  }
  for (std::size_t i = 0; i < tape.size(); ++i) {
    if (tape.nodes_[i].leaf && !grads.has(Var{i}))
      grads.accumulate(Var{i}, Tensor<T>(tape.nodes_[i].value.shape()));
  }
  return grads;
}

// Differentiable operations. Each computes its forward value with the
// kernels in ops.hpp / norm_layers.hpp and records the matching backward.
namespace ad {

template <typename T>
Var sum(Tape<T>& t, Var x) {
  double s = 0.0;
  for (T v : t.value(x).data()) s += v;
  const Shape in = t.value(x).shape();
  return t.record(Tensor<T>({1, 1, 1, 1}, {static_cast<T>(s)}),
                  [x, in](const Tensor<T>& g, GradientSet<T>& gs) {
                    gs.accumulate(x, Tensor<T>(in, g[0]));
                  });
}

/// sum_i x_i^2
template <typename T>
Var sum_squares(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  const auto s = static_cast<T>(normlab::sum_squares(xv.data()));
  Tensor<T> xc = xv;
  return t.record(Tensor<T>({1, 1, 1, 1}, {s}),
                  [x, xc = std::move(xc)](const Tensor<T>& g, GradientSet<T>& gs) {
                    gs.accumulate(x, scale(xc, static_cast<T>(2 * g[0])));
                  });
}

/// sum_i x_i * r_i with a constant r; turns any tensor op into a scalar
/// loss for gradient checking.
template <typename T>
Var project(Tape<T>& t, Var x, const Tensor<T>& r) {
  detail::require(t.value(x).shape() == r.shape(), "project: shape mismatch");
  const auto s = static_cast<T>(dot(t.value(x).data(), r.data()));
  return t.record(Tensor<T>({1, 1, 1, 1}, {s}), [x, r](const Tensor<T>& g, GradientSet<T>& gs) {
    gs.accumulate(x, scale(r, g[0]));
  });
}

template <typename T>
Var conv2d(Tape<T>& t, Var x, Var w, const ConvSpec& spec) {
  Tensor<T> out = normlab::conv2d(t.value(x), spec, t.value(w));
  return t.record(std::move(out), [&t, x, w, spec](const Tensor<T>& g, GradientSet<T>& gs) {
    Tensor<T> gx, gw;
    conv2d_backward(t.value(x), spec, t.value(w), g, &gx, &gw);
    gs.accumulate(x, std::move(gx));
    gs.accumulate(w, std::move(gw));
  });
}

template <typename T>
Var fully_connected(Tape<T>& t, Var x, Var w) {
  Tensor<T> out = normlab::fully_connected(t.value(x), t.value(w));
  return t.record(std::move(out), [&t, x, w](const Tensor<T>& g, GradientSet<T>& gs) {
    Tensor<T> gx, gw;
    fully_connected_backward(t.value(x), t.value(w), g, &gx, &gw);
    gs.accumulate(x, std::move(gx));
    gs.accumulate(w, std::move(gw));
  });
}

template <typename T>
Var linear(Tape<T>& t, Var x, Var w, const std::optional<ConvSpec>& conv) {
  return conv ? conv2d(t, x, w, *conv) : fully_connected(t, x, w);
}

template <typename T>
Var relu(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> out = normlab::relu(xv);
  std::vector<bool> active(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    active[i] = xv[i] > T(0);
    t.note_branch(active[i] ? 1u : 0u);
  }
  return t.record(std::move(out), [x, active = std::move(active)](const Tensor<T>& g,
                                                                  GradientSet<T>& gs) {
    Tensor<T> gx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = active[i] ? g[i] : T(0);
    gs.accumulate(x, std::move(gx));
  });
}

/// Translated ReLU with a learnable per-channel threshold `alpha` (1, C, 1, 1).
template <typename T>
Var trelu(Tape<T>& t, Var x, Var alpha) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& av = t.value(alpha);
  Tensor<T> out = normlab::trelu(xv, av.data());
  const Shape s = xv.shape();
  std::vector<bool> pass(xv.size());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < s.spatial(); ++i) {
        const std::size_t k = (n * s.c + c) * s.spatial() + i;
        pass[k] = xv[k] > av[c];
        t.note_branch(pass[k] ? 1u : 0u);
      }
  const Shape as = av.shape();
  return t.record(std::move(out), [x, alpha, s, as, pass = std::move(pass)](
                                      const Tensor<T>& g, GradientSet<T>& gs) {
    Tensor<T> gx(s), ga(as);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t i = 0; i < s.spatial(); ++i) {
          const std::size_t k = (n * s.c + c) * s.spatial() + i;
          if (pass[k]) {
            gx[k] = g[k];
          } else {
            ga[c] += g[k];
          }
        }
    gs.accumulate(x, std::move(gx));
    gs.accumulate(alpha, std::move(ga));
  });
}

template <typename T>
Var pool(Tape<T>& t, Var x, const PoolSpec& spec) {
  auto r = pool_with_indices(t.value(x), spec);
  for (auto i : r.argmax) t.note_branch(i);
  const Shape in = t.value(x).shape();
  return t.record(std::move(r.out), [x, in, spec, idx = std::move(r.argmax)](
                                        const Tensor<T>& g, GradientSet<T>& gs) {
    gs.accumulate(x, pool_backward(in, spec, std::span<const std::uint32_t>(idx), g));
  });
}

/// Mean softmax cross-entropy; the backward is (p - onehot) / m.
template <typename T>
Var softmax_cross_entropy(Tape<T>& t, Var logits, std::vector<int> labels) {
  auto r = normlab::softmax_cross_entropy(t.value(logits), labels);
  const Shape ls = t.value(logits).shape();
  return t.record(Tensor<T>({1, 1, 1, 1}, {static_cast<T>(r.loss)}),
                  [logits, ls, labels = std::move(labels), probs = std::move(r.probabilities)](
                      const Tensor<T>& g, GradientSet<T>& gs) {
                    const std::size_t m = ls.n;
                    const std::size_t k = ls.per_item();
                    Tensor<T> gx(ls);
                    const double s = static_cast<double>(g[0]) / static_cast<double>(m);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < k; ++j) {
                        const double onehot = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
                        gx[i * k + j] = static_cast<T>(s * (probs[i * k + j] - onehot));
                      }
                    gs.accumulate(logits, std::move(gx));
                  });
}

/// Per-channel gamma * x + beta; pass an invalid Var to omit either.
template <typename T>
Var channel_affine(Tape<T>& t, Var x, std::optional<Var> gamma, std::optional<Var> beta) {
  static const Tensor<T> none;
  const Tensor<T>& gv = gamma ? t.value(*gamma) : none;
  const Tensor<T>& bv = beta ? t.value(*beta) : none;
  Tensor<T> out = normlab::channel_affine(t.value(x), gv, bv);
  return t.record(std::move(out), [&t, x, gamma, beta](const Tensor<T>& g, GradientSet<T>& gs) {
    const Tensor<T>& xv = t.value(x);
    const Shape s = xv.shape();
    Tensor<T> gx(s);
    Tensor<T> gg(channel_shape(s.c)), gb(channel_shape(s.c));
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const T scale_c = gamma ? t.value(*gamma)[c] : T(1);
        const std::size_t base = (n * s.c + c) * s.spatial();
        double acc_g = 0.0, acc_b = 0.0;
        for (std::size_t i = 0; i < s.spatial(); ++i) {
          gx[base + i] = scale_c * g[base + i];
          acc_g += static_cast<double>(g[base + i]) * xv[base + i];
          acc_b += g[base + i];
        }
        gg[c] += static_cast<T>(acc_g);
        gb[c] += static_cast<T>(acc_b);
      }
    gs.accumulate(x, std::move(gx));
    if (gamma) gs.accumulate(*gamma, std::move(gg));
    if (beta) gs.accumulate(*beta, std::move(gb));
  });
}

/// a * (x - b) with constants a, b.
template <typename T>
Var shift_scale(Tape<T>& t, Var x, double a, double b) {
  Tensor<T> out(t.value(x).shape());
  const Tensor<T>& xv = t.value(x);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = static_cast<T>(a * (xv[i] - b));
  return t.record(std::move(out), [x, a](const Tensor<T>& g, GradientSet<T>& gs) {
    gs.accumulate(x, scale(g, static_cast<T>(a)));
  });
}

/// Elementwise product with a constant mask (dropout with a frozen mask).
template <typename T>
Var mask(Tape<T>& t, Var x, Tensor<T> m) {
  const Tensor<T>& xv = t.value(x);
  detail::require(xv.shape() == m.shape(), "mask: shape mismatch");
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * m[i];
  return t.record(std::move(out), [x, m = std::move(m)](const Tensor<T>& g, GradientSet<T>& gs) {
    Tensor<T> gx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * m[i];
    gs.accumulate(x, std::move(gx));
  });
}

template <typename T>
Var dropout(Tape<T>& t, Var x, double rate, Mode mode, std::uint64_t seed) {
  detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (mode == Mode::infer || rate == 0.0) return x;
  return mask(t, x, dropout_mask<T>(t.value(x).shape(), rate, seed));
}

template <typename T>
Var weight_normalize(Tape<T>& t, Var w, double eps) {
  Tensor<T> out = normlab::weight_normalize(t.value(w), eps);
  return t.record(std::move(out), [&t, w, eps](const Tensor<T>& g, GradientSet<T>& gs) {
    gs.accumulate(w, weight_normalize_backward(t.value(w), eps, g));
  });
}

/// Batch normalization with learnable gamma/beta Vars; running averages in
/// `p` are updated in train mode. p.gamma/p.beta are not read.
template <typename T>
Var batch_norm(Tape<T>& t, Var x, Var gamma, Var beta, BatchNormParams<T>& p, Mode mode) {
  BatchNormParams<T> view{t.value(gamma), t.value(beta), p.eps, p.rho, p.running_mean,
                          p.running_var};
  auto fwd = std::make_shared<BatchNormResult<T>>(batch_norm_forward(t.value(x), view, mode));
  p.running_mean = view.running_mean;
  p.running_var = view.running_var;
  Tensor<T> out = fwd->out;
  return t.record(std::move(out), [&t, x, gamma, beta, mode, fwd](const Tensor<T>& g,
                                                                 GradientSet<T>& gs) {
    Tensor<T> gx, gg, gb;
    batch_norm_backward(*fwd, t.value(gamma), mode, g, &gx, &gg, &gb);
    gs.accumulate(x, std::move(gx));
    gs.accumulate(gamma, std::move(gg));
    gs.accumulate(beta, std::move(gb));
  });
}

// Composite weight-normalized layers built from the primitives above.

template <typename T>
Var wn_layer(Tape<T>& t, Var x, Var direction, std::optional<Var> gamma, std::optional<Var> beta,
             double eps, const std::optional<ConvSpec>& conv) {
  const Var w_hat = weight_normalize(t, direction, eps);
  const Var lin = linear(t, x, w_hat, conv);
  if (!gamma && !beta) return lin;
  return channel_affine(t, lin, gamma, beta);
}

template <typename T>
Var np_layer(Tape<T>& t, Var x, Var direction, std::optional<Var> gamma, std::optional<Var> beta,
             double eps, const std::optional<ConvSpec>& conv, const NPConstants& k = {}) {
  const Var u = wn_layer(t, x, direction, gamma, beta, eps, conv);
  return shift_scale(t, relu(t, u), k.c_var, k.c_mean);
}

template <typename T>
Var trelu_wn_layer(Tape<T>& t, Var x, Var direction, Var alpha, double eps,
                   const std::optional<ConvSpec>& conv) {
  return trelu(t, wn_layer(t, x, direction, std::nullopt, std::nullopt, eps, conv), alpha);
}

}  // namespace ad
}  // namespace normlab
