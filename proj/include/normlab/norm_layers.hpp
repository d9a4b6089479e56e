#pragma once

// Batch normalization and the weight-normalization family (WN, NP,
// TReLU-WN), plus the last-layer affine map and inverted dropout.
//
// Learnable per-channel parameters are stored as (1, C, 1, 1) tensors so the
// optimizer and the autodiff tape treat them like any other weight.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "normlab/errors.hpp"
#include "normlab/ops.hpp"
#include "normlab/random.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

enum class Mode { train, infer };

inline Shape channel_shape(std::size_t c) { return {1, c, 1, 1}; }

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  double eps = 1e-5;
  double rho = 0.99;  // r <- rho * r + (1 - rho) * batch_stat
  std::vector<double> running_mean;
  std::vector<double> running_var;

  static BatchNormParams make(std::size_t channels, double eps = 1e-5, double rho = 0.99) {
    return {Tensor<T>(channel_shape(channels), T(1)),
            Tensor<T>(channel_shape(channels), T(0)),
            eps,
            rho,
            std::vector<double>(channels, 0.0),
            std::vector<double>(channels, 1.0)};
  }

  std::size_t channels() const { return gamma.size(); }
};

template <typename T>
struct BatchNormResult {
  Tensor<T> out;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // population estimator, divisor m*H*W
  Tensor<T> normalized;           // x_hat, before gamma/beta
  std::vector<double> inv_std;    // 1 / sqrt(var + eps) actually used
};

/// Per-channel standardization over all m*H*W pixels, then gamma/beta.
/// Train mode uses (and folds into the running averages) the batch
/// statistics; infer mode uses the running averages untouched.
template <typename T>
BatchNormResult<T> batch_norm_forward(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode) {
  const Shape& s = x.shape();
  const std::size_t c_count = s.c;
  detail::require(p.channels() == c_count && p.beta.size() == c_count &&
                      p.running_mean.size() == c_count && p.running_var.size() == c_count,
                  "batch_norm: parameter length does not match " + std::to_string(c_count) +
                      " channels");
  detail::require(p.eps >= 0.0, "batch_norm: eps must be >= 0");
  const std::size_t pixels = s.n * s.spatial();
  if (mode == Mode::train) {
    detail::require(pixels >= 2, "batch_norm: train mode needs m*H*W >= 2, got " +
                                     std::to_string(pixels));
  }

  BatchNormResult<T> r{Tensor<T>(s), std::vector<double>(c_count), std::vector<double>(c_count),
                       Tensor<T>(s), std::vector<double>(c_count)};
  for (std::size_t c = 0; c < c_count; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* plane = x.raw() + (n * c_count + c) * s.spatial();
        for (std::size_t i = 0; i < s.spatial(); ++i) acc += plane[i];
      }
      mean = acc / static_cast<double>(pixels);
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* plane = x.raw() + (n * c_count + c) * s.spatial();
        for (std::size_t i = 0; i < s.spatial(); ++i) {
          const double d = plane[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(pixels);
      p.running_mean[c] = p.rho * p.running_mean[c] + (1.0 - p.rho) * mean;
      p.running_var[c] = p.rho * p.running_var[c] + (1.0 - p.rho) * var;
    } else {
      mean = p.running_mean[c];
      var = p.running_var[c];
    }
    r.batch_mean[c] = mean;
    r.batch_var[c] = var;
    const double denom = std::sqrt(var + p.eps);
    detail::require(denom > 0.0, "batch_norm: zero variance with eps = 0");
    const double inv = 1.0 / denom;
    r.inv_std[c] = inv;
    const double g = p.gamma[c];
    const double b = p.beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = (n * c_count + c) * s.spatial();
      for (std::size_t i = 0; i < s.spatial(); ++i) {
        const double xh = (x[base + i] - mean) * inv;
        r.normalized[base + i] = static_cast<T>(xh);
        r.out[base + i] = static_cast<T>(g * xh + b);
      }
    }
  }
  return r;
}

/// Gradients of batch_norm_forward. In train mode the batch statistics are
/// differentiated through; in infer mode the map is affine in x.
template <typename T>
void batch_norm_backward(const BatchNormResult<T>& fwd, const Tensor<T>& gamma, Mode mode,
                         const Tensor<T>& grad_out, Tensor<T>* grad_x, Tensor<T>* grad_gamma,
                         Tensor<T>* grad_beta) {
  const Shape& s = grad_out.shape();
  const std::size_t pixels = s.n * s.spatial();
  if (grad_x) *grad_x = Tensor<T>(s);
  if (grad_gamma) *grad_gamma = Tensor<T>(gamma.shape());
  if (grad_beta) *grad_beta = Tensor<T>(gamma.shape());
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = (n * s.c + c) * s.spatial();
      for (std::size_t i = 0; i < s.spatial(); ++i) {
        sum_dy += grad_out[base + i];
        sum_dy_xh += static_cast<double>(grad_out[base + i]) * fwd.normalized[base + i];
      }
    }
    if (grad_gamma) (*grad_gamma)[c] = static_cast<T>(sum_dy_xh);
    if (grad_beta) (*grad_beta)[c] = static_cast<T>(sum_dy);
    if (!grad_x) continue;
    const double g = gamma[c] * fwd.inv_std[c];
    const double inv_n = 1.0 / static_cast<double>(pixels);
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = (n * s.c + c) * s.spatial();
      for (std::size_t i = 0; i < s.spatial(); ++i) {
        double dx;
        if (mode == Mode::train) {
          dx = g * (grad_out[base + i] - inv_n * sum_dy -
                    fwd.normalized[base + i] * inv_n * sum_dy_xh);
        } else {
          dx = g * grad_out[base + i];
        }
        (*grad_x)[base + i] = static_cast<T>(dx);
      }
    }
  }
}

/// Per-output-channel W_j / (||W_j||_F + eps); W_j is the j-th item along
/// the leading axis of the weight tensor.
template <typename T>
Tensor<T> weight_normalize(const Tensor<T>& w, double eps) {
  detail::require(eps >= 0.0, "weight_normalize: eps must be >= 0");
  Tensor<T> out(w.shape());
  for (std::size_t j = 0; j < w.shape().n; ++j) {
    const double nrm = std::sqrt(sum_squares(w.item(j)));
    const double denom = nrm + eps;
    detail::require(denom > 0.0, "weight_normalize: output channel " + std::to_string(j) +
                                     " is all-zero and eps = 0");
    auto src = w.item(j);
    auto dst = out.item(j);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i] / denom);
  }
  return out;
}

/// dL/dW given dL/dW_hat, treating eps as a constant.
template <typename T>
Tensor<T> weight_normalize_backward(const Tensor<T>& w, double eps, const Tensor<T>& grad_hat) {
  Tensor<T> gw(w.shape());
  for (std::size_t j = 0; j < w.shape().n; ++j) {
    auto wj = w.item(j);
    auto gh = grad_hat.item(j);
    auto gj = gw.item(j);
    const double nrm = std::sqrt(sum_squares(wj));
    const double denom = nrm + eps;
    const double proj = dot(gh, wj);
    // d(w_i / s)/dw_k = delta_ik / s - w_i w_k / (s^2 ||w||)
    const double coef = nrm > 0.0 ? proj / (denom * denom * nrm) : 0.0;
    for (std::size_t i = 0; i < wj.size(); ++i)
      gj[i] = static_cast<T>(gh[i] / denom - coef * wj[i]);
  }
  return gw;
}

/// Direction weights plus optional per-channel scale and bias. When `conv`
/// is empty the layer is fully connected.
template <typename T>
struct WeightNormParams {
  Tensor<T> direction;
  Tensor<T> gamma;  // empty when the layer carries no scale
  Tensor<T> beta;   // empty when the layer carries no bias
  double eps = 1e-6;
  std::optional<ConvSpec> conv;

  std::size_t out_channels() const { return direction.shape().n; }
  bool has_gamma() const { return !gamma.empty(); }
  bool has_beta() const { return !beta.empty(); }

  static WeightNormParams make(Tensor<T> w, std::optional<ConvSpec> conv, bool with_gamma = true,
                               bool with_beta = true, double eps = 1e-6) {
    const std::size_t c = w.shape().n;
    WeightNormParams p{std::move(w), {}, {}, eps, conv};
    if (with_gamma) p.gamma = Tensor<T>(channel_shape(c), T(1));
    if (with_beta) p.beta = Tensor<T>(channel_shape(c), T(0));
    return p;
  }
};

template <typename T>
struct TReLUParams {
  Tensor<T> alpha;

  static TReLUParams make(std::size_t channels) {
    return {Tensor<T>(channel_shape(channels), T(0))};
  }
};

/// Rectified-Gaussian moments used to renormalize a ReLU of N(0, 1) input.
struct NPConstants {
  double c_var = 1.0 / std::sqrt(0.5 * (1.0 - 1.0 / std::numbers::pi));
  double c_mean = std::sqrt(1.0 / (2.0 * std::numbers::pi));
};

/// o_j = gamma_j x_j + beta_j per channel. Either tensor may be empty
/// (meaning 1 and 0 respectively).
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const Shape& s = x.shape();
  detail::require(gamma.empty() || gamma.size() == s.c, "channel_affine: gamma length mismatch");
  detail::require(beta.empty() || beta.size() == s.c, "channel_affine: beta length mismatch");
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T g = gamma.empty() ? T(1) : gamma[c];
      const T b = beta.empty() ? T(0) : beta[c];
      const std::size_t base = (n * s.c + c) * s.spatial();
      for (std::size_t i = 0; i < s.spatial(); ++i) out[base + i] = g * x[base + i] + b;
    }
  return out;
}

template <typename T>
Tensor<T> last_layer_affine(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  return channel_affine(x, gamma, beta);
}

/// The linear part of a weight layer applied with the given weights.
template <typename T>
Tensor<T> apply_linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<ConvSpec>& conv) {
  return conv ? conv2d(x, *conv, w) : fully_connected(x, w);
}

/// gamma_j (W_j * x) / (||W_j||_F + eps) + beta_j
template <typename T>
Tensor<T> wn_layer_forward(const Tensor<T>& x, const WeightNormParams<T>& p) {
  return channel_affine(apply_linear(x, weight_normalize(p.direction, p.eps), p.conv), p.gamma,
                        p.beta);
}

/// c_var * (relu(gamma * W_hat * x + beta) - c_mean)
template <typename T>
Tensor<T> np_layer_forward(const Tensor<T>& x, const WeightNormParams<T>& p,
                           const NPConstants& k = {}) {
  Tensor<T> r = relu(wn_layer_forward(x, p));
  for (auto& v : r.data()) v = static_cast<T>(k.c_var * (v - k.c_mean));
  return r;
}

/// relu(W_hat * x - alpha_j) + alpha_j; gamma/beta of `p` are ignored.
template <typename T>
Tensor<T> trelu_wn_layer_forward(const Tensor<T>& x, const WeightNormParams<T>& p,
                                 const TReLUParams<T>& t) {
  return trelu(apply_linear(x, weight_normalize(p.direction, p.eps), p.conv), t.alpha.data());
}

/// Keep-mask scaled by 1 / (1 - rate); entries are 0 or 1 / (1 - rate).
template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double rate, std::uint64_t seed) {
  detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  Tensor<T> mask(shape);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  Rng rng(seed);
  for (auto& v : mask.data()) v = rng.bernoulli(rate) ? T(0) : keep;
  return mask;
}

/// Inverted dropout; identity in infer mode.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed) {
  detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (mode == Mode::infer || rate == 0.0) return x;
  const Tensor<T> mask = dropout_mask<T>(x.shape(), rate, seed);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  return out;
}

}  // namespace normlab
