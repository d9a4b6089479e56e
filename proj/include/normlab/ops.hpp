#pragma once

// Forward primitives (and the matching backward kernels) for the layers every
// network in this library is built from. All functions are pure: they read
// their arguments and return fresh tensors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "normlab/errors.hpp"
#include "normlab/gemm.hpp"
#include "normlab/random.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

/// Convolution geometry. Kernel extent is (C_out, C_in, kH, kW).
struct ConvSpec {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Shape kernel_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }

  static ConvSpec square(std::size_t out_c, std::size_t in_c, std::size_t k,
                         std::size_t stride = 1, std::size_t pad = 0) {
    return {out_c, in_c, k, k, stride, pad};
  }

  /// floor((H + 2 pad - kH) / stride) + 1
  std::size_t out_h(std::size_t h) const { return (h + 2 * pad - kernel_h) / stride + 1; }
  std::size_t out_w(std::size_t w) const { return (w + 2 * pad - kernel_w) / stride + 1; }

  Shape output_shape(const Shape& in) const {
    return {in.n, out_channels, out_h(in.h), out_w(in.w)};
  }
};

namespace detail {

inline void check_conv(const Shape& x, const ConvSpec& spec, const Shape& w) {
  require(spec.stride >= 1, "conv2d: stride must be >= 1");
  require(w == spec.kernel_shape(),
          "conv2d: weights " + to_string(w) + " do not match kernel " + to_string(spec.kernel_shape()));
  require(x.c == spec.in_channels, "conv2d: input has " + std::to_string(x.c) +
                                       " channels, kernel expects " +
                                       std::to_string(spec.in_channels));
  require(x.h + 2 * spec.pad >= spec.kernel_h && x.w + 2 * spec.pad >= spec.kernel_w,
          "conv2d: kernel larger than padded input");
}

// col has shape (C_in*kH*kW) x (Ho*Wo); rows ordered (c, kh, kw).
template <typename T>
void im2col(std::span<const T> img, std::size_t channels, std::size_t h, std::size_t w,
            const ConvSpec& spec, std::size_t ho, std::size_t wo, T* col) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < spec.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < spec.kernel_w; ++kj) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ki) -
                          static_cast<std::ptrdiff_t>(spec.pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kj) -
                            static_cast<std::ptrdiff_t>(spec.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            *col++ = inside ? img[(c * h + static_cast<std::size_t>(iy)) * w +
                                  static_cast<std::size_t>(ix)]
                            : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t h, std::size_t w,
            const ConvSpec& spec, std::size_t ho, std::size_t wo, std::span<T> img) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < spec.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < spec.kernel_w; ++kj) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ki) -
                          static_cast<std::ptrdiff_t>(spec.pad);
          for (std::size_t ox = 0; ox < wo; ++ox, ++col) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kj) -
                            static_cast<std::ptrdiff_t>(spec.pad);
            if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                ix < static_cast<std::ptrdiff_t>(w)) {
              img[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += *col;
            }
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvSpec& s) {
  return s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1 && s.pad == 0;
}

}  // namespace detail

/// Cross-correlation (no kernel flip) with zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weights) {
  detail::check_conv(x.shape(), spec, weights.shape());
  const Shape out_shape = spec.output_shape(x.shape());
  Tensor<T> out(out_shape);
  const std::size_t k = spec.in_channels * spec.kernel_h * spec.kernel_w;
  const std::size_t p = out_shape.spatial();
  std::vector<T> col(detail::is_pointwise(spec) ? 0 : k * p);
  for (std::size_t n = 0; n < x.shape().n; ++n) {
    const T* src = x.item(n).data();
    if (!detail::is_pointwise(spec)) {
      detail::im2col(x.item(n), x.shape().c, x.shape().h, x.shape().w, spec, out_shape.h,
                     out_shape.w, col.data());
      src = col.data();
    }
    blas::gemm(false, false, spec.out_channels, p, k, T(1), weights.raw(), src, T(0),
               out.item(n).data());
  }
  return out;
}

/// Gradients of conv2d with respect to its input and its weights.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weights,
                     const Tensor<T>& grad_out, Tensor<T>* grad_x, Tensor<T>* grad_w) {
  const Shape out_shape = spec.output_shape(x.shape());
  const std::size_t k = spec.in_channels * spec.kernel_h * spec.kernel_w;
  const std::size_t p = out_shape.spatial();
  const bool pointwise = detail::is_pointwise(spec);
  std::vector<T> col(pointwise ? 0 : k * p);
  std::vector<T> dcol(pointwise ? 0 : k * p);
  if (grad_x) *grad_x = Tensor<T>(x.shape());
  if (grad_w) *grad_w = Tensor<T>(weights.shape());
  for (std::size_t n = 0; n < x.shape().n; ++n) {
    const T* dy = grad_out.item(n).data();
    if (grad_w) {
      const T* src = x.item(n).data();
      if (!pointwise) {
        detail::im2col(x.item(n), x.shape().c, x.shape().h, x.shape().w, spec, out_shape.h,
                       out_shape.w, col.data());
        src = col.data();
      }
      blas::gemm(false, true, spec.out_channels, k, p, T(1), dy, src, T(1), grad_w->raw());
    }
    if (grad_x) {
      if (pointwise) {
        blas::gemm(true, false, k, p, spec.out_channels, T(1), weights.raw(), dy, T(0),
                   grad_x->item(n).data());
      } else {
        blas::gemm(true, false, k, p, spec.out_channels, T(1), weights.raw(), dy, T(0),
                   dcol.data());
        detail::col2im(dcol.data(), x.shape().c, x.shape().h, x.shape().w, spec, out_shape.h,
                       out_shape.w, grad_x->item(n));
      }
    }
  }
}

/// o = W x per sample, no bias. x is flattened per sample to D_in = C*H*W;
/// W has extent (D_out, D_in, 1, 1). Output extent is (m, D_out, 1, 1).
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weights) {
  const std::size_t d_in = x.shape().per_item();
  detail::require(weights.shape().per_item() == d_in,
                  "fully_connected: input length " + std::to_string(d_in) +
                      " does not match weight columns " +
                      std::to_string(weights.shape().per_item()));
  const std::size_t d_out = weights.shape().n;
  Tensor<T> out({x.shape().n, d_out, 1, 1});
  blas::gemm(false, true, x.shape().n, d_out, d_in, T(1), x.raw(), weights.raw(), T(0),
             out.raw());
  return out;
}

template <typename T>
void fully_connected_backward(const Tensor<T>& x, const Tensor<T>& weights,
                              const Tensor<T>& grad_out, Tensor<T>* grad_x, Tensor<T>* grad_w) {
  const std::size_t m = x.shape().n;
  const std::size_t d_in = x.shape().per_item();
  const std::size_t d_out = weights.shape().n;
  if (grad_x) {
    *grad_x = Tensor<T>(x.shape());
    blas::gemm(false, false, m, d_in, d_out, T(1), grad_out.raw(), weights.raw(), T(0),
               grad_x->raw());
  }
  if (grad_w) {
    *grad_w = Tensor<T>(weights.shape());
    blas::gemm(true, false, d_out, d_in, m, T(1), grad_out.raw(), x.raw(), T(0), grad_w->raw());
  }
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

/// Translated ReLU: per channel j, max(x - alpha_j, 0) + alpha_j.
template <typename T>
Tensor<T> trelu(const Tensor<T>& x, std::span<const T> alpha) {
  const Shape& s = x.shape();
  detail::require(alpha.size() == s.c, "trelu: alpha length " + std::to_string(alpha.size()) +
                                           " != channels " + std::to_string(s.c));
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T a = alpha[c];
      const std::size_t base = (n * s.c + c) * s.spatial();
      for (std::size_t i = 0; i < s.spatial(); ++i) {
        const T v = x[base + i];
        out[base + i] = v > a ? v : a;
      }
    }
  return out;
}

enum class PoolKind { max, avg };

struct PoolSpec {
  PoolKind kind = PoolKind::max;
  std::size_t window = 2;
  std::size_t stride = 2;
  std::size_t pad = 0;

  std::size_t out_extent(std::size_t e) const { return (e + 2 * pad - window) / stride + 1; }
  Shape output_shape(const Shape& in) const {
    return {in.n, in.c, out_extent(in.h), out_extent(in.w)};
  }
};

namespace detail {

inline void check_pool(const Shape& x, const PoolSpec& spec) {
  require(spec.window >= 1 && spec.stride >= 1, "pool: window and stride must be >= 1");
  require(x.h + 2 * spec.pad >= spec.window && x.w + 2 * spec.pad >= spec.window,
          "pool: window " + std::to_string(spec.window) + " does not fit input " + to_string(x));
  require(spec.pad < spec.window, "pool: padding must be smaller than the window");
}

// Visits the in-bounds input offsets of one pooling window in scan order.
template <typename F>
void for_window(const Shape& s, const PoolSpec& spec, std::size_t oy, std::size_t ox, F&& f) {
  const auto y0 = static_cast<std::ptrdiff_t>(oy * spec.stride) - static_cast<std::ptrdiff_t>(spec.pad);
  const auto x0 = static_cast<std::ptrdiff_t>(ox * spec.stride) - static_cast<std::ptrdiff_t>(spec.pad);
  for (std::ptrdiff_t y = y0; y < y0 + static_cast<std::ptrdiff_t>(spec.window); ++y) {
    if (y < 0 || y >= static_cast<std::ptrdiff_t>(s.h)) continue;
    for (std::ptrdiff_t x = x0; x < x0 + static_cast<std::ptrdiff_t>(spec.window); ++x) {
      if (x < 0 || x >= static_cast<std::ptrdiff_t>(s.w)) continue;
      f(static_cast<std::size_t>(y) * s.w + static_cast<std::size_t>(x));
    }
  }
}

}  // namespace detail

/// Pooling result plus, for max pooling, the winning input offset of each
/// output (first maximum in scan order).
template <typename T>
struct PoolResult {
  Tensor<T> out;
  std::vector<std::uint32_t> argmax;
};

/// Max or average pooling with zero padding. Padded positions never win a
/// max and are excluded from the average's divisor.
template <typename T>
PoolResult<T> pool_with_indices(const Tensor<T>& x, const PoolSpec& spec) {
  detail::check_pool(x.shape(), spec);
  const Shape& s = x.shape();
  const Shape os = spec.output_shape(s);
  PoolResult<T> r{Tensor<T>(os), {}};
  if (spec.kind == PoolKind::max) r.argmax.resize(os.count());
  for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
    const T* in = x.raw() + plane * s.spatial();
    for (std::size_t oy = 0; oy < os.h; ++oy)
      for (std::size_t ox = 0; ox < os.w; ++ox) {
        const std::size_t o = plane * os.spatial() + oy * os.w + ox;
        if (spec.kind == PoolKind::max) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = 0;
          bool first = true;
          detail::for_window(s, spec, oy, ox, [&](std::size_t i) {
            if (first || in[i] > best) {
              best = in[i];
              best_i = i;
              first = false;
            }
          });
          r.out[o] = best;
          r.argmax[o] = static_cast<std::uint32_t>(best_i);
        } else {
          T acc = T(0);
          std::size_t count = 0;
          detail::for_window(s, spec, oy, ox, [&](std::size_t i) {
            acc += in[i];
            ++count;
          });
          r.out[o] = acc / static_cast<T>(count);
        }
      }
  }
  return r;
}

template <typename T>
Tensor<T> pool(const Tensor<T>& x, const PoolSpec& spec) {
  return pool_with_indices(x, spec).out;
}

template <typename T>
Tensor<T> pool_backward(const Shape& in_shape, const PoolSpec& spec,
                        std::span<const std::uint32_t> argmax, const Tensor<T>& grad_out) {
  const Shape os = spec.output_shape(in_shape);
  Tensor<T> gx(in_shape);
  for (std::size_t plane = 0; plane < in_shape.n * in_shape.c; ++plane) {
    T* g = gx.raw() + plane * in_shape.spatial();
    for (std::size_t oy = 0; oy < os.h; ++oy)
      for (std::size_t ox = 0; ox < os.w; ++ox) {
        const std::size_t o = plane * os.spatial() + oy * os.w + ox;
        if (spec.kind == PoolKind::max) {
          g[argmax[o]] += grad_out[o];
        } else {
          std::size_t count = 0;
          detail::for_window(in_shape, spec, oy, ox, [&](std::size_t) { ++count; });
          const T share = grad_out[o] / static_cast<T>(count);
          detail::for_window(in_shape, spec, oy, ox, [&](std::size_t i) { g[i] += share; });
        }
      }
  }
  return gx;
}

template <typename T>
struct SoftmaxXent {
  double loss = 0.0;
  Tensor<T> probabilities;  // (m, K, 1, 1)
};

/// Mean over the batch of -log softmax(logits)_label. Logits are (m, K) with
/// any trailing unit extents.
template <typename T>
SoftmaxXent<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t m = logits.shape().n;
  const std::size_t k = logits.shape().per_item();
  detail::require(labels.size() == m, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                          " labels for batch of " + std::to_string(m));
  SoftmaxXent<T> r{0.0, Tensor<T>({m, k, 1, 1})};
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const int label = labels[i];
    detail::require(label >= 0 && static_cast<std::size_t>(label) < k,
                    "softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                        std::to_string(k) + ")");
    const auto row = logits.item(i);
    const double mx = static_cast<double>(*std::max_element(row.begin(), row.end()));
    double z = 0.0;
    for (T v : row) z += std::exp(static_cast<double>(v) - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j)
      r.probabilities.at(i, j, 0, 0) = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_z));
    total += log_z - static_cast<double>(row[static_cast<std::size_t>(label)]);
  }
  r.loss = m == 0 ? 0.0 : total / static_cast<double>(m);
  return r;
}

/// Fan-in/fan-out of a weight extent (C_out, C_in, kH, kW).
inline std::pair<std::size_t, std::size_t> fans(const Shape& w) {
  return {w.c * w.h * w.w, w.n * w.h * w.w};
}

/// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
/// i.e. variance 2 / (fan_in + fan_out).
template <typename T>
Tensor<T> xavier_init(const Shape& shape, std::uint64_t seed) {
  const auto [fan_in, fan_out] = fans(shape);
  detail::require(fan_in + fan_out > 0, "xavier_init: empty fan");
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Rng rng(seed);
  Tensor<T> w(shape);
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-a, a));
  return w;
}

/// Random matrix with orthonormal rows (rows <= cols) or orthonormal columns
/// (rows > cols), as a (rows, cols, 1, 1) extent. Modified Gram-Schmidt with
/// one re-orthogonalization pass over Gaussian draws.
template <typename T>
Tensor<T> orthogonal_init(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  const bool by_rows = rows <= cols;
  const std::size_t nvec = by_rows ? rows : cols;
  const std::size_t len = by_rows ? cols : rows;
  Rng rng(seed);
  std::vector<std::vector<double>> v(nvec, std::vector<double>(len));
  for (auto& vec : v)
    for (auto& e : vec) e = rng.normal();
  for (std::size_t i = 0; i < nvec; ++i) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < i; ++j) {
        double d = 0.0;
        for (std::size_t t = 0; t < len; ++t) d += v[i][t] * v[j][t];
        for (std::size_t t = 0; t < len; ++t) v[i][t] -= d * v[j][t];
      }
    double nrm = 0.0;
    for (double e : v[i]) nrm += e * e;
    nrm = std::sqrt(nrm);
    for (double& e : v[i]) e /= nrm;
  }
  Tensor<T> w({rows, cols, 1, 1});
  for (std::size_t i = 0; i < nvec; ++i)
    for (std::size_t t = 0; t < len; ++t)
      (by_rows ? w.at(i, t, 0, 0) : w.at(t, i, 0, 0)) = static_cast<T>(v[i][t]);
  return w;
}

}  // namespace normlab
