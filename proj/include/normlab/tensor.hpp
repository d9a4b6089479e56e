#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "normlab/errors.hpp"

namespace normlab {

/// Four-dimensional extent (batch, channels, height, width).
///
/// Weight tensors reuse the same extent with (C_out, C_in, kH, kW); a
/// fully-connected matrix D_out x D_in is (D_out, D_in, 1, 1).
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 1;
  std::size_t w = 1;

  constexpr std::size_t count() const noexcept { return n * c * h * w; }
  /// Elements in one sample (or one output channel of a weight tensor).
  constexpr std::size_t per_item() const noexcept { return c * h * w; }
  constexpr std::size_t spatial() const noexcept { return h * w; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," +
         std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

inline std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << to_string(s);
}

/// Dense NCHW tensor. Index order is (n, c, h, w) with w fastest.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(shape), data_(shape.count(), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    detail::require(data_.size() == shape_.count(),
                    "tensor: value count " + std::to_string(data_.size()) +
                        " does not match shape " + to_string(shape_));
  }
  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(shape, std::vector<T>(values)) {}

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  /// Total layer dimension m*C*H*W.
  std::size_t dim() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[offset(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[offset(n, c, h, w)];
  }

  /// Contiguous slice for item i along the leading axis.
  std::span<T> item(std::size_t i) noexcept {
    return std::span<T>(data_).subspan(i * shape_.per_item(), shape_.per_item());
  }
  std::span<const T> item(std::size_t i) const noexcept {
    return std::span<const T>(data_).subspan(i * shape_.per_item(), shape_.per_item());
  }

  /// Same values under a different extent with equal element count.
  Tensor reshaped(Shape s) const {
    detail::require(s.count() == shape_.count(),
                    "reshape: " + to_string(shape_) + " -> " + to_string(s));
    return Tensor(s, data_);
  }

  /// True when every element is finite.
  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;

// Elementwise helpers used throughout the layer and training code.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& b) {
  detail::require(acc.shape() == b.shape(), "add_inplace: shape mismatch " +
                                                to_string(acc.shape()) + " vs " +
                                                to_string(b.shape()));
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
}

template <typename T>
double sum_squares(std::span<T> v) {
  double s = 0.0;
  for (auto x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return s;
}

template <typename T>
double l2_norm(const Tensor<T>& t) {
  return std::sqrt(sum_squares(t.data()));
}

template <typename T, typename U>
double dot(std::span<T> a, std::span<U> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace normlab
