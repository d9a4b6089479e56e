#pragma once

// Datasets: synthetic Gaussian blobs (vector and image-shaped), the CIFAR-10
// binary batch format, per-pixel standardization and crop/flip augmentation.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "normlab/errors.hpp"
#include "normlab/random.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

enum class Split { train, test };

/// Per-pixel statistics, one entry per (c, h, w) position.
struct PixelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct Dataset {
  Tensor<float> images;  // (N, C, H, W)
  std::vector<int> labels;
  Split split = Split::train;
  PixelStats stats;  // empty until standardized

  std::size_t size() const { return labels.size(); }
  Shape item_shape() const {
    return {1, images.shape().c, images.shape().h, images.shape().w};
  }
};

namespace detail {

inline Dataset blob_dataset(std::size_t n, Shape item, const std::vector<std::vector<double>>& means,
                            std::uint64_t seed) {
  Dataset d;
  d.images = Tensor<float>({n, item.c, item.h, item.w});
  d.labels.resize(n);
  Rng rng(seed);
  const std::size_t dim = item.per_item();
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<int>(rng.below(means.size()));
    d.labels[i] = k;
    auto row = d.images.item(i);
    for (std::size_t j = 0; j < dim; ++j)
      row[j] = static_cast<float>(means[static_cast<std::size_t>(k)][j] + rng.normal());
  }
  return d;
}

}  // namespace detail

/// Class k ~ N(separation * e_k, I) in `dim` dimensions, so every pair of
/// class means is separation * sqrt(2) apart. Items are (dim, 1, 1).
inline Dataset gen_gaussian_blobs(std::size_t n_classes, std::size_t dim, double separation,
                                  std::size_t n_samples, std::uint64_t seed) {
  detail::require(separation > 0.0, "gen_gaussian_blobs: separation must be > 0");
  detail::require(n_classes >= 1 && n_classes <= dim,
                  "gen_gaussian_blobs: need 1 <= n_classes <= dim");
  std::vector<std::vector<double>> means(n_classes, std::vector<double>(dim, 0.0));
  for (std::size_t k = 0; k < n_classes; ++k) means[k][k] = separation;
  return detail::blob_dataset(n_samples, {1, dim, 1, 1}, means, seed);
}

/// Image-shaped blobs. Class means are separation times distinct orthonormal
/// 2-D cosine (DCT-II) patterns, cycling through channels, so they share the
/// pairwise distance separation * sqrt(2) and survive small crops and flips.
inline Dataset gen_image_blobs(std::size_t n_classes, std::size_t channels, std::size_t height,
                               std::size_t width, double separation, std::size_t n_samples,
                               std::uint64_t seed) {
  detail::require(separation > 0.0, "gen_image_blobs: separation must be > 0");
  detail::require(channels >= 1 && height >= 2 && width >= 2, "gen_image_blobs: image too small");
  auto basis = [](std::size_t u, std::size_t len) {
    std::vector<double> v(len);
    double nrm = 0.0;
    for (std::size_t x = 0; x < len; ++x) {
      v[x] = std::cos(std::numbers::pi * (static_cast<double>(x) + 0.5) * static_cast<double>(u) /
                      static_cast<double>(len));
      nrm += v[x] * v[x];
    }
    for (double& e : v) e /= std::sqrt(nrm);
    return v;
  };
  // Frequency pairs (1,2), (2,1), (2,3), (3,2), ... ; distinct per class and
  // channel, hence mutually orthogonal.
  std::vector<std::vector<double>> means;
  for (std::size_t k = 0; k < n_classes; ++k) {
    const std::size_t lo = k / 2 + 1;
    std::size_t fu = (k % 2 == 0) ? lo : lo + 1;
    std::size_t fv = (k % 2 == 0) ? lo + 1 : lo;
    detail::require(fu < height && fv < width, "gen_image_blobs: too many classes for image size");
    const auto bu = basis(fu, height);
    const auto bv = basis(fv, width);
    std::vector<double> m(channels * height * width, 0.0);
    const std::size_t c = k % channels;
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) m[(c * height + y) * width + x] = separation * bu[y] * bv[x];
    means.push_back(std::move(m));
  }
  return detail::blob_dataset(n_samples, {1, channels, height, width}, means, seed);
}

/// Population mean/std of every pixel position over the given (train) split.
inline PixelStats compute_pixel_stats(const Dataset& train) {
  detail::require(train.split == Split::train, "pixel statistics must come from the train split");
  const std::size_t n = train.size();
  const std::size_t dim = train.item_shape().per_item();
  PixelStats s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
  if (n == 0) return s;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = train.images.item(i);
    for (std::size_t j = 0; j < dim; ++j) s.mean[j] += row[j];
  }
  for (double& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = train.images.item(i);
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = row[j] - s.mean[j];
      s.std[j] += d * d;
    }
  }
  for (double& v : s.std) v = std::sqrt(v / static_cast<double>(n));
  return s;
}

/// (x - mean) / std per pixel; constant pixels (std == 0) are only centered.
inline void apply_standardization(Dataset& d, const PixelStats& stats) {
  const std::size_t dim = d.item_shape().per_item();
  detail::require(stats.mean.size() == dim && stats.std.size() == dim,
                  "standardize: statistics do not match image size");
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto row = d.images.item(i);
    for (std::size_t j = 0; j < dim; ++j) {
      const double sd = stats.std[j] > 0.0 ? stats.std[j] : 1.0;
      row[j] = static_cast<float>((row[j] - stats.mean[j]) / sd);
    }
  }
  d.stats = stats;
}

/// Standardizes train with its own statistics and test with the same ones.
inline void standardize(Dataset& train, Dataset* test) {
  const PixelStats stats = compute_pixel_stats(train);
  apply_standardization(train, stats);
  if (test) apply_standardization(*test, stats);
}

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarSide = 32;

/// One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes
/// (3 planes of 32x32, row-major). Pixels are scaled to [0, 1].
inline Dataset load_cifar10_batch(const std::string& path, Split split = Split::train) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open CIFAR-10 batch", path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0)
    throw format_error("CIFAR-10 batch " + path + ": size " + std::to_string(bytes.size()) +
                       " is not a multiple of 3073");
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset d;
  d.split = split;
  d.images = Tensor<float>({n, 3, kCifarSide, kCifarSide});
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9)
      throw format_error("CIFAR-10 batch " + path + ": record " + std::to_string(i) + " has label " +
                         std::to_string(rec[0]));
    d.labels[i] = rec[0];
    auto row = d.images.item(i);
    for (std::size_t j = 0; j < kCifarRecordBytes - 1; ++j) row[j] = static_cast<float>(rec[1 + j] / 255.0);
  }
  return d;
}

inline Dataset concat(std::vector<Dataset> parts, Split split) {
  detail::require(!parts.empty(), "concat: no datasets");
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  const Shape item = parts.front().item_shape();
  Dataset d;
  d.split = split;
  d.images = Tensor<float>({n, item.c, item.h, item.w});
  std::size_t off = 0;
  for (const auto& p : parts) {
    detail::require(p.item_shape() == item, "concat: image shape mismatch");
    std::copy(p.images.data().begin(), p.images.data().end(), d.images.raw() + off * item.per_item());
    d.labels.insert(d.labels.end(), p.labels.begin(), p.labels.end());
    off += p.size();
  }
  return d;
}

struct TrainTest {
  Dataset train;
  Dataset test;
};

/// Loads a CIFAR-10 directory (data_batch_1..5.bin, test_batch.bin) or a
/// single batch file, then standardizes per pixel with train statistics.
/// For a single file the test split is empty.
inline TrainTest load_cifar10(const std::string& path) {
  namespace fs = std::filesystem;
  TrainTest tt;
  if (fs::is_directory(path)) {
    std::vector<Dataset> parts;
    for (int b = 1; b <= 5; ++b) {
      const fs::path p = fs::path(path) / ("data_batch_" + std::to_string(b) + ".bin");
      if (fs::exists(p)) parts.push_back(load_cifar10_batch(p.string(), Split::train));
    }
    if (parts.empty()) throw io_error("no data_batch_*.bin files", path);
    tt.train = concat(std::move(parts), Split::train);
    const fs::path test = fs::path(path) / "test_batch.bin";
    if (fs::exists(test)) tt.test = load_cifar10_batch(test.string(), Split::test);
  } else {
    tt.train = load_cifar10_batch(path, Split::train);
  }
  if (tt.test.images.empty()) {
    tt.test.split = Split::test;
    tt.test.images = Tensor<float>({0, 3, kCifarSide, kCifarSide});
  }
  standardize(tt.train, &tt.test);
  return tt;
}

inline constexpr std::size_t kCropSide = 28;

struct AugmentParams {
  std::size_t offset_y = 0;
  std::size_t offset_x = 0;
  bool flip = false;
};

/// Train: uniform crop offsets in [0, H-28] x [0, W-28] and a flip with
/// probability 1/2, drawn from `seed`. Test: the central crop, no flip.
inline AugmentParams augment_params(const Shape& item, Split mode, std::uint64_t seed,
                                    std::size_t crop = kCropSide) {
  detail::require(item.h >= crop && item.w >= crop,
                  "augment: image " + to_string(item) + " smaller than the crop");
  if (mode == Split::test) return {(item.h - crop) / 2, (item.w - crop) / 2, false};
  Rng rng(seed);
  AugmentParams p;
  p.offset_y = static_cast<std::size_t>(rng.below(item.h - crop + 1));
  p.offset_x = static_cast<std::size_t>(rng.below(item.w - crop + 1));
  p.flip = rng.bernoulli(0.5);
  return p;
}

/// Crops (and optionally mirrors) one (C, H, W) image into `dst`.
template <typename T, typename S>
void apply_augment(std::span<const S> src, const Shape& item, const AugmentParams& p,
                   std::span<T> dst, std::size_t crop = kCropSide) {
  for (std::size_t c = 0; c < item.c; ++c)
    for (std::size_t y = 0; y < crop; ++y)
      for (std::size_t x = 0; x < crop; ++x) {
        const std::size_t sx = p.flip ? p.offset_x + crop - 1 - x : p.offset_x + x;
        dst[(c * crop + y) * crop + x] =
            static_cast<T>(src[(c * item.h + p.offset_y + y) * item.w + sx]);
      }
}

/// Convenience form on a single (1, C, H, W) image.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, Split mode, std::uint64_t seed, std::size_t crop = kCropSide) {
  const Shape item{1, image.shape().c, image.shape().h, image.shape().w};
  const AugmentParams p = augment_params(item, mode, seed, crop);
  Tensor<T> out({1, item.c, crop, crop});
  apply_augment<T, T>(image.data(), item, p, out.data(), crop);
  return out;
}

/// Mirror along the width axis.
template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& x) {
  const Shape& s = x.shape();
  Tensor<T> out(s);
  for (std::size_t plane = 0; plane < s.n * s.c; ++plane)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t w = 0; w < s.w; ++w)
        out[(plane * s.h + y) * s.w + w] = x[(plane * s.h + y) * s.w + (s.w - 1 - w)];
  return out;
}

}  // namespace normlab
