#pragma once

// Parameter snapshots.
//
// Binary record file layout (all integers and values little-endian):
//   "NLPARAM1"                        8-byte magic
//   u64 record_count
//   per record:
//     u32 name_length, name bytes (UTF-8, no terminator)
//     u64 n, c, h, w                  extent
//     f64 values[n*c*h*w]             row-major NCHW
// A plain-text manifest (<path>.manifest) lists one record per line:
//   <name> <n> <c> <h> <w> <byte offset of first value>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "normlab/errors.hpp"
#include "normlab/network.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

struct NamedTensor {
  std::string name;
  Tensor<double> value;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw format_error("parameter record truncated");
  unsigned char b[sizeof(U)];
  std::memcpy(b, in.data() + pos, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  pos += sizeof(U);
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

inline constexpr char kParamMagic[9] = "NLPARAM1";

}  // namespace detail

inline void save_records(const std::vector<NamedTensor>& records, const std::string& path) {
  std::string bin(detail::kParamMagic, 8);
  std::ostringstream manifest;
  detail::put_le<std::uint64_t>(bin, records.size());
  for (const auto& r : records) {
    detail::put_le<std::uint32_t>(bin, static_cast<std::uint32_t>(r.name.size()));
    bin += r.name;
    const Shape& s = r.value.shape();
    for (std::uint64_t e : {s.n, s.c, s.h, s.w}) detail::put_le<std::uint64_t>(bin, e);
    manifest << r.name << ' ' << s.n << ' ' << s.c << ' ' << s.h << ' ' << s.w << ' ' << bin.size() << '\n';
    for (double v : r.value.data()) detail::put_le<double>(bin, v);
  }
  write_text_file(path, bin);
  write_text_file(path + ".manifest", manifest.str());
}

inline std::vector<NamedTensor> load_records(const std::string& path) {
  const std::string bin = read_text_file(path);
  if (bin.size() < 16 || bin.compare(0, 8, detail::kParamMagic) != 0)
    throw format_error("parameter file " + path + ": bad magic");
  std::size_t pos = 8;
  const auto count = detail::get_le<std::uint64_t>(bin, pos);
  std::vector<NamedTensor> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = detail::get_le<std::uint32_t>(bin, pos);
    if (pos + len > bin.size()) throw format_error("parameter file " + path + ": name truncated");
    std::string name = bin.substr(pos, len);
    pos += len;
    Shape s;
    s.n = detail::get_le<std::uint64_t>(bin, pos);
    s.c = detail::get_le<std::uint64_t>(bin, pos);
    s.h = detail::get_le<std::uint64_t>(bin, pos);
    s.w = detail::get_le<std::uint64_t>(bin, pos);
    if (s.count() > (bin.size() - pos) / 8) throw format_error("parameter file " + path + ": values truncated");
    std::vector<double> vals(s.count());
    for (auto& v : vals) v = detail::get_le<double>(bin, pos);
    out.push_back({std::move(name), Tensor<double>(s, std::move(vals))});
  }
  if (pos != bin.size()) throw format_error("parameter file " + path + ": trailing bytes");
  return out;
}

/// Learnable parameters plus batch-norm running averages.
template <typename T>
std::vector<NamedTensor> snapshot(Model<T>& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.params()) out.push_back({p.name, p.value.template cast<double>()});
  for (std::size_t i = 0; i < model.spec().layers.size(); ++i) {
    if (auto* bn = model.batch_norm_state(i)) {
      const auto& name = model.spec().layers[i].name;
      const Shape cs = channel_shape(bn->running_mean.size());
      out.push_back({name + ".running_mean", Tensor<double>(cs, bn->running_mean)});
      out.push_back({name + ".running_var", Tensor<double>(cs, bn->running_var)});
    }
  }
  return out;
}

template <typename T>
void restore(Model<T>& model, const std::vector<NamedTensor>& records) {
  auto find = [&](const std::string& name) -> const NamedTensor& {
    for (const auto& r : records)
      if (r.name == name) return r;
    throw format_error("parameter record '" + name + "' missing");
  };
  for (auto& p : model.params()) {
    const auto& r = find(p.name);
    if (!(r.value.shape() == p.value.shape()))
      throw format_error("parameter record '" + p.name + "' has shape " + to_string(r.value.shape()) +
                         ", model expects " + to_string(p.value.shape()));
    p.value = r.value.template cast<T>();
  }
  for (std::size_t i = 0; i < model.spec().layers.size(); ++i) {
    if (auto* bn = model.batch_norm_state(i)) {
      const auto& name = model.spec().layers[i].name;
      const auto& m = find(name + ".running_mean").value;
      const auto& v = find(name + ".running_var").value;
      bn->running_mean.assign(m.data().begin(), m.data().end());
      bn->running_var.assign(v.data().begin(), v.data().end());
    }
  }
}

}  // namespace normlab
