#pragma once

// Measurement apparatus for normalization behaviour during training: layer
// output norms, row coherence of weight matrices, per-layer amplification,
// and the CSV format every experiment writes.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "normlab/errors.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

struct NormStats {
  double l2_norm = 0.0;
  double normalized_norm = 0.0;  // l2_norm / sqrt(D)
};

template <typename T>
NormStats output_norm_stats(const Tensor<T>& x) {
  const double nrm = l2_norm(x);
  const double d = static_cast<double>(x.size());
  return {nrm, d > 0.0 ? nrm / std::sqrt(d) : 0.0};
}

/// max_{i != j} |w_i . w_j| / (||w_i|| ||w_j||) over the rows of W, where
/// row j is output channel j flattened (C_in * kH * kW entries). Pairs with a
/// zero row are skipped.
template <typename T>
double coherence(const Tensor<T>& w) {
  const std::size_t rows = w.shape().n;
  detail::require(rows >= 2, "coherence: need at least 2 rows, got " + std::to_string(rows));
  const std::size_t len = w.shape().per_item();
  std::vector<double> unit(rows * len, 0.0);
  std::vector<bool> zero(rows, false);
  std::size_t zero_rows = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double nrm = std::sqrt(sum_squares(w.item(r)));
    if (nrm == 0.0) {
      zero[r] = true;
      ++zero_rows;
      continue;
    }
    auto src = w.item(r);
    for (std::size_t i = 0; i < len; ++i) unit[r * len + i] = src[i] / nrm;
  }
  detail::require(zero_rows < rows, "coherence: all rows are zero");
  double best = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (zero[i]) continue;
    for (std::size_t j = i + 1; j < rows; ++j) {
      if (zero[j]) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < len; ++k) d += unit[i * len + k] * unit[j * len + k];
      best = std::max(best, std::abs(d));
    }
  }
  return std::min(best, 1.0);
}

struct AmplificationProfile {
  std::vector<std::optional<double>> ratios;  // norm[l+1] / norm[l]; empty when norm[l] == 0
  std::optional<double> growth_factor;        // geometric mean of the ratios
  bool growth_flag = false;                   // growth_factor > 1 + tau
};

inline AmplificationProfile amplification_profile(std::span<const double> norms, double tau = 0.05) {
  detail::require(norms.size() >= 2, "amplification_profile: need at least 2 layers");
  AmplificationProfile p;
  double log_sum = 0.0;
  bool defined = true;
  for (std::size_t l = 0; l + 1 < norms.size(); ++l) {
    if (norms[l] == 0.0 || norms[l + 1] == 0.0 || !std::isfinite(norms[l]) ||
        !std::isfinite(norms[l + 1])) {
      p.ratios.emplace_back(std::nullopt);
      defined = false;
      continue;
    }
    const double r = norms[l + 1] / norms[l];
    p.ratios.emplace_back(r);
    log_sum += std::log(r);
  }
  if (defined) {
    p.growth_factor = std::exp(log_sum / static_cast<double>(p.ratios.size()));
    p.growth_flag = *p.growth_factor > 1.0 + tau;
  }
  return p;
}

struct LayerStat {
  std::string name;
  double norm = 0.0;
  double normalized_norm = 0.0;
  std::optional<double> coherence;  // weight layers only
};

struct DiagnosticsRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<LayerStat> layers;

  const LayerStat* find(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return &l;
    return nullptr;
  }
};

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw format_error("csv: '" + s + "' is not a number (" + where + ")");
  return v;
}

}  // namespace detail

/// Column names: iteration, loss, lr, then norm_<l>, nnorm_<l>, coh_<l> per layer.
inline std::vector<std::string> csv_header(const DiagnosticsRecord& layout) {
  std::vector<std::string> cols{"iteration", "loss", "lr"};
  for (const auto& l : layout.layers) {
    cols.push_back("norm_" + l.name);
    cols.push_back("nnorm_" + l.name);
    cols.push_back("coh_" + l.name);
  }
  return cols;
}

inline std::string to_csv(std::span<const DiagnosticsRecord> records) {
  detail::require(!records.empty(), "export_csv: no records");
  std::ostringstream os;
  const auto header = csv_header(records.front());
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  for (const auto& r : records) {
    detail::require(r.layers.size() == records.front().layers.size(),
                    "export_csv: record at iteration " + std::to_string(r.iteration) +
                        " has a different layer layout");
    os << r.iteration << ',' << detail::format_double(r.loss) << ','
       << detail::format_double(r.lr);
    for (const auto& l : r.layers) {
      os << ',' << detail::format_double(l.norm) << ',' << detail::format_double(l.normalized_norm)
         << ',';
      if (l.coherence) os << detail::format_double(*l.coherence);
    }
    os << '\n';
  }
  return os.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing", path);
  f << text;
  if (!f) throw io_error("write failed", path);
}

inline void export_csv(std::span<const DiagnosticsRecord> records, const std::string& path) {
  write_text_file(path, to_csv(records));
}

/// Parses a diagnostics CSV back into records, validating the schema:
/// fixed leading columns, per-layer triples, uniform row width, numeric
/// cells (coherence may be blank).
inline std::vector<DiagnosticsRecord> parse_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw format_error("csv: empty file");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "iteration" || header[1] != "loss" || header[2] != "lr")
    throw format_error("csv: header must start with iteration,loss,lr");
  if ((header.size() - 3) % 3 != 0) throw format_error("csv: per-layer columns must come in triples");
  std::vector<std::string> names;
  for (std::size_t i = 3; i < header.size(); i += 3) {
    const std::string& a = header[i];
    if (a.rfind("norm_", 0) != 0) throw format_error("csv: expected norm_<layer>, got " + a);
    const std::string name = a.substr(5);
    if (header[i + 1] != "nnorm_" + name || header[i + 2] != "coh_" + name)
      throw format_error("csv: malformed column triple for layer " + name);
    names.push_back(name);
  }
  std::vector<DiagnosticsRecord> out;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw format_error("csv: row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                         " cells, header has " + std::to_string(header.size()));
    DiagnosticsRecord r;
    const std::string where = "row " + std::to_string(row);
    r.iteration = static_cast<std::size_t>(detail::parse_double(cells[0], where));
    r.loss = detail::parse_double(cells[1], where);
    r.lr = detail::parse_double(cells[2], where);
    for (std::size_t l = 0; l < names.size(); ++l) {
      LayerStat s{names[l], detail::parse_double(cells[3 + 3 * l], where),
                  detail::parse_double(cells[4 + 3 * l], where), std::nullopt};
      if (!cells[5 + 3 * l].empty()) s.coherence = detail::parse_double(cells[5 + 3 * l], where);
      r.layers.push_back(std::move(s));
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for reading", path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Append-only recorder filled by the training loop at a fixed cadence.
class Recorder {
 public:
  explicit Recorder(std::size_t cadence = 10) : cadence_(cadence == 0 ? 1 : cadence) {}

  bool due(std::size_t iteration) const { return iteration % cadence_ == 0; }
  void append(DiagnosticsRecord r) { records_.push_back(std::move(r)); }
  const std::vector<DiagnosticsRecord>& records() const noexcept { return records_; }
  std::size_t cadence() const noexcept { return cadence_; }

 private:
  std::size_t cadence_;
  std::vector<DiagnosticsRecord> records_;
};

}  // namespace normlab
