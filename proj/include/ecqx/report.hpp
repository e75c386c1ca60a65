#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecqx/tensor.hpp"

namespace ecqx {

// ---------------------------------------------------------------------------
// weight / relevance correlation

inline constexpr std::size_t kHistogramBins = 64;

struct Histogram {
  double lo = 0.0, hi = 0.0;
  std::vector<std::size_t> counts;

  std::size_t bin(double v) const {
    if (hi <= lo) return 0;
    const auto b = std::size_t((v - lo) / (hi - lo) * double(counts.size()));
    return std::min(b, counts.size() - 1);
  }
};

struct LayerCorrelation {
  std::string name;
  double pearson = 0.0;
  Histogram weights;
  Histogram relevances;
  std::vector<double> relevance_mass;  // summed relevance per weight bin
};

struct CorrelationReport {
  std::vector<LayerCorrelation> layers;
};

/// Two-pass Pearson coefficient. Throws InputError when either axis is constant.
inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) throw InputError("correlation needs two equally sized non-empty arrays");
  const double n = double(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw InputError("correlation undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline Histogram make_histogram(std::span<const double> v, std::size_t bins = kHistogramBins) {
  Histogram h;
  h.counts.assign(bins, 0);
  if (v.empty()) return h;
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  h.lo = *mn;
  h.hi = *mx;
  for (double x : v) ++h.counts[h.bin(x)];
  return h;
}

inline LayerCorrelation correlate_layer(const std::string& name, const Tensor& weights, const Tensor& relevance) {
  if (weights.shape() != relevance.shape())
    throw ShapeError("layer '" + name + "': weight and relevance shapes differ");
  LayerCorrelation lc;
  lc.name = name;
  lc.pearson = pearson(weights.values(), relevance.values());
  lc.weights = make_histogram(weights.values());
  lc.relevances = make_histogram(relevance.values());
  lc.relevance_mass.assign(kHistogramBins, 0.0);
  for (std::size_t i = 0; i < weights.size(); ++i) lc.relevance_mass[lc.weights.bin(weights[i])] += relevance[i];
  return lc;
}

inline CorrelationReport correlation_analysis(const std::vector<std::string>& names, const std::vector<Tensor>& weights,
                                              const std::vector<Tensor>& relevances) {
  if (weights.size() != relevances.size() || names.size() != weights.size())
    throw InputError("correlation analysis needs one relevance map per weight tensor");
  CorrelationReport rep;
  for (std::size_t l = 0; l < weights.size(); ++l) rep.layers.push_back(correlate_layer(names[l], weights[l], relevances[l]));
  return rep;
}

inline nlohmann::json to_json(const CorrelationReport& rep) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& l : rep.layers) {
    j.push_back({{"layer", l.name},
                 {"pearson", l.pearson},
                 {"weight_hist", {{"lo", l.weights.lo}, {"hi", l.weights.hi}, {"counts", l.weights.counts}}},
                 {"relevance_hist",
                  {{"lo", l.relevances.lo}, {"hi", l.relevances.hi}, {"counts", l.relevances.counts}}},
                 {"relevance_mass_per_weight_bin", l.relevance_mass}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// sweep / result reports

struct ReportRecord {
  std::string model;
  std::string method;
  int bw = 0;
  double lambda = 0.0;
  double p = 0.0;
  double acc = 0.0;       // percent
  double acc_drop = 0.0;  // percentage points vs. the full-precision baseline
  double sparsity_pct = 0.0;
  double size_kB = 0.0;
  double cr = 0.0;

  friend bool operator==(const ReportRecord&, const ReportRecord&) = default;
};

inline constexpr const char* kReportHeader = "model,method,bw,lambda,p,acc,acc_drop,sparsity_pct,size_kB,CR";

namespace detail {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string report_csv(const std::vector<ReportRecord>& records) {
  std::ostringstream os;
  os << kReportHeader << '\n';
  for (const auto& r : records) {
    os << r.model << ',' << r.method << ',' << r.bw << ',' << detail::fmt_real(r.lambda) << ','
       << detail::fmt_real(r.p) << ',' << detail::fmt_real(r.acc) << ',' << detail::fmt_real(r.acc_drop) << ','
       << detail::fmt_real(r.sparsity_pct) << ',' << detail::fmt_real(r.size_kB) << ',' << detail::fmt_real(r.cr)
       << '\n';
  }
  return os.str();
}

inline nlohmann::json report_json(const std::vector<ReportRecord>& records) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records)
    j.push_back({{"model", r.model},
                 {"method", r.method},
                 {"bw", r.bw},
                 {"lambda", r.lambda},
                 {"p", r.p},
                 {"acc", r.acc},
                 {"acc_drop", r.acc_drop},
                 {"sparsity_pct", r.sparsity_pct},
                 {"size_kB", r.size_kB},
                 {"CR", r.cr}});
  return j;
}

inline std::vector<ReportRecord> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw FormatError("report CSV header mismatch", 0);
  std::vector<ReportRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 10) throw FormatError("report CSV line " + std::to_string(lineno) + " has wrong field count", 0);
    try {
      out.push_back({f[0], f[1], std::stoi(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                     std::stod(f[6]), std::stod(f[7]), std::stod(f[8]), std::stod(f[9])});
    } catch (const std::logic_error&) {
      throw FormatError("report CSV line " + std::to_string(lineno) + " is not numeric", 0);
    }
  }
  return out;
}

/// Writes the CSV and its JSON mirror.
inline void emit_report(const std::vector<ReportRecord>& records, const std::string& csv_path,
                        const std::string& json_path) {
  {
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write report '" + csv_path + "'");
    csv << report_csv(records);
  }
  std::ofstream js(json_path);
  if (!js) throw IoError("cannot write report '" + json_path + "'");
  js << report_json(records).dump(2) << '\n';
}

}  // namespace ecqx
