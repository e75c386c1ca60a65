#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "ecqx/tensor.hpp"

namespace ecqx {

/// Quantization levels of one layer. Uniform grids hold the 2^bw - 1 values
/// {-(2^(bw-1) - 1), ..., 0, ..., 2^(bw-1) - 1} * step; k-means grids hold
/// arbitrary increasing levels with an exact zero and step == 0.
struct CentroidGrid {
  int bitwidth = 0;
  double step = 0.0;
  std::vector<double> levels;
  std::size_t zero_index = 0;

  std::size_t size() const { return levels.size(); }
  bool uniform() const { return step > 0.0; }
  friend bool operator==(const CentroidGrid&, const CentroidGrid&) = default;
};

inline std::size_t grid_levels(int bitwidth) { return (std::size_t{1} << bitwidth) - 1; }

inline CentroidGrid uniform_grid(int bitwidth, double step) {
  if (bitwidth < 2 || bitwidth > 5) throw InputError("bit width must be in [2, 5], got " + std::to_string(bitwidth));
  if (!(step > 0.0)) throw InputError("grid step must be positive");
  const int half = (1 << (bitwidth - 1)) - 1;
  CentroidGrid g{bitwidth, step, {}, std::size_t(half)};
  for (int k = -half; k <= half; ++k) g.levels.push_back(k * step);
  g.levels[g.zero_index] = 0.0;
  return g;
}

/// Uniform symmetric grid with step max|w| / (2^(bw-1) - 1); step 1 for an
/// all-zero weight array.
inline CentroidGrid make_grid(std::span<const double> weights, int bitwidth) {
  if (weights.empty()) throw InputError("cannot build a grid for an empty weight array");
  double mx = 0.0;
  for (double w : weights) mx = std::max(mx, std::abs(w));
  if (bitwidth < 2 || bitwidth > 5) throw InputError("bit width must be in [2, 5], got " + std::to_string(bitwidth));
  const double step = mx > 0.0 ? mx / double((1 << (bitwidth - 1)) - 1) : 1.0;
  return uniform_grid(bitwidth, step);
}

/// Lloyd's algorithm on the 1-d weight values, started from the uniform grid.
/// An empty cluster is re-seeded at the weight farthest from its current
/// level; ties go to the lowest weight index. After the last iteration the
/// level closest to 0 is snapped to exactly 0.
inline CentroidGrid kmeans_grid(std::span<const double> weights, int bitwidth, int iters) {
  if (iters < 1) throw InputError("k-means needs at least one iteration");
  CentroidGrid g = make_grid(weights, bitwidth);
  std::vector<double> levels = g.levels;
  const std::size_t k = levels.size();
  std::vector<std::size_t> assign(weights.size());
  std::vector<double> sum(k);
  std::vector<std::size_t> count(k);
  for (int it = 0; it < iters; ++it) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < weights.size(); ++i) {
      std::size_t best = 0;
      double bd = std::abs(weights[i] - levels[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = std::abs(weights[i] - levels[c]);
        if (d < bd) bd = d, best = c;
      }
      assign[i] = best;
      sum[best] += weights[i];
      ++count[best];
    }
    std::vector<bool> taken(weights.size(), false);
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) {
        levels[c] = sum[c] / double(count[c]);
        continue;
      }
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (taken[i]) continue;
        const double d = std::abs(weights[i] - levels[assign[i]]);
        if (d > fd) fd = d, far = i;
      }
      taken[far] = true;
      levels[c] = weights[far];
    }
    std::sort(levels.begin(), levels.end());
  }
  std::size_t zero = 0;
  for (std::size_t c = 1; c < k; ++c)
    if (std::abs(levels[c]) < std::abs(levels[zero])) zero = c;
  levels[zero] = 0.0;
  return {bitwidth, 0.0, std::move(levels), zero};
}

/// Per-weight centroid index; same shape as the weight tensor it quantizes.
struct AssignmentMatrix {
  Shape shape;
  std::vector<std::uint8_t> index;

  std::size_t size() const { return index.size(); }
  friend bool operator==(const AssignmentMatrix&, const AssignmentMatrix&) = default;
};

struct ClusterStats {
  std::vector<std::size_t> counts;
  std::vector<double> prob;
  std::size_t total = 0;
};

/// Nearest level by absolute distance; exact ties go to the lower index.
inline std::size_t nearest_level(double w, const CentroidGrid& grid) {
  std::size_t best = 0;
  double bd = std::abs(w - grid.levels[0]);
  for (std::size_t c = 1; c < grid.size(); ++c) {
    const double d = std::abs(w - grid.levels[c]);
    if (d < bd) bd = d, best = c;
  }
  return best;
}

inline AssignmentMatrix nearest_assign(const Tensor& weights, const CentroidGrid& grid) {
  AssignmentMatrix a{weights.shape(), std::vector<std::uint8_t>(weights.size())};
  for (std::size_t i = 0; i < weights.size(); ++i) a.index[i] = std::uint8_t(nearest_level(weights[i], grid));
  return a;
}

inline ClusterStats cluster_stats(const AssignmentMatrix& assign, const CentroidGrid& grid) {
  ClusterStats s{std::vector<std::size_t>(grid.size(), 0), std::vector<double>(grid.size(), 0.0), assign.size()};
  for (auto c : assign.index) {
    if (c >= grid.size()) throw InputError("assignment index " + std::to_string(c) + " outside grid");
    ++s.counts[c];
  }
  if (s.total > 0)
    for (std::size_t c = 0; c < grid.size(); ++c) s.prob[c] = double(s.counts[c]) / double(s.total);
  return s;
}

/// First-order entropy in bits, 0 log 0 = 0.
inline double entropy(const ClusterStats& stats) {
  double h = 0.0;
  for (double p : stats.prob)
    if (p > 0.0) h -= p * std::log2(p);
  return std::max(0.0, h);
}

/// -log2(p); +inf for p = 0 (the cluster is unassignable).
inline double info_content(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw InputError("probability must lie in [0, 1]");
  if (p == 0.0) return std::numeric_limits<double>::infinity();
  return p == 1.0 ? 0.0 : -std::log2(p);
}

namespace detail {

// Per-cluster rate term lambda * I_c; +inf marks an empty cluster.
inline std::vector<double> rate_terms(const ClusterStats& stats, double lambda) {
  std::vector<double> r(stats.prob.size());
  for (std::size_t c = 0; c < r.size(); ++c) {
    const double info = info_content(stats.prob[c]);
    r[c] = std::isinf(info) ? info : lambda * info;
  }
  return r;
}

// argmin_c cost_c with the zero-cluster cost multiplied by `zero_scale`.
inline std::size_t ec_argmin(double w, const CentroidGrid& grid, const std::vector<double>& rate, double zero_scale) {
  std::size_t best = grid.size();
  double bc = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < grid.size(); ++c) {
    if (std::isinf(rate[c])) continue;
    const double d = w - grid.levels[c];
    double cost = d * d + rate[c];
    if (c == grid.zero_index) cost *= zero_scale;
    if (cost < bc || best == grid.size()) bc = cost, best = c;
  }
  if (best == grid.size()) throw Error("entropy-constrained assignment: every cluster is empty");
  return best;
}

}  // namespace detail

/// Entropy-constrained assignment:
///   argmin_c (w - w_c)^2 - lambda * log2(P_c)
/// Empty clusters are excluded; ties go to the lower index.
inline AssignmentMatrix ecq_assign(const Tensor& weights, const CentroidGrid& grid, const ClusterStats& stats,
                                   double lambda) {
  const auto rate = detail::rate_terms(stats, lambda);
  AssignmentMatrix a{weights.shape(), std::vector<std::uint8_t>(weights.size())};
  for (std::size_t i = 0; i < weights.size(); ++i)
    a.index[i] = std::uint8_t(detail::ec_argmin(weights[i], grid, rate, 1.0));
  return a;
}

/// Relevance-adjusted assignment: as ecq_assign, but the zero-cluster cost of
/// weight i is multiplied by rho * r_scaled[i].
inline AssignmentMatrix ecqx_assign(const Tensor& weights, const CentroidGrid& grid, const ClusterStats& stats,
                                    double lambda, const Tensor& r_scaled, double rho) {
  if (r_scaled.size() != weights.size()) throw ShapeError("relevance and weight shapes differ");
  for (double r : r_scaled.vec())
    if (!(r >= 0.0)) throw InputError("scaled relevance must be non-negative");
  const auto rate = detail::rate_terms(stats, lambda);
  AssignmentMatrix a{weights.shape(), std::vector<std::uint8_t>(weights.size())};
  for (std::size_t i = 0; i < weights.size(); ++i)
    a.index[i] = std::uint8_t(detail::ec_argmin(weights[i], grid, rate, rho * r_scaled[i]));
  return a;
}

/// beta such that rho * mean^beta = 1, clamped to (0, 1].
inline double beta_init(double rho, double mean_relevance) {
  if (!(mean_relevance > 0.0 && mean_relevance < 1.0))
    throw InputError("mean relevance must lie in (0, 1) for beta initialization");
  if (!(rho > 1.0)) throw InputError("rho must exceed 1");
  const double b = -std::log(rho) / std::log(mean_relevance);
  return std::clamp(b, std::numeric_limits<double>::min(), 1.0);
}

inline Tensor apply_beta(const Tensor& r_normalized, double beta) {
  Tensor out = r_normalized;
  if (beta == 1.0) return out;
  for (auto& v : out.vec()) v = std::pow(v, beta);
  return out;
}

inline double sparsity(const AssignmentMatrix& a, const CentroidGrid& grid) {
  if (a.size() == 0) return 0.0;
  std::size_t zeros = 0;
  for (auto c : a.index) zeros += c == grid.zero_index;
  return double(zeros) / double(a.size());
}

/// Size-weighted zero fraction over several layers.
inline double sparsity(std::span<const AssignmentMatrix> layers, std::span<const CentroidGrid> grids) {
  std::size_t zeros = 0, total = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (auto c : layers[l].index) zeros += c == grids[l].zero_index;
    total += layers[l].size();
  }
  return total ? double(zeros) / double(total) : 0.0;
}

struct TargetSparsityResult {
  AssignmentMatrix assign;
  double beta = 0.0;  // 0 when no beta kept the added sparsity within p
};

/// ECQ^x assignment whose extra sparsity over the plain ECQ assignment
/// (`baseline_sparsity`) is capped at p: beta is halved, at most 20 times,
/// until the cap holds. If it never does, the ECQ assignment is returned.
inline TargetSparsityResult assign_with_target_sparsity(const Tensor& weights, const CentroidGrid& grid,
                                                        const ClusterStats& stats, double lambda,
                                                        const Tensor& r_normalized, double rho, double beta_start,
                                                        double p, double baseline_sparsity) {
  double beta = beta_start;
  for (int halvings = 0; halvings <= 20; ++halvings, beta *= 0.5) {
    auto a = ecqx_assign(weights, grid, stats, lambda, apply_beta(r_normalized, beta), rho);
    if (sparsity(a, grid) - baseline_sparsity <= p) return {std::move(a), beta};
  }
  return {ecq_assign(weights, grid, stats, lambda), 0.0};
}

inline Tensor dequantize(const AssignmentMatrix& a, const CentroidGrid& grid) {
  Tensor t(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.index[i] >= grid.size()) throw InputError("assignment index outside grid");
    t[i] = grid.levels[a.index[i]];
  }
  return t;
}

}  // namespace ecqx
