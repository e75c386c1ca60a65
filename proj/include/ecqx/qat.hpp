#pragma once

// Quantization-aware training with a full-precision background model.
//
// Each step: forward/backward on the quantized view; (ECQ^x) fold fresh LRP
// weight relevances into the momentum state; scale the weight gradients by
// their centroid magnitudes; ADAM-update the background model; re-cluster
// every quantizable layer (nearest-neighbor statistics, then the
// entropy-constrained or relevance-adjusted assignment) and rebuild the view.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ecqx/codec.hpp"
#include "ecqx/data.hpp"
#include "ecqx/lrp.hpp"
#include "ecqx/nn.hpp"
#include "ecqx/quantizer.hpp"
#include "ecqx/report.hpp"

namespace ecqx {

enum class QuantMode { ecq, ecqx };

inline const char* mode_name(QuantMode m) { return m == QuantMode::ecq ? "ecq" : "ecqx"; }
inline QuantMode parse_mode(const std::string& s) {
  if (s == "ecq") return QuantMode::ecq;
  if (s == "ecqx") return QuantMode::ecqx;
  throw InputError("unknown quantization mode '" + s + "' (expected ecq or ecqx)");
}

// How a weight gradient is scaled by the centroid its weight is assigned to.
// magnitude multiplies by |w_c| (trained-ternary convention, keeps descent
// direction); signed multiplies by w_c itself.
enum class GradScaling { magnitude, signed_value };

struct QatConfig {
  QuantMode mode = QuantMode::ecqx;
  int bitwidth = 4;
  double lambda = 0.0;  // global; scaled per layer by N_W / max N_W
  double p = 0.05;      // cap on relevance-added sparsity per layer
  double rho = 2.0;
  double momentum = 0.9;
  std::size_t refresh_interval = 1;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  GradScaling scaling = GradScaling::magnitude;
  double lrp_epsilon = 1e-6;
  // Pins the relevance state to all ones (never refreshed); ECQ^x then
  // reduces to ECQ.
  bool uniform_relevance = false;
};

struct QuantControls {
  double lambda_global = 0.0;
  std::vector<double> lambda;  // per quantizable layer
  double rho = 2.0;
  std::vector<double> beta;    // per quantizable layer, last value used
  double p = 1.0;
  double momentum = 0.9;
};

/// lambda_l = lambda_global * N_l / max_l' N_l'.
inline std::vector<double> layer_lambdas(double lambda_global, std::span<const std::size_t> layer_sizes) {
  const std::size_t mx = layer_sizes.empty() ? 1 : *std::max_element(layer_sizes.begin(), layer_sizes.end());
  std::vector<double> out;
  for (auto n : layer_sizes) out.push_back(lambda_global * double(n) / double(mx));
  return out;
}

struct RelevanceState {
  std::vector<Tensor> ema;         // per quantizable layer, momentum average of |R_W|
  std::vector<Tensor> normalized;  // ema / max(ema), in [0, 1]
  std::size_t refresh_interval = 1;
  std::size_t refreshes = 0;
};

/// ema <- mu * ema + (1 - mu) * |r| (ema starts at 0), then normalized = ema /
/// max(ema), or all ones when the maximum is 0.
inline void fold_relevance(Tensor& ema, Tensor& normalized, const Tensor& r, double mu) {
  if (ema.shape() != r.shape()) ema = Tensor(r.shape());
  for (std::size_t i = 0; i < r.size(); ++i) ema[i] = mu * ema[i] + (1.0 - mu) * std::abs(r[i]);
  double mx = 0.0;
  for (double v : ema.vec()) mx = std::max(mx, v);
  normalized = Tensor(r.shape(), 1.0);
  if (mx > 0.0)
    for (std::size_t i = 0; i < r.size(); ++i) normalized[i] = ema[i] / mx;
}

inline double mean_of(const Tensor& t) { return t.empty() ? 0.0 : t.sum() / double(t.size()); }

/// Multiplies each weight gradient by its centroid value (or its magnitude);
/// zero-cluster gradients pass unchanged.
inline Tensor scale_gradients(const Tensor& grad, const AssignmentMatrix& assign, const CentroidGrid& grid,
                              GradScaling scaling = GradScaling::magnitude) {
  if (grad.size() != assign.size()) throw ShapeError("gradient and assignment sizes differ");
  Tensor out = grad;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto c = assign.index[i];
    if (c == grid.zero_index) continue;
    const double w = grid.levels[c];
    out[i] *= scaling == GradScaling::magnitude ? std::abs(w) : w;
  }
  return out;
}

struct QatSession {
  QatConfig cfg;
  Model fp_model;  // background model; only the optimizer changes it
  Model q_model;   // quantized view used for inference and gradients
  std::vector<std::size_t> qlayers;
  std::vector<CentroidGrid> grids;
  std::vector<AssignmentMatrix> assign;
  QuantControls controls;
  RelevanceState relevance;
  AdamState optimizer;
  Composite composite;
  std::size_t step = 0;
  std::size_t epoch = 0;
  Rng rng;
};

/// Rebuilds the quantized view from the background model and assignments.
inline void rebuild_view(QatSession& s) {
  s.q_model = s.fp_model;
  for (std::size_t k = 0; k < s.qlayers.size(); ++k)
    s.q_model.layers[s.qlayers[k]].weight = dequantize(s.assign[k], s.grids[k]);
}

inline bool relevance_active(const QatSession& s) {
  return s.cfg.mode == QuantMode::ecqx && !s.cfg.uniform_relevance && s.relevance.refreshes > 0;
}

/// Everything one re-clustering of a layer produced; kept for inspection.
struct LayerAssignTrace {
  AssignmentMatrix nearest;
  ClusterStats stats;
  AssignmentMatrix ecq;
  double ecq_sparsity = 0.0;
  double beta = 0.0;  // 0 when the relevance term was not applied
  AssignmentMatrix final_assign;
};

/// Steps 5-6 for one layer: nearest-neighbor statistics, then the ECQ or
/// ECQ^x assignment.
inline LayerAssignTrace reassign_layer(QatSession& s, std::size_t k) {
  const Tensor& w = s.fp_model.layers[s.qlayers[k]].weight;
  const auto& grid = s.grids[k];
  LayerAssignTrace t;
  t.nearest = nearest_assign(w, grid);
  t.stats = cluster_stats(t.nearest, grid);
  t.ecq = ecq_assign(w, grid, t.stats, s.controls.lambda[k]);
  t.ecq_sparsity = sparsity(t.ecq, grid);
  t.final_assign = t.ecq;
  if (relevance_active(s)) {
    const Tensor& rn = s.relevance.normalized[k];
    const double mean = mean_of(rn);
    // A flat relevance map carries no ranking; it leaves the ECQ assignment as is.
    if (mean > 0.0 && mean < 1.0) {
      const double beta0 = beta_init(s.controls.rho, mean);
      auto r = assign_with_target_sparsity(w, grid, t.stats, s.controls.lambda[k], rn, s.controls.rho, beta0,
                                           s.controls.p, t.ecq_sparsity);
      t.final_assign = std::move(r.assign);
      t.beta = r.beta;
    }
  }
  s.controls.beta[k] = t.beta;
  s.assign[k] = t.final_assign;
  return t;
}

inline void reassign_all(QatSession& s) {
  for (std::size_t k = 0; k < s.qlayers.size(); ++k) reassign_layer(s, k);
  rebuild_view(s);
}

/// Session from a pretrained model: grids are fitted once to the pretrained
/// weights and stay fixed; the initial assignment is plain ECQ.
inline QatSession make_session(const Model& pretrained, const QatConfig& cfg) {
  if (cfg.bitwidth < 2 || cfg.bitwidth > 5) throw ConfigError("bit width must be in [2, 5]");
  if (!(cfg.p >= 0.0 && cfg.p <= 1.0)) throw ConfigError("target sparsity p must be in [0, 1]");
  if (!(cfg.rho > 1.0)) throw ConfigError("rho must exceed 1");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (cfg.refresh_interval == 0) throw ConfigError("refresh interval must be positive");
  if (!(cfg.lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(cfg.lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  validate_model(pretrained);

  QatSession s;
  s.cfg = cfg;
  s.fp_model = pretrained;
  s.qlayers = pretrained.quantizable_layers();
  std::vector<std::size_t> sizes;
  for (auto l : s.qlayers) {
    s.grids.push_back(make_grid(pretrained.layers[l].weight.values(), cfg.bitwidth));
    sizes.push_back(pretrained.layers[l].weight.size());
  }
  s.assign.resize(s.qlayers.size());
  s.controls = {cfg.lambda, layer_lambdas(cfg.lambda, sizes), cfg.rho,
                std::vector<double>(s.qlayers.size(), 0.0), cfg.p, cfg.momentum};
  s.relevance.refresh_interval = cfg.refresh_interval;
  s.relevance.ema.resize(s.qlayers.size());
  s.relevance.normalized.resize(s.qlayers.size());
  if (cfg.uniform_relevance)
    for (std::size_t k = 0; k < s.qlayers.size(); ++k)
      s.relevance.normalized[k] = Tensor(pretrained.layers[s.qlayers[k]].weight.shape(), 1.0);
  s.optimizer = make_adam(pretrained, cfg.lr);
  s.composite = Composite::standard(cfg.lrp_epsilon);
  s.rng.reseed(cfg.seed);
  reassign_all(s);
  return s;
}

/// LRP on the quantized view, seeded with each sample's target logit; the
/// batch-summed |R_W| is folded into the momentum state.
inline void refresh_relevance(QatSession& s, const ForwardCache& cache, const Tensor& logits,
                              std::span<const int> targets) {
  const Tensor seed = init_relevance(logits, targets, SeedMode::target_score);
  const RelevanceMap map = lrp_backward(s.q_model, cache, seed, s.composite);
  for (std::size_t k = 0; k < s.qlayers.size(); ++k)
    fold_relevance(s.relevance.ema[k], s.relevance.normalized[k], map.weight[s.qlayers[k]], s.controls.momentum);
  ++s.relevance.refreshes;
}

inline void refresh_relevance(QatSession& s, const Tensor& batch, std::span<const int> targets) {
  auto [logits, cache] = forward(s.q_model, batch, false);
  refresh_relevance(s, cache, logits, targets);
}

/// Intermediate results of one step, layer-aligned with QatSession::qlayers.
struct StepTrace {
  Gradients grads;                     // raw, from the quantized view
  std::vector<Tensor> relevance;       // normalized relevance after the refresh
  std::vector<Tensor> scaled_grads;
  std::vector<Tensor> fp_weights;      // background weights after ADAM
  std::vector<LayerAssignTrace> assign;
  bool refreshed = false;
};

struct StepMetrics {
  double loss = 0.0;
  std::vector<double> layer_sparsity;
  double sparsity = 0.0;
};

inline StepMetrics qat_step(QatSession& s, const Tensor& batch, std::span<const int> targets,
                            StepTrace* trace = nullptr) {
  auto [logits, cache] = forward(s.q_model, batch, true);
  const auto ce = cross_entropy(logits, targets);
  if (!std::isfinite(ce.loss))
    throw NumericError("training diverged: non-finite loss at step " + std::to_string(s.step));
  Gradients grads = backward(s.q_model, cache, ce.grad);
  if (trace) trace->grads = grads;

  // BatchNorm running statistics live on the background model.
  for (std::size_t l = 0; l < s.fp_model.layers.size(); ++l)
    if (s.fp_model.layers[l].spec.kind == LayerKind::batchnorm) {
      s.fp_model.layers[l].running_mean = s.q_model.layers[l].running_mean;
      s.fp_model.layers[l].running_var = s.q_model.layers[l].running_var;
    }

  const bool refresh = s.cfg.mode == QuantMode::ecqx && !s.cfg.uniform_relevance &&
                       s.step % s.relevance.refresh_interval == 0;
  if (refresh) {
    if (s.q_model.has_batchnorm()) {
      refresh_relevance(s, batch, targets);
    } else {
      refresh_relevance(s, cache, logits, targets);
    }
  }
  if (trace) {
    trace->refreshed = refresh;
    trace->relevance = s.relevance.normalized;
  }

  for (std::size_t k = 0; k < s.qlayers.size(); ++k) {
    auto& g = grads[s.qlayers[k]].weight;
    g = scale_gradients(g, s.assign[k], s.grids[k], s.cfg.scaling);
    if (trace) trace->scaled_grads.push_back(g);
  }
  if (s.cfg.lr > 0.0) adam_step(s.fp_model, grads, s.optimizer);
  if (trace)
    for (auto l : s.qlayers) trace->fp_weights.push_back(s.fp_model.layers[l].weight);

  StepMetrics m;
  m.loss = ce.loss;
  for (std::size_t k = 0; k < s.qlayers.size(); ++k) {
    auto t = reassign_layer(s, k);
    m.layer_sparsity.push_back(sparsity(s.assign[k], s.grids[k]));
    if (trace) trace->assign.push_back(std::move(t));
  }
  rebuild_view(s);
  m.sparsity = sparsity(std::span<const AssignmentMatrix>(s.assign), std::span<const CentroidGrid>(s.grids));
  ++s.step;
  return m;
}

// ---------------------------------------------------------------------------
// epochs and sweeps

inline std::vector<CodedLayer> coded_layers(const QatSession& s) {
  std::vector<CodedLayer> out;
  for (std::size_t k = 0; k < s.qlayers.size(); ++k)
    out.push_back({"layer" + std::to_string(s.qlayers[k]) + "_" + kind_name(s.fp_model.layers[s.qlayers[k]].spec.kind),
                   s.grids[k], s.assign[k]});
  return out;
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 = initial quantization, before any QAT step
  double loss = 0.0;      // mean training loss over the epoch (0 for epoch 0)
  double acc = 0.0;       // test accuracy in [0, 1]
  double sparsity = 0.0;  // zero fraction over all quantized weights
  double entropy_bits = 0.0;  // size-weighted mean first-order entropy, bits/weight
  std::size_t coded_bytes = 0;
  std::vector<double> layer_sparsity;
};

inline EpochMetrics measure(const QatSession& s, const Dataset& eval) {
  EpochMetrics m;
  m.epoch = s.epoch;
  m.acc = evaluate(s.q_model, eval.features, eval.labels);
  m.sparsity = sparsity(std::span<const AssignmentMatrix>(s.assign), std::span<const CentroidGrid>(s.grids));
  double bits = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < s.qlayers.size(); ++k) {
    const auto st = cluster_stats(s.assign[k], s.grids[k]);
    bits += double(st.total) * entropy(st);
    n += st.total;
    m.layer_sparsity.push_back(sparsity(s.assign[k], s.grids[k]));
  }
  m.entropy_bits = n ? bits / double(n) : 0.0;
  m.coded_bytes = encode(coded_layers(s)).size();
  return m;
}

struct QatResult {
  QatSession session;
  std::vector<EpochMetrics> metrics;  // metrics[0] is the initial quantization
};

/// Runs `cfg.epochs` epochs of qat_step over shuffled mini-batches of
/// data.train, measuring on data.test after the initial quantization and
/// after every epoch.
inline QatResult train_qat(const Model& pretrained, const SplitDataset& data, const QatConfig& cfg) {
  check_dataset(data.train);
  check_dataset(data.test);
  QatResult res{make_session(pretrained, cfg), {}};
  QatSession& s = res.session;
  res.metrics.push_back(measure(s, data.test));
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    s.rng.shuffle(order);
    double loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const Dataset b = subset(data.train, idx);
      loss += qat_step(s, b.features, b.labels).loss;
      ++batches;
    }
    ++s.epoch;
    auto m = measure(s, data.test);
    m.loss = batches ? loss / double(batches) : 0.0;
    res.metrics.push_back(std::move(m));
  }
  return res;
}

/// Plain full-precision training with ADAM, used for the pretrained baseline.
/// `weight_decay` adds an L2 term wd * w to the gradient of dense and conv
/// weights (not biases or batchnorm parameters).
inline Model pretrain(Model model, const Dataset& train, std::size_t epochs, double lr, std::size_t batch_size,
                      std::uint64_t seed, double weight_decay = 0.0) {
  check_dataset(train);
  AdamState opt = make_adam(model, lr);
  Rng rng(seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t e = 0; e < epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch_size, order.size() - start));
      const Dataset b = subset(train, idx);
      auto [logits, cache] = forward(model, b.features, true);
      const auto ce = cross_entropy(logits, b.labels);
      if (!std::isfinite(ce.loss)) throw NumericError("pretraining diverged in epoch " + std::to_string(e));
      Gradients g = backward(model, cache, ce.grad);
      if (weight_decay > 0.0)
        for (auto l : model.quantizable_layers())
          for (std::size_t i = 0; i < g[l].weight.size(); ++i) g[l].weight[i] += weight_decay * model.layers[l].weight[i];
      adam_step(model, g, opt);
    }
  }
  return model;
}

struct SweepPoint {
  int bitwidth = 4;
  double lambda = 0.0;
  double p = 0.0;
};

struct SweepResult {
  SweepPoint point;
  ReportRecord record;
  std::vector<EpochMetrics> metrics;
  std::string error;  // non-empty when the run failed
};

inline ReportRecord make_record(const std::string& model_name, const QatConfig& cfg, const EpochMetrics& last,
                                double fp_acc, std::size_t quantizable_weights) {
  ReportRecord r;
  r.model = model_name;
  r.method = cfg.mode == QuantMode::ecq ? "ECQ" : "ECQx";
  r.bw = cfg.bitwidth;
  r.lambda = cfg.lambda;
  r.p = cfg.p;
  r.acc = 100.0 * last.acc;
  r.acc_drop = 100.0 * (fp_acc - last.acc);
  r.sparsity_pct = 100.0 * last.sparsity;
  r.size_kB = double(last.coded_bytes) / 1000.0;
  r.cr = compression_ratio(fp_weight_bytes(quantizable_weights), double(last.coded_bytes));
  return r;
}

/// One train_qat per (bit width, lambda, p) combination. A failing run is
/// recorded with its error and the sweep continues. Points are independent
/// and are distributed over `threads` workers; results keep grid order.
inline std::vector<SweepResult> sweep(const Model& pretrained, const SplitDataset& data, const QatConfig& base,
                                      const std::vector<double>& lambda_grid, const std::vector<double>& p_grid,
                                      const std::vector<int>& bitwidths, const std::string& model_name,
                                      unsigned threads = 1) {
  if (lambda_grid.empty() || p_grid.empty() || bitwidths.empty()) throw ConfigError("sweep grids must be non-empty");
  std::vector<SweepPoint> points;
  for (int bw : bitwidths)
    for (double lam : lambda_grid)
      for (double p : p_grid) points.push_back({bw, lam, p});
  const double fp_acc = evaluate(pretrained, data.test.features, data.test.labels);
  std::vector<SweepResult> results(points.size());
  auto run = [&](std::size_t i) {
    SweepResult& r = results[i];
    r.point = points[i];
    QatConfig cfg = base;
    cfg.bitwidth = points[i].bitwidth;
    cfg.lambda = points[i].lambda;
    cfg.p = points[i].p;
    try {
      auto q = train_qat(pretrained, data, cfg);
      r.metrics = std::move(q.metrics);
      r.record = make_record(model_name, cfg, r.metrics.back(), fp_acc, pretrained.quantizable_weight_count());
    } catch (const std::exception& e) {
      r.error = e.what();
      r.record.model = model_name;
      r.record.method = cfg.mode == QuantMode::ecq ? "ECQ" : "ECQx";
      r.record.bw = cfg.bitwidth;
      r.record.lambda = cfg.lambda;
      r.record.p = cfg.p;
      r.record.acc = r.record.acc_drop = r.record.sparsity_pct = r.record.size_kB = r.record.cr =
          std::numeric_limits<double>::quiet_NaN();
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, unsigned(points.size())));
  if (threads == 1) {
    for (std::size_t i = 0; i < points.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < points.size(); i += threads) run(i);
      });
    for (auto& th : pool) th.join();
  }
  return results;
}

}  // namespace ecqx
