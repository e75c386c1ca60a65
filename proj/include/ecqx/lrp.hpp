#pragma once

// Layer-wise relevance propagation with per-weight relevance aggregation.
//
// Linear layers (dense, conv via im2col, batchnorm as per-channel affine map)
// are decomposed explicitly: for every application row and every output j the
// messages R_{i<-j} are formed from z_ij = a_i * w_ij and summed into both the
// input neuron i and the weight w_ij. For conv layers each im2col row is one
// application context of the filter, so summing over rows yields the filter
// weight relevance. The bias acts as weight w_0j on a constant input 1; its
// messages are absorbed and reported, never propagated.

#include <bit>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ecqx/checkpoint.hpp"
#include "ecqx/nn.hpp"

namespace ecqx {

struct LrpRule {
  enum class Kind { basic, epsilon, alphabeta };
  Kind kind = Kind::basic;
  double epsilon_ = 0.0;
  double alpha = 1.0;
  double beta = 0.0;

  static LrpRule basic() { return {}; }
  static LrpRule epsilon(double eps) {
    if (!(eps >= 0.0)) throw InputError("epsilon rule requires eps >= 0");
    return {Kind::epsilon, eps, 1.0, 0.0};
  }
  static LrpRule alphabeta(double alpha, double beta) {
    if (!(beta >= 0.0)) throw InputError("alpha-beta rule requires beta >= 0");
    if (std::abs(alpha - beta - 1.0) > 1e-12) throw InputError("alpha-beta rule requires alpha - beta = 1");
    return {Kind::alphabeta, 0.0, alpha, beta};
  }

  std::string describe() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::basic: os << "basic"; break;
      case Kind::epsilon: os << "epsilon(eps=" << epsilon_ << ")"; break;
      case Kind::alphabeta: os << "alphabeta(alpha=" << alpha << ",beta=" << beta << ")"; break;
    }
    return os.str();
  }
};

/// Rule per linear layer kind. relu, flatten and maxpool have fixed behavior.
struct Composite {
  std::map<LayerKind, LrpRule> rules;

  // epsilon for dense layers, alpha=2/beta=1 for conv and batchnorm.
  static Composite standard(double eps = 1e-6) {
    return {{{LayerKind::dense, LrpRule::epsilon(eps)},
             {LayerKind::conv2d, LrpRule::alphabeta(2.0, 1.0)},
             {LayerKind::batchnorm, LrpRule::alphabeta(2.0, 1.0)}}};
  }
  static Composite uniform(const LrpRule& r) {
    return {{{LayerKind::dense, r}, {LayerKind::conv2d, r}, {LayerKind::batchnorm, r}}};
  }

  const LrpRule& rule_for(LayerKind k) const {
    auto it = rules.find(k);
    if (it == rules.end()) throw ConfigError(std::string("composite has no LRP rule for layer kind ") + kind_name(k));
    return it->second;
  }
};

enum class SeedMode { target_score, unit };

/// Output relevance: zero except at each row's target class, which carries the
/// target logit (target_score) or 1 (unit).
inline Tensor init_relevance(const Tensor& logits, std::span<const int> targets, SeedMode mode) {
  if (logits.rank() != 2) throw ShapeError("logits must be (batch, classes)");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (targets.size() != n) throw InputError("target count does not match batch size");
  Tensor r({n, k});
  for (std::size_t row = 0; row < n; ++row) {
    const int t = targets[row];
    if (t < 0 || std::size_t(t) >= k) throw InputError("target class " + std::to_string(t) + " out of range");
    r[row * k + t] = mode == SeedMode::target_score ? logits[row * k + t] : 1.0;
  }
  return r;
}

namespace detail {

inline double eps_sign(double z) { return z >= 0.0 ? 1.0 : -1.0; }

// Visits every message of one application row: sink(i, j, R_{i<-j}) for
// inputs, bias_sink(j, R_{0<-j}) for the bias. `a` has `in` entries, `w` is
// (in, out) row-major, `bias` may be null, `r` has `out` entries. `scratch`
// must hold 2*out doubles.
template <typename Sink, typename BiasSink>
void linear_row_messages(const double* a, const double* w, const double* bias, const double* r, std::size_t in,
                         std::size_t out, const LrpRule& rule, std::vector<double>& scratch, Sink&& sink,
                         BiasSink&& bias_sink) {
  scratch.assign(2 * out, 0.0);
  double* s1 = scratch.data();        // per-output scale, positive part scale for alphabeta
  double* s2 = scratch.data() + out;  // negative part scale for alphabeta

  if (rule.kind != LrpRule::Kind::alphabeta) {
    // z_j = b_j + sum_i a_i w_ij, accumulated in input order
    if (bias) std::copy(bias, bias + out, s1);
    for (std::size_t i = 0; i < in; ++i) {
      if (a[i] == 0.0) continue;
      const double* wi = w + i * out;
      for (std::size_t j = 0; j < out; ++j) s1[j] += a[i] * wi[j];
    }
    const double eps = rule.kind == LrpRule::Kind::epsilon ? rule.epsilon_ : 0.0;
    for (std::size_t j = 0; j < out; ++j) {
      const double denom = s1[j] + eps * eps_sign(s1[j]);
      if (denom == 0.0) {
        if (r[j] != 0.0)
          throw NumericError("LRP denominator z_j is zero with nonzero relevance; use the epsilon rule");
        s1[j] = 0.0;
      } else {
        s1[j] = r[j] / denom;
      }
    }
    for (std::size_t i = 0; i < in; ++i) {
      if (a[i] == 0.0) continue;
      const double* wi = w + i * out;
      for (std::size_t j = 0; j < out; ++j) sink(i, j, a[i] * wi[j] * s1[j]);
    }
    if (bias)
      for (std::size_t j = 0; j < out; ++j) bias_sink(j, bias[j] * s1[j]);
    return;
  }

  // (z_j)^+ and (z_j)^- including the bias term
  if (bias)
    for (std::size_t j = 0; j < out; ++j) (bias[j] > 0.0 ? s1[j] : s2[j]) += bias[j];
  for (std::size_t i = 0; i < in; ++i) {
    if (a[i] == 0.0) continue;
    const double* wi = w + i * out;
    for (std::size_t j = 0; j < out; ++j) {
      const double z = a[i] * wi[j];
      (z > 0.0 ? s1[j] : s2[j]) += z;
    }
  }
  for (std::size_t j = 0; j < out; ++j) {
    s1[j] = s1[j] != 0.0 ? rule.alpha * r[j] / s1[j] : 0.0;
    s2[j] = s2[j] != 0.0 ? rule.beta * r[j] / s2[j] : 0.0;
  }
  for (std::size_t i = 0; i < in; ++i) {
    if (a[i] == 0.0) continue;
    const double* wi = w + i * out;
    for (std::size_t j = 0; j < out; ++j) {
      const double z = a[i] * wi[j];
      sink(i, j, z > 0.0 ? z * s1[j] : -z * s2[j]);
    }
  }
  if (bias)
    for (std::size_t j = 0; j < out; ++j) bias_sink(j, bias[j] > 0.0 ? bias[j] * s1[j] : -bias[j] * s2[j]);
}

}  // namespace detail

// Messages of one linear application: messages(i, j) = R_{i<-j}; bias(j) = R_{0<-j}.
struct LinearMessages {
  Tensor messages;  // (in, out)
  Tensor bias;      // (out), zeros when the layer has no bias
};

/// Decomposes the relevance of every output neuron of one linear application
/// into per-input messages. `a_in` (in), `weights` (in, out), `bias` (out) or
/// empty, `r_out` (out).
inline LinearMessages decompose_linear(const Tensor& a_in, const Tensor& weights, const Tensor& bias,
                                       const Tensor& r_out, const LrpRule& rule) {
  if (weights.rank() != 2) throw ShapeError("weights must be (in, out)");
  const std::size_t in = weights.dim(0), out = weights.dim(1);
  if (a_in.size() != in || r_out.size() != out || (!bias.empty() && bias.size() != out))
    throw ShapeError("decompose_linear operand shapes do not match weights " + shape_str(weights.shape()));
  LinearMessages m{Tensor({in, out}), Tensor({out})};
  std::vector<double> scratch;
  detail::linear_row_messages(
      a_in.data(), weights.data(), bias.empty() ? nullptr : bias.data(), r_out.data(), in, out, rule, scratch,
      [&](std::size_t i, std::size_t j, double v) { m.messages[i * out + j] = v; },
      [&](std::size_t j, double v) { m.bias[j] = v; });
  return m;
}

struct NeuronRelevance {
  Tensor r_in;            // (in)
  double absorbed = 0.0;  // relevance sent to the bias
};

/// R_i = sum_j R_{i<-j}; bias-directed relevance is reported, not propagated.
inline NeuronRelevance aggregate_neuron_relevance(const LinearMessages& m) {
  const std::size_t in = m.messages.dim(0), out = m.messages.dim(1);
  NeuronRelevance res{Tensor({in}), m.bias.sum()};
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j) res.r_in[i] += m.messages[i * out + j];
  return res;
}

struct LinearRelevance {
  Tensor r_in;            // (rows, in)
  Tensor r_w;             // (in, out), summed over rows
  double absorbed = 0.0;  // summed bias messages
};

/// Batched linear LRP: every row of `a` (rows, in) is one application of
/// `weights` (in, out) with relevance `r_out` (rows, out). Weight relevance is
/// the sum of the per-row messages.
inline LinearRelevance lrp_linear(const Tensor& a, const Tensor& weights, const Tensor& bias, const Tensor& r_out,
                                  const LrpRule& rule) {
  const std::size_t rows = a.dim(0), in = weights.dim(0), out = weights.dim(1);
  if (a.rank() != 2 || a.dim(1) != in || r_out.rank() != 2 || r_out.dim(0) != rows || r_out.dim(1) != out)
    throw ShapeError("lrp_linear operand shapes " + shape_str(a.shape()) + " / " + shape_str(r_out.shape()) +
                     " do not match weights " + shape_str(weights.shape()));
  LinearRelevance res{Tensor({rows, in}), Tensor({in, out}), 0.0};
  std::vector<double> scratch;
  double* rw = res.r_w.data();
  for (std::size_t row = 0; row < rows; ++row) {
    double* rin = res.r_in.data() + row * in;
    detail::linear_row_messages(
        a.data() + row * in, weights.data(), bias.empty() ? nullptr : bias.data(), r_out.data() + row * out, in,
        out, rule, scratch,
        [&](std::size_t i, std::size_t j, double v) {
          rin[i] += v;
          rw[i * out + j] += v;
        },
        [&](std::size_t, double v) { res.absorbed += v; });
  }
  return res;
}

/// Dense weight relevance R_W[i, j] = sum over batch rows of R_{i<-j}.
inline Tensor weight_relevance_dense(const Tensor& a_in, const Tensor& weights, const Tensor& bias,
                                     const Tensor& r_out, const LrpRule& rule) {
  if (a_in.rank() == 1) return lrp_linear(a_in.reshaped({1, a_in.size()}), weights, bias,
                                          r_out.reshaped({1, r_out.size()}), rule).r_w;
  return lrp_linear(a_in, weights, bias, r_out, rule).r_w;
}

struct ConvRelevance {
  Tensor r_in;  // (N, C, H, W)
  Tensor r_w;   // kernel shape (OC, C, k, k)
  double absorbed = 0.0;
};

/// Conv LRP. `a_in` (N, C, H, W), `kernel` (OC, C, k, k), `r_out` (N, OC, OH, OW).
/// Each output position of each sample is one application context k of the
/// filter; the weight relevance is the sum of its messages over all contexts.
inline ConvRelevance lrp_conv(const Tensor& a_in, const Tensor& kernel, const Tensor& bias, const Tensor& r_out,
                              const LrpRule& rule, std::size_t stride, std::size_t padding) {
  if (a_in.rank() != 4 || kernel.rank() != 4) throw ShapeError("conv LRP expects 4-d input and kernel");
  const auto spec = LayerSpec::conv2d(kernel.dim(1), kernel.dim(0), kernel.dim(2), stride, padding);
  const auto g = conv_geometry(spec, {a_in.dim(1), a_in.dim(2), a_in.dim(3)});
  const Shape expected{a_in.dim(0), g.out_channels, g.out_h, g.out_w};
  if (r_out.shape() != expected)
    throw ShapeError("conv relevance shape " + shape_str(r_out.shape()) + " does not match geometry " +
                     shape_str(expected));
  auto lin = lrp_linear(im2col(a_in, g), kernel_as_dense(kernel), bias, nchw_to_rows(r_out), rule);
  return {col2im(lin.r_in, g, a_in.dim(0)), dense_as_kernel(lin.r_w, kernel.shape()), lin.absorbed};
}

inline Tensor weight_relevance_conv(const Tensor& a_in, const Tensor& kernel, const Tensor& bias,
                                    const Tensor& r_out, const LrpRule& rule, std::size_t stride,
                                    std::size_t padding) {
  return lrp_conv(a_in, kernel, bias, r_out, rule, stride, padding).r_w;
}

struct RelevanceMap {
  std::vector<Tensor> weight;    // R_W per layer; empty for parameter-free layers
  std::vector<Tensor> input;     // R_in per layer (relevance of that layer's input)
  std::vector<double> absorbed;  // bias-absorbed relevance per layer
};

/// Walks the model output -> input redistributing `r_seed` (batch, classes).
inline RelevanceMap lrp_backward(const Model& model, const ForwardCache& cache, const Tensor& r_seed,
                                 const Composite& composite) {
  const std::size_t L = model.layers.size();
  if (cache.size() != L) throw CacheError("forward cache does not match model");
  if (r_seed.shape() != cache.outputs[L - 1].shape())
    throw ShapeError("relevance seed shape " + shape_str(r_seed.shape()) + " does not match logits " +
                     shape_str(cache.outputs[L - 1].shape()));
  // Resolve rules up front so a bad composite fails before any work.
  for (const auto& layer : model.layers)
    if (has_params(layer.spec.kind)) composite.rule_for(layer.spec.kind);

  RelevanceMap map;
  map.weight.resize(L);
  map.input.resize(L);
  map.absorbed.assign(L, 0.0);
  Tensor r = r_seed;
  for (std::size_t li = L; li-- > 0;) {
    const auto& layer = model.layers[li];
    const auto& s = layer.spec;
    const Tensor& a = cache.inputs[li];
    switch (s.kind) {
      case LayerKind::dense: {
        auto lin = lrp_linear(a, layer.weight, layer.bias, r, composite.rule_for(s.kind));
        map.weight[li] = std::move(lin.r_w);
        map.absorbed[li] = lin.absorbed;
        r = std::move(lin.r_in);
        break;
      }
      case LayerKind::conv2d: {
        auto cr = lrp_conv(a, layer.weight, layer.bias, r, composite.rule_for(s.kind), s.stride, s.padding);
        map.weight[li] = std::move(cr.r_w);
        map.absorbed[li] = cr.absorbed;
        r = std::move(cr.r_in);
        break;
      }
      case LayerKind::relu: {
        for (std::size_t i = 0; i < r.size(); ++i)
          if (!(a[i] > 0.0)) r[i] = 0.0;
        break;
      }
      case LayerKind::maxpool2d: {
        Tensor rin(a.shape());
        const auto& arg = cache.argmax[li];
        for (std::size_t o = 0; o < r.size(); ++o) rin[arg[o]] += r[o];
        r = std::move(rin);
        break;
      }
      case LayerKind::flatten:
        r = r.reshaped(a.shape());
        break;
      case LayerKind::batchnorm: {
        // Per-channel affine view y = a * g + b_eff with g = gamma / sigma;
        // b_eff is recovered from the cached output so batch- and
        // running-stat forwards are both handled.
        const LrpRule& rule = composite.rule_for(s.kind);
        const auto& inv = cache.bn_inv_std[li];
        const Tensor& y = cache.outputs[li];
        const std::size_t n = a.dim(0), c = a.dim(1), hw = a.rank() == 4 ? a.dim(2) * a.dim(3) : 1;
        Tensor rin(a.shape()), rw({c});
        std::vector<double> scratch;
        double absorbed = 0.0;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double gain = layer.weight[ch] * inv[ch];
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t idx = (b * c + ch) * hw + p;
              const double b_eff = y[idx] - a[idx] * gain;
              detail::linear_row_messages(
                  a.data() + idx, &gain, &b_eff, r.data() + idx, 1, 1, rule, scratch,
                  [&](std::size_t, std::size_t, double v) {
                    rin[idx] += v;
                    rw[ch] += v;
                  },
                  [&](std::size_t, double v) { absorbed += v; });
            }
          }
        map.weight[li] = std::move(rw);
        map.absorbed[li] = absorbed;
        r = std::move(rin);
        break;
      }
    }
    map.input[li] = r;
  }
  return map;
}

// ---------------------------------------------------------------------------
// relevance dump: <dir>/manifest.txt plus one raw little-endian f64 file per
// parametrized layer. Manifest lines: "<name> <d0>x<d1>... <rule> <file>".

inline void write_relevance_dump(const std::string& dir, const Model& model, const RelevanceMap& map,
                                 const Composite& composite) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& spec = model.layers[l].spec;
    if (!has_params(spec.kind) || map.weight[l].empty()) continue;
    const std::string name = "layer" + std::to_string(l) + "_" + kind_name(spec.kind);
    std::string shape;
    for (auto d : map.weight[l].shape()) shape += (shape.empty() ? "" : "x") + std::to_string(d);
    manifest << name << ' ' << shape << ' ' << composite.rule_for(spec.kind).describe() << ' ' << name
             << ".f64\n";
    std::string bytes;
    for (double v : map.weight[l].vec()) detail::put_f64_le(bytes, v);
    write_file((std::filesystem::path(dir) / (name + ".f64")).string(), bytes);
  }
  write_file((std::filesystem::path(dir) / "manifest.txt").string(), manifest.str());
}

struct RelevanceDumpEntry {
  std::string name;
  std::string rule;
  Tensor relevance;
};

inline std::vector<RelevanceDumpEntry> read_relevance_dump(const std::string& dir) {
  std::istringstream manifest(read_file((std::filesystem::path(dir) / "manifest.txt").string()));
  std::vector<RelevanceDumpEntry> out;
  std::string name, shape, rule, file;
  while (manifest >> name >> shape >> rule >> file) {
    Shape s;
    std::istringstream ss(shape);
    for (std::string d; std::getline(ss, d, 'x');) s.push_back(std::stoul(d));
    const std::string bytes = read_file((std::filesystem::path(dir) / file).string());
    if (bytes.size() != 8 * shape_size(s)) throw FormatError("relevance file " + file + " has wrong length", 0);
    Tensor t(s);
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = detail::get_f64_le(reinterpret_cast<const unsigned char*>(bytes.data()) + 8 * i);
    out.push_back({name, rule, std::move(t)});
  }
  return out;
}

}  // namespace ecqx
