#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ecqx/tensor.hpp"

namespace ecqx {

enum class LayerKind { dense, conv2d, relu, maxpool2d, flatten, batchnorm };

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::batchnorm: return "batchnorm";
  }
  return "?";
}

inline LayerKind parse_kind(const std::string& s) {
  for (auto k : {LayerKind::dense, LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool2d,
                 LayerKind::flatten, LayerKind::batchnorm})
    if (s == kind_name(k)) return k;
  throw InputError("unknown layer kind '" + s + "'");
}

// Weights of these layers are quantized; everything else stays full precision.
inline bool is_quantizable(LayerKind k) { return k == LayerKind::dense || k == LayerKind::conv2d; }
inline bool has_params(LayerKind k) {
  return k == LayerKind::dense || k == LayerKind::conv2d || k == LayerKind::batchnorm;
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;   // dense in-features, conv in-channels, batchnorm channels
  std::size_t out = 0;  // dense out-features, conv out-channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t pool = 0;
  bool has_bias = true;

  static LayerSpec dense(std::size_t in, std::size_t out, bool bias = true) {
    return {LayerKind::dense, in, out, 0, 1, 0, 0, bias};
  }
  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0, bool bias = true) {
    return {LayerKind::conv2d, in, out, kernel, stride, padding, 0, bias};
  }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec maxpool2d(std::size_t pool) { return {LayerKind::maxpool2d, 0, 0, 0, 1, 0, pool, false}; }
  static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 0, 1, 0, 0, false}; }
  static LayerSpec batchnorm(std::size_t channels) {
    return {LayerKind::batchnorm, channels, channels, 0, 1, 0, 0, true};
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Geometry of one conv application over a single sample.
struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const LayerSpec& s, const Shape& sample) {
  if (sample.size() != 3 || sample[0] != s.in)
    throw ShapeError("conv2d expects (" + std::to_string(s.in) + ",H,W) input, got " + shape_str(sample));
  const std::size_t h = sample[1] + 2 * s.padding, w = sample[2] + 2 * s.padding;
  if (h < s.kernel || w < s.kernel)
    throw ShapeError("conv2d kernel " + std::to_string(s.kernel) + " larger than padded input " +
                     shape_str(sample));
  return {sample[0], sample[1], sample[2], s.out, s.kernel, s.stride, s.padding,
          (h - s.kernel) / s.stride + 1, (w - s.kernel) / s.stride + 1};
}

inline void validate_spec(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::dense:
      if (s.in == 0 || s.out == 0) throw ShapeError("dense dims must be positive");
      break;
    case LayerKind::conv2d:
      if (s.in == 0 || s.out == 0 || s.kernel == 0 || s.stride == 0)
        throw ShapeError("conv2d dims must be positive");
      if (s.padding >= s.kernel) throw ShapeError("conv2d padding must be smaller than kernel");
      break;
    case LayerKind::maxpool2d:
      if (s.pool == 0) throw ShapeError("maxpool2d size must be positive");
      break;
    case LayerKind::batchnorm:
      if (s.in == 0) throw ShapeError("batchnorm channels must be positive");
      break;
    default: break;
  }
}

// Per-sample output shape of a layer given its per-sample input shape.
inline Shape output_shape(const LayerSpec& s, const Shape& in) {
  switch (s.kind) {
    case LayerKind::dense:
      if (in.size() != 1 || in[0] != s.in)
        throw ShapeError("dense expects (" + std::to_string(s.in) + ") input, got " + shape_str(in));
      return {s.out};
    case LayerKind::conv2d: {
      auto g = conv_geometry(s, in);
      return {g.out_channels, g.out_h, g.out_w};
    }
    case LayerKind::relu: return in;
    case LayerKind::maxpool2d:
      if (in.size() != 3 || in[1] < s.pool || in[2] < s.pool)
        throw ShapeError("maxpool2d expects (C,H,W) input of at least pool size, got " + shape_str(in));
      return {in[0], in[1] / s.pool, in[2] / s.pool};
    case LayerKind::flatten: return {shape_size(in)};
    case LayerKind::batchnorm:
      if ((in.size() != 1 && in.size() != 3) || in[0] != s.in)
        throw ShapeError("batchnorm expects (" + std::to_string(s.in) + ") or (" + std::to_string(s.in) +
                         ",H,W) input, got " + shape_str(in));
      return in;
  }
  return in;
}

struct Layer {
  LayerSpec spec;
  Tensor weight;  // dense (in,out); conv (out,in,k,k); batchnorm gamma (C)
  Tensor bias;    // (out) or batchnorm beta (C); empty when has_bias is false
  Tensor running_mean;
  Tensor running_var;
};

struct Model {
  Shape input_shape;  // per sample
  std::vector<Layer> layers;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::size_t n_classes() const { return shape_size(layer_input_shape(layers.size())); }

  // Per-sample input shape of layer l (l == size() gives the model output).
  Shape layer_input_shape(std::size_t l) const {
    Shape s = input_shape;
    for (std::size_t i = 0; i < l; ++i) s = output_shape(layers[i].spec, s);
    return s;
  }

  std::vector<std::size_t> quantizable_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (is_quantizable(layers[i].spec.kind)) out.push_back(i);
    return out;
  }

  std::size_t quantizable_weight_count() const {
    std::size_t n = 0;
    for (auto i : quantizable_layers()) n += layers[i].weight.size();
    return n;
  }

  bool has_batchnorm() const {
    return std::any_of(layers.begin(), layers.end(),
                       [](const Layer& l) { return l.spec.kind == LayerKind::batchnorm; });
  }
};

inline Shape weight_shape(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::dense: return {s.in, s.out};
    case LayerKind::conv2d: return {s.out, s.in, s.kernel, s.kernel};
    case LayerKind::batchnorm: return {s.in};
    default: return {};
  }
}

inline void validate_model(const Model& m) {
  if (m.layers.empty()) throw ShapeError("model has no layers");
  Shape s = m.input_shape;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& layer = m.layers[l];
    validate_spec(layer.spec);
    s = output_shape(layer.spec, s);
    if (!has_params(layer.spec.kind)) continue;
    if (layer.weight.shape() != weight_shape(layer.spec))
      throw ShapeError("layer " + std::to_string(l) + " weight shape " + shape_str(layer.weight.shape()) +
                       " does not match spec");
    const std::size_t nb = layer.spec.kind == LayerKind::dense || layer.spec.kind == LayerKind::conv2d
                               ? layer.spec.out
                               : layer.spec.in;
    if (layer.spec.has_bias && layer.bias.shape() != Shape{nb})
      throw ShapeError("layer " + std::to_string(l) + " bias shape mismatch");
    if (layer.spec.kind == LayerKind::batchnorm) {
      for (double g : layer.weight.vec())
        if (!(g > 0.0)) throw ShapeError("batchnorm gamma must be strictly positive");
      for (double v : layer.running_var.vec())
        if (!(v > 0.0)) throw ShapeError("batchnorm running variance must be strictly positive");
      if (layer.running_mean.size() != nb || layer.running_var.size() != nb)
        throw ShapeError("batchnorm running stats shape mismatch");
    }
  }
  if (s.size() != 1) throw ShapeError("model output must be a flat class vector, got " + shape_str(s));
}

/// Builds a model and initializes its parameters: Kaiming-uniform fan-in
/// (bound sqrt(6 / fan_in)) for dense and conv weights, zero biases, and
/// BatchNorm gamma = 1, beta = 0, running stats (0, 1). Draws are taken layer
/// by layer in row-major weight order from a single Rng(seed).
inline Model make_model(Shape input_shape, const std::vector<LayerSpec>& specs, std::uint64_t seed) {
  Model m;
  m.input_shape = std::move(input_shape);
  Rng rng(seed);
  for (const auto& spec : specs) {
    validate_spec(spec);
    Layer layer{spec, {}, {}, {}, {}};
    if (spec.kind == LayerKind::dense || spec.kind == LayerKind::conv2d) {
      layer.weight = Tensor(weight_shape(spec));
      const double fan_in = spec.kind == LayerKind::dense ? double(spec.in)
                                                          : double(spec.in * spec.kernel * spec.kernel);
      const double bound = std::sqrt(6.0 / fan_in);
      for (auto& w : layer.weight.vec()) w = rng.uniform(-bound, bound);
      if (spec.has_bias) layer.bias = Tensor({spec.out}, 0.0);
    } else if (spec.kind == LayerKind::batchnorm) {
      layer.spec.has_bias = true;
      layer.weight = Tensor({spec.in}, 1.0);
      layer.bias = Tensor({spec.in}, 0.0);
      layer.running_mean = Tensor({spec.in}, 0.0);
      layer.running_var = Tensor({spec.in}, 1.0);
    }
    m.layers.push_back(std::move(layer));
  }
  validate_model(m);
  return m;
}

// ---------------------------------------------------------------------------
// im2col

// Unrolls one batch into a (N * out_h * out_w, C * k * k) matrix. Row order is
// (n, oh, ow); column order (c, kh, kw). Padded positions read as 0.
inline Tensor im2col(const Tensor& x, const ConvGeometry& g) {
  const std::size_t n = x.dim(0), rows = n * g.positions(), cols = g.patch();
  Tensor out({rows, cols});
  double* o = out.data();
  const double* in = x.data();
  const std::size_t plane = g.height * g.width, sample = g.channels * plane;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oh = 0; oh < g.out_h; ++oh)
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        for (std::size_t c = 0; c < g.channels; ++c)
          for (std::size_t kh = 0; kh < g.kernel; ++kh)
            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
              const long ih = long(oh * g.stride + kh) - long(g.padding);
              const long iw = long(ow * g.stride + kw) - long(g.padding);
              *o++ = (ih < 0 || iw < 0 || ih >= long(g.height) || iw >= long(g.width))
                         ? 0.0
                         : in[b * sample + c * plane + std::size_t(ih) * g.width + std::size_t(iw)];
            }
      }
  return out;
}

// Adjoint of im2col: scatter-adds columns back into an (N, C, H, W) tensor.
inline Tensor col2im(const Tensor& cols, const ConvGeometry& g, std::size_t n) {
  Tensor out({n, g.channels, g.height, g.width});
  const double* c = cols.data();
  double* o = out.data();
  const std::size_t plane = g.height * g.width, sample = g.channels * plane;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oh = 0; oh < g.out_h; ++oh)
      for (std::size_t ow = 0; ow < g.out_w; ++ow)
        for (std::size_t ch = 0; ch < g.channels; ++ch)
          for (std::size_t kh = 0; kh < g.kernel; ++kh)
            for (std::size_t kw = 0; kw < g.kernel; ++kw) {
              const double v = *c++;
              const long ih = long(oh * g.stride + kh) - long(g.padding);
              const long iw = long(ow * g.stride + kw) - long(g.padding);
              if (ih < 0 || iw < 0 || ih >= long(g.height) || iw >= long(g.width)) continue;
              o[b * sample + ch * plane + std::size_t(ih) * g.width + std::size_t(iw)] += v;
            }
  return out;
}

// (N, OC, OH, OW) <-> (N * OH * OW, OC)
inline Tensor nchw_to_rows(const Tensor& t) {
  const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  Tensor out({n * hw, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(b * hw + p) * c + ch] = t[(b * c + ch) * hw + p];
  return out;
}

inline Tensor rows_to_nchw(const Tensor& rows, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  Tensor out({n, c, h, w});
  const std::size_t hw = h * w;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(b * c + ch) * hw + p] = rows[(b * hw + p) * c + ch];
  return out;
}

// Conv kernel (OC, C, k, k) viewed as an (C*k*k, OC) matrix, i.e. the dense
// weight layout (in, out) of the unrolled layer.
inline Tensor kernel_as_dense(const Tensor& kernel) {
  const std::size_t oc = kernel.dim(0), patch = kernel.size() / oc;
  Tensor out({patch, oc});
  for (std::size_t o = 0; o < oc; ++o)
    for (std::size_t p = 0; p < patch; ++p) out[p * oc + o] = kernel[o * patch + p];
  return out;
}

inline Tensor dense_as_kernel(const Tensor& dense, const Shape& kernel_shape) {
  const std::size_t patch = dense.dim(0), oc = dense.dim(1);
  Tensor out(kernel_shape);
  for (std::size_t o = 0; o < oc; ++o)
    for (std::size_t p = 0; p < patch; ++p) out[o * patch + p] = dense[p * oc + o];
  return out;
}

// y = x * w + b for x (n, in), w (in, out).
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.dim(0), in = w.dim(0), out = w.dim(1);
  Tensor y({n, out});
  for (std::size_t r = 0; r < n; ++r) {
    double* yr = y.data() + r * out;
    if (!b.empty()) std::copy(b.data(), b.data() + out, yr);
    const double* xr = x.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double a = xr[i];
      if (a == 0.0) continue;
      const double* wi = w.data() + i * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += a * wi[j];
    }
  }
  return y;
}

// ---------------------------------------------------------------------------
// forward / backward

struct ForwardCache {
  std::vector<Tensor> inputs;   // a: input activation of each layer
  std::vector<Tensor> outputs;  // z for linear kinds, activation otherwise
  std::vector<Tensor> cols;     // im2col of conv inputs
  std::vector<std::vector<std::size_t>> argmax;  // maxpool: flat input index per output
  std::vector<Tensor> bn_xhat;
  std::vector<std::vector<double>> bn_inv_std;
  bool training = false;

  std::size_t size() const { return inputs.size(); }
};

struct ParamGrad {
  Tensor weight;
  Tensor bias;
};
using Gradients = std::vector<ParamGrad>;

namespace detail {

inline void bn_dims(const Tensor& x, std::size_t& n, std::size_t& c, std::size_t& hw) {
  n = x.dim(0);
  c = x.dim(1);
  hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
}

}  // namespace detail

// `stats` receives BatchNorm running-stat updates in training mode; it may be
// null (or the layer itself).
inline Tensor forward_layer(const Layer& layer, const Tensor& x, bool training, double bn_eps,
                            double bn_momentum, ForwardCache* cache, std::size_t l, Layer* stats = nullptr) {
  const auto& s = layer.spec;
  const std::size_t n = x.dim(0);
  switch (s.kind) {
    case LayerKind::dense:
      return affine(x, layer.weight, layer.bias);
    case LayerKind::conv2d: {
      const Shape sample(x.shape().begin() + 1, x.shape().end());
      const auto g = conv_geometry(s, sample);
      Tensor cols = im2col(x, g);
      Tensor z = affine(cols, kernel_as_dense(layer.weight), layer.bias);
      if (cache) cache->cols[l] = std::move(cols);
      return rows_to_nchw(z, n, g.out_channels, g.out_h, g.out_w);
    }
    case LayerKind::relu: {
      Tensor y = x;
      for (auto& v : y.vec()) v = v < 0.0 ? 0.0 : v;
      return y;
    }
    case LayerKind::maxpool2d: {
      const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3), k = s.pool;
      const std::size_t oh = h / k, ow = w / k;
      Tensor y({n, c, oh, ow});
      std::vector<std::size_t> arg(y.size());
      std::size_t o = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t base = (b * c + ch) * h * w;
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j, ++o) {
              std::size_t best = base + (i * k) * w + j * k;
              for (std::size_t di = 0; di < k; ++di)
                for (std::size_t dj = 0; dj < k; ++dj) {
                  const std::size_t idx = base + (i * k + di) * w + (j * k + dj);
                  if (x[idx] > x[best]) best = idx;  // strict: first maximum wins
                }
              y[o] = x[best];
              arg[o] = best;
            }
        }
      if (cache) cache->argmax[l] = std::move(arg);
      return y;
    }
    case LayerKind::flatten:
      return x.reshaped({n, x.size() / n});
    case LayerKind::batchnorm: {
      std::size_t nn, c, hw;
      detail::bn_dims(x, nn, c, hw);
      std::vector<double> mean(c), var(c), inv(c);
      if (training) {
        const double m = double(nn * hw);
        for (std::size_t b = 0; b < nn; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) mean[ch] += x[(b * c + ch) * hw + p];
        for (auto& v : mean) v /= m;
        for (std::size_t b = 0; b < nn; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
              const double d = x[(b * c + ch) * hw + p] - mean[ch];
              var[ch] += d * d;
            }
        for (std::size_t ch = 0; ch < c; ++ch) {
          var[ch] /= m;
          if (!stats) continue;
          const double unbiased = m > 1 ? var[ch] * m / (m - 1) : var[ch];
          stats->running_mean[ch] = (1 - bn_momentum) * stats->running_mean[ch] + bn_momentum * mean[ch];
          stats->running_var[ch] = (1 - bn_momentum) * stats->running_var[ch] + bn_momentum * unbiased;
        }
      } else {
        mean = layer.running_mean.vec();
        var = layer.running_var.vec();
      }
      for (std::size_t ch = 0; ch < c; ++ch) inv[ch] = 1.0 / std::sqrt(var[ch] + bn_eps);
      Tensor xhat(x.shape()), y(x.shape());
      for (std::size_t b = 0; b < nn; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) {
            const std::size_t i = (b * c + ch) * hw + p;
            xhat[i] = (x[i] - mean[ch]) * inv[ch];
            y[i] = layer.weight[ch] * xhat[i] + layer.bias[ch];
          }
      if (cache) {
        cache->bn_xhat[l] = std::move(xhat);
        cache->bn_inv_std[l] = std::move(inv);
      }
      return y;
    }
  }
  return x;
}

inline void check_batch(const Model& model, const Tensor& batch) {
  if (batch.rank() < 1 || batch.dim(0) == 0) throw ShapeError("batch must contain at least one sample");
  const Shape sample(batch.shape().begin() + 1, batch.shape().end());
  if (sample != model.input_shape)
    throw ShapeError("batch sample shape " + shape_str(sample) + " does not match model input " +
                     shape_str(model.input_shape));
}

/// Runs the model and records everything backward() and LRP need. In training
/// mode BatchNorm normalizes with batch statistics and updates its running
/// stats (hence the non-const model); otherwise running stats are used.
inline std::pair<Tensor, ForwardCache> forward(Model& model, const Tensor& batch, bool training) {
  check_batch(model, batch);
  const std::size_t L = model.layers.size();
  ForwardCache cache;
  cache.training = training;
  cache.inputs.resize(L);
  cache.outputs.resize(L);
  cache.cols.resize(L);
  cache.argmax.resize(L);
  cache.bn_xhat.resize(L);
  cache.bn_inv_std.resize(L);
  Tensor x = batch;
  for (std::size_t l = 0; l < L; ++l) {
    cache.inputs[l] = x;
    x = forward_layer(model.layers[l], x, training, model.bn_eps, model.bn_momentum, &cache, l,
                      &model.layers[l]);
    cache.outputs[l] = x;
  }
  return {std::move(x), std::move(cache)};
}

// Inference-only pass; does not touch running stats.
inline Tensor predict_logits(const Model& model, const Tensor& batch) {
  check_batch(model, batch);
  Tensor x = batch;
  for (const auto& layer : model.layers)
    x = forward_layer(layer, x, false, model.bn_eps, model.bn_momentum, nullptr, 0);
  return x;
}

/// Reverse pass. `input_grad`, when given, receives dL/d(batch).
inline Gradients backward(const Model& model, const ForwardCache& cache, const Tensor& loss_grad,
                          Tensor* input_grad = nullptr) {
  const std::size_t L = model.layers.size();
  if (cache.size() != L) throw CacheError("forward cache has " + std::to_string(cache.size()) +
                                          " layers, model has " + std::to_string(L));
  for (std::size_t l = 0; l < L; ++l) {
    const Shape sample(cache.inputs[l].shape().begin() + 1, cache.inputs[l].shape().end());
    if (sample != model.layer_input_shape(l))
      throw CacheError("forward cache does not match model at layer " + std::to_string(l));
  }
  if (loss_grad.shape() != cache.outputs[L - 1].shape())
    throw CacheError("loss gradient shape " + shape_str(loss_grad.shape()) + " does not match logits " +
                     shape_str(cache.outputs[L - 1].shape()));

  Gradients grads(L);
  Tensor g = loss_grad;
  for (std::size_t li = L; li-- > 0;) {
    const auto& layer = model.layers[li];
    const auto& s = layer.spec;
    const Tensor& x = cache.inputs[li];
    const std::size_t n = x.dim(0);
    switch (s.kind) {
      case LayerKind::dense: {
        const std::size_t in = s.in, out = s.out;
        Tensor dw({in, out}), dx({n, in});
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = g.data() + r * out;
          const double* xr = x.data() + r * in;
          double* dxr = dx.data() + r * in;
          for (std::size_t i = 0; i < in; ++i) {
            const double* wi = layer.weight.data() + i * out;
            double* dwi = dw.data() + i * out;
            double acc = 0.0;
            const double a = xr[i];
            for (std::size_t j = 0; j < out; ++j) {
              acc += gr[j] * wi[j];
              dwi[j] += a * gr[j];
            }
            dxr[i] = acc;
          }
        }
        grads[li].weight = std::move(dw);
        if (s.has_bias) {
          Tensor db({out});
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < out; ++j) db[j] += g[r * out + j];
          grads[li].bias = std::move(db);
        }
        g = std::move(dx);
        break;
      }
      case LayerKind::conv2d: {
        const Shape sample(x.shape().begin() + 1, x.shape().end());
        const auto geo = conv_geometry(s, sample);
        const Tensor& cols = cache.cols[li];
        if (cols.empty()) throw CacheError("conv layer " + std::to_string(li) + " has no im2col cache");
        const Tensor gm = nchw_to_rows(g);
        const std::size_t rows = gm.dim(0), oc = s.out, patch = geo.patch();
        const Tensor wd = kernel_as_dense(layer.weight);  // (patch, oc)
        Tensor dwd({patch, oc}), dcols({rows, patch});
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = gm.data() + r * oc;
          const double* cr = cols.data() + r * patch;
          double* dcr = dcols.data() + r * patch;
          for (std::size_t p = 0; p < patch; ++p) {
            const double* wp = wd.data() + p * oc;
            double* dwp = dwd.data() + p * oc;
            double acc = 0.0;
            const double a = cr[p];
            for (std::size_t o = 0; o < oc; ++o) {
              acc += gr[o] * wp[o];
              dwp[o] += a * gr[o];
            }
            dcr[p] = acc;
          }
        }
        grads[li].weight = dense_as_kernel(dwd, layer.weight.shape());
        if (s.has_bias) {
          Tensor db({oc});
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < oc; ++o) db[o] += gm[r * oc + o];
          grads[li].bias = std::move(db);
        }
        g = col2im(dcols, geo, n);
        break;
      }
      case LayerKind::relu: {
        Tensor dx = g;
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (!(x[i] > 0.0)) dx[i] = 0.0;
        g = std::move(dx);
        break;
      }
      case LayerKind::maxpool2d: {
        Tensor dx(x.shape());
        const auto& arg = cache.argmax[li];
        if (arg.size() != g.size()) throw CacheError("maxpool argmax cache size mismatch");
        for (std::size_t o = 0; o < g.size(); ++o) dx[arg[o]] += g[o];
        g = std::move(dx);
        break;
      }
      case LayerKind::flatten:
        g = g.reshaped(x.shape());
        break;
      case LayerKind::batchnorm: {
        std::size_t nn, c, hw;
        detail::bn_dims(x, nn, c, hw);
        const Tensor& xhat = cache.bn_xhat[li];
        const auto& inv = cache.bn_inv_std[li];
        Tensor dgamma({c}), dbeta({c}), dx(x.shape());
        for (std::size_t b = 0; b < nn; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t i = (b * c + ch) * hw + p;
              dgamma[ch] += g[i] * xhat[i];
              dbeta[ch] += g[i];
            }
        if (cache.training) {
          // dx = inv/M * (M*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
          const double m = double(nn * hw);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double gam = layer.weight[ch];
            const double sum_dxhat = dbeta[ch] * gam, sum_dxhat_xhat = dgamma[ch] * gam;
            for (std::size_t b = 0; b < nn; ++b)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t i = (b * c + ch) * hw + p;
                dx[i] = inv[ch] / m * (m * g[i] * gam - sum_dxhat - xhat[i] * sum_dxhat_xhat);
              }
          }
        } else {
          for (std::size_t b = 0; b < nn; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t i = (b * c + ch) * hw + p;
                dx[i] = g[i] * layer.weight[ch] * inv[ch];
              }
        }
        grads[li].weight = std::move(dgamma);
        grads[li].bias = std::move(dbeta);
        g = std::move(dx);
        break;
      }
    }
  }
  if (input_grad) *input_grad = std::move(g);
  return grads;
}

// ---------------------------------------------------------------------------
// loss, optimizer, evaluation

struct LossResult {
  double loss = 0.0;
  Tensor grad;
};

/// Mean softmax cross-entropy over the batch; grad = (softmax - onehot) / N.
inline LossResult cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("logits must be (batch, classes)");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw InputError("label count does not match batch size");
  LossResult res{0.0, Tensor({n, k})};
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || std::size_t(y) >= k)
      throw InputError("label " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
    const double* z = logits.data() + r * k;
    const double mx = *std::max_element(z, z + k);
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(z[j] - mx);
    const double lse = mx + std::log(se);
    res.loss += lse - z[y];
    for (std::size_t j = 0; j < k; ++j)
      res.grad[r * k + j] = (std::exp(z[j] - lse) - (int(j) == y ? 1.0 : 0.0)) / double(n);
  }
  res.loss /= double(n);
  if (res.loss < 0.0) res.loss = 0.0;  // rounding when the target saturates
  return res;
}

struct AdamState {
  std::vector<ParamGrad> m;
  std::vector<ParamGrad> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
};

inline AdamState make_adam(const Model& model, double lr) {
  AdamState st;
  st.lr = lr;
  for (const auto& layer : model.layers) {
    ParamGrad z{Tensor(layer.weight.shape()), Tensor(layer.bias.shape())};
    st.m.push_back(z);
    st.v.push_back(std::move(z));
  }
  return st;
}

inline void adam_step(Model& model, const Gradients& grads, AdamState& st) {
  if (!(st.lr > 0.0)) throw InputError("learning rate must be positive");
  if (grads.size() != model.layers.size() || st.m.size() != model.layers.size())
    throw ShapeError("gradient / optimizer state layer count mismatch");
  for (std::size_t l = 0; l < grads.size(); ++l) {
    for (const Tensor* g : {&grads[l].weight, &grads[l].bias})
      if (!g->all_finite())
        throw NumericError("non-finite gradient in layer " + std::to_string(l) + " (" +
                           kind_name(model.layers[l].spec.kind) + ")");
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, double(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, double(st.step));
  auto update = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
    if (g.empty()) return;
    if (g.shape() != p.shape() || m.shape() != p.shape()) throw ShapeError("adam parameter shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = st.beta1 * m[i] + (1 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1 - st.beta2) * g[i] * g[i];
      p[i] -= st.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
    }
  };
  for (std::size_t l = 0; l < grads.size(); ++l) {
    auto& layer = model.layers[l];
    update(layer.weight, grads[l].weight, st.m[l].weight, st.v[l].weight);
    update(layer.bias, grads[l].bias, st.m[l].bias, st.v[l].bias);
  }
}

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  Shape s = x.shape();
  const std::size_t row = x.size() / s[0];
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(x.data() + idx[r] * row, x.data() + (idx[r] + 1) * row, out.data() + r * row);
  return out;
}

// Argmax per row, ties to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (logits[r * k + j] > logits[r * k + best]) best = j;
    out[r] = int(best);
  }
  return out;
}

inline std::vector<int> predict(const Model& model, const Tensor& features, std::size_t chunk = 256) {
  const std::size_t n = features.dim(0);
  std::vector<int> out;
  out.reserve(n);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    auto p = argmax_rows(predict_logits(model, gather_rows(features, idx)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline double evaluate(const Model& model, const Tensor& features, std::span<const int> labels) {
  if (features.rank() == 0 || features.dim(0) == 0) throw InputError("cannot evaluate on an empty dataset");
  if (labels.size() != features.dim(0)) throw ShapeError("feature / label count mismatch");
  const auto pred = predict(model, features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  return double(correct) / double(pred.size());
}

}  // namespace ecqx
