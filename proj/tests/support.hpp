#pragma once

// Shared fixtures for the test executables.

#include <cmath>
#include <vector>

#include "ecqx/lrp.hpp"
#include "ecqx/nn.hpp"
#include "ecqx/tensor.hpp"

namespace ecqx::testing {

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_batch(const Shape& sample, std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  return random_tensor(s, rng, lo, hi);
}

inline std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

/// Rectifier MLP with 1..max_depth dense layers.
inline Model random_mlp(Rng& rng, bool bias, std::size_t max_depth = 5) {
  const std::size_t depth = between(rng, 1, max_depth);
  std::vector<LayerSpec> specs;
  std::size_t width = between(rng, 2, 8);
  const Shape input{width};
  for (std::size_t d = 0; d < depth; ++d) {
    const std::size_t next = d + 1 == depth ? between(rng, 2, 4) : between(rng, 2, 8);
    specs.push_back(LayerSpec::dense(width, next, bias));
    if (d + 1 < depth) specs.push_back(LayerSpec::relu());
    width = next;
  }
  return make_model(input, specs, rng.next());
}

/// Small conv net: 1..3 conv(+relu, optional maxpool) blocks, then a dense head.
/// Total linear depth stays at most 5.
inline Model random_cnn(Rng& rng, bool bias) {
  std::size_t c = between(rng, 1, 3), h = between(rng, 5, 9), w = h;
  const Shape input{c, h, w};
  std::vector<LayerSpec> specs;
  const std::size_t blocks = between(rng, 1, 3);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t k = between(rng, 1, std::min<std::size_t>(3, h));
    const std::size_t pad = between(rng, 0, k - 1);
    const std::size_t stride = between(rng, 1, 2);
    const std::size_t oc = between(rng, 1, 4);
    const std::size_t oh = (h + 2 * pad - k) / stride + 1;
    specs.push_back(LayerSpec::conv2d(c, oc, k, stride, pad, bias));
    specs.push_back(LayerSpec::relu());
    c = oc;
    h = w = oh;
    if (h >= 4 && rng.below(2) == 0) {
      specs.push_back(LayerSpec::maxpool2d(2));
      h = w = h / 2;
    }
    if (h < 2) break;
  }
  specs.push_back(LayerSpec::flatten());
  specs.push_back(LayerSpec::dense(c * h * w, between(rng, 2, 4), bias));
  return make_model(input, specs, rng.next());
}

/// Direct-loop conv weight relevance: every (sample, output position) is one
/// application of the filter; no im2col involved.
inline Tensor naive_conv_weight_relevance(const Tensor& a, const Tensor& kernel, const Tensor& bias,
                                          const Tensor& r_out, const LrpRule& rule, std::size_t stride,
                                          std::size_t pad) {
  const std::size_t n = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const std::size_t OC = kernel.dim(0), k = kernel.dim(2);
  const std::size_t OH = r_out.dim(2), OW = r_out.dim(3);
  Tensor rw(kernel.shape());
  auto act = [&](std::size_t b, std::size_t ch, long ih, long iw) {
    if (ih < 0 || iw < 0 || ih >= long(H) || iw >= long(W)) return 0.0;
    return a[((b * C + ch) * H + std::size_t(ih)) * W + std::size_t(iw)];
  };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < OC; ++o)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          const double R = r_out[((b * OC + o) * OH + oh) * OW + ow];
          const double b0 = bias.empty() ? 0.0 : bias[o];
          double z = b0, zp = b0 > 0 ? b0 : 0.0, zn = b0 < 0 ? b0 : 0.0;
          auto zij = [&](std::size_t ch, std::size_t kh, std::size_t kw) {
            return act(b, ch, long(oh * stride + kh) - long(pad), long(ow * stride + kw) - long(pad)) *
                   kernel[((o * C + ch) * k + kh) * k + kw];
          };
          for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t kh = 0; kh < k; ++kh)
              for (std::size_t kw = 0; kw < k; ++kw) {
                const double v = zij(ch, kh, kw);
                z += v;
                if (v > 0) zp += v;
                if (v < 0) zn += v;
              }
          for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t kh = 0; kh < k; ++kh)
              for (std::size_t kw = 0; kw < k; ++kw) {
                const double v = zij(ch, kh, kw);
                double m = 0.0;
                if (rule.kind == LrpRule::Kind::alphabeta) {
                  if (v > 0 && zp != 0) m = rule.alpha * v / zp * R;
                  if (v < 0 && zn != 0) m = -rule.beta * v / zn * R;
                } else {
                  const double eps = rule.kind == LrpRule::Kind::epsilon ? rule.epsilon_ : 0.0;
                  m = v * R / (z + eps * (z >= 0 ? 1.0 : -1.0));
                }
                rw[((o * C + ch) * k + kh) * k + kw] += m;
              }
        }
  return rw;
}

inline double rel_err(double a, double b, double floor = 1e-300) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace ecqx::testing
