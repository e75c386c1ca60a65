#include <gtest/gtest.h>

#include <filesystem>

#include "ecqx/lrp.hpp"
#include "support.hpp"

using namespace ecqx;
using namespace ecqx::testing;

TEST(Rules, ConstructionConstraints) {
  EXPECT_THROW(LrpRule::epsilon(-1e-3), InputError);
  EXPECT_THROW(LrpRule::alphabeta(2.0, 0.5), InputError);
  EXPECT_THROW(LrpRule::alphabeta(0.5, -0.5), InputError);
  EXPECT_NO_THROW(LrpRule::alphabeta(1.0, 0.0));
  EXPECT_NO_THROW(LrpRule::epsilon(0.0));
}

TEST(Seeding, TargetScoreAndUnit) {
  const std::vector<int> t0{0};
  EXPECT_EQ(init_relevance(Tensor({1, 2}, {2.0, -1.0}), t0, SeedMode::target_score), Tensor({1, 2}, {2.0, 0.0}));
  const std::vector<int> t1{1};
  EXPECT_EQ(init_relevance(Tensor({1, 2}, {5.0, -3.0}), t1, SeedMode::unit), Tensor({1, 2}, {0.0, 1.0}));
  const std::vector<int> t2{1, 0};
  EXPECT_EQ(init_relevance(Tensor({2, 2}, {1, 2, 3, 4}), t2, SeedMode::target_score), Tensor({2, 2}, {0, 2, 3, 0}));
  EXPECT_THROW(init_relevance(Tensor({1, 2}), std::vector<int>{2}, SeedMode::unit), InputError);
  EXPECT_THROW(init_relevance(Tensor({1, 2}), std::vector<int>{-1}, SeedMode::unit), InputError);
}

TEST(Decompose, BasicSplitsProportionally) {
  const Tensor a({2}, {1.0, 2.0}), w({2, 1}, {0.5, 0.25}), r({1}, 1.0);
  const auto m = decompose_linear(a, w, {}, r, LrpRule::basic());
  EXPECT_DOUBLE_EQ(m.messages[0], 0.5);
  EXPECT_DOUBLE_EQ(m.messages[1], 0.5);
  EXPECT_EQ(weight_relevance_dense(a, w, {}, r, LrpRule::basic()), Tensor({2, 1}, {0.5, 0.5}));
}

TEST(Decompose, EpsilonAbsorbs) {
  const Tensor a({2}, {1.0, 2.0}), w({2, 1}, {0.5, 0.25}), r({1}, 1.0);
  const auto m = decompose_linear(a, w, {}, r, LrpRule::epsilon(0.1));
  EXPECT_NEAR(m.messages[0], 0.5 / 1.1, 1e-15);
  EXPECT_NEAR(m.messages[1], 0.5 / 1.1, 1e-15);
  EXPECT_NEAR(m.messages[0], 0.4545, 1e-4);
  EXPECT_NEAR(m.messages[0] + m.messages[1], 1.0 / 1.1, 1e-15);
}

TEST(Decompose, AlphaBeta) {
  // z_ij = a_i * w_i = [+1.0, -0.5]
  const Tensor a({2}, {1.0, 1.0}), w({2, 1}, {1.0, -0.5}), r({1}, 1.0);
  const auto m21 = decompose_linear(a, w, {}, r, LrpRule::alphabeta(2.0, 1.0));
  EXPECT_DOUBLE_EQ(m21.messages[0], 2.0);
  EXPECT_DOUBLE_EQ(m21.messages[1], -1.0);
  const auto m10 = decompose_linear(a, w, {}, r, LrpRule::alphabeta(1.0, 0.0));
  EXPECT_DOUBLE_EQ(m10.messages[0], 1.0);
  EXPECT_DOUBLE_EQ(m10.messages[1], 0.0);
}

TEST(Decompose, ZeroDenominatorUnderBasicRule) {
  const Tensor a({2}, {1.0, 1.0}), w({2, 1}, {1.0, -1.0});
  EXPECT_THROW(decompose_linear(a, w, {}, Tensor({1}, 1.0), LrpRule::basic()), NumericError);
  EXPECT_NO_THROW(decompose_linear(a, w, {}, Tensor({1}, 0.0), LrpRule::basic()));
  // sign(0) = +1
  const auto m = decompose_linear(a, w, {}, Tensor({1}, 1.0), LrpRule::epsilon(0.5));
  EXPECT_DOUBLE_EQ(m.messages[0], 2.0);
  EXPECT_DOUBLE_EQ(m.messages[1], -2.0);
}

TEST(Decompose, ZeroActivationRowHasZeroRelevance) {
  Rng rng(3);
  const Tensor w = random_tensor({3, 4}, rng), r = random_tensor({4}, rng);
  const Tensor a({3}, {0.7, 0.0, -0.2});
  const auto rw = weight_relevance_dense(a, w, {}, r, LrpRule::epsilon(1e-6));
  for (int j = 0; j < 4; ++j) EXPECT_EQ(rw[1 * 4 + j], 0.0);
}

TEST(Aggregate, SingleAndTwoOutputs) {
  Rng rng(5);
  const Tensor a = random_tensor({4}, rng), w1 = random_tensor({4, 1}, rng);
  const auto one = decompose_linear(a, w1, {}, Tensor({1}, 0.8), LrpRule::basic());
  const auto agg = aggregate_neuron_relevance(one);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(agg.r_in[i], one.messages[i]);

  const Tensor w2 = random_tensor({4, 2}, rng);
  const auto two = decompose_linear(a, w2, {}, Tensor({2}, {0.3, -0.6}), LrpRule::basic());
  const auto agg2 = aggregate_neuron_relevance(two);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(agg2.r_in[i], two.messages[i * 2] + two.messages[i * 2 + 1]);
}

TEST(Invariants, PerNeuronConservationAndEpsilonAbsorption) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const std::size_t in = between(rng, 1, 9), out = between(rng, 1, 6);
    const Tensor a = random_tensor({in}, rng), w = random_tensor({in, out}, rng), r = random_tensor({out}, rng);
    const double eps = rng.uniform(0.0, 0.5);
    const auto basic = decompose_linear(a, w, {}, r, LrpRule::basic());
    const auto e = decompose_linear(a, w, {}, r, LrpRule::epsilon(eps));
    for (std::size_t j = 0; j < out; ++j) {
      double z = 0.0, sb = 0.0, se = 0.0;
      for (std::size_t i = 0; i < in; ++i) {
        z += a[i] * w[i * out + j];
        sb += basic.messages[i * out + j];
        se += e.messages[i * out + j];
      }
      EXPECT_LE(rel_err(sb, r[j]), 1e-9);
      EXPECT_LE(rel_err(se, r[j] * z / (z + eps * (z >= 0 ? 1.0 : -1.0))), 1e-9);
    }
  }
}

TEST(Invariants, AlphaBetaConservesAndReducesToBasicForPositiveInputs) {
  Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    const std::size_t in = between(rng, 2, 9), out = between(rng, 1, 6);
    const double beta = rng.uniform(0.0, 3.0);
    const Tensor a = random_tensor({in}, rng), w = random_tensor({in, out}, rng), r = random_tensor({out}, rng);
    const auto m = decompose_linear(a, w, {}, r, LrpRule::alphabeta(1.0 + beta, beta));
    for (std::size_t j = 0; j < out; ++j) {
      bool pos = false, neg = false;
      double s = 0.0;
      for (std::size_t i = 0; i < in; ++i) {
        const double z = a[i] * w[i * out + j];
        pos |= z > 0;
        neg |= z < 0;
        s += m.messages[i * out + j];
      }
      if (pos && neg) { EXPECT_LE(rel_err(s, r[j]), 1e-9); }
    }
    const Tensor ap = random_tensor({in}, rng, 0.1, 1.0), wp = random_tensor({in, out}, rng, 0.1, 1.0);
    // With no negative part the beta branch is empty and contributes 0, so
    // alpha-beta scales the basic messages by alpha; alpha = 1 is the basic rule.
    const auto ab = decompose_linear(ap, wp, {}, r, LrpRule::alphabeta(1.0 + beta, beta));
    const auto a1 = decompose_linear(ap, wp, {}, r, LrpRule::alphabeta(1.0, 0.0));
    const auto b = decompose_linear(ap, wp, {}, r, LrpRule::basic());
    for (std::size_t i = 0; i < in * out; ++i) {
      EXPECT_LE(rel_err(a1.messages[i], b.messages[i], 1e-12), 1e-12);
      EXPECT_LE(rel_err(ab.messages[i], (1.0 + beta) * b.messages[i], 1e-12), 1e-12);
    }
  }
}

TEST(Invariants, DenseWeightTotalsIncludeBias) {
  Rng rng(13);
  for (int t = 0; t < 50; ++t) {
    const std::size_t rows = between(rng, 1, 5), in = between(rng, 1, 8), out = between(rng, 1, 5);
    const Tensor a = random_tensor({rows, in}, rng), w = random_tensor({in, out}, rng);
    const Tensor b = random_tensor({out}, rng), r = random_tensor({rows, out}, rng);
    const auto res = lrp_linear(a, w, b, r, LrpRule::basic());
    EXPECT_LE(rel_err(res.r_w.sum() + res.absorbed, r.sum()), 1e-9);
    EXPECT_LE(rel_err(res.r_in.sum(), res.r_w.sum(), 1e-12), 1e-9);
  }
}

TEST(Conv, SingleContextEqualsDense) {
  Rng rng(21);
  const Tensor a = random_tensor({1, 2, 3, 3}, rng), kernel = random_tensor({4, 2, 3, 3}, rng);
  const Tensor r = random_tensor({1, 4, 1, 1}, rng);
  const auto rule = LrpRule::epsilon(1e-6);
  const Tensor conv = weight_relevance_conv(a, kernel, {}, r, rule, 1, 0);
  const Tensor dense = weight_relevance_dense(a.reshaped({18}), kernel_as_dense(kernel), {}, r.reshaped({4}), rule);
  EXPECT_EQ(conv, dense_as_kernel(dense, kernel.shape()));
}

TEST(Conv, OneDimensionalKernelByHand) {
  // kernel [1, 1] over [1, 2, 3] with a zero second row: two applications,
  // z = 3 and z = 5, so R_w0 = 1/3 + 2/5 and R_w1 = 2/3 + 3/5.
  const Tensor a({1, 1, 2, 3}, {1, 2, 3, 0, 0, 0});
  const Tensor kernel({1, 1, 2, 2}, {1, 1, 0, 0});
  const Tensor r({1, 1, 1, 2}, {1.0, 1.0});
  const Tensor rw = weight_relevance_conv(a, kernel, {}, r, LrpRule::basic(), 1, 0);
  EXPECT_NEAR(rw[0], 11.0 / 15.0, 1e-15);
  EXPECT_NEAR(rw[1], 19.0 / 15.0, 1e-15);
  EXPECT_EQ(rw[2], 0.0);
  EXPECT_EQ(rw[3], 0.0);
  // unrolled matrix form
  const auto lin = lrp_linear(Tensor({2, 2}, {1, 2, 2, 3}), Tensor({2, 1}, {1, 1}), {}, Tensor({2, 1}, 1.0),
                              LrpRule::basic());
  EXPECT_NEAR(lin.r_w[0], rw[0], 1e-15);
  EXPECT_NEAR(lin.r_w[1], rw[1], 1e-15);
}

TEST(Conv, MatchesDirectLoopsOnRandomGeometries) {
  Rng rng(22);
  const std::vector<LrpRule> rules{LrpRule::basic(), LrpRule::epsilon(0.01), LrpRule::alphabeta(2.0, 1.0)};
  int geometries = 0;
  for (int t = 0; t < 60; ++t) {
    const std::size_t c = between(rng, 1, 3), h = between(rng, 3, 7), k = between(rng, 1, 3);
    const std::size_t pad = between(rng, 0, k - 1), stride = between(rng, 1, 2), oc = between(rng, 1, 3);
    const std::size_t oh = (h + 2 * pad - k) / stride + 1, n = between(rng, 1, 2);
    const Tensor a = random_tensor({n, c, h, h}, rng, 0.05, 1.0);
    const Tensor kernel = random_tensor({oc, c, k, k}, rng);
    const Tensor bias = rng.below(2) ? random_tensor({oc}, rng) : Tensor();
    const Tensor r = random_tensor({n, oc, oh, oh}, rng);
    for (const auto& rule : rules) {
      const Tensor got = weight_relevance_conv(a, kernel, bias, r, rule, stride, pad);
      const Tensor want = naive_conv_weight_relevance(a, kernel, bias, r, rule, stride, pad);
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LE(rel_err(got[i], want[i], 1e-12), 1e-9);
    }
    ++geometries;
  }
  EXPECT_GE(geometries, 50);
  EXPECT_THROW(weight_relevance_conv(Tensor({1, 1, 3, 3}), Tensor({1, 1, 2, 2}), {}, Tensor({1, 1, 3, 3}),
                                     LrpRule::basic(), 1, 0),
               ShapeError);
}

TEST(Conv, ZeroKernelWeightHasZeroRelevance) {
  Rng rng(23);
  const Tensor a = random_tensor({1, 1, 4, 4}, rng, 0.1, 1.0);
  Tensor kernel = random_tensor({1, 1, 2, 2}, rng, 0.1, 1.0);
  kernel[2] = 0.0;
  const Tensor rw = weight_relevance_conv(a, kernel, {}, random_tensor({1, 1, 3, 3}, rng), LrpRule::basic(), 1, 0);
  EXPECT_EQ(rw[2], 0.0);
}

TEST(Network, ConservationOnBiasFreeModels) {
  Rng rng(31);
  const auto basic = Composite::uniform(LrpRule::basic());
  int checked = 0;
  for (int t = 0; checked < 120 && t < 1000; ++t) {
    Model m = t % 2 ? random_cnn(rng, false) : random_mlp(rng, false);
    const Tensor x = random_batch(m.input_shape, 2, rng, 0.0, 1.0);
    auto [y, cache] = forward(m, x, false);
    const std::vector<int> targets{int(rng.below(y.dim(1))), int(rng.below(y.dim(1)))};
    const Tensor seed = init_relevance(y, targets, SeedMode::unit);
    RelevanceMap map;
    try {
      map = lrp_backward(m, cache, seed, basic);
    } catch (const NumericError&) {
      continue;  // a fully inactive layer leaves z_j = 0; the basic rule is undefined there
    }
    ++checked;
    EXPECT_LE(rel_err(map.input[0].sum(), seed.sum()), 1e-9) << "model " << t;
    for (std::size_t l = 0; l < m.layers.size(); ++l)
      if (!map.weight[l].empty() && m.layers[l].spec.kind != LayerKind::batchnorm) {
        const Tensor& r_out = l + 1 < m.layers.size() ? map.input[l + 1] : seed;
        EXPECT_LE(rel_err(map.weight[l].sum(), r_out.sum(), 1e-12), 1e-9);
      }
  }
  EXPECT_GE(checked, 100);
}

TEST(Network, SingleDenseLayer) {
  Rng rng(32);
  Model m = make_model({5}, {LayerSpec::dense(5, 3, false)}, 4);
  auto [y, cache] = forward(m, random_batch({5}, 1, rng), false);
  const Tensor seed = init_relevance(y, std::vector<int>{1}, SeedMode::target_score);
  const auto map = lrp_backward(m, cache, seed, Composite::uniform(LrpRule::basic()));
  EXPECT_LE(rel_err(map.input[0].sum(), seed.sum()), 1e-12);
  EXPECT_EQ(map.weight[0].shape(), m.layers[0].weight.shape());
}

TEST(Network, ModifiedGradientEquivalence) {
  // Bias-free rectifier net seeded with the target logit: R_W = W * dF/dW.
  Rng rng(33);
  const auto eps = Composite::uniform(LrpRule::epsilon(1e-9));
  for (int t = 0; t < 40; ++t) {
    Model m = random_mlp(rng, false);
    const Tensor x = random_batch(m.input_shape, 3, rng);
    auto [y, cache] = forward(m, x, false);
    std::vector<int> targets;
    for (int b = 0; b < 3; ++b) targets.push_back(int(rng.below(y.dim(1))));
    const auto map = lrp_backward(m, cache, init_relevance(y, targets, SeedMode::target_score), eps);
    const auto grads = backward(m, cache, init_relevance(y, targets, SeedMode::unit));
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      if (m.layers[l].spec.kind != LayerKind::dense) continue;
      const Tensor& w = m.layers[l].weight;
      for (std::size_t i = 0; i < w.size(); ++i)
        EXPECT_NEAR(map.weight[l][i], w[i] * grads[l].weight[i], 1e-6 * (1.0 + std::abs(map.weight[l][i])));
    }
  }
}

TEST(Network, ConvNetMatchesUnrolledDenseNet) {
  Rng rng(34);
  for (int t = 0; t < 20; ++t) {
    const std::size_t c = between(rng, 1, 2), h = between(rng, 3, 5), k = between(rng, 1, 3), oc = between(rng, 1, 3);
    const std::size_t oh = h - k + 1;
    Model cnn = make_model({c, h, h},
                           {LayerSpec::conv2d(c, oc, k, 1, 0, false), LayerSpec::relu(), LayerSpec::flatten(),
                            LayerSpec::dense(oc * oh * oh, 3, false)},
                           rng.next());
    // The conv as one dense layer per output position is not a single matrix,
    // so compare layerwise: relevance entering the conv equals the unrolled
    // computation applied to the same upstream relevance.
    const Tensor x = random_batch(cnn.input_shape, 2, rng, 0.0, 1.0);
    auto [y, cache] = forward(cnn, x, false);
    const auto comp = Composite::standard();
    const auto map = lrp_backward(cnn, cache, init_relevance(y, std::vector<int>{0, 2}, SeedMode::unit), comp);
    const Tensor want = naive_conv_weight_relevance(x, cnn.layers[0].weight, {}, map.input[1],
                                                    comp.rule_for(LayerKind::conv2d), 1, 0);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_LE(rel_err(map.weight[0][i], want[i], 1e-12), 1e-9);
  }
}

TEST(Network, SeedScaleCovariance) {
  Rng rng(35);
  for (int t = 0; t < 20; ++t) {
    Model m = t % 2 ? random_cnn(rng, true) : random_mlp(rng, true);
    auto [y, cache] = forward(m, random_batch(m.input_shape, 2, rng), false);
    const Tensor seed = init_relevance(y, std::vector<int>{0, 1}, SeedMode::unit);
    Tensor scaled = seed;
    for (auto& v : scaled.vec()) v *= -2.5;
    const auto a = lrp_backward(m, cache, seed, Composite::standard());
    const auto b = lrp_backward(m, cache, scaled, Composite::standard());
    for (std::size_t l = 0; l < m.layers.size(); ++l)
      for (std::size_t i = 0; i < a.weight[l].size(); ++i)
        EXPECT_NEAR(b.weight[l][i], -2.5 * a.weight[l][i], 1e-9 * (1.0 + std::abs(a.weight[l][i])));
  }
}

TEST(Network, BatchNormAndShapes) {
  Rng rng(36);
  Model m = make_model({2, 4, 4},
                       {LayerSpec::conv2d(2, 3, 3, 1, 1, false), LayerSpec::batchnorm(3), LayerSpec::relu(),
                        LayerSpec::maxpool2d(2), LayerSpec::flatten(), LayerSpec::dense(12, 3)},
                       8);
  auto [y, cache] = forward(m, random_batch(m.input_shape, 3, rng), true);
  const auto map = lrp_backward(m, cache, init_relevance(y, std::vector<int>{0, 1, 2}, SeedMode::target_score),
                                Composite::standard());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    EXPECT_EQ(map.input[l].shape(), cache.inputs[l].shape());
    if (has_params(m.layers[l].spec.kind)) { EXPECT_EQ(map.weight[l].shape(), m.layers[l].weight.shape()); }
    for (double v : map.weight[l].vec()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Network, MissingRuleIsConfigError) {
  Model m = make_model({1, 3, 3}, {LayerSpec::conv2d(1, 1, 2), LayerSpec::flatten(), LayerSpec::dense(4, 2)}, 0);
  auto [y, cache] = forward(m, Tensor({1, 1, 3, 3}, 1.0), false);
  Composite partial{{{LayerKind::dense, LrpRule::basic()}}};
  EXPECT_THROW(lrp_backward(m, cache, init_relevance(y, std::vector<int>{0}, SeedMode::unit), partial), ConfigError);
}

TEST(Dump, RoundTrip) {
  Rng rng(37);
  Model m = random_cnn(rng, true);
  auto [y, cache] = forward(m, random_batch(m.input_shape, 2, rng), false);
  const auto map =
      lrp_backward(m, cache, init_relevance(y, std::vector<int>{0, 1}, SeedMode::unit), Composite::standard());
  const auto dir = (std::filesystem::temp_directory_path() / "ecqx_lrp_dump").string();
  std::filesystem::remove_all(dir);
  write_relevance_dump(dir, m, map, Composite::standard());
  const auto back = read_relevance_dump(dir);
  std::size_t k = 0;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    if (!has_params(m.layers[l].spec.kind)) continue;
    ASSERT_LT(k, back.size());
    EXPECT_EQ(back[k].name, "layer" + std::to_string(l) + "_" + kind_name(m.layers[l].spec.kind));
    EXPECT_EQ(back[k].relevance, map.weight[l]);
    EXPECT_EQ(back[k].rule, Composite::standard().rule_for(m.layers[l].spec.kind).describe());
    ++k;
  }
  EXPECT_EQ(k, back.size());
  std::filesystem::remove_all(dir);
}
