#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "fedbot/autograd.hpp"
#include "fedbot/optim.hpp"
#include "support/gradcheck.hpp"

namespace fedbot {
namespace {

using testing::gradcheck;

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

TEST(Tensor, RejectsInconsistentData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor<float>(Shape{}), DimensionError);
  EXPECT_THROW(Tensor<float>(Shape{3, 0}), DimensionError);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  Graph<double> g;
  auto id = g.constant(Tensor<double>::matrix({{1, 0}, {0, 1}}));
  auto b = g.constant(Tensor<double>::matrix({{5, 6}, {7, 8}}));
  EXPECT_EQ(matmul(id, b).value(), b.value());

  auto row = g.constant(Tensor<double>::matrix({{1, 2}}));
  auto col = g.constant(Tensor<double>::matrix({{3}, {4}}));
  auto r = matmul(row, col).value();
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 3}));
  auto b = g.constant(Tensor<double>(Shape{4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,2]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  ModelWeights<double> w;
  w.add("a", random_tensor({3, 4}, 1));
  w.add("b", random_tensor({4, 2}, 2));
  auto loss = [](const ModelWeights<double>& ws) {
    Graph<double> g;
    return sum(matmul(g.param("a", ws.at("a")), g.param("b", ws.at("b")))).value()[0];
  };
  Graph<double> g;
  auto grads = g.backward(sum(matmul(g.param("a", w.at("a")), g.param("b", w.at("b")))));
  const auto& b = w.at("b");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p)
      EXPECT_NEAR(grads.at("a").at(i, p), b.at(p, 0) + b.at(p, 1), 1e-12);
  auto r = gradcheck(w, grads, loss, 1e-3);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Matmul, AssociativeAndIdentityOnRandomTriples) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng dims(s);
    const std::size_t m = 1 + dims.uniform_index(4), k = 1 + dims.uniform_index(4),
                      n = 1 + dims.uniform_index(4), p = 1 + dims.uniform_index(4);
    Graph<double> g;
    auto a = g.constant(random_tensor({m, k}, 100 + s));
    auto b = g.constant(random_tensor({k, n}, 200 + s));
    auto c = g.constant(random_tensor({n, p}, 300 + s));
    auto left = matmul(matmul(a, b), c).value();
    auto right = matmul(a, matmul(b, c)).value();
    for (std::size_t i = 0; i < left.size(); ++i) EXPECT_NEAR(left[i], right[i], 1e-5);
    Tensor<double> eye(Shape{k, k});
    for (std::size_t i = 0; i < k; ++i) eye.at(i, i) = 1.0;
    auto ai = matmul(a, g.constant(eye)).value();
    for (std::size_t i = 0; i < ai.size(); ++i) EXPECT_NEAR(ai[i], a.value()[i], 1e-5);
  }
}

TEST(Softmax, SymmetryStabilityNormalization) {
  Graph<double> g;
  auto u = softmax(g.constant(Tensor<double>(Shape{3}, 0.0))).value();
  for (auto v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);

  auto big = softmax(g.constant(Tensor<double>(Shape{2}, std::vector<double>{1000, 0}))).value();
  EXPECT_NEAR(big[0], 1.0, 1e-6);
  EXPECT_NEAR(big[1], 0.0, 1e-6);

  auto r = softmax(g.constant(random_tensor({5}, 7))).value();
  EXPECT_NEAR(std::accumulate(r.data().begin(), r.data().end(), 0.0), 1.0, 1e-6);
}

TEST(Softmax, RowsSumToOneUpToMagnitude1e4) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    Graph<float> g;
    Rng rng(s);
    Tensor<float> x(Shape{4, 7});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1e4, 1e4));
    auto y = softmax(g.constant(x)).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(y.at(r, j), 0.0f);
        total += y.at(r, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  ModelWeights<double> w;
  w.add("x", random_tensor({3, 5}, 11));
  const auto weights_vec = random_tensor({3, 5}, 12);
  auto build = [&](Graph<double>& g, const ModelWeights<double>& ws) {
    return sum(mul(softmax(g.param("x", ws.at("x"))), g.constant(weights_vec)));
  };
  Graph<double> g;
  auto grads = g.backward(build(g, w));
  auto r = gradcheck(w, grads, [&](const ModelWeights<double>& ws) {
    Graph<double> h;
    return build(h, ws).value()[0];
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Relu, ForwardAndZeroGradientAtZero) {
  Graph<double> g;
  auto x = g.param("x", Tensor<double>(Shape{3}, std::vector<double>{-1, 0, 2}));
  auto y = relu(x);
  EXPECT_EQ(y.value().storage(), (std::vector<double>{0, 0, 2}));
  auto grads = g.backward(sum(y));
  EXPECT_EQ(grads.at("x").storage(), (std::vector<double>{0, 0, 1}));

  Graph<double> h;
  auto neg = relu(h.constant(random_tensor({2, 3}, 3, -5.0, -0.1))).value();
  for (auto v : neg.data()) EXPECT_EQ(v, 0.0);
}

TEST(Relu, GradientAwayFromKink) {
  auto x = random_tensor({4, 4}, 5);
  for (auto& v : x.data())
    if (std::abs(v) < 1e-2) v = 0.5;
  ModelWeights<double> w;
  w.add("x", x);
  const auto c = random_tensor({4, 4}, 6);
  auto build = [&](Graph<double>& g, const ModelWeights<double>& ws) {
    return sum(mul(relu(g.param("x", ws.at("x"))), g.constant(c)));
  };
  Graph<double> g;
  auto grads = g.backward(build(g, w));
  auto r = gradcheck(w, grads, [&](const ModelWeights<double>& ws) {
    Graph<double> h;
    return build(h, ws).value()[0];
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(LayerNorm, ConstantAndTwoPointCases) {
  Graph<double> g;
  auto gain = g.constant(Tensor<double>(Shape{4}, 1.0));
  auto bias = g.constant(Tensor<double>(Shape{4}, 0.0));
  auto y = layer_norm(g.constant(Tensor<double>(Shape{4}, 3.5)), gain, bias).value();
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);

  auto g2 = g.constant(Tensor<double>(Shape{2}, 1.0));
  auto b2 = g.constant(Tensor<double>(Shape{2}, 0.0));
  auto two = layer_norm(g.constant(Tensor<double>(Shape{2}, std::vector<double>{1, 3})), g2, b2).value();
  EXPECT_NEAR(two[0], -1.0, 1e-3);
  EXPECT_NEAR(two[1], 1.0, 1e-3);
}

TEST(LayerNorm, StandardizesLastAxis) {
  Graph<double> g;
  auto x = g.constant(random_tensor({6, 9}, 21, -4.0, 4.0));
  auto y = layer_norm(x, g.constant(Tensor<double>(Shape{9}, 1.0)), g.constant(Tensor<double>(Shape{9}, 0.0)))
               .value();
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 9; ++j) mean += y.at(r, j) / 9;
    for (std::size_t j = 0; j < 9; ++j) var += (y.at(r, j) - mean) * (y.at(r, j) - mean) / 9;
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  ModelWeights<double> w;
  w.add("x", random_tensor({3, 6}, 31));
  w.add("gain", random_tensor({6}, 32, 0.5, 1.5));
  w.add("bias", random_tensor({6}, 33));
  const auto c = random_tensor({3, 6}, 34);
  auto build = [&](Graph<double>& g, const ModelWeights<double>& ws) {
    auto y = layer_norm(g.param("x", ws.at("x")), g.param("gain", ws.at("gain")), g.param("bias", ws.at("bias")));
    return sum(mul(y, g.constant(c)));
  };
  Graph<double> g;
  auto grads = g.backward(build(g, w));
  auto r = gradcheck(w, grads, [&](const ModelWeights<double>& ws) {
    Graph<double> h;
    return build(h, ws).value()[0];
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(CrossEntropy, CertainUniformAndMasked) {
  Graph<double> g;
  // probability ~1 on the target
  Tensor<double> sure(Shape{1, 3}, std::vector<double>{0, 800, 0});
  std::vector<std::int32_t> t1{1};
  std::vector<std::uint8_t> m1{1};
  EXPECT_NEAR(cross_entropy(g.constant(sure), t1, m1).loss.value()[0], 0.0, 1e-12);

  Tensor<double> uniform(Shape{2, 3, 4}, 0.0);
  std::vector<std::int32_t> t6{0, 1, 2, 3, 0, 1};
  std::vector<std::uint8_t> m6{1, 1, 1, 1, 0, 1};
  auto ce = cross_entropy(g.constant(uniform), t6, m6);
  EXPECT_NEAR(ce.loss.value()[0], std::log(4.0), 1e-12);
  EXPECT_EQ(ce.counted, 5u);
  EXPECT_FALSE(ce.all_masked);

  std::vector<std::uint8_t> none(6, 0);
  auto empty = cross_entropy(g.constant(uniform), t6, none);
  EXPECT_EQ(empty.loss.value()[0], 0.0);
  EXPECT_TRUE(empty.all_masked);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
  Graph<double> g;
  std::vector<std::int32_t> t{4};
  std::vector<std::uint8_t> m{1};
  EXPECT_THROW(cross_entropy(g.constant(Tensor<double>(Shape{1, 4})), t, m), IndexError);
}

TEST(CrossEntropy, MaskedPositionsContributeNothing) {
  ModelWeights<double> w;
  w.add("logits", random_tensor({5, 6}, 41, -3, 3));
  std::vector<std::int32_t> t{0, 5, 2, 3, 1};
  std::vector<std::uint8_t> m{1, 0, 1, 1, 0};
  auto build = [&](Graph<double>& g, const ModelWeights<double>& ws) {
    return cross_entropy(g.param("logits", ws.at("logits")), t, m).loss;
  };
  Graph<double> g;
  auto grads = g.backward(build(g, w));
  for (std::size_t j = 0; j < 6; ++j) {
    EXPECT_EQ(grads.at("logits").at(1, j), 0.0);
    EXPECT_EQ(grads.at("logits").at(4, j), 0.0);
  }
  auto r = gradcheck(w, grads, [&](const ModelWeights<double>& ws) {
    Graph<double> h;
    return build(h, ws).value()[0];
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Backward, SumAndSquare) {
  Graph<double> g;
  auto w = g.param("w", random_tensor({2, 3, 2}, 1));
  auto grads = g.backward(sum(w));
  for (auto v : grads.at("w").data()) EXPECT_EQ(v, 1.0);

  Graph<double> h;
  auto v = h.param("w", Tensor<double>(Shape{2}, std::vector<double>{1, 2}));
  auto sq = h.backward(sum(mul(v, v)));
  EXPECT_EQ(sq.at("w").storage(), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossIsContractError) {
  Graph<double> g;
  auto w = g.param("w", Tensor<double>(Shape{2}));
  EXPECT_THROW(g.backward(w), ContractError);
}

TEST(Backward, SkipsConstantsAndZeroFillsUnusedParams) {
  Graph<double> g;
  auto used = g.param("used", Tensor<double>(Shape{2}, 1.0));
  g.param("unused", Tensor<double>(Shape{3}, 1.0));
  auto c = g.constant(Tensor<double>(Shape{2}, 2.0));
  auto grads = g.backward(sum(mul(used, c)));
  ASSERT_EQ(grads.size(), 2u);
  EXPECT_EQ(grads[0].name, "used");
  EXPECT_EQ(grads.at("used").storage(), (std::vector<double>{2, 2}));
  EXPECT_EQ(grads.at("unused").storage(), (std::vector<double>{0, 0, 0}));
}

TEST(Sgd, SingleStepAndZeroLearningRate) {
  ModelWeights<float> w;
  w.add("w", Tensor<float>(Shape{1}, 1.0f));
  Gradients<float> g;
  g.add("w", Tensor<float>(Shape{1}, 0.5f));
  sgd_step(w, g, 0.1f);
  EXPECT_FLOAT_EQ(w.at("w")[0], 0.95f);

  ModelWeights<float> rand;
  Rng rng(3);
  Tensor<float> t(Shape{7});
  for (auto& v : t.data()) v = static_cast<float>(rng.normal(0, 1));
  rand.add("a", t);
  Gradients<float> rg;
  rg.add("a", Tensor<float>(Shape{7}, 123.0f));
  const auto before = rand;
  sgd_step(rand, rg, 0.0f);
  EXPECT_EQ(std::memcmp(before[0].tensor.data().data(), rand[0].tensor.data().data(), 7 * sizeof(float)), 0);
}

TEST(Sgd, MissingGradientIsContractError) {
  ModelWeights<float> w;
  w.add("w", Tensor<float>(Shape{1}));
  Gradients<float> g;
  g.add("other", Tensor<float>(Shape{1}));
  EXPECT_THROW(sgd_step(w, g, 0.1f), ContractError);
}

TEST(Sgd, TwoStepsEqualOneSummedStepOnlyForConstantGradients) {
  // Linear loss c.w has constant gradient c; the cubic one does not.
  const auto c = random_tensor({4}, 9);
  auto grad_at = [&](const ModelWeights<double>& ws, bool quadratic) {
    Graph<double> g;
    auto w = g.param("w", ws.at("w"));
    auto loss = quadratic ? sum(mul(mul(w, w), w)) : sum(mul(w, g.constant(c)));
    return g.backward(loss);
  };
  for (bool quadratic : {false, true}) {
    ModelWeights<double> two;
    two.add("w", random_tensor({4}, 10));
    ModelWeights<double> one = two;
    auto g0 = grad_at(two, quadratic);
    sgd_step(two, g0, 0.1);
    auto g1 = grad_at(two, quadratic);
    sgd_step(two, g1, 0.1);
    // both gradients taken at the starting point
    Gradients<double> summed = g0;
    for (std::size_t i = 0; i < 4; ++i) summed.at("w")[i] += g0.at("w")[i];
    sgd_step(one, summed, 0.1);
    double diff = 0;
    for (std::size_t i = 0; i < 4; ++i) diff = std::max(diff, std::abs(one.at("w")[i] - two.at("w")[i]));
    if (quadratic)
      EXPECT_GT(diff, 1e-6);
    else
      EXPECT_LT(diff, 1e-12);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ModelWeights<double> w;
  w.add("w", Tensor<double>(Shape{1}, 0.0));
  Gradients<double> g;
  g.add("w", Tensor<double>(Shape{1}, 1.0));
  AdamState<double> st;
  adam_step(st, w, g, 1e-3);
  EXPECT_NEAR(w.at("w")[0], -1e-3, 1e-9);
}

TEST(Adam, ZeroGradientLeavesWeights) {
  ModelWeights<double> w;
  w.add("w", random_tensor({3}, 4));
  const auto before = w;
  Gradients<double> g;
  g.add("w", Tensor<double>(Shape{3}, 0.0));
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) adam_step(st, w, g, 1e-2);
  EXPECT_EQ(w, before);
}

TEST(Adam, ConvergesOnQuadratic) {
  // minimum of (w - 1)^2 is at w = 1
  ModelWeights<double> w;
  w.add("w", Tensor<double>(Shape{1}, 0.0));
  AdamState<double> st;
  const Tensor<double> target(Shape{1}, 1.0);
  for (int i = 0; i < 100; ++i) {
    Graph<double> g;
    auto d = add(g.param("w", w.at("w")), g.constant(Tensor<double>(Shape{1}, -1.0)));
    auto grads = g.backward(sum(mul(d, d)));
    adam_step(st, w, grads, 0.1);
  }
  EXPECT_NEAR(w.at("w")[0], target[0], 1e-3);
}

TEST(Adam, StateLayoutMismatchIsContractError) {
  ModelWeights<double> w;
  w.add("w", Tensor<double>(Shape{1}));
  AdamState<double> st;
  st.first_moment.add("x", Tensor<double>(Shape{2}));
  st.second_moment.add("x", Tensor<double>(Shape{2}));
  Gradients<double> g;
  g.add("w", Tensor<double>(Shape{1}));
  EXPECT_THROW(adam_step(st, w, g, 0.1), ContractError);
}

TEST(Dropout, InvertedScalingAndIdentityWithoutRng) {
  Graph<double> g;
  auto x = g.constant(Tensor<double>(Shape{1000}, 1.0));
  EXPECT_EQ(dropout(x, 0.2, nullptr).id, x.id);
  Rng rng(5);
  auto y = dropout(x, 0.2, &rng).value();
  std::size_t kept = 0;
  for (auto v : y.data()) {
    if (v != 0.0) {
      EXPECT_NEAR(v, 1.25, 1e-12);
      ++kept;
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000.0, 0.8, 0.05);
}

TEST(Schedule, TransformerWarmupPeaksAtWarmupStep) {
  const double peak = transformer_lr(4000, 256, 4000);
  EXPECT_LT(transformer_lr(100, 256, 4000), peak);
  EXPECT_LT(transformer_lr(20000, 256, 4000), peak);
  EXPECT_NEAR(peak, std::pow(256.0, -0.5) * std::pow(4000.0, -0.5), 1e-12);
}

}  // namespace
}  // namespace fedbot
