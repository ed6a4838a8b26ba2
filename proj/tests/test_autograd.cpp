#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "agr/adamw.hpp"
#include "agr/autograd.hpp"
#include "support/gradcheck.hpp"

using namespace agr;
using agr::testing::grad_check;
using agr::testing::random_projection_loss;
using agr::testing::random_tensor;

namespace {

constexpr std::size_t kCoords = 60;
constexpr double kTol = 1e-4;

}  // namespace

TEST(Tensor, StorageIs64ByteAligned) {
  for (std::size_t n : {1u, 3u, 17u, 1000u}) {
    const Tensor<float> t({n});
    const Tensor<float> copy = t;
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data().data()) % 64, 0u);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(copy.data().data()) % 64, 0u);
  }
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  Tensor<float> t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(Tensor<float>::scalar(3.0f).item(), 3.0f);
}

TEST(Primitives, MatmulIdentity) {
  Graph<double> g;
  Var eye = g.leaf(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  Var a = g.leaf(Tensor<double>({2, 2}, {3, -1, 4.5, 2}));
  Var c = g.matmul(eye, a);
  EXPECT_EQ(g.value(c), g.value(a));
}

TEST(Primitives, MatmulShapeErrorNamesBothShapes) {
  Graph<double> g;
  Var a = g.leaf(Tensor<double>({2, 3}));
  Var b = g.leaf(Tensor<double>({4, 2}));
  try {
    g.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4, 2]"), std::string::npos);
  }
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  Graph<double> g;
  Var s = g.softmax_last_dim(g.leaf(Tensor<double>({4})));
  for (double p : g.value(s).data()) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Primitives, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(7);
  Graph<float> g;
  Tensor<float> x({50, 13});
  std::normal_distribution<float> n(0.f, 8.f);
  for (auto& v : x.data()) v = n(rng);
  const auto& y = g.value(g.softmax_last_dim(g.leaf(x)));
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double sum = 0;
    for (float p : y.row(r)) {
      EXPECT_GE(p, 0.f);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Primitives, CrossEntropyOfUniformLogitsIsLogV) {
  Graph<double> g;
  Var logits = g.leaf(Tensor<double>({3, 4}));
  std::vector<TokenId> targets{0, 3, 2};
  std::vector<std::uint8_t> mask{1, 1, 1};
  EXPECT_NEAR(g.value(g.cross_entropy_masked(logits, targets, mask)).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.38629, 1e-5);
}

TEST(Primitives, CrossEntropyGradientAtUniformSoftmax) {
  Graph<double> g;
  Var logits = g.leaf(Tensor<double>({3, 4}), true);
  std::vector<TokenId> targets{2, 1, 0};
  std::vector<std::uint8_t> mask{1, 0, 1};
  g.backward(g.cross_entropy_masked(logits, targets, mask));
  const auto& d = g.grad(logits);
  const double masked = 2;
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(d.row(0)[j], ((j == 2 ? 0.25 - 1 : 0.25)) / masked, 1e-12);
    EXPECT_EQ(d.row(1)[j], 0.0);
    EXPECT_NEAR(d.row(2)[j], ((j == 0 ? 0.25 - 1 : 0.25)) / masked, 1e-12);
  }
}

TEST(Primitives, CrossEntropyIgnoresUnmaskedRows) {
  std::mt19937_64 rng(3);
  Tensor<float> logits({6, 5});
  std::normal_distribution<float> n(0.f, 2.f);
  for (auto& v : logits.data()) v = n(rng);
  std::vector<TokenId> targets{0, 1, 2, 3, 4, 0};
  std::vector<std::uint8_t> mask{0, 1, 0, 1, 0, 1};
  auto loss_of = [&](const Tensor<float>& l) {
    Graph<float> g;
    return g.value(g.cross_entropy_masked(g.leaf(l), targets, mask)).item();
  };
  const float base = loss_of(logits);
  Tensor<float> changed = logits;
  for (std::size_t r : {0u, 2u, 4u}) {
    for (auto& v : changed.row(r)) v = n(rng) * 100.f;
  }
  EXPECT_EQ(loss_of(changed), base);
}

TEST(Primitives, CrossEntropyRejectsEmptyMask) {
  Graph<double> g;
  std::vector<TokenId> targets{0, 1};
  std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW(g.cross_entropy_masked(g.leaf(Tensor<double>({2, 3})), targets, mask), Error);
}

TEST(Primitives, LayerNormOfConstantIsZero) {
  Graph<double> g;
  Var y = g.layer_norm(g.leaf(Tensor<double>({2, 8}, 3.25)));
  for (double v : g.value(y).data()) EXPECT_EQ(v, 0.0);
}

TEST(Primitives, EmbeddingRejectsOutOfRangeIdWithPosition) {
  Graph<double> g;
  std::vector<TokenId> ids{0, 1, 9};
  try {
    g.embedding_lookup(g.leaf(Tensor<double>({4, 2})), ids, {3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos);
  }
}

TEST(Primitives, NonFiniteOutputsThrowByDefault) {
  Graph<double> g;
  Var x = g.leaf(Tensor<double>({2}, {1.0, std::numeric_limits<double>::infinity()}));
  EXPECT_THROW(g.scale(x, 2.0), NonFiniteError);
  ScopedNanPolicy allow(NanPolicy::kIgnore);
  EXPECT_NO_THROW(g.scale(x, 2.0));
}

TEST(Backward, LinearMapGivesColumnSums) {
  Graph<double> g;
  // loss = sum(x A) with x [1, 3], A [3, 2]: d/dx_i = sum_j A_ij (row sums of A,
  // i.e. column sums of A^T, the operator applied to x).
  Tensor<double> a({3, 2}, {1, 2, 3, 4, 5, 6});
  Var av = g.leaf(a);
  Var x = g.leaf(Tensor<double>({1, 3}, {0.5, -1, 2}), true);
  g.backward(g.sum(g.matmul(x, av)));
  const auto& d = g.grad(x);
  EXPECT_DOUBLE_EQ(d[0], 3);
  EXPECT_DOUBLE_EQ(d[1], 7);
  EXPECT_DOUBLE_EQ(d[2], 11);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph<double> g;
  Var x = g.leaf(Tensor<double>({3}), true);
  EXPECT_THROW(g.backward(g.scale(x, 2.0)), ShapeError);
}

TEST(Backward, EveryRequiresGradLeafGetsMatchingGradient) {
  Graph<double> g;
  Var a = g.leaf(Tensor<double>({2, 3}, 1.0), true);
  Var unused = g.leaf(Tensor<double>({5, 7}), true);
  g.backward(g.sum(a));
  EXPECT_EQ(g.grad(a).shape(), (Shape{2, 3}));
  EXPECT_EQ(g.grad(unused).shape(), (Shape{5, 7}));
  for (std::size_t i = 1; i < g.size(); ++i) {
    for (std::size_t in : g.inputs(Var{i})) EXPECT_LT(in, i);
  }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle, one test per primitive.

TEST(GradCheck, MatMul) {
  std::mt19937_64 rng(11);
  auto r = grad_check({random_tensor({2, 3, 6}, rng), random_tensor({6, 5}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.matmul(v[0], v[1]), 1);
                      },
                      kCoords, 1);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, MatMulTransposed) {
  std::mt19937_64 rng(12);
  auto r = grad_check({random_tensor({7, 6}, rng), random_tensor({5, 6}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.matmul(v[0], v[1], true), 2);
                      },
                      kCoords, 2);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, AddWithBroadcast) {
  std::mt19937_64 rng(13);
  auto r = grad_check({random_tensor({3, 4, 5}, rng), random_tensor({4, 5}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.add(v[0], v[1]), 3);
                      },
                      kCoords, 3);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, Scale) {
  std::mt19937_64 rng(14);
  auto r = grad_check({random_tensor({8, 8}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.scale(v[0], -1.7), 4);
                      },
                      kCoords, 4);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, Gelu) {
  std::mt19937_64 rng(15);
  auto r = grad_check({random_tensor({8, 9}, rng, 2.0)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.gelu(v[0]), 5);
                      },
                      kCoords, 5);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, Softmax) {
  std::mt19937_64 rng(16);
  auto r = grad_check({random_tensor({7, 9}, rng, 2.0)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.softmax_last_dim(v[0]), 6);
                      },
                      kCoords, 6);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, LayerNormAffine) {
  std::mt19937_64 rng(17);
  auto r = grad_check({random_tensor({6, 10}, rng, 2.0), random_tensor({10}, rng), random_tensor({10}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.layer_norm(v[0], v[1], v[2]), 7);
                      },
                      kCoords, 7);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, EmbeddingLookup) {
  std::mt19937_64 rng(18);
  const std::vector<TokenId> ids{3, 1, 3, 0, 7, 7, 2, 5, 6, 4};
  auto r = grad_check({random_tensor({8, 8}, rng)},
                      [&](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.embedding_lookup(v[0], ids, {2, 5}), 8);
                      },
                      kCoords, 8);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, CrossEntropyMasked) {
  std::mt19937_64 rng(19);
  const std::vector<TokenId> targets{0, 4, 2, 2, 1, 3, 0, 5, 1, 2};
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1, 1, 1, 0, 1};
  auto r = grad_check({random_tensor({10, 6}, rng, 2.0)},
                      [&](Graph<double>& g, const std::vector<Var>& v) {
                        return g.cross_entropy_masked(v[0], targets, mask);
                      },
                      kCoords, 9);
  EXPECT_GE(r.coordinates, 42u);  // 7 masked rows x 6 classes carry gradient
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, CausalAttention) {
  std::mt19937_64 rng(20);
  auto r = grad_check({random_tensor({2, 5, 8}, rng), random_tensor({2, 5, 8}, rng), random_tensor({2, 5, 8}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.attention(v[0], v[1], v[2], 2, true), 10);
                      },
                      kCoords, 10);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, BidirectionalAttention) {
  std::mt19937_64 rng(21);
  auto r = grad_check({random_tensor({1, 6, 4}, rng), random_tensor({1, 6, 4}, rng), random_tensor({1, 6, 4}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.attention(v[0], v[1], v[2], 1, false), 11);
                      },
                      kCoords, 11);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, Sum) {
  std::mt19937_64 rng(22);
  auto r = grad_check({random_tensor({8, 8}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) { return g.sum(v[0]); }, kCoords, 12);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, Dropout) {
  std::mt19937_64 rng(23);
  auto r = grad_check({random_tensor({8, 8}, rng)},
                      [](Graph<double>& g, const std::vector<Var>& v) {
                        return random_projection_loss(g, g.dropout(v[0], 0.3, 99), 13);
                      },
                      kCoords, 13);
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(GradCheck, TwoLayerMlp) {
  std::mt19937_64 rng(24);
  const std::vector<TokenId> targets{1, 0, 3, 2, 2, 1};
  const std::vector<std::uint8_t> mask(6, 1);
  auto r = grad_check({random_tensor({6, 5}, rng), random_tensor({5, 16}, rng, 0.5), random_tensor({16}, rng, 0.1),
                       random_tensor({16, 4}, rng, 0.5), random_tensor({4}, rng, 0.1)},
                      [&](Graph<double>& g, const std::vector<Var>& v) {
                        Var h = g.gelu(g.add(g.matmul(v[0], v[1]), v[2]));
                        Var logits = g.add(g.matmul(h, v[3]), v[4]);
                        return g.cross_entropy_masked(logits, targets, mask);
                      },
                      kCoords, 14, 1e-5, {0});
  EXPECT_GE(r.coordinates, 50u);
  EXPECT_LT(r.max_rel_error, kTol);
}

// ---------------------------------------------------------------------------
// AdamW

TEST(AdamW, ZeroLearningRateWithoutDecayLeavesParamsUnchanged) {
  std::vector<Tensor<float>> params{Tensor<float>({2, 2}, {1, 2, 3, 4}), Tensor<float>({3}, {5, 6, 7})};
  const auto before = params;
  std::vector<Tensor<float>> grads{Tensor<float>({2, 2}, 0.5f), Tensor<float>({3}, -2.f)};
  AdamWState<float> state;
  state.weight_decay = 0;
  adamw_step<float>(params, grads, state, 0.0);
  EXPECT_EQ(params, before);
  EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, FirstStepOnScalarMovesByLearningRate) {
  std::vector<Tensor<double>> params{Tensor<double>({1}, 0.0)};
  std::vector<Tensor<double>> grads{Tensor<double>({1}, 1.0)};
  AdamWState<double> state;
  state.weight_decay = 0;
  adamw_step<double>(params, grads, state, 0.1);
  // m_hat = 1, v_hat = 1: p = -0.1 / (1 + 1e-8).
  EXPECT_NEAR(params[0][0], -0.1 / (1 + 1e-8), 1e-15);
}

TEST(AdamW, IdenticalParametersStayIdentical) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n;
  std::vector<Tensor<float>> params{Tensor<float>({4, 4}, 0.3f), Tensor<float>({4, 4}, 0.3f)};
  AdamWState<float> state;
  for (int step = 0; step < 25; ++step) {
    Tensor<float> g({4, 4});
    for (auto& x : g.data()) x = n(rng);
    std::vector<Tensor<float>> grads{g, g};
    adamw_step<float>(params, grads, state, 0.01);
    ASSERT_EQ(params[0], params[1]);
  }
  EXPECT_EQ(state.step, 25u);
}

TEST(AdamW, NanGradientNamesTheParameter) {
  std::vector<Tensor<float>> params{Tensor<float>({2}), Tensor<float>({2})};
  std::vector<Tensor<float>> grads{Tensor<float>({2}), Tensor<float>({2}, {0.f, std::nanf("")})};
  std::vector<std::string> names{"wte", "h0.attn.wq"};
  AdamWState<float> state;
  try {
    adamw_step<float>(params, grads, state, 0.1, names);
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("h0.attn.wq"), std::string::npos);
  }
}

TEST(AdamW, ClipGradNormBoundsGlobalNorm) {
  std::vector<Tensor<double>> grads{Tensor<double>({2}, {3, 4}), Tensor<double>({1}, {12})};
  EXPECT_NEAR(clip_grad_norm<double>(grads, 1.0), 13.0, 1e-12);
  double sq = 0;
  for (auto& g : grads)
    for (double x : g.data()) sq += x * x;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
}
