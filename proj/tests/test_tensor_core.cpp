#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "pengi/core/attention.hpp"
#include "pengi/core/checkpoint.hpp"
#include "pengi/core/grad_check.hpp"
#include "pengi/core/ops.hpp"
#include "pengi/core/optim.hpp"
#include "test_util.hpp"

namespace pengi {
namespace {

using testing::random_tensor;
using testing::weighted_sum;
using D = double;

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor<D>(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor<D>(Shape{2, 2}, std::vector<D>{1, 2, 3}), DimensionError);
  Tensor<D> t(Shape{2, 3});
  EXPECT_EQ(t.size(), 6u);
  t.accumulate_grad(std::vector<D>(6, 1.0));
  EXPECT_FALSE(t.has_grad());
  t.set_requires_grad(true);
  t.accumulate_grad(std::vector<D>(6, 1.0));
  ASSERT_TRUE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.size());
}

TEST(Matmul, IdentityAndHandComputed) {
  Tape<D> tp;
  auto eye = tp.constant(Tensor<D>::from_rows({{1, 0}, {0, 1}}));
  auto m = tp.constant(Tensor<D>::from_rows({{3, 4}, {5, 6}}));
  EXPECT_EQ(matmul(eye, m).value(), Tensor<D>::from_rows({{3, 4}, {5, 6}}));
  auto row = tp.constant(Tensor<D>::from_rows({{1, 2}}));
  auto col = tp.constant(Tensor<D>::from_rows({{3}, {4}}));
  EXPECT_EQ(matmul(row, col).value().item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<D> tp;
  auto a = tp.constant(Tensor<D>::matrix(2, 3));
  auto b = tp.constant(Tensor<D>::matrix(2, 3));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(1);
  const auto b = random_tensor(3, 5, rng);
  const auto a = random_tensor(4, 3, rng);
  auto fa = [&](Tape<D>& tp, Var<D> x) { return sum(matmul(x, tp.constant(b))); };
  auto fb = [&](Tape<D>& tp, Var<D> x) { return sum(matmul(tp.constant(a), x)); };
  EXPECT_LE(grad_check<D>(fa, a, 1e-5), 1e-6);
  EXPECT_LE(grad_check<D>(fb, b, 1e-5), 1e-6);
}

TEST(Softmax, UniformStableAndNormalized) {
  Tape<D> tp;
  auto u = softmax_rows(tp.constant(Tensor<D>::matrix(1, 4)));
  for (D v : u.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);

  auto s = softmax_rows(tp.constant(Tensor<D>::from_rows({{1000, 0}})));
  EXPECT_NEAR(s.value()[0], 1.0, 1e-12);
  EXPECT_NEAR(s.value()[1], 0.0, 1e-12);

  Rng rng(2);
  auto r = softmax_rows(tp.constant(random_tensor(3, 7, rng, 3.0)));
  for (std::size_t i = 0; i < 3; ++i) {
    D total = 0;
    for (D v : r.value().row(i)) total += v;
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Softmax, NanInputIsNumericError) {
  Tape<D> tp;
  auto x = tp.constant(Tensor<D>::from_rows({{0, std::numeric_limits<D>::quiet_NaN()}}));
  EXPECT_THROW(softmax_rows(x), NumericError);
}

TEST(CrossEntropy, AnalyticCases) {
  Tape<D> tp;
  const std::vector<TokenId> target{3};
  const std::vector<bool> mask{true};
  auto uniform = cross_entropy(tp.constant(Tensor<D>::matrix(1, 10)), target, mask);
  EXPECT_NEAR(uniform.value().item(), std::log(10.0), 1e-12);

  D previous = std::numeric_limits<D>::infinity();
  for (D margin : {1.0, 5.0, 20.0, 50.0}) {
    Tensor<D> logits = Tensor<D>::matrix(1, 10);
    logits[3] = margin;
    const D loss = cross_entropy(tp.constant(logits), target, mask).value().item();
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-12);
}

TEST(CrossEntropy, MaskedPositionsAreIgnoredBitForBit) {
  Rng rng(3);
  Tensor<D> logits = random_tensor(4, 6, rng);
  const std::vector<TokenId> targets{1, 2, 3, 4};
  const std::vector<bool> mask{true, false, true, false};
  Tape<D> tp;
  const D base = cross_entropy(tp.constant(logits), targets, mask).value().item();
  for (std::size_t j = 0; j < 6; ++j) {
    logits.at(1, j) += 17.0;
    logits.at(3, j) -= 3.0 * D(j);
  }
  const D perturbed = cross_entropy(tp.constant(logits), targets, mask).value().item();
  EXPECT_EQ(base, perturbed);

  Tape<D> tg;
  auto lv = tg.variable(logits);
  tg.backward(cross_entropy(lv, targets, mask));
  auto g = tg.grad(lv);
  for (std::size_t j = 0; j < 6; ++j) {
    EXPECT_EQ(g[1 * 6 + j], 0.0);
    EXPECT_EQ(g[3 * 6 + j], 0.0);
  }
}

TEST(CrossEntropy, AllFalseMaskIsDegenerate) {
  Tape<D> tp;
  const std::vector<TokenId> targets{0, 1};
  EXPECT_THROW(cross_entropy(tp.constant(Tensor<D>::matrix(2, 3)), targets, std::vector<bool>{false, false}),
               DataError);
}

TEST(GradCheck, SumIsExact) {
  Rng rng(4);
  auto f = [](Tape<D>&, Var<D> x) { return sum(x); };
  EXPECT_LE(grad_check<D>(f, random_tensor(3, 4, rng), 1e-5), 1e-10);
}

TEST(GradCheck, NonScalarOutputIsContractError) {
  auto f = [](Tape<D>&, Var<D> x) { return x; };
  EXPECT_THROW(grad_check<D>(f, Tensor<D>::matrix(2, 2), 1e-5), ContractError);
}

// Every differentiable op against central differences on small random inputs.
class OpGradient : public ::testing::Test {
 protected:
  Rng rng{5};
  template <class F>
  void expect_single_op(F op, const Tensor<D>& x, std::size_t out_rows, std::size_t out_cols) {
    const Tensor<D> w = random_tensor(out_rows, out_cols, rng);
    auto f = [&](Tape<D>& tp, Var<D> v) { return weighted_sum(op(tp, v), w); };
    EXPECT_LE(grad_check<D>(f, x, 1e-5), 1e-6);
  }
};

TEST_F(OpGradient, Elementwise) {
  const auto other = random_tensor(3, 5, rng);
  expect_single_op([&](Tape<D>& tp, Var<D> x) { return add(x, tp.constant(other)); }, random_tensor(3, 5, rng), 3, 5);
  expect_single_op([&](Tape<D>& tp, Var<D> x) { return mul(x, tp.constant(other)); }, random_tensor(3, 5, rng), 3, 5);
  expect_single_op([&](Tape<D>&, Var<D> x) { return mul(x, x); }, random_tensor(3, 5, rng), 3, 5);
  expect_single_op([](Tape<D>&, Var<D> x) { return gelu(x); }, random_tensor(4, 6, rng, 2.0), 4, 6);
  expect_single_op([](Tape<D>&, Var<D> x) { return exp(x); }, random_tensor(2, 3, rng), 2, 3);
  expect_single_op([](Tape<D>&, Var<D> x) { return scale(x, 0.37); }, random_tensor(2, 3, rng), 2, 3);
  expect_single_op([](Tape<D>&, Var<D> x) { return relu(x); }, random_tensor(3, 3, rng), 3, 3);
}

TEST_F(OpGradient, BiasAndScaleBy) {
  const auto x = random_tensor(4, 3, rng);
  expect_single_op([&](Tape<D>& tp, Var<D> b) { return add_bias(tp.constant(x), b); }, random_tensor(1, 3, rng), 4, 3);
  expect_single_op([&](Tape<D>&, Var<D> v) { return add_bias(v, v.tape().constant(Tensor<D>::matrix(1, 3, 0.5))); },
                   x, 4, 3);
  expect_single_op([&](Tape<D>& tp, Var<D> s) { return scale_by(tp.constant(x), s); }, Tensor<D>::scalar(1.7), 4, 3);
}

TEST_F(OpGradient, MatmulVariants) {
  const auto b = random_tensor(5, 3, rng);
  expect_single_op([&](Tape<D>& tp, Var<D> a) { return matmul_nt(a, tp.constant(b)); }, random_tensor(4, 3, rng), 4, 5);
  expect_single_op([&](Tape<D>& tp, Var<D> a) { return matmul_nt(tp.constant(b), a); }, random_tensor(4, 3, rng), 5, 4);
  expect_single_op([&](Tape<D>& tp, Var<D> a) { return pairwise_dot(a, tp.constant(b)); }, random_tensor(4, 3, rng), 4,
                   5);
  expect_single_op([&](Tape<D>& tp, Var<D> a) { return pairwise_dot(tp.constant(b), a); }, random_tensor(4, 3, rng), 5,
                   4);
  expect_single_op([](Tape<D>&, Var<D> a) { return transpose(a); }, random_tensor(4, 3, rng), 3, 4);
}

TEST_F(OpGradient, Normalization) {
  const auto gamma = random_tensor(1, 6, rng);
  const auto beta = random_tensor(1, 6, rng);
  const auto x = random_tensor(3, 6, rng, 2.0);
  expect_single_op([&](Tape<D>& tp, Var<D> v) { return layer_norm(v, tp.constant(gamma), tp.constant(beta)); }, x, 3,
                   6);
  expect_single_op([&](Tape<D>& tp, Var<D> g) { return layer_norm(tp.constant(x), g, tp.constant(beta)); }, gamma, 3,
                   6);
  expect_single_op([&](Tape<D>& tp, Var<D> b) { return layer_norm(tp.constant(x), tp.constant(gamma), b); }, beta, 3,
                   6);
  expect_single_op([](Tape<D>&, Var<D> v) { return l2_normalize_rows(v); }, x, 3, 6);
  expect_single_op([](Tape<D>&, Var<D> v) { return softmax_rows(v); }, x, 3, 6);
}

TEST_F(OpGradient, Structural) {
  const std::vector<TokenId> ids{2, 0, 2, 4};
  expect_single_op([&](Tape<D>&, Var<D> t) { return embedding_lookup(t, std::span<const TokenId>(ids)); },
                   random_tensor(5, 3, rng), 4, 3);
  const auto other = random_tensor(2, 4, rng);
  expect_single_op([&](Tape<D>& tp, Var<D> x) { return concat_rows({tp.constant(other), x, x}); },
                   random_tensor(3, 4, rng), 8, 4);
  expect_single_op([](Tape<D>&, Var<D> x) { return slice_rows(x, 1, 2); }, random_tensor(4, 3, rng), 2, 3);
  expect_single_op([](Tape<D>&, Var<D> x) { return reshape(x, 6, 2); }, random_tensor(2, 6, rng), 6, 2);
  const std::vector<std::size_t> segs{3, 1, 2};
  expect_single_op([&](Tape<D>&, Var<D> x) { return mean_pool(x, std::span<const std::size_t>(segs)); },
                   random_tensor(6, 3, rng), 3, 3);
}

TEST_F(OpGradient, CrossEntropyLogits) {
  const std::vector<TokenId> targets{0, 3, 2, 1};
  const std::vector<bool> mask{true, true, false, true};
  auto f = [&](Tape<D>&, Var<D> x) { return cross_entropy(x, targets, mask); };
  EXPECT_LE(grad_check<D>(f, random_tensor(4, 5, rng, 2.0), 1e-5), 1e-6);
}

TEST_F(OpGradient, AttentionCausalAndBidirectional) {
  const std::vector<std::size_t> segs{3, 4};
  const auto k = random_tensor(7, 4, rng);
  const auto v = random_tensor(7, 4, rng);
  const auto q = random_tensor(7, 4, rng);
  for (bool causal : {true, false}) {
    auto att = [&](Tape<D>& tp, Var<D> qq, Var<D> kk, Var<D> vv) {
      (void)tp;
      return attention(qq, kk, vv, 2, std::span<const std::size_t>(segs), causal);
    };
    expect_single_op([&](Tape<D>& tp, Var<D> x) { return att(tp, x, tp.constant(k), tp.constant(v)); }, q, 7, 4);
    expect_single_op([&](Tape<D>& tp, Var<D> x) { return att(tp, tp.constant(q), x, tp.constant(v)); }, k, 7, 4);
    expect_single_op([&](Tape<D>& tp, Var<D> x) { return att(tp, tp.constant(q), tp.constant(k), x); }, v, 7, 4);
    expect_single_op([&](Tape<D>&, Var<D> x) { return att(x.tape(), x, x, x); }, q, 7, 4);
  }
}

TEST(Attention, CausalOutputsIgnoreLaterPositionsAndOtherSegments) {
  Rng rng(6);
  const std::vector<std::size_t> segs{4, 3};
  auto q = random_tensor(7, 4, rng), k = random_tensor(7, 4, rng), v = random_tensor(7, 4, rng);
  auto run = [&](const Tensor<D>& kk, const Tensor<D>& vv) {
    Tape<D> tp;
    return attention(tp.constant(q), tp.constant(kk), tp.constant(vv), 2, std::span<const std::size_t>(segs), true)
        .value();
  };
  const auto base = run(k, v);
  // Perturb position 2 of segment 0: rows 0,1 and the whole second segment must not move.
  auto k2 = k, v2 = v;
  for (std::size_t j = 0; j < 4; ++j) {
    k2.at(2, j) += 1.0;
    v2.at(2, j) -= 2.0;
  }
  const auto pert = run(k2, v2);
  for (std::size_t r : {0u, 1u, 4u, 5u, 6u})
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(base.at(r, j), pert.at(r, j));
  bool moved = false;
  for (std::size_t j = 0; j < 4; ++j) moved = moved || base.at(2, j) != pert.at(2, j);
  EXPECT_TRUE(moved);
}

TEST(GradCheck, TwoLayerMlpCrossEntropy) {
  Rng rng(7);
  auto w1 = random_tensor(4, 8, rng, 0.5);
  auto b1 = random_tensor(1, 8, rng, 0.1);
  auto w2 = random_tensor(8, 3, rng, 0.5);
  const std::vector<TokenId> labels{0, 2, 1, 1, 2};
  const std::vector<bool> mask(5, true);
  const auto x = random_tensor(5, 4, rng);
  auto net = [&](Tape<D>& tp, Var<D> in, Var<D> W1) {
    Var<D> h = gelu(add_bias(matmul(in, W1), tp.constant(b1)));
    return cross_entropy(matmul(h, tp.constant(w2)), labels, mask);
  };
  auto wrt_input = [&](Tape<D>& tp, Var<D> in) { return net(tp, in, tp.constant(w1)); };
  auto wrt_weight = [&](Tape<D>& tp, Var<D> W1) { return net(tp, tp.constant(x), W1); };
  EXPECT_LE(grad_check<D>(wrt_input, x, 1e-5), 1e-4);
  EXPECT_LE(grad_check<D>(wrt_weight, w1, 1e-5), 1e-4);
}

TEST(Tape, SharedInputAccumulatesGradients) {
  Tape<D> tp;
  auto x = tp.variable(Tensor<D>::from_rows({{1.5, -2.0}}));
  // y = sum(x) + sum(3x): dy/dx = 4 everywhere.
  auto y = add(sum(x), sum(scale(x, 3.0)));
  tp.backward(y);
  for (D g : tp.grad(x)) EXPECT_DOUBLE_EQ(g, 4.0);
}

TEST(Tape, FrozenParameterNeverAccumulates) {
  Tensor<D> w = Tensor<D>::from_rows({{1, 2}, {3, 4}});
  Tape<D> tp;
  auto x = tp.variable(Tensor<D>::from_rows({{1, 1}}));
  tp.backward(sum(matmul(x, tp.parameter(w))));
  EXPECT_FALSE(w.has_grad());
  EXPECT_FALSE(tp.grad(x).empty());
}

TEST(Tape, SeededForwardBackwardIsBitIdentical) {
  auto run = [] {
    Rng rng(8);
    Tensor<D> w = random_tensor(6, 6, rng);
    w.set_requires_grad(true);
    const auto x = random_tensor(5, 6, rng);
    Tape<D> tp;
    const std::vector<std::size_t> segs{5};
    Var<D> h = tp.constant(x);
    Var<D> W = tp.parameter(w);
    h = attention(matmul(h, W), h, h, 2, std::span<const std::size_t>(segs), true);
    tp.backward(sum(gelu(h)));
    return std::vector<D>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Checkpoint ck;
    const std::size_t n = 1 + rng.below(5);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(6);
      if (rng.below(2)) {
        ck.add("p" + std::to_string(i), random_tensor<float>(r, c, rng));
      } else {
        ck.add("p" + std::to_string(i), random_tensor<double>(r, c, rng));
      }
    }
    ck.add_bytes("meta.note", "seed=" + std::to_string(trial));
    const std::string bytes = ck.serialize();
    EXPECT_EQ(bytes.substr(0, 4), "PALM");
    const Checkpoint back = Checkpoint::parse(bytes);
    EXPECT_EQ(back.serialize(), bytes);
    for (const auto& rec : ck.records()) {
      const auto& other = back.record(rec.name);
      EXPECT_EQ(other.raw, rec.raw);
      EXPECT_EQ(other.dims, rec.dims);
      EXPECT_EQ(other.dtype, rec.dtype);
    }
  }
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  EXPECT_THROW(Checkpoint::parse("NOPE\x01\0\0\0"), DataError);
  Checkpoint ck;
  ck.add("w", Tensor<D>::from_rows({{1, 2, 3}}));
  const std::string bytes = ck.serialize();
  EXPECT_THROW(Checkpoint::parse(bytes.substr(0, bytes.size() - 3)), DataError);
}

TEST(Adam, WarmupScheduleIsLinear) {
  AdamOptions o;
  o.lr = 1e-3;
  o.warmup_steps = 200;
  EXPECT_DOUBLE_EQ(warmup_lr(o, 0), 1e-3 / 200);
  EXPECT_DOUBLE_EQ(warmup_lr(o, 99), 1e-3 * 100 / 200);
  EXPECT_DOUBLE_EQ(warmup_lr(o, 199), 1e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(o, 5000), 1e-3);
  o.total_steps = 400;
  EXPECT_DOUBLE_EQ(warmup_lr(o, 299), 1e-3 * 100 / 200);
  EXPECT_DOUBLE_EQ(warmup_lr(o, 399), 0.0);
}

TEST(Adam, MinimizesQuadraticAndLeavesOthersAlone) {
  Tensor<D> x = Tensor<D>::from_rows({{3.0, -2.0}});
  x.set_requires_grad(true);
  Tensor<D> frozen = Tensor<D>::from_rows({{1.0, 1.0}});
  frozen.set_requires_grad(true);
  const Tensor<D> frozen_before = frozen;
  AdamOptions o;
  o.lr = 0.1;
  o.warmup_steps = 10;
  Adam<D> adam({&x}, o);
  for (int i = 0; i < 500; ++i) {
    Tape<D> tp;
    Var<D> v = tp.parameter(x);
    Var<D> f = tp.parameter(frozen);
    tp.backward(add(sum(mul(v, v)), sum(mul(f, v))));
    adam.step();
    frozen.zero_grad();
  }
  EXPECT_NEAR(x[0], -0.5, 1e-2);
  EXPECT_NEAR(x[1], -0.5, 1e-2);
  EXPECT_EQ(frozen, frozen_before);
}

}  // namespace
}  // namespace pengi
