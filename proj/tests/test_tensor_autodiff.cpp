#include <gtest/gtest.h>

#include "support.hpp"

using namespace posfuse;
using namespace testing_support;

TEST(Tensor, RejectsZeroDimsAndSizeMismatch) {
  EXPECT_THROW(Tensor({0, 3}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Matmul, TwoByTwoExample) {
  Tape t;
  Var c = matmul(t.constant(Tensor::matrix({{1, 2}, {3, 4}})),
                 t.constant(Tensor::matrix({{5, 6}, {7, 8}})));
  EXPECT_EQ(c.value(), Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape t;
  Tensor a = random_tensor({3, 3}, 1);
  EXPECT_EQ(matmul(t.constant(Tensor::identity(3)), t.constant(a)).value(), a);
}

TEST(Matmul, AgreesWithTripleLoopOnRandomShapes) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    Tensor a = random_tensor({m, k}, 100 + trial), b = random_tensor({k, n}, 200 + trial);
    Tape t;
    EXPECT_LT(max_abs_diff(matmul(t.constant(a), t.constant(b)).value(), naive_matmul(a, b)),
              1e-12);
  }
}

TEST(Matmul, InnerDimensionMismatchNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({4, 2})));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Softmax, Example) {
  Tape t;
  Var s = softmax_lastdim(t.constant(Tensor::matrix({{0.0, std::log(2.0)}})));
  EXPECT_NEAR(s.value()[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.value()[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Tensor x = random_tensor({6, 7}, 3, 5.0);
  Tensor shifted = x;
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 7; ++c) shifted(r, c) += 100.0 * static_cast<double>(r);
  Tape t;
  const Tensor& a = softmax_lastdim(t.constant(x)).value();
  const Tensor& b = softmax_lastdim(t.constant(shifted)).value();
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (double v : a.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_LT(max_abs_diff(a, b), 1e-12);
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tape t;
  Var s = softmax_lastdim(t.constant(Tensor::matrix({{1000.0, 0.0, -1000.0}})));
  EXPECT_TRUE(s.value().all_finite());
  EXPECT_NEAR(s.value()[0], 1.0, 1e-15);
}

TEST(Softmax, NanInputRaises) {
  Tape t;
  EXPECT_THROW(softmax_lastdim(t.constant(Tensor::matrix({{NAN, 0.0}}))), NumericError);
}

TEST(LayerNorm, Example) {
  Tape t;
  Var y = layer_norm(t.constant(Tensor::matrix({{1.0, 3.0}})), t.constant(Tensor::vector({1, 1})),
                     t.constant(Tensor::vector({0, 0})));
  EXPECT_NEAR(y.value()[0], -1.0, 1e-2);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-2);
  EXPECT_NEAR(y.value()[0], -0.9999950000374997, 1e-12);
}

TEST(LayerNorm, ZeroMeanUnitVariancePerRow) {
  Tape t;
  Tensor x = random_tensor({5, 16}, 9, 3.0);
  const Tensor& y = layer_norm(t.constant(x), t.constant(Tensor({16}, 1.0)),
                               t.constant(Tensor({16}))).value();
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0.0, var = 0.0;
    for (double v : y.row(r)) mean += v / 16;
    for (double v : y.row(r)) var += (v - mean) * (v - mean) / 16;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
}

TEST(Sigmoid, Examples) {
  Tape t;
  const Tensor& s = sigmoid(t.constant(Tensor::vector({0.0, 20.0, -800.0, 800.0}))).value();
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_NEAR(s[1], 0.9999999979388463, 1e-15);
  EXPECT_GT(s[2], 0.0);
  EXPECT_LT(s[3], 1.0);
}

TEST(DepthwiseConv, Example) {
  Tape t;
  Var y = depthwise_conv1d(t.constant(Tensor({3, 1}, {1, 2, 3})),
                           t.constant(Tensor({3, 1}, {1, 1, 1})), 1);
  EXPECT_EQ(y.value(), Tensor({3, 1}, {3, 6, 5}));
}

TEST(DepthwiseConv, ZeroKernelGivesZero) {
  Tape t;
  Var y = depthwise_conv1d(t.constant(random_tensor({9, 4}, 2)), t.constant(Tensor({5, 4})), 2);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(DepthwiseConv, LinearInInput) {
  Tensor p1 = random_tensor({10, 3}, 11), p2 = random_tensor({10, 3}, 12);
  Tensor k = random_tensor({5, 3}, 13);
  const double a = 0.7, b = -1.3;
  Tensor mix(p1.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * p1[i] + b * p2[i];
  Tape t;
  const Tensor& y1 = depthwise_conv1d(t.constant(p1), t.constant(k), 2).value();
  const Tensor& y2 = depthwise_conv1d(t.constant(p2), t.constant(k), 2).value();
  const Tensor& ym = depthwise_conv1d(t.constant(mix), t.constant(k), 2).value();
  for (std::size_t i = 0; i < ym.size(); ++i) EXPECT_NEAR(ym[i], a * y1[i] + b * y2[i], 1e-12);
}

TEST(DepthwiseConv, MatchesDirectSumWithZeroPadding) {
  const int K = 2;
  Tensor p = random_tensor({7, 2}, 21), k = random_tensor({5, 2}, 22);
  Tape t;
  const Tensor& y = depthwise_conv1d(t.constant(p), t.constant(k), K).value();
  for (long i = 0; i < 7; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0.0;
      for (long o = -K; o <= K; ++o)
        if (i + o >= 0 && i + o < 7)
          s += k(static_cast<std::size_t>(o + K), c) * p(static_cast<std::size_t>(i + o), c);
      EXPECT_NEAR(y(static_cast<std::size_t>(i), c), s, 1e-12);
    }
}

TEST(DepthwiseConv, SegmentsDoNotLeak) {
  Tensor p = random_tensor({6, 2}, 31), k = random_tensor({3, 2}, 32);
  Tape t;
  const Tensor& joint = depthwise_conv1d(t.constant(p), t.constant(k), 1, {0, 4, 6}).value();
  Tensor first({4, 2}), second({2, 2});
  for (std::size_t i = 0; i < 8; ++i) first[i] = p[i];
  for (std::size_t i = 0; i < 4; ++i) second[i] = p[8 + i];
  const Tensor& a = depthwise_conv1d(t.constant(first), t.constant(k), 1).value();
  const Tensor& b = depthwise_conv1d(t.constant(second), t.constant(k), 1).value();
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(joint[i], a[i]);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(joint[8 + i], b[i]);
}

TEST(DepthwiseConv, NegativeHalfWindowRejected) {
  Tape t;
  EXPECT_THROW(depthwise_conv1d(t.constant(Tensor({3, 1})), t.constant(Tensor({1, 1})), -1),
               ParameterError);
}

TEST(Backward, SumOfSquares) {
  Parameter x{"x", Tensor::vector({1, 2, 3}), {}};
  Tape t;
  Var v = t.leaf(x);
  t.backward(sum_all(mul(v, v)));
  EXPECT_EQ(x.grad, Tensor::vector({2, 4, 6}));
}

TEST(Backward, SigmoidOfDotMatchesFiniteDifference) {
  Parameter w{"w", Tensor({1, 2}, {0.3, -0.8}), {}};
  Tensor x({2, 1}, {1.5, 0.25});
  auto f = [&](Tape& t) { return sum_all(sigmoid(matmul(t.leaf(w), t.constant(x)))); };
  {
    Tape t;
    t.backward(f(t));
  }
  Tensor num = numeric_grad(
      [&] {
        Tape t;
        return f(t).value().item();
      },
      w.value);
  EXPECT_LT(max_abs_diff(w.grad, num), 1e-6);
}

TEST(Backward, ParameterOffThePathGetsZeroGradient) {
  Parameter used{"used", Tensor::vector({1.0}), {}};
  Parameter unused{"unused", Tensor::vector({5.0}), {}};
  Tape t;
  t.leaf(unused);
  t.backward(sum_all(scale(t.leaf(used), 3.0)));
  EXPECT_EQ(used.grad, Tensor::vector({3.0}));
  EXPECT_EQ(unused.grad, Tensor::vector({0.0}));
}

TEST(Backward, NonScalarRootRejected) {
  Parameter x{"x", Tensor::vector({1, 2}), {}};
  Tape t;
  EXPECT_THROW(t.backward(t.leaf(x)), ContractError);
}

TEST(Backward, NonFiniteForwardRaises) {
  Tape t;
  Var a = t.constant(Tensor::vector({1e308}));
  EXPECT_THROW(scale(a, 10.0), NumericError);
}

TEST(Backward, RepeatedRunsAreBitIdentical) {
  auto run = [] {
    Parameter w{"w", random_tensor({4, 3}, 77), {}};
    Tensor x = random_tensor({5, 4}, 78);
    Tape t;
    Var y = softmax_lastdim(matmul(t.constant(x), t.leaf(w)));
    t.backward(sum_all(mul(y, y)));
    return w.grad;
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, OpGradientsMatchFiniteDifferences) {
  Parameter a{"a", random_tensor({4, 3}, 41), {}};
  Parameter b{"b", random_tensor({4, 3}, 42), {}};
  Parameter g{"g", random_tensor({4, 1}, 43), {}};
  Parameter gamma{"gamma", random_tensor({3}, 44), {}};
  Parameter k{"k", random_tensor({3, 3}, 46), {}};
  Tensor r = random_tensor({4, 3}, 45);
  const std::vector<std::function<Var(Tape&)>> fns = {
      [&](Tape& t) { return softmax_lastdim(t.leaf(a)); },
      [&](Tape& t) { return layer_norm(t.leaf(a), t.leaf(gamma), t.leaf(gamma)); },
      [&](Tape& t) { return convex_mix(sigmoid(t.leaf(g)), t.leaf(a), t.leaf(b)); },
      [&](Tape& t) { return matmul_nt(t.leaf(a), t.leaf(b)); },
      [&](Tape& t) { return depthwise_conv1d(t.leaf(a), t.leaf(k), 1, {0, 2, 4}); },
      [&](Tape& t) { return tanh(mul(t.leaf(a), t.leaf(b))); },
  };
  for (std::size_t f = 0; f < fns.size(); ++f) {
    auto loss = [&](Tape& t) {
      Var y = fns[f](t);
      Tensor w(y.value().shape());
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = r[i % r.size()] + 0.1 * i;
      return sum_all(mul(y, t.constant(w)));
    };
    for (Parameter* p : {&a, &b, &g, &gamma, &k}) p->zero_grad();
    {
      Tape t;
      t.backward(loss(t));
    }
    for (Parameter* p : {&a, &b, &g, &gamma, &k}) {
      Tensor num = numeric_grad(
          [&] {
            Tape t;
            return loss(t).value().item();
          },
          p->value);
      EXPECT_LT(max_abs_diff(p->grad, num), 1e-6) << "op " << f << " param " << p->name;
    }
  }
}

TEST(GradCheck, RelativeErrorIsZeroForVanishingGradients) {
  EXPECT_EQ(relative_error(Tensor::vector({0, 0}), Tensor::vector({1e-12, 0})), 0.0);
  EXPECT_NEAR(relative_error(Tensor::vector({1, 0}), Tensor::vector({0, 1})), std::sqrt(2.0),
              1e-15);
}
