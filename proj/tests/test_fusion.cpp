#include <gtest/gtest.h>

#include "support.hpp"

using namespace posfuse;
using namespace testing_support;

namespace {

FusionOp make_op(FusionKind k, std::size_t d, int K = 3, std::uint64_t seed = 0) {
  Rng rng = make_rng(seed, Stream::Init);
  return FusionOp(k, d, K, rng);
}

void randomize(FusionOp& op, std::uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  for (auto* p : op.parameters()) fill_normal(p->value, rng, 0.0, stddev);
}

}  // namespace

TEST(Fusion, AddIsElementwiseSum) {
  Tensor e = random_tensor({5, 4}, 1), p = random_tensor({5, 4}, 2);
  auto op = make_op(FusionKind::Add, 4);
  Tape t;
  const Tensor& h = op.apply(t, t.constant(e), t.constant(p)).h.value();
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(h[i], e[i] + p[i]);
  EXPECT_EQ(op.param_count(), 0u);
}

TEST(Fusion, ConcatWithStackedIdentityEqualsAdd) {
  const std::size_t d = 6;
  Tensor e = random_tensor({4, d}, 3), p = random_tensor({4, d}, 4);
  Tensor w({d, 2 * d});
  for (std::size_t i = 0; i < d; ++i) w(i, i) = w(i, d + i) = 1.0;
  Tape t;
  const Tensor& h = fuse_concat(t.constant(e), t.constant(p), t.constant(w)).value();
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h[i], e[i] + p[i], 1e-12);
}

TEST(Fusion, ConcatInitialisedNearAdd) {
  const std::size_t d = 8;
  auto op = make_op(FusionKind::Concat, d);
  const Tensor& w = op.parameters()[0]->value;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < 2 * d; ++j) {
      const double target = (j == i || j == d + i) ? 1.0 : 0.0;
      EXPECT_NEAR(w(i, j), target, 0.06);
    }
}

TEST(Fusion, ConcatRejectsWrongWeightShape) {
  Tape t;
  EXPECT_THROW(fuse_concat(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3})),
                           t.constant(Tensor({3, 3}))),
               DimensionError);
}

TEST(Fusion, GateScalarExample) {
  Tape t;
  auto r = fuse_gate_scalar(t.constant(Tensor({1, 2}, {2.0, 2.0})), t.constant(Tensor({1, 2})),
                            t.constant(Tensor({4})), t.constant(Tensor::scalar(2.0)));
  EXPECT_NEAR(r.gate.value().item(), 0.8807970779778823, 1e-15);
  EXPECT_NEAR(r.h.value()[0], 1.7615941559557646, 1e-12);
  EXPECT_NEAR(r.h.value()[0], 1.761594, 1e-6);
}

TEST(Fusion, ZeroGateWeightsGiveEvenMix) {
  Tensor e = random_tensor({5, 4}, 5), p = random_tensor({5, 4}, 6);
  for (FusionKind k : {FusionKind::GateScalar, FusionKind::GateCnn}) {
    auto op = make_op(k, 4);
    Tape t;
    const Tensor& h = op.apply(t, t.constant(e), t.constant(p)).h.value();
    for (std::size_t i = 0; i < h.size(); ++i)
      EXPECT_NEAR(h[i], 0.5 * e[i] + 0.5 * p[i], 1e-12) << to_string(k);
  }
}

TEST(Fusion, GatedOperatorsReturnEWhenEEqualsP) {
  Tensor e = random_tensor({7, 4}, 7);
  for (FusionKind k : {FusionKind::GateScalar, FusionKind::GateCnn, FusionKind::GateMlp}) {
    auto op = make_op(k, 4);
    randomize(op, 8);
    Tape t;
    const Tensor& h = op.apply(t, t.constant(e), t.constant(e)).h.value();
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h[i], e[i], 1e-12) << to_string(k);
  }
}

TEST(Fusion, GatedOutputsStayBetweenInputs) {
  std::mt19937_64 rng(99);
  for (FusionKind k : {FusionKind::GateScalar, FusionKind::GateCnn, FusionKind::GateMlp}) {
    for (int trial = 0; trial < 50; ++trial) {
      auto op = make_op(k, 6, 2);
      randomize(op, rng(), 3.0);
      Tensor e = random_tensor({9, 6}, rng(), 10.0), p = random_tensor({9, 6}, rng(), 10.0);
      Tape t;
      auto out = op.apply(t, t.constant(e), t.constant(p));
      const Tensor& h = out.h.value();
      for (std::size_t i = 0; i < h.size(); ++i) {
        EXPECT_GE(h[i], std::min(e[i], p[i]));
        EXPECT_LE(h[i], std::max(e[i], p[i]));
      }
      for (double g : out.gate->value().values()) {
        EXPECT_GT(g, 0.0);
        EXPECT_LT(g, 1.0);
      }
    }
  }
}

TEST(Fusion, GateShapes) {
  Tensor e = random_tensor({5, 4}, 10), p = random_tensor({5, 4}, 11);
  Tape t;
  auto s = make_op(FusionKind::GateScalar, 4);
  auto c = make_op(FusionKind::GateCnn, 4);
  auto m = make_op(FusionKind::GateMlp, 4);
  EXPECT_EQ(s.apply(t, t.constant(e), t.constant(p)).gate->value().shape(), (Shape{5, 1}));
  EXPECT_EQ(c.apply(t, t.constant(e), t.constant(p)).gate->value().shape(), (Shape{5, 1}));
  EXPECT_EQ(m.apply(t, t.constant(e), t.constant(p)).gate->value().shape(), (Shape{5, 4}));
}

TEST(Fusion, GateScalarIsTokenLocal) {
  auto op = make_op(FusionKind::GateScalar, 4);
  randomize(op, 12);
  Tensor e = random_tensor({8, 4}, 13), p = random_tensor({8, 4}, 14);
  Tape t;
  const Tensor h0 = op.apply(t, t.constant(e), t.constant(p)).h.value();
  for (std::size_t j = 0; j < 8; ++j) {
    Tensor e2 = e, p2 = p;
    e2(j, 0) += 1.0;
    p2(j, 1) -= 1.0;
    Tape t2;
    const Tensor& h1 = op.apply(t2, t2.constant(e2), t2.constant(p2)).h.value();
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t c = 0; c < 4; ++c)
        if (i != j) {
          EXPECT_EQ(h1(i, c), h0(i, c));
        }
  }
}

TEST(Fusion, GateCnnGateSeesOnlyWindowOfP) {
  const int K = 2;
  auto op = make_op(FusionKind::GateCnn, 3, K);
  randomize(op, 15);
  Tensor e = random_tensor({12, 3}, 16), p = random_tensor({12, 3}, 17);
  Tape t;
  const Tensor g0 = op.apply(t, t.constant(e), t.constant(p)).gate->value();
  for (std::size_t j = 0; j < 12; ++j) {
    Tensor p2 = p;
    for (std::size_t c = 0; c < 3; ++c) p2(j, c) += 0.5;
    Tensor e2 = e;
    for (std::size_t c = 0; c < 3; ++c) e2(j, c) += 5.0;
    Tape t2;
    const Tensor& g1 = op.apply(t2, t2.constant(e), t2.constant(p2)).gate->value();
    const Tensor& g2 = op.apply(t2, t2.constant(e2), t2.constant(p)).gate->value();
    for (std::size_t i = 0; i < 12; ++i) {
      const long dist = std::abs(static_cast<long>(i) - static_cast<long>(j));
      if (dist > K) {
        EXPECT_EQ(g1[i], g0[i]) << i << " " << j;
      }
      EXPECT_EQ(g2[i], g0[i]);
    }
  }
}

TEST(Fusion, GateCnnRespectsSequenceBoundaries) {
  auto op = make_op(FusionKind::GateCnn, 2, 3);
  randomize(op, 18);
  Tensor e = random_tensor({9, 2}, 19), p = random_tensor({9, 2}, 20);
  Tape t;
  const Tensor joint = op.apply(t, t.constant(e), t.constant(p), {0, 5, 9}).gate->value();
  Tensor p2 = p;
  for (std::size_t c = 0; c < 2; ++c) p2(5, c) += 3.0;
  const Tensor& moved = op.apply(t, t.constant(e), t.constant(p2), {0, 5, 9}).gate->value();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(moved[i], joint[i]);
}

TEST(Fusion, GateCnnNegativeWindowRejected) {
  Rng rng(0);
  EXPECT_THROW(FusionOp(FusionKind::GateCnn, 4, -1, rng), ParameterError);
}

TEST(Fusion, ParameterCounts) {
  EXPECT_EQ(fusion_param_count(FusionKind::Add, 64), 0u);
  EXPECT_EQ(fusion_param_count(FusionKind::GateScalar, 64), 129u);
  EXPECT_EQ(fusion_param_count(FusionKind::GateCnn, 64, 3), 448u);
  for (FusionKind k : kAllFusionKinds) {
    auto op = make_op(k, 10, 2);
    EXPECT_EQ(op.param_count(), fusion_param_count(k, 10, 2)) << to_string(k);
  }
}

TEST(Fusion, GatedOperatorsCostMoreThanAdd) {
  for (std::size_t d : {8u, 32u, 128u})
    for (FusionKind k : kAllFusionKinds)
      if (k != FusionKind::Add) {
        EXPECT_GT(fusion_ops_per_token(k, d, 3), fusion_ops_per_token(FusionKind::Add, d, 3));
      }
}

TEST(Fusion, NamesRoundTrip) {
  for (FusionKind k : kAllFusionKinds) EXPECT_EQ(parse_fusion_kind(to_string(k)), k);
  EXPECT_THROW(parse_fusion_kind("gate"), ConfigError);
}
