#include "qp_oracle.hpp"

#include <gtest/gtest.h>

using namespace sfmpc;

TEST(Qp, UnconstrainedIsNewtonStep)
{
  QpProblem p;
  p.H = Mat(2, 2);
  p.H << 4, 1, 1, 3;
  p.g = Vec(2);
  p.g << 1, 2;
  const auto r = solve_qp(p);
  ASSERT_EQ(r.status, QpStatus::Optimal);
  EXPECT_LT((r.x + p.H.ldlt().solve(p.g)).norm(), 1e-12);
}

TEST(Qp, OneDimensionalLowerBound)
{
  // min x^2 s.t. x >= 1  ->  x = 1, multiplier 2.
  QpProblem p;
  p.H    = Mat::Constant(1, 1, 2.0);
  p.g    = Vec::Zero(1);
  p.A_in = Mat::Constant(1, 1, -1.0);
  p.b_in = Vec::Constant(1, -1.0);
  const auto r = solve_qp(p);
  ASSERT_EQ(r.status, QpStatus::Optimal);
  EXPECT_NEAR(r.x[0], 1.0, 1e-12);
  EXPECT_NEAR(r.lambda_in[0], 2.0, 1e-12);
}

TEST(Qp, VariableBoundsAndDuals)
{
  QpProblem p;
  p.H  = Mat::Identity(2, 2);
  p.g  = Vec(2);
  p.g << -3, 3;
  p.lb = Vec::Constant(2, -1.0);
  p.ub = Vec::Constant(2, 1.0);
  const auto r = solve_qp(p);
  ASSERT_EQ(r.status, QpStatus::Optimal);
  EXPECT_NEAR(r.x[0], 1.0, 1e-12);
  EXPECT_NEAR(r.x[1], -1.0, 1e-12);
  EXPECT_NEAR(r.lambda_ub[0], 2.0, 1e-12);
  EXPECT_NEAR(r.lambda_lb[1], 2.0, 1e-12);
  const auto k = kkt_residuals(p, r);
  EXPECT_LT(k.stationarity, 1e-12);
}

TEST(Qp, DetectsInfeasibility)
{
  QpProblem p;
  p.H    = Mat::Identity(1, 1);
  p.g    = Vec::Zero(1);
  p.A_in = Mat(2, 1);
  p.A_in << 1, -1;
  p.b_in = Vec(2);
  p.b_in << -1, -1;  // x <= -1 and x >= 1
  EXPECT_EQ(solve_qp(p).status, QpStatus::Infeasible);
}

TEST(Qp, InconsistentEqualities)
{
  QpProblem p;
  p.H    = Mat::Identity(2, 2);
  p.g    = Vec::Zero(2);
  p.A_eq = Mat(2, 2);
  p.A_eq << 1, 1, 2, 2;
  p.b_eq = Vec(2);
  p.b_eq << 1, 3;
  EXPECT_EQ(solve_qp(p).status, QpStatus::Infeasible);
}

TEST(Qp, RedundantEqualitiesAreAccepted)
{
  QpProblem p;
  p.H    = Mat::Identity(2, 2);
  p.g    = Vec::Zero(2);
  p.A_eq = Mat(2, 2);
  p.A_eq << 1, 1, 2, 2;
  p.b_eq = Vec(2);
  p.b_eq << 1, 2;
  const auto r = solve_qp(p);
  ASSERT_EQ(r.status, QpStatus::Optimal);
  EXPECT_NEAR(r.x[0], 0.5, 1e-12);
  EXPECT_NEAR(r.x[1], 0.5, 1e-12);
}

TEST(Qp, RandomPlantedInstancesMatchEnumeration)
{
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> dn(2, 30), dm(1, 60), dme(0, 2), dk(0, 3);
  for (int t = 0; t < 60; ++t) {
    const int n  = dn(rng);
    const int me = std::min(dme(rng), n - 1);
    const int m  = dm(rng);
    const int k  = std::min({dk(rng), m, n - me});
    const auto planted = oracle::random_planted_qp(rng, n, m, me, k);
    const auto r       = solve_qp(planted.qp);
    ASSERT_EQ(r.status, QpStatus::Optimal) << "instance " << t;
    const double expected = oracle::enumeration_oracle(planted.qp, 3);
    EXPECT_NEAR(r.objective, expected, 1e-6) << "instance " << t;
    const auto kkt = kkt_residuals(planted.qp, r);
    EXPECT_LT(kkt.stationarity, 1e-7);
    EXPECT_LT(kkt.primal, 1e-8);
    EXPECT_LT(kkt.dual, 1e-9);
    EXPECT_LT(kkt.complementarity, 1e-7);
  }
}

TEST(Qp, CachedFactorizationReusedAcrossGradients)
{
  std::mt19937_64 rng(3);
  const auto a = oracle::random_planted_qp(rng, 8, 10, 1, 2);
  QpSolver solver(a.qp.H);
  auto p = a.qp;
  for (int i = 0; i < 5; ++i) {
    p.g = a.qp.g * (1.0 + 0.1 * i);
    const auto r1 = solver.solve(p);
    const auto r2 = solve_qp(p);
    ASSERT_EQ(r1.status, QpStatus::Optimal);
    EXPECT_LT((r1.x - r2.x).norm(), 1e-12);
  }
}
