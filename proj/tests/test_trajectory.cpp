#include "sfmpc/trajectory.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace sfmpc;

namespace {

RowMat random_jerks(std::mt19937_64 & rng, int N, int dof, double scale = 5.0)
{
  std::normal_distribution<double> nd(0.0, scale);
  RowMat J(N, dof);
  for (int k = 0; k < N; ++k) {
    for (int j = 0; j < dof; ++j) { J(k, j) = nd(rng); }
  }
  return J;
}

StateVec random_state(std::mt19937_64 & rng, int dof)
{
  std::normal_distribution<double> nd(0.0, 0.5);
  StateVec s;
  s.q = s.dq = s.ddq = s.dddq = Vec::Zero(dof);
  for (int j = 0; j < dof; ++j) {
    s.q[j]   = nd(rng);
    s.dq[j]  = nd(rng);
    s.ddq[j] = nd(rng);
  }
  return s;
}

}  // namespace

TEST(Trajectory, IntegrateStepExamples)
{
  const Vec z = Vec::Zero(1);
  auto r      = integrate_step(Vec::Constant(1, 0.7), z, z, z, 0.1);
  EXPECT_EQ(r.q[0], 0.7);
  EXPECT_EQ(r.dq[0], 0.0);
  r = integrate_step(z, z, z, Vec::Constant(1, 6.0), 1.0);
  EXPECT_DOUBLE_EQ(r.q[0], 1.0);
  EXPECT_DOUBLE_EQ(r.dq[0], 3.0);
  EXPECT_DOUBLE_EQ(r.ddq[0], 6.0);
}

TEST(Trajectory, StepsComposeToOneFlight)
{
  std::mt19937_64 rng(1);
  const StateVec s = random_state(rng, 2);
  const Vec j      = Vec::Constant(2, 1.7);
  Derivs d{s.q, s.dq, s.ddq};
  for (int k = 0; k < 7; ++k) { d = integrate_step(d.q, d.dq, d.ddq, j, 0.1); }
  const Derivs one = integrate_step(s.q, s.dq, s.ddq, j, 0.7);
  EXPECT_LT((d.q - one.q).norm(), 1e-12);
  EXPECT_LT((d.dq - one.dq).norm(), 1e-12);
  EXPECT_LT((d.ddq - one.ddq).norm(), 1e-12);
}

TEST(Trajectory, RolloutExamples)
{
  const Vec q0(Vec::Constant(3, 0.2));
  const auto rest = rollout(StateVec::rest(q0), RowMat::Zero(5, 3), 0.1);
  for (int k = 0; k <= 5; ++k) { EXPECT_EQ(rest.q.row(k).transpose(), q0); }

  std::mt19937_64 rng(4);
  const RowMat J = random_jerks(rng, 6, 3);
  const auto tr  = rollout(random_state(rng, 3), J, 0.1);
  EXPECT_EQ(tr.jerk, J);
  EXPECT_LE(propagation_error(tr), 1e-9);

  RowMat pm = RowMat::Zero(4, 1);
  pm(0, 0)  = 3.0;
  pm(1, 0)  = -3.0;
  StateVec x0{Vec::Zero(1), Vec::Zero(1), Vec::Constant(1, 0.4), Vec::Zero(1)};
  const auto t2 = rollout(x0, pm, 0.1);
  EXPECT_NEAR(t2.ddq(2, 0), 0.4, 1e-15);
}

TEST(Trajectory, ShiftExamples)
{
  const auto rest = rest_trajectory(Vec::Constant(2, 0.3), 6, 0.1, 1.0);
  auto sh         = shift(rest);
  EXPECT_EQ(sh.q, rest.q);
  EXPECT_EQ(sh.jerk, rest.jerk);
  EXPECT_DOUBLE_EQ(sh.t0, 1.1);
  EXPECT_EQ(shift(sh).q, rest.q);  // idempotent on rest

  // N = 3 with positions (a, b, c, c) and zero terminal derivatives.
  KnotTrajectory t;
  t.Ts  = 0.1;
  t.q   = RowMat(4, 1);
  t.q << 1.0, 2.0, 3.0, 3.0;
  t.dq   = RowMat::Zero(4, 1);
  t.ddq  = RowMat::Zero(4, 1);
  t.jerk = RowMat::Zero(3, 1);
  const auto s = shift(t);
  EXPECT_EQ(s.q(0, 0), 2.0);
  EXPECT_EQ(s.q(1, 0), 3.0);
  EXPECT_EQ(s.q(2, 0), 3.0);
  EXPECT_EQ(s.q(3, 0), 3.0);

  std::mt19937_64 rng(5);
  const auto tr = rollout(random_state(rng, 3), random_jerks(rng, 8, 3), 0.1);
  const auto sh2 = shift(tr);
  for (int k = 0; k < tr.N(); ++k) {
    EXPECT_EQ(sh2.q.row(k), tr.q.row(k + 1));
    EXPECT_EQ(sh2.dq.row(k), tr.dq.row(k + 1));
    EXPECT_EQ(sh2.ddq.row(k), tr.ddq.row(k + 1));
  }
  EXPECT_LE(propagation_error(sh2), 1e-9);

  const TerminalController bad = [](const StateVec &) -> std::optional<Vec> { return std::nullopt; };
  EXPECT_THROW(shift(tr, bad), std::runtime_error);
}

TEST(Trajectory, DistanceExamples)
{
  std::mt19937_64 rng(6);
  const auto a = rollout(random_state(rng, 2), random_jerks(rng, 5, 2), 0.1);
  const auto b = rollout(random_state(rng, 2), random_jerks(rng, 5, 2), 0.1);
  EXPECT_EQ(traj_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(traj_distance(a, b), traj_distance(b, a));
  auto c = a;
  c.q(3, 0) += 0.2;
  c.q(3, 1) -= 0.1;
  EXPECT_NEAR(traj_distance(a, c), 0.05, 1e-15);
  const auto d = rollout(random_state(rng, 2), random_jerks(rng, 6, 2), 0.1);
  EXPECT_THROW(traj_distance(a, d), ContractError);
}

TEST(Trajectory, DistanceIsQuadraticForm)
{
  // D(a + t v, a) = t^2 D(a + v, a) on the stacked (q, jerk) variables.
  std::mt19937_64 rng(7);
  const auto a = rollout(random_state(rng, 2), random_jerks(rng, 5, 2), 0.1);
  auto v       = rollout(random_state(rng, 2), random_jerks(rng, 5, 2), 0.1);
  auto at      = [&](double t) {
    KnotTrajectory x = a;
    x.q              = a.q + t * v.q;
    x.jerk           = a.jerk + t * v.jerk;
    return traj_distance(x, a);
  };
  EXPECT_NEAR(at(2.5), 6.25 * at(1.0), 1e-9 * at(2.5));
  EXPECT_GE(at(-0.3), 0.0);
}

TEST(Trajectory, RolloutMapMatchesRollout)
{
  std::mt19937_64 rng(8);
  const int N = 7, dof = 3;
  const RolloutMap M(N, 0.1, dof);
  const StateVec x0 = random_state(rng, dof);
  const RowMat J    = random_jerks(rng, N, dof);
  const auto tr     = rollout(x0, J, 0.1);
  const auto free   = rollout(x0, RowMat::Zero(N, dof), 0.1);
  const Vec u       = tr.controls();
  EXPECT_LT((free.positions() + M.Sq() * u - tr.positions()).cwiseAbs().maxCoeff(), 1e-12);
  const Vec dq_all   = Eigen::Map<const Vec>(tr.dq.data(), tr.dq.size());
  const Vec dq_free  = Eigen::Map<const Vec>(free.dq.data(), free.dq.size());
  const Vec ddq_all  = Eigen::Map<const Vec>(tr.ddq.data(), tr.ddq.size());
  const Vec ddq_free = Eigen::Map<const Vec>(free.ddq.data(), free.ddq.size());
  EXPECT_LT((dq_free + M.Sdq() * u - dq_all).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((ddq_free + M.Sddq() * u - ddq_all).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Trajectory, CsvRoundTrip)
{
  std::mt19937_64 rng(9);
  const auto tr = rollout(random_state(rng, 3), random_jerks(rng, 20, 3), 0.1, 2.3);
  std::stringstream ss;
  write_csv(ss, tr);
  const auto back = read_csv(ss);
  EXPECT_EQ(back.q, tr.q);
  EXPECT_EQ(back.dq, tr.dq);
  EXPECT_EQ(back.jerk, tr.jerk);
  EXPECT_EQ(back.Ts, tr.Ts);
  EXPECT_EQ(back.t0, tr.t0);
}
