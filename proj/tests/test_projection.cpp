#include "fixtures.hpp"

#include <gtest/gtest.h>

using namespace sfmpc;

namespace {

struct Case
{
  Scenario s;
  StateVec x0;
  KnotTrajectory rest;
  KnotTrajectory cand;
  SetAssignment asg;
};

Case make_case(const std::string & family, std::uint64_t seed, double fraction)
{
  Case t;
  t.s    = make_scenario(family, seed);
  t.x0   = t.s.start;
  t.rest = rest_trajectory(t.s.start.q, 20, 0.1);
  t.cand = fixtures::goalward_candidate(t.s, fraction);
  t.asg  = assign_sets(t.s.safety, t.s.robot, t.cand, false);
  return t;
}

}  // namespace

TEST(Projection, ConstraintRowsMatchFiniteDifferences)
{
  // With no tightening the row offsets are minus the constraint values, so their derivative in u
  // must equal minus the row itself.
  for (int seed : {0, 1, 2}) {
    Case t = make_case("narrow_passage", seed, 0.4);
    ProjectionConfig cfg;
    cfg.tightening = 0.0;
    Projector P(t.s.safety, t.s.robot, 20, 0.1, cfg);
    const auto ref = P.project_full(t.cand, t.x0, t.asg).traj;
    const BuiltQp b0 = P.build_qp(ref, ref, t.asg, t.x0);
    const Vec u = ref.controls();
    const double h = 1e-6;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      Vec up = u, um = u;
      up[i] += h;
      um[i] -= h;
      KnotTrajectory tp = rollout_flat(t.x0, up, 0.1), tm = rollout_flat(t.x0, um, 0.1);
      const Vec bp = P.build_qp(tp, tp, t.asg, t.x0).qp.b_in;
      const Vec bm = P.build_qp(tm, tm, t.asg, t.x0).qp.b_in;
      const Vec fd = -(bp - bm) / (2 * h);
      const Vec an = b0.qp.A_in.col(i);
      worst = std::max(worst, (fd - an).norm() / std::max(1.0, an.norm()));
    }
    EXPECT_LE(worst, 1e-4) << "seed " << seed;
  }
}

TEST(Projection, ConvergedSolutionIsStationary)
{
  for (int seed : {3, 4}) {
    Case t = make_case("narrow_passage", seed, 0.6);
    Projector P(t.s.safety, t.s.robot, 20, 0.1);
    const auto r = P.project_full(t.cand, t.x0, t.asg);
    ASSERT_TRUE(r.report.ok()) << to_string(r.report.status);
    // One more QP step from the solution toward the same target must be (numerically) zero.
    const BuiltQp b = P.build_qp(r.traj, t.cand, t.asg, t.x0);
    const QpResult q = solve_qp(b.qp);
    ASSERT_EQ(q.status, QpStatus::Optimal);
    EXPECT_LE(q.x.cwiseAbs().maxCoeff(), 1e-5);
    const auto kkt = kkt_residuals(b.qp, q);
    EXPECT_LE(kkt.stationarity, 1e-6);
  }
}

TEST(Projection, SafeInputIsAFixedPoint)
{
  Case t = make_case("narrow_passage", 5, 0.0);
  Projector P(t.s.safety, t.s.robot, 20, 0.1);
  const auto asg = assign_sets(t.s.safety, t.s.robot, t.rest);
  ASSERT_TRUE(check_manifold(t.s.safety, t.s.robot, t.rest, asg, t.x0, 1e-6).on_manifold);
  const auto r = P.project_rti(t.rest, t.x0, asg, &t.rest);
  ASSERT_TRUE(r.report.ok());
  EXPECT_EQ(r.traj.q, t.rest.q);
  EXPECT_EQ(r.traj.jerk, t.rest.jerk);
  const auto f = P.project_full(t.rest, t.x0, asg);
  EXPECT_LE((f.traj.q - t.rest.q).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Projection, IteratedRtiApproachesFullSolution)
{
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Case t = make_case(seed % 2 ? "unobstructed" : "narrow_passage", seed, 0.7);
    Projector P(t.s.safety, t.s.robot, 20, 0.1);
    const auto full = P.project_full(t.cand, t.x0, t.asg);
    if (!full.report.ok()) { continue; }
    KnotTrajectory ref = t.rest;
    double d = 1e9;
    for (int it = 0; it < 15 && d > 1e-4; ++it) {
      ref = P.project_rti(t.cand, t.x0, t.asg, &ref).traj;
      d   = traj_distance(ref, full.traj);
    }
    EXPECT_LE(d, 1e-4) << "seed " << seed;
    ++checked;
  }
  EXPECT_GE(checked, 4);
}

TEST(Projection, MeritIsMonotoneAndOutputIsSafe)
{
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Case t = make_case("narrow_passage", seed, 1.0);
    Projector P(t.s.safety, t.s.robot, 20, 0.1);
    const auto r = P.project_full(t.cand, t.x0, t.asg);
    const auto & m = r.report.merit_history;
    for (std::size_t i = 1; i < m.size(); ++i) { EXPECT_LE(m[i], m[i - 1] + 1e-12); }
    if (r.report.ok()) {
      EXPECT_TRUE(check_manifold(t.s.safety, t.s.robot, r.traj, t.asg, t.x0, 1e-6).on_manifold);
      EXPECT_EQ(collision_depth(t.s.robot, r.traj, t.s.obstacles), 0.0);
      EXPECT_LE(propagation_error(r.traj), 1e-9);
    }
  }
}

TEST(Projection, UnconstrainedFitReproducesConsistentTarget)
{
  Case t = make_case("unobstructed", 1, 0.5);
  Projector P(t.s.safety, t.s.robot, 20, 0.1);
  const auto safe = P.project_full(t.cand, t.x0, t.asg).traj;
  const auto fit  = P.fit_unconstrained(safe, t.x0);
  EXPECT_LE((fit.q - safe.q).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Projection, RejectsForeignGrid)
{
  Case t = make_case("unobstructed", 2, 0.5);
  Projector P(t.s.safety, t.s.robot, 20, 0.1);
  const auto other = rest_trajectory(t.s.start.q, 10, 0.1);
  EXPECT_THROW(P.project_rti(other, t.x0, t.asg), ContractError);
}
