#include "fixtures.hpp"

#include "sfmpc/planner.hpp"

#include <gtest/gtest.h>

using namespace sfmpc;

namespace {

FlowModel zero_model(const Scenario & s)
{
  return FlowModel::create(FlowConfig{}, default_codec(s.robot, s.safety.limits), 3);
}

/// Same architecture with every parameter drawn at random, so the field is far from zero.
FlowModel noisy_model(const Scenario & s, std::uint64_t seed, double scale = 0.05)
{
  FlowModel m = zero_model(s);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (Eigen::Index i = 0; i < m.ps.theta().size(); ++i) { m.ps.theta()[i] += nd(rng); }
  return m;
}

/// A resting start; the projector points into `s`, so the fixture is never moved.
struct Step
{
  Scenario s;
  Projector P;
  KnotTrajectory rest;
  SetAssignment asg;
  Observation obs;

  Step(const std::string & family, std::uint64_t seed)
    : s(make_scenario(family, seed)), P(s.safety, s.robot, 20, 0.1), rest(rest_trajectory(s.start.q, 20, 0.1)),
      asg(assign_sets(s.safety, s.robot, rest, true))
  {
    JointHistory h(10);
    h.push(s.start.q);
    obs = observe(s.robot, s.start.q, h, s.goal);
  }
  Step(const Step &) = delete;
};

}  // namespace

// ---------------------------------------------------------------------------------------------
// Guidance

TEST(Guidance, CostVanishesAtTheGoal)
{
  const Scenario s    = make_scenario("unobstructed", 4);
  const KnotTrajectory tr = rest_trajectory(s.start.q, 20, 0.1);
  EXPECT_DOUBLE_EQ(guidance_cost(s.robot, tr, fk_ee(s.robot, s.start.q)), 0.0);
}

TEST(Guidance, StaticTrajectoryCostsNTimesTheDistance)
{
  const Scenario s = make_scenario("unobstructed", 4);
  const KnotTrajectory tr = rest_trajectory(s.start.q, 20, 0.1);
  const Pose2 ee          = fk_ee(s.robot, s.start.q);
  const Pose2 goal(ee.position + Vec2(0.3, -0.4), ee.orientation);
  EXPECT_NEAR(guidance_cost(s.robot, tr, goal), 20 * 0.5, 1e-12);
}

TEST(Guidance, GradientMatchesFiniteDifferences)
{
  const Scenario s = make_scenario("narrow_passage", 2);
  const KnotTrajectory base = fixtures::goalward_candidate(s, 0.7);
  for (double smoothing : {0.0, 0.1}) {
    const RowMat G = guidance_gradient(s.robot, base, s.goal, smoothing);
    EXPECT_EQ(G.row(0).norm(), 0.0);
    double worst = 0.0;
    const double h = 1e-6;
    for (int k = 1; k <= base.N(); ++k) {
      for (int j = 0; j < base.dof(); ++j) {
        KnotTrajectory p = base, m = base;
        p.q(k, j) += h;
        m.q(k, j) -= h;
        const double fd = (guidance_cost(s.robot, p, s.goal, smoothing) - guidance_cost(s.robot, m, s.goal, smoothing)) / (2 * h);
        worst = std::max(worst, std::abs(fd - G(k, j)) / std::max(1.0, std::abs(fd)));
      }
    }
    EXPECT_LE(worst, 1e-5) << "smoothing " << smoothing;
  }
}

TEST(Guidance, WeightExamples)
{
  const Scenario s = make_scenario("unobstructed", 5);
  const Pose2 p0   = fk_ee(s.robot, s.start.q);
  const double a = 5.0, b = 0.8;
  EXPECT_NEAR(guidance_weight(s.robot, s.start.q, p0, s.goal, a, b), std::exp(a * b), 1e-12);

  // Walk the joint line toward the goal IK and check monotone decrease in progress.
  const auto qg = solve_ik(s.robot, s.goal, s.safety.limits.q_min, s.safety.limits.q_max, 1, 32, 1e-10);
  ASSERT_TRUE(qg.has_value());
  std::vector<std::pair<double, double>> pw;
  for (int i = 0; i <= 20; ++i) {
    const Vec q = s.start.q + (i / 20.0) * (*qg - s.start.q);
    pw.emplace_back(guidance_progress(s.robot, q, p0, s.goal), guidance_weight(s.robot, q, p0, s.goal, a, b));
  }
  std::sort(pw.begin(), pw.end());
  for (std::size_t i = 1; i < pw.size(); ++i) {
    if (pw[i].first > pw[i - 1].first) { EXPECT_LT(pw[i].second, pw[i - 1].second); }
  }
  EXPECT_NEAR(guidance_weight(s.robot, *qg, p0, s.goal, a, 1.0), 1.0, 1e-8);
  EXPECT_THROW(guidance_weight(s.robot, s.start.q, p0, p0, a, b), ContractError);
}

TEST(Guidance, PlannerWeightIsCappedAndDefinedAtTheGoal)
{
  const Scenario s = make_scenario("unobstructed", 5);
  const Pose2 p0   = fk_ee(s.robot, s.start.q);
  PlannerConfig cfg;
  EXPECT_NEAR(planner_guidance_weight(cfg, s.robot, s.start.q, p0, p0), std::exp(cfg.alpha * (1.0 - cfg.beta)), 1e-12);
  EXPECT_NEAR(planner_guidance_weight(cfg, s.robot, s.start.q, p0, s.goal), std::exp(-cfg.alpha * cfg.beta), 1e-12);
  cfg.guidance = false;
  EXPECT_EQ(planner_guidance_weight(cfg, s.robot, s.start.q, p0, s.goal), 0.0);
}

// ---------------------------------------------------------------------------------------------
// Observations

TEST(Observe, HistoryIsPaddedWithTheFirstState)
{
  const Scenario s = make_scenario("unobstructed", 1);
  JointHistory h(10);
  h.push(s.start.q);
  const Observation o = observe(s.robot, s.start.q, h, s.goal);
  ASSERT_EQ(o.q_history.size(), 10u);
  for (const Vec & q : o.q_history) { EXPECT_EQ(q, s.start.q); }

  const ObservationCodec codec = default_codec(s.robot, s.safety.limits);
  const auto len0              = codec.encode(o).size();
  Vec q = s.start.q;
  for (int i = 0; i < 15; ++i) {
    q[0] += 0.01;
    h.push(q);
    EXPECT_EQ(codec.encode(observe(s.robot, q, h, s.goal)).size(), len0);
  }
  const auto full = h.padded();
  EXPECT_EQ(full.back(), q);
  EXPECT_EQ(full.size(), 10u);
}

TEST(Observe, GoalSwitchesAtTheFirstReplanAfterTheEvent)
{
  Scenario s = make_scenario("unobstructed", 3);
  s.events   = {{0.35, Pose2(s.goal.position + Vec2(0.0, 0.05), s.goal.orientation)}};
  s.timeout  = 1.0;
  const FlowModel m = zero_model(s);
  PlannerModels pm;
  pm.flow = &m;
  const EpisodeTrace tr = run_closed_loop(s, pm, PlannerConfig{}, 0);
  ASSERT_GE(tr.replans.size(), 6u);
  for (const auto & r : tr.replans) {
    const Pose2 expect = r.t + 1e-12 >= 0.35 ? s.events[0].goal : s.goal;
    EXPECT_EQ(pose_distance(r.goal, expect), 0.0) << "t=" << r.t;
  }
  EXPECT_EQ(pose_distance(tr.replans[3].goal, s.goal), 0.0);
  EXPECT_EQ(pose_distance(tr.replans[4].goal, s.events[0].goal), 0.0);
}

// ---------------------------------------------------------------------------------------------
// plan_step

TEST(PlanStep, ZeroFieldWithoutGuidanceIsAFixedPoint)
{
  for (const char * family : {"narrow_passage", "unobstructed"}) {
    Step st(family, 7);
    const FlowModel m = zero_model(st.s);
    PlannerModels pm;
    pm.flow = &m;
    PlannerConfig cfg;
    cfg.guidance = false;
    std::mt19937_64 rng(0);
    const auto r = plan_step(st.P, st.s.start, st.rest, st.asg, st.obs, st.s.goal, fk_ee(st.s.robot, st.s.start.q), pm, cfg, rng);
    EXPECT_FALSE(r.fallback_taken);
    EXPECT_EQ(r.steps_completed, 7);
    EXPECT_TRUE((r.traj.q.array() == st.rest.q.array()).all()) << family;
    EXPECT_LE((r.traj.dq - st.rest.dq).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LE((r.traj.ddq - st.rest.ddq).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LE((r.traj.jerk - st.rest.jerk).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(PlanStep, InjectedFailureReturnsTheLastSafeIterate)
{
  Step st("narrow_passage", 11);
  const FlowModel m = noisy_model(st.s, 5);
  PlannerModels pm;
  pm.flow = &m;
  PlannerConfig cfg;
  cfg.record_iterates = true;
  const Pose2 p0      = fk_ee(st.s.robot, st.s.start.q);
  std::mt19937_64 rng(0);
  const auto clean = plan_step(st.P, st.s.start, st.rest, st.asg, st.obs, st.s.goal, p0, pm, cfg, rng);
  ASSERT_FALSE(clean.fallback_taken);
  ASSERT_EQ(clean.iterates.size(), 8u);
  EXPECT_GT((clean.iterates[3].q - st.rest.q).norm(), 1e-6) << "the test needs a field that moves the plan";

  cfg.fail_at_step = 3;
  const auto hit = plan_step(st.P, st.s.start, st.rest, st.asg, st.obs, st.s.goal, p0, pm, cfg, rng);
  EXPECT_TRUE(hit.fallback_taken);
  EXPECT_EQ(hit.fail_step, 3);
  EXPECT_EQ(hit.steps_completed, 3);
  EXPECT_TRUE((hit.traj.q.array() == clean.iterates[3].q.array()).all());
  EXPECT_TRUE((hit.traj.jerk.array() == clean.iterates[3].jerk.array()).all());
  EXPECT_TRUE(check_manifold(st.s.safety, st.s.robot, hit.traj, hit.assignment, st.s.start).on_manifold);
  EXPECT_TRUE(terminal_contains(st.s.safety, st.s.robot, hit.traj).contains);
}

TEST(PlanStep, OffManifoldInputIsAContractViolation)
{
  Step st("narrow_passage", 2);
  const FlowModel m = zero_model(st.s);
  PlannerModels pm;
  pm.flow             = &m;
  KnotTrajectory bad  = st.rest;
  bad.q(0, 0)        += 0.05;  // knot 0 no longer matches the measured state
  std::mt19937_64 rng(0);
  EXPECT_THROW(plan_step(st.P, st.s.start, bad, st.asg, st.obs, st.s.goal, st.s.goal, pm, PlannerConfig{}, rng), ContractError);
}

TEST(PlanStep, GuidanceAloneDescendsInFreeSpace)
{
  for (std::uint64_t seed : {1, 2, 3}) {
    Step st("unobstructed", seed);
    const FlowModel m = zero_model(st.s);
    PlannerModels pm;
    pm.flow = &m;
    PlannerConfig cfg;
    std::mt19937_64 rng(0);
    const auto r = plan_step(st.P, st.s.start, st.rest, st.asg, st.obs, st.s.goal, fk_ee(st.s.robot, st.s.start.q), pm, cfg, rng);
    EXPECT_FALSE(r.fallback_taken);
    EXPECT_LT(guidance_cost(st.s.robot, r.traj, st.s.goal), guidance_cost(st.s.robot, st.rest, st.s.goal)) << seed;
  }
}

TEST(PlanStep, RandomFaultsNeverLeaveTheManifold)
{
  Step st("narrow_passage", 4);
  const FlowModel m = noisy_model(st.s, 9);
  PlannerModels pm;
  pm.flow = &m;
  PlannerConfig cfg;
  cfg.fault_probability = 0.2;
  st.s.timeout          = 2.0;
  const EpisodeTrace tr = run_closed_loop(st.s, pm, cfg, 3);
  int fallbacks         = 0;
  for (const auto & r : tr.replans) {
    EXPECT_LE(r.max_h, 1e-6);
    EXPECT_TRUE(r.terminal_ok);
    fallbacks += r.fallback;
  }
  EXPECT_GT(fallbacks, 0);
  EXPECT_EQ(collision_depth(st.s.robot, tr.executed, st.s.obstacles), 0.0);
}

// ---------------------------------------------------------------------------------------------
// Closed loop

TEST(ClosedLoop, GoalAtStartSucceedsImmediately)
{
  Scenario s = make_scenario("narrow_passage", 6);
  s.goal     = fk_ee(s.robot, s.start.q);
  const FlowModel m = zero_model(s);
  PlannerModels pm;
  pm.flow               = &m;
  const EpisodeTrace tr = run_closed_loop(s, pm, PlannerConfig{}, 0);
  EXPECT_TRUE(tr.success);
  EXPECT_EQ(tr.final_time, 0.0);
  EXPECT_TRUE(tr.replans.empty());
  EXPECT_EQ(tr.executed.q.rows(), 1);
}

TEST(ClosedLoop, AllFallbackNeverMoves)
{
  Scenario s = make_scenario("narrow_passage", 8);
  s.timeout  = 1.5;
  PlannerConfig cfg;
  cfg.variant  = PlannerVariant::AllFallback;
  cfg.guidance = false;
  const EpisodeTrace tr = run_closed_loop(s, PlannerModels{}, cfg, 0);
  EXPECT_FALSE(tr.success);
  EXPECT_EQ(tr.end_reason, "timeout");
  for (int k = 0; k <= tr.executed.N(); ++k) { EXPECT_EQ(tr.executed.q.row(k), s.start.q.transpose()); }
  for (const auto & r : tr.replans) { EXPECT_TRUE(r.fallback); }
  EXPECT_EQ(collision_depth(s.robot, tr.executed, s.obstacles), 0.0);
}

TEST(ClosedLoop, TraceJsonRoundTrip)
{
  Scenario s = make_scenario("dynamic_goal", 2);
  s.timeout  = 0.8;
  const FlowModel m = noisy_model(s, 1);
  PlannerModels pm;
  pm.flow               = &m;
  const EpisodeTrace tr = run_closed_loop(s, pm, PlannerConfig{}, 5);
  const EpisodeTrace back = trace_from_json(nlohmann::json::parse(trace_to_json(tr).dump()));
  EXPECT_EQ(back.method, tr.method);
  EXPECT_EQ(back.seed, tr.seed);
  EXPECT_EQ(back.success, tr.success);
  EXPECT_EQ(back.replans.size(), tr.replans.size());
  EXPECT_EQ(scenario_to_json(back.scenario), scenario_to_json(tr.scenario));
  EXPECT_LE((back.executed.q - tr.executed.q).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((back.executed.jerk - tr.executed.jerk).cwiseAbs().maxCoeff(), 1e-15);
  for (std::size_t i = 0; i < tr.replans.size(); ++i) {
    EXPECT_EQ(back.replans[i].fallback, tr.replans[i].fallback);
    EXPECT_DOUBLE_EQ(back.replans[i].max_h, tr.replans[i].max_h);
  }
}
