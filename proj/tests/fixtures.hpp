#ifndef SFMPC_TESTS_FIXTURES_HPP_
#define SFMPC_TESTS_FIXTURES_HPP_

#include "sfmpc/projection.hpp"
#include "sfmpc/scenario.hpp"

namespace sfmpc::fixtures {

/// A rest trajectory at the scenario start, bent a fraction of the way toward the goal IK.
inline KnotTrajectory goalward_candidate(const Scenario & s, double fraction, int N = 20, double Ts = 0.1)
{
  const KnotTrajectory rest = rest_trajectory(s.start.q, N, Ts);
  const auto qg = solve_ik(s.robot, s.goal, s.safety.limits.q_min, s.safety.limits.q_max, 1, 32, 1e-8);
  require(qg.has_value(), "fixture: goal not reachable");
  KnotTrajectory cand = rest;
  for (int k = 1; k <= N; ++k) {
    cand.q.row(k) = rest.q.row(k) + (qg->transpose() - rest.q.row(k)) * (fraction * k / N);
  }
  return cand;
}

}  // namespace sfmpc::fixtures

#endif  // SFMPC_TESTS_FIXTURES_HPP_
