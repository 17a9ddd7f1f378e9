#ifndef SFMPC__SAFETY_HPP_
#define SFMPC__SAFETY_HPP_

/**
 * @file
 * @brief The safety manifold for a planar arm: state bounds, key points inside collision-free
 * convex sets, initial-state continuity and terminal rest.
 *
 * Inequality residuals h <= 0 and equality residuals g = 0 are evaluated on the knot grid.
 * Inter-knot safety comes from two facts: consecutive knots of a key point are constrained to a
 * common convex set (so the chord between them lies in it), and the curve deviates from that chord
 * by at most Ts^2/8 times its peak acceleration, which `required_margin` bounds from the limits.
 */

#include "sfmpc/geometry.hpp"
#include "sfmpc/kinematics.hpp"
#include "sfmpc/trajectory.hpp"

#include <array>
#include <optional>
#include <vector>

namespace sfmpc {

struct Limits
{
  Vec q_min, q_max;
  Vec dq_max, ddq_max, dddq_max;

  int dof() const { return static_cast<int>(q_min.size()); }

  void validate() const
  {
    const auto n = q_min.size();
    require(q_max.size() == n && dq_max.size() == n && ddq_max.size() == n && dddq_max.size() == n,
      "Limits: inconsistent dimensions");
    require(((q_max - q_min).array() > 0.0).all(), "Limits: q_min must be < q_max");
    require((dq_max.array() > 0.0).all() && (ddq_max.array() > 0.0).all() && (dddq_max.array() > 0.0).all(),
      "Limits: derivative bounds must be positive");
  }

  bool operator==(const Limits &) const = default;
};

struct EeBox
{
  Vec2 lo{Vec2::Zero()};
  Vec2 hi{Vec2::Zero()};
  bool operator==(const EeBox & o) const { return lo == o.lo && hi == o.hi; }
};

struct TerminalSet
{
  std::optional<EeBox> ee_box;
  double tol_dq{1e-3};    ///< rad/s
  double tol_ddq{1e-2};   ///< rad/s^2
  double tol_dddq{1e-1};  ///< rad/s^3

  bool operator==(const TerminalSet &) const = default;
};

struct SafetySpec
{
  Limits limits;
  std::vector<ConvexFreeSet> free_sets;
  TerminalSet terminal;
  double margin{0.02};  ///< m

  /// Chebyshev radius of pairwise free-set intersections; filled by prepare().
  Mat overlap;

  void prepare()
  {
    limits.validate();
    require(margin >= 0.0, "SafetySpec: margin must be >= 0");
    require(terminal.tol_dq > 0 && terminal.tol_ddq > 0 && terminal.tol_dddq > 0,
      "SafetySpec: terminal tolerances must be positive");
    const auto m = static_cast<Eigen::Index>(free_sets.size());
    overlap      = Mat::Constant(m, m, -1.0);
    for (Eigen::Index a = 0; a < m; ++a) {
      for (Eigen::Index b = a; b < m; ++b) {
        const double r = intersection_radius(free_sets[a], free_sets[b]);
        overlap(a, b) = overlap(b, a) = r;
      }
    }
  }

  /// Sets a and b share a point with `margin` clearance from both.
  bool transition_ok(int a, int b) const
  {
    require(overlap.rows() == static_cast<Eigen::Index>(free_sets.size()), "SafetySpec: prepare() not called");
    return a == b || overlap(a, b) > margin + 1e-9;
  }

  int find_set(const std::string & id) const
  {
    for (std::size_t i = 0; i < free_sets.size(); ++i) {
      if (free_sets[i].id == id) { return static_cast<int>(i); }
    }
    return -1;
  }

  bool operator==(const SafetySpec & o) const
  {
    return limits == o.limits && free_sets == o.free_sets && terminal == o.terminal && margin == o.margin;
  }
};

/**
 * @brief Free set(s) each key point must occupy at each knot.
 *
 * A cell normally names one set. Where the assignment switches between consecutive knots, the
 * switching knot names both sets and must lie in their intersection.
 */
struct SetAssignment
{
  struct Cell
  {
    int primary{-1};
    int secondary{-1};
    bool operator==(const Cell &) const = default;
  };

  /// cells[i][k]: key point i, knot k.
  std::vector<std::vector<Cell>> cells;

  int num_keypoints() const { return static_cast<int>(cells.size()); }
  int num_knots() const { return cells.empty() ? 0 : static_cast<int>(cells.front().size()); }
  bool operator==(const SetAssignment &) const = default;
};

/**
 * @brief Chord-deviation bound on inter-knot key-point motion under the given limits.
 *
 * Velocity can overshoot its knot bound by at most ddq_max * Ts / 2 within an interval, and the
 * key-point acceleration is bounded by sum_j l_j (w_j^2 + a_j) with w_j, a_j the cumulative
 * angular rate and acceleration bounds.
 */
inline double required_margin(const RobotModel & model, const Limits & lim, double Ts)
{
  double worst = 0.0;
  for (const auto & kp : model.key_points()) {
    double w = 0.0, a = 0.0, bound = 0.0;
    for (int j = 0; j < kp.link; ++j) {
      w += lim.dq_max[j] + lim.ddq_max[j] * Ts / 2.0;
      a += lim.ddq_max[j];
      bound += detail::partial_length(model, kp, j) * (w * w + a);
    }
    worst = std::max(worst, bound);
  }
  return Ts * Ts / 8.0 * worst;
}

namespace detail {

inline void append_box(std::vector<double> & out, const RowMat & x, const Vec & lo, const Vec & hi)
{
  for (Eigen::Index k = 0; k < x.rows(); ++k) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      out.push_back(x(k, j) - hi[j]);
      out.push_back(lo[j] - x(k, j));
    }
  }
}

}  // namespace detail

/**
 * @brief Stacked inequality residuals (<= 0 is satisfied).
 *
 * Order: box on q, dq, ddq at every knot and on jerk at every interval (upper then lower per
 * entry); key-point rows per key point, knot and face of the assigned set(s); terminal
 * end-effector box.
 */
inline Vec eval_h(const SafetySpec & spec, const RobotModel & model, const KnotTrajectory & tr,
  const SetAssignment & assign)
{
  const auto & L = spec.limits;
  const int N    = tr.N();
  if (assign.num_keypoints() != model.num_keypoints() || assign.num_knots() != N + 1) {
    throw ContractError("eval_h: assignment does not cover every key point and knot");
  }
  std::vector<double> r;
  detail::append_box(r, tr.q, L.q_min, L.q_max);
  detail::append_box(r, tr.dq, -L.dq_max, L.dq_max);
  detail::append_box(r, tr.ddq, -L.ddq_max, L.ddq_max);
  detail::append_box(r, tr.jerk, -L.dddq_max, L.dddq_max);

  for (int k = 0; k <= N; ++k) {
    const auto pts = fk_keypoints(model, tr.q.row(k).transpose());
    for (int i = 0; i < model.num_keypoints(); ++i) {
      const auto & cell = assign.cells[i][k];
      if (cell.primary < 0) { throw ContractError("eval_h: missing assignment entry"); }
      for (int s : {cell.primary, cell.secondary}) {
        if (s < 0) { continue; }
        for (const auto & h : spec.free_sets[s].halfspaces) {
          r.push_back(h.normal.dot(pts[i]) - h.offset + spec.margin);
        }
      }
    }
  }
  if (spec.terminal.ee_box) {
    const Vec2 p = fk_ee(model, tr.q.row(N).transpose()).position;
    for (int d = 0; d < 2; ++d) {
      r.push_back(p[d] - spec.terminal.ee_box->hi[d]);
      r.push_back(spec.terminal.ee_box->lo[d] - p[d]);
    }
  }
  return Eigen::Map<Vec>(r.data(), static_cast<Eigen::Index>(r.size()));
}

/// Equality residuals: knot 0 minus x0 (q, dq, ddq), then dq_N, ddq_N and the last jerk.
inline Vec eval_g(const SafetySpec & /*spec*/, const KnotTrajectory & tr, const StateVec & x0)
{
  const int n = tr.dof();
  const int N = tr.N();
  Vec g(6 * n);
  g.segment(0, n)     = tr.q.row(0).transpose() - x0.q;
  g.segment(n, n)     = tr.dq.row(0).transpose() - x0.dq;
  g.segment(2 * n, n) = tr.ddq.row(0).transpose() - x0.ddq;
  g.segment(3 * n, n) = tr.dq.row(N).transpose();
  g.segment(4 * n, n) = tr.ddq.row(N).transpose();
  g.segment(5 * n, n) = tr.jerk.row(N - 1).transpose();
  return g;
}

/**
 * @brief Deepest key-point penetration into any obstacle over densely sampled time.
 *
 * Samples every interval at Ts/substeps using the constant-jerk polynomials. `intervals` limits
 * the check to the first intervals (e.g. 1 for the executed part of a plan); -1 means all.
 */
inline double collision_depth(const RobotModel & model, const KnotTrajectory & tr,
  const std::vector<ConvexPolygon> & obstacles, int intervals = -1, int substeps = 10)
{
  const int K = intervals < 0 ? tr.N() : std::min(intervals, tr.N());
  double worst = 0.0;
  auto check   = [&](const Vec & q) {
    for (const Vec2 & p : fk_keypoints(model, q)) {
      for (const auto & ob : obstacles) { worst = std::max(worst, ob.depth(p)); }
    }
  };
  if (K == 0) {
    check(tr.q.row(0).transpose());
    return worst;
  }
  for (int k = 0; k < K; ++k) {
    for (int s = 0; s < substeps; ++s) {
      check(eval_in_interval(tr, k, tr.Ts * s / substeps).q);
    }
  }
  check(tr.q.row(K).transpose());
  return worst;
}

/// Overload matching the manifold-level signature.
inline double collision_depth(const SafetySpec & /*spec*/, const RobotModel & model, const KnotTrajectory & tr,
  const std::vector<ConvexPolygon> & obstacles)
{
  return collision_depth(model, tr, obstacles);
}

/**
 * @brief Assign a free set to every key point at every knot of a reference trajectory.
 *
 * Walking along the knots, the set with the largest clearance among those containing the point is
 * chosen; the previous knot's set is kept unless another one beats it by 10% of the margin, and a
 * switch is only allowed between sets whose intersection admits the margin. The switching knot is
 * pinned to the intersection of both sets.
 *
 * In strict mode a point outside every set throws AssignmentError. Lenient mode (used when
 * projecting arbitrary candidates) falls back to the reachable set with the largest clearance.
 */
inline SetAssignment assign_sets(const SafetySpec & spec, const RobotModel & model, const KnotTrajectory & tr,
  bool strict = true)
{
  const int N   = tr.N();
  const int nkp = model.num_keypoints();
  const int ns  = static_cast<int>(spec.free_sets.size());
  require(ns > 0, "assign_sets: no free sets");
  const double inside_tol = 1e-9;
  const double hysteresis = 0.1 * spec.margin;

  std::vector<std::vector<Vec2>> pts(N + 1);
  for (int k = 0; k <= N; ++k) { pts[k] = fk_keypoints(model, tr.q.row(k).transpose()); }

  SetAssignment out;
  out.cells.assign(nkp, std::vector<SetAssignment::Cell>(N + 1));
  for (int i = 0; i < nkp; ++i) {
    int prev = -1;
    for (int k = 0; k <= N; ++k) {
      const Vec2 & p = pts[k][i];
      auto contains  = [&](int s) { return spec.free_sets[s].clearance(p) >= spec.margin - inside_tol; };
      auto clear     = [&](int s) { return spec.free_sets[s].clearance(p); };

      int best = -1;
      for (int s = 0; s < ns; ++s) {
        if (!contains(s) || (prev >= 0 && !spec.transition_ok(prev, s))) { continue; }
        if (best < 0 || clear(s) > clear(best)) { best = s; }
      }
      int chosen = -1;
      if (prev >= 0 && contains(prev)) {
        chosen = (best >= 0 && best != prev && clear(best) > clear(prev) + hysteresis) ? best : prev;
      } else if (best >= 0) {
        chosen = best;
      } else if (strict) {
        throw AssignmentError("assign_sets: key point " + std::to_string(i) + " at knot " + std::to_string(k) +
                              " is outside every reachable free set");
      } else {
        for (int s = 0; s < ns; ++s) {
          if (prev >= 0 && !spec.transition_ok(prev, s)) { continue; }
          if (chosen < 0 || clear(s) > clear(chosen)) { chosen = s; }
        }
      }

      out.cells[i][k].primary = chosen;
      if (prev >= 0 && chosen != prev) {
        // Pin the transition inside the intersection.
        if (contains(prev) || !strict) {
          out.cells[i][k].secondary = prev;
        } else if (spec.free_sets[chosen].clearance(pts[k - 1][i]) >= spec.margin - inside_tol) {
          out.cells[i][k - 1].secondary = chosen;
        } else {
          throw AssignmentError("assign_sets: key point " + std::to_string(i) + " jumps between sets at knot " +
                                std::to_string(k));
        }
      }
      prev = chosen;
    }
  }
  return out;
}

struct TerminalCheck
{
  bool contains{false};
  double worst_residual{0.0};
};

inline TerminalCheck terminal_contains(const SafetySpec & spec, const RobotModel & model, const KnotTrajectory & tr)
{
  const int N       = tr.N();
  const auto & T    = spec.terminal;
  const double rdq  = tr.dq.row(N).norm();
  const double rddq = tr.ddq.row(N).norm();
  const double rj   = tr.jerk.row(N - 1).norm();
  bool ok           = rdq <= T.tol_dq && rddq <= T.tol_ddq && rj <= T.tol_dddq;
  double worst      = std::max({rdq, rddq, rj});
  if (T.ee_box) {
    const Vec2 p = fk_ee(model, tr.q.row(N).transpose()).position;
    const double v =
      std::max({p.x() - T.ee_box->hi.x(), T.ee_box->lo.x() - p.x(), p.y() - T.ee_box->hi.y(), T.ee_box->lo.y() - p.y()});
    ok    = ok && v <= 0.0;
    worst = std::max(worst, std::max(0.0, v));
  }
  return {ok, worst};
}

struct ManifoldCheck
{
  bool on_manifold{false};
  double max_h{0.0};
  double max_abs_g{0.0};
};

inline ManifoldCheck check_manifold(const SafetySpec & spec, const RobotModel & model, const KnotTrajectory & tr,
  const SetAssignment & assign, const StateVec & x0, double tol = 1e-6)
{
  const Vec h = eval_h(spec, model, tr, assign);
  const Vec g = eval_g(spec, tr, x0);
  ManifoldCheck c;
  c.max_h       = h.size() ? h.maxCoeff() : -std::numeric_limits<double>::infinity();
  c.max_abs_g   = g.cwiseAbs().maxCoeff();
  c.on_manifold = c.max_h <= tol && c.max_abs_g <= tol;
  return c;
}

/// Membership using the trajectory's own knot 0 as x0.
inline bool on_manifold(const SafetySpec & spec, const RobotModel & model, const KnotTrajectory & tr,
  const SetAssignment & assign, double tol = 1e-6)
{
  return check_manifold(spec, model, tr, assign, tr.state(0), tol).on_manifold;
}

}  // namespace sfmpc

#endif  // SFMPC__SAFETY_HPP_
