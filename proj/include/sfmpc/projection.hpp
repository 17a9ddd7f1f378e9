#ifndef SFMPC__PROJECTION_HPP_
#define SFMPC__PROJECTION_HPP_

/**
 * @file
 * @brief Projection of a candidate trajectory onto the safety manifold.
 *
 * The decision variables are the stacked jerk controls u (interval-major). Because the
 * triple-integrator rollout is linear, every knot state is q_free(x0) + Sq u (likewise dq, ddq),
 * with constant sensitivity matrices. Consequently:
 *   - the distance objective is an exact quadratic in u, with a constant Hessian that is
 *     factorized once per grid;
 *   - state boxes, jerk bounds, initial continuity and terminal rest are exactly linear;
 *   - only the key-point collision rows and the terminal end-effector box are nonlinear, through
 *     the forward kinematics, and they are linearized with jac_keypoint chained through Sq.
 *
 * project_rti solves one QP around a linearization reference. project_full iterates QPs with an
 * L1 merit line search until convergence.
 */

#include "sfmpc/qp.hpp"
#include "sfmpc/safety.hpp"
#include "sfmpc/trajectory.hpp"

#include <chrono>
#include <memory>
#include <optional>

namespace sfmpc {

struct ProjectionConfig
{
  DistanceWeights weights{};
  double damping{1e-6};            ///< Levenberg term on the QP Hessian
  double tightening{0.003};        ///< m, buffer on linearized collision rows
  double tol{1e-6};                ///< constraint tolerance for "converged"
  double step_tol{1e-8};           ///< SQP step-norm tolerance (inf-norm of delta u)
  int max_sqp_iter{30};
  double slack_penalty{1e4};       ///< linear weight of the shared collision-row slack in the retry
  double slack_quadratic{1e-6};
  bool rti_backtracking{true};     ///< damp the RTI step if the nonlinear check fails
  QpSettings qp{};
};

enum class ProjectionStatus { Converged, MaxIter, QpInfeasible, NumericalFailure };

inline const char * to_string(ProjectionStatus s)
{
  switch (s) {
    case ProjectionStatus::Converged: return "converged";
    case ProjectionStatus::MaxIter: return "max_iter";
    case ProjectionStatus::QpInfeasible: return "qp_infeasible";
    case ProjectionStatus::NumericalFailure: return "numerical_failure";
  }
  return "unknown";
}

struct ProjectionReport
{
  ProjectionStatus status{ProjectionStatus::NumericalFailure};
  int iterations{0};
  double h_violation{0.0};  ///< max(0, max eval_h)
  double g_violation{0.0};  ///< max |eval_g|
  double step_norm{0.0};    ///< inf-norm of the accepted jerk change
  double wall_time{0.0};    ///< s
  bool used_slack{false};
  std::vector<double> merit_history;

  bool ok() const { return status == ProjectionStatus::Converged; }
};

struct ProjectionResult
{
  KnotTrajectory traj;
  ProjectionReport report;
};

/// QP in delta u around a reference, plus bookkeeping needed for slack retries.
struct BuiltQp
{
  QpProblem qp;
  Vec u_ref;
  int collision_begin{0};  ///< first collision row in qp.A_in
  int collision_end{0};
};

/**
 * @brief Projection context for one (spec, model, grid).
 *
 * Caches the rollout sensitivities and the factorized objective Hessian. Not thread-safe; create
 * one per thread.
 */
class Projector
{
public:
  Projector(const SafetySpec & spec, const RobotModel & model, int N, double Ts, ProjectionConfig cfg = {})
      : spec_(&spec), model_(&model), cfg_(cfg), map_(N, Ts, model.dof())
  {
    require(N >= 2, "Projector: N must be >= 2");
    require(cfg_.damping > 0.0, "Projector: damping must be positive");
    require(spec.overlap.rows() == static_cast<Eigen::Index>(spec.free_sets.size()),
      "Projector: SafetySpec::prepare() not called");
    const int n = map_.num_controls();
    H_ = 2.0 * (cfg_.weights.w_q * map_.Sq().transpose() * map_.Sq() + cfg_.weights.w_u * Mat::Identity(n, n)) +
         cfg_.damping * Mat::Identity(n, n);
    if (!solver_.factorize(H_)) { throw std::runtime_error("Projector: objective Hessian not positive definite"); }
  }

  const SafetySpec & spec() const { return *spec_; }
  const RobotModel & model() const { return *model_; }
  const ProjectionConfig & config() const { return cfg_; }
  ProjectionConfig & config() { return cfg_; }
  const RolloutMap & rollout_map() const { return map_; }
  int N() const { return map_.N(); }
  double Ts() const { return map_.Ts(); }

  /**
   * @brief Assemble the QP for delta u around `ref` (rolled out from x0) toward `target`.
   *
   * Collision rows: n . (p_ref + J Sq_k du) <= b - margin - t, with t the tightening clamped to the
   * reference's own slack.
   */
  BuiltQp build_qp(const KnotTrajectory & ref_in, const KnotTrajectory & target, const SetAssignment & assign,
    const StateVec & x0) const
  {
    check_grid(ref_in);
    check_grid(target);
    const int N = map_.N(), dof = map_.dof(), n = map_.num_controls();
    if (assign.num_keypoints() != model_->num_keypoints() || assign.num_knots() != N + 1) {
      throw ContractError("build_qp: assignment does not cover every key point and knot");
    }
    BuiltQp b;
    b.u_ref                  = ref_in.controls();
    const KnotTrajectory ref = rollout_flat(x0, b.u_ref, map_.Ts(), ref_in.t0);
    const auto & L           = spec_->limits;
    const auto & w           = cfg_.weights;

    b.qp.H = H_;
    b.qp.g = 2.0 * (w.w_q * map_.Sq().transpose() * (ref.positions() - target.positions()) +
                    w.w_u * (b.u_ref - target.controls()));

    // Exactly linear rows: positions at knots 1..N, dq and ddq at 1..N-1.
    std::vector<std::pair<Vec, double>> rows;
    auto box = [&](const Mat & S, const RowMat & x, int k, const Vec & lo, const Vec & hi) {
      for (int j = 0; j < dof; ++j) {
        const Vec r = S.row(k * dof + j).transpose();
        rows.emplace_back(r, hi[j] - x(k, j));
        rows.emplace_back(-r, x(k, j) - lo[j]);
      }
    };
    for (int k = 1; k <= N; ++k) { box(map_.Sq(), ref.q, k, L.q_min, L.q_max); }
    for (int k = 1; k < N; ++k) { box(map_.Sdq(), ref.dq, k, -L.dq_max, L.dq_max); }
    for (int k = 1; k < N; ++k) { box(map_.Sddq(), ref.ddq, k, -L.ddq_max, L.ddq_max); }
    b.collision_begin = static_cast<int>(rows.size());

    // Linearized key-point rows; the only nonlinearity in the problem.
    for (int k = 1; k <= N; ++k) {
      const Vec qk = ref.q.row(k).transpose();
      const auto Sk = map_.Sq_knot(k);
      for (int i = 0; i < model_->num_keypoints(); ++i) {
        const auto & cell = assign.cells[i][k];
        if (cell.primary < 0) { throw ContractError("build_qp: missing assignment entry"); }
        const Vec2 p   = fk_point(*model_, qk, model_->key_points()[i]);
        const Mat2X J  = jac_keypoint(*model_, qk, i);
        const Mat JS   = J * Sk;
        for (int s : {cell.primary, cell.secondary}) {
          if (s < 0) { continue; }
          for (const auto & h : spec_->free_sets[s].halfspaces) {
            const double slack = h.offset - spec_->margin - h.normal.dot(p);
            const double t     = std::clamp(slack, 0.0, cfg_.tightening);
            rows.emplace_back((h.normal.transpose() * JS).transpose(), slack - t);
          }
        }
      }
    }
    if (spec_->terminal.ee_box) {
      const Vec qN   = ref.q.row(N).transpose();
      const Vec2 p   = fk_ee(*model_, qN).position;
      const Mat JS   = jac_ee_pose(*model_, qN).topRows<2>() * map_.Sq_knot(N);
      const auto & B = *spec_->terminal.ee_box;
      for (int d = 0; d < 2; ++d) {
        rows.emplace_back(JS.row(d).transpose(), B.hi[d] - p[d]);
        rows.emplace_back(-JS.row(d).transpose(), p[d] - B.lo[d]);
      }
    }
    b.collision_end = static_cast<int>(rows.size());

    b.qp.A_in.resize(static_cast<Eigen::Index>(rows.size()), n);
    b.qp.b_in.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      b.qp.A_in.row(static_cast<Eigen::Index>(r)) = rows[r].first.transpose();
      b.qp.b_in[static_cast<Eigen::Index>(r)]     = rows[r].second;
    }

    // Terminal rest: dq_N = 0, ddq_N = 0, last jerk = 0.
    b.qp.A_eq = Mat::Zero(3 * dof, n);
    b.qp.b_eq = Vec::Zero(3 * dof);
    b.qp.A_eq.topRows(dof)          = map_.Sdq_knot(N);
    b.qp.A_eq.middleRows(dof, dof)  = map_.Sddq_knot(N);
    b.qp.b_eq.head(dof)             = -ref.dq.row(N).transpose();
    b.qp.b_eq.segment(dof, dof)     = -ref.ddq.row(N).transpose();
    for (int j = 0; j < dof; ++j) {
      b.qp.A_eq(2 * dof + j, (N - 1) * dof + j) = 1.0;
      b.qp.b_eq[2 * dof + j]                    = -b.u_ref[(N - 1) * dof + j];
    }

    b.qp.lb.resize(n);
    b.qp.ub.resize(n);
    for (int k = 0; k < N; ++k) {
      for (int j = 0; j < dof; ++j) {
        b.qp.lb[k * dof + j] = -L.dddq_max[j] - b.u_ref[k * dof + j];
        b.qp.ub[k * dof + j] = L.dddq_max[j] - b.u_ref[k * dof + j];
      }
    }
    return b;
  }

  /**
   * @brief Real-time iteration: exactly one QP around `ref` (default: `traj_in` itself).
   *
   * If the QP is infeasible, it is retried once with a penalized slack shared by all collision rows.
   * When the linearization reference is itself on the manifold and the full step fails the
   * nonlinear check, the step is halved up to three times. Every intermediate point satisfies the
   * linear rows, because they are convex and hold at the reference.
   */
  ProjectionResult project_rti(const KnotTrajectory & traj_in, const StateVec & x0, const SetAssignment & assign,
    const KnotTrajectory * ref = nullptr) const
  {
    const auto t_start       = std::chrono::steady_clock::now();
    const KnotTrajectory & r = ref ? *ref : traj_in;
    ProjectionResult out;
    out.report.iterations = 1;
    BuiltQp b             = build_qp(r, traj_in, assign, x0);
    QpResult qr           = solve_with_retry(b, out.report);
    if (qr.status == QpStatus::Optimal || (out.report.used_slack && qr.x.size() == b.u_ref.size())) {
      Vec du = qr.x;
      out.traj = rollout_flat(x0, b.u_ref + du, map_.Ts(), traj_in.t0);
      measure(out.traj, assign, x0, out.report);
      if (!out.report.used_slack && cfg_.rti_backtracking && !within_tol(out.report)) {
        ProjectionReport ref_report;
        const KnotTrajectory ref_roll = rollout_flat(x0, b.u_ref, map_.Ts(), traj_in.t0);
        measure(ref_roll, assign, x0, ref_report);
        if (within_tol(ref_report)) {
          for (int h = 0; h < 3 && !within_tol(out.report); ++h) {
            du *= 0.5;
            out.traj = rollout_flat(x0, b.u_ref + du, map_.Ts(), traj_in.t0);
            measure(out.traj, assign, x0, out.report);
          }
        }
      }
      out.report.step_norm = du.size() ? du.cwiseAbs().maxCoeff() : 0.0;
      if (du.isZero(0.0) && starts_at(r, x0)) {
        // The reference is the exact answer; keep it bit-for-bit.
        out.traj = r;
      }
      if (out.report.used_slack && qr.status == QpStatus::Optimal && within_tol(out.report)) {
        out.report.status = ProjectionStatus::Converged;
      } else if (out.report.used_slack) {
        out.report.status = ProjectionStatus::QpInfeasible;
      } else {
        out.report.status = within_tol(out.report) ? ProjectionStatus::Converged : ProjectionStatus::MaxIter;
      }
    } else {
      out.traj          = r;
      out.report.status = qr.status == QpStatus::Infeasible ? ProjectionStatus::QpInfeasible
                                                            : ProjectionStatus::NumericalFailure;
      measure(out.traj, assign, x0, out.report);
    }
    out.report.wall_time = seconds_since(t_start);
    return out;
  }

  /**
   * @brief Fully converged projection by SQP with an L1 merit line search.
   *
   * The iterate starts at traj_in's controls rolled out from x0. Returns the best iterate with
   * status max_iter if it does not converge.
   */
  ProjectionResult project_full(const KnotTrajectory & traj_in, const StateVec & x0, const SetAssignment & assign,
    std::optional<int> max_iter = std::nullopt) const
  {
    const auto t_start = std::chrono::steady_clock::now();
    const int iters    = max_iter.value_or(cfg_.max_sqp_iter);
    ProjectionResult out;
    KnotTrajectory cur = rollout_flat(x0, traj_in.controls(), map_.Ts(), traj_in.t0);
    double nu          = 10.0;
    ProjectionReport cur_rep;
    measure(cur, assign, x0, cur_rep);
    double cur_merit = merit(cur, traj_in, assign, x0, nu);
    out.report.merit_history.push_back(cur_merit);
    bool converged = false;
    int it         = 0;
    double last_step = 0.0;
    for (; it < iters; ++it) {
      BuiltQp b   = build_qp(cur, traj_in, assign, x0);
      QpResult qr = solve_with_retry(b, out.report);
      if (qr.status != QpStatus::Optimal) {
        out.traj          = cur;
        out.report        = finalize(out.report, cur_rep, it + 1, last_step, t_start);
        out.report.status = qr.status == QpStatus::Infeasible ? ProjectionStatus::QpInfeasible
                                                              : ProjectionStatus::NumericalFailure;
        return out;
      }
      const Vec & du = qr.x;
      double mult    = 0.0;
      if (qr.lambda_in.size()) { mult = std::max(mult, qr.lambda_in.cwiseAbs().maxCoeff()); }
      if (qr.y_eq.size()) { mult = std::max(mult, qr.y_eq.cwiseAbs().maxCoeff()); }
      if (qr.lambda_lb.size()) { mult = std::max(mult, qr.lambda_lb.cwiseAbs().maxCoeff()); }
      if (qr.lambda_ub.size()) { mult = std::max(mult, qr.lambda_ub.cwiseAbs().maxCoeff()); }
      if (nu < 1.1 * mult) {
        nu        = 1.1 * mult + 1.0;
        cur_merit = merit(cur, traj_in, assign, x0, nu);
      }
      const double step = du.cwiseAbs().maxCoeff();
      if (step <= cfg_.step_tol) {
        last_step = step;
        converged = within_tol(cur_rep);
        if (converged) { break; }
      }
      // Armijo on the L1 merit; the directional derivative is bounded by grad D . du - nu * viol1.
      const Vec u0      = cur.controls();
      const double viol = violation_l1(cur, assign, x0);
      const double dd   = (b.qp.g).dot(du) - nu * viol;
      double alpha      = 1.0;
      KnotTrajectory trial;
      double trial_merit = 0.0;
      bool accepted      = false;
      for (int ls = 0; ls < 30; ++ls) {
        trial       = rollout_flat(x0, u0 + alpha * du, map_.Ts(), traj_in.t0);
        trial_merit = merit(trial, traj_in, assign, x0, nu);
        if (trial_merit <= cur_merit + 1e-4 * alpha * std::min(dd, 0.0) + 1e-14 * std::abs(cur_merit)) {
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) {
        last_step = 0.0;
        break;
      }
      cur       = trial;
      cur_merit = trial_merit;
      last_step = alpha * step;
      measure(cur, assign, x0, cur_rep);
      out.report.merit_history.push_back(cur_merit);
      if (last_step <= cfg_.step_tol && within_tol(cur_rep)) {
        converged = true;
        ++it;
        break;
      }
    }
    out.traj          = cur;
    out.report        = finalize(out.report, cur_rep, it, last_step, t_start);
    out.report.status = converged ? ProjectionStatus::Converged : ProjectionStatus::MaxIter;
    if (!converged && within_tol(cur_rep) && last_step <= 1e3 * cfg_.step_tol) {
      out.report.status = ProjectionStatus::Converged;
    }
    return out;
  }

  /**
   * @brief Unconstrained least-squares jerk fit to a position/jerk target from x0.
   *
   * Used by the projection-free baselines: it only restores dynamic consistency and ignores every
   * safety row.
   */
  KnotTrajectory fit_unconstrained(const KnotTrajectory & target, const StateVec & x0) const
  {
    check_grid(target);
    const Vec u0 = target.controls();
    const KnotTrajectory ref = rollout_flat(x0, u0, map_.Ts(), target.t0);
    const auto & w = cfg_.weights;
    const Vec g = 2.0 * (w.w_q * map_.Sq().transpose() * (ref.positions() - target.positions()) +
                         w.w_u * (u0 - target.controls()));
    QpProblem p;
    p.H = H_;
    p.g = g;
    const QpResult r = solver_.solve(p, cfg_.qp);
    return rollout_flat(x0, u0 + r.x, map_.Ts(), target.t0);
  }

  /// max(0, eval_h) and max |eval_g|.
  void measure(const KnotTrajectory & tr, const SetAssignment & assign, const StateVec & x0, ProjectionReport & rep) const
  {
    const auto c    = check_manifold(*spec_, *model_, tr, assign, x0, cfg_.tol);
    rep.h_violation = std::max(0.0, c.max_h);
    rep.g_violation = c.max_abs_g;
  }

private:
  void check_grid(const KnotTrajectory & tr) const
  {
    if (tr.N() != map_.N() || tr.dof() != map_.dof() || std::abs(tr.Ts - map_.Ts()) > 1e-12) {
      throw ContractError("projection: trajectory is not on the projector grid");
    }
  }

  static bool starts_at(const KnotTrajectory & tr, const StateVec & x0)
  {
    return tr.q.row(0).transpose() == x0.q && tr.dq.row(0).transpose() == x0.dq &&
           tr.ddq.row(0).transpose() == x0.ddq;
  }

  bool within_tol(const ProjectionReport & r) const { return r.h_violation <= cfg_.tol && r.g_violation <= cfg_.tol; }

  static double seconds_since(std::chrono::steady_clock::time_point t0)
  {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  ProjectionReport finalize(ProjectionReport rep, const ProjectionReport & meas, int it, double step,
    std::chrono::steady_clock::time_point t0) const
  {
    rep.iterations  = it;
    rep.h_violation = meas.h_violation;
    rep.g_violation = meas.g_violation;
    rep.step_norm   = step;
    rep.wall_time   = seconds_since(t0);
    return rep;
  }

  double violation_l1(const KnotTrajectory & tr, const SetAssignment & assign, const StateVec & x0) const
  {
    const Vec h = eval_h(*spec_, *model_, tr, assign);
    const Vec g = eval_g(*spec_, tr, x0);
    return h.cwiseMax(0.0).sum() + g.cwiseAbs().sum();
  }

  double merit(const KnotTrajectory & tr, const KnotTrajectory & target, const SetAssignment & assign,
    const StateVec & x0, double nu) const
  {
    return traj_distance(tr, target, cfg_.weights) + nu * violation_l1(tr, assign, x0);
  }

  /// Solve; on infeasibility retry with one shared (L-infinity) slack on the collision rows.
  QpResult solve_with_retry(const BuiltQp & b, ProjectionReport & rep) const
  {
    QpResult r = solver_.solve(b.qp, cfg_.qp);
    if (r.status != QpStatus::Infeasible || b.collision_end == b.collision_begin) { return r; }
    rep.used_slack = true;
    const int n = static_cast<int>(b.qp.g.size());
    const int m = static_cast<int>(b.qp.A_in.rows());
    QpProblem p;
    p.H                    = Mat::Zero(n + 1, n + 1);
    p.H.topLeftCorner(n, n) = b.qp.H;
    p.H(n, n)              = cfg_.slack_quadratic;
    p.g                    = Vec::Constant(n + 1, cfg_.slack_penalty);
    p.g.head(n)            = b.qp.g;
    p.A_in                 = Mat::Zero(m, n + 1);
    p.A_in.leftCols(n)     = b.qp.A_in;
    p.A_in.col(n).segment(b.collision_begin, b.collision_end - b.collision_begin).setConstant(-1.0);
    p.b_in             = b.qp.b_in;
    p.A_eq             = Mat::Zero(b.qp.A_eq.rows(), n + 1);
    p.A_eq.leftCols(n) = b.qp.A_eq;
    p.b_eq             = b.qp.b_eq;
    p.lb               = Vec::Zero(n + 1);
    p.ub               = Vec::Constant(n + 1, std::numeric_limits<double>::infinity());
    p.lb.head(n)       = b.qp.lb;
    p.ub.head(n)       = b.qp.ub;
    QpSolver slack_solver;
    if (!slack_solver.factorize(p.H)) {
      r.status = QpStatus::NumericalFailure;
      return r;
    }
    QpResult rs = slack_solver.solve(p, cfg_.qp);
    if (rs.status != QpStatus::Optimal) { return rs; }
    QpResult out = rs;
    out.x        = rs.x.head(n);
    // A positive slack means the linearized problem is truly infeasible.
    out.status = rs.x[n] <= cfg_.tol ? QpStatus::Optimal : QpStatus::Infeasible;
    return out;
  }

  const SafetySpec * spec_;
  const RobotModel * model_;
  ProjectionConfig cfg_;
  RolloutMap map_;
  Mat H_;
  QpSolver solver_;
};

}  // namespace sfmpc

#endif  // SFMPC__PROJECTION_HPP_
