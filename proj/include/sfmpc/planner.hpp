#ifndef SFMPC__PLANNER_HPP_
#define SFMPC__PLANNER_HPP_

/**
 * @file
 * @brief Receding-horizon planner: guided flow steps, each followed by a safety projection, with
 * fallback to the last safe iterate.
 *
 * One replan starts from the previous plan shifted by one interval. For s = 0, ds, ..., 1 - ds:
 *
 *   candidate.q = q_s.q + ds * v(q_s, s | O) - ds * gain * w(progress) * grad J_guide(q_s)
 *   q_{s+ds}    = P(candidate)
 *
 * If any projection fails (or a fault is injected), the loop stops and q_s is returned. Because the
 * starting point is itself safe, every returned plan is safe.
 */

#include "sfmpc/bc.hpp"
#include "sfmpc/flow.hpp"
#include "sfmpc/scenario.hpp"

#include <chrono>
#include <deque>

namespace sfmpc {

enum class ProjectionMode { Rti, Full };

/// How the planner turns model output into a plan.
enum class PlannerVariant
{
  Safe,         ///< flow + projection + fallback
  Unprojected,  ///< flow, dynamic fit only
  BehaviorCloning,
  AllFallback,  ///< every projection reported as failed
};

inline const char * to_string(ProjectionMode m) { return m == ProjectionMode::Rti ? "rti" : "full"; }

struct PlannerConfig
{
  int N_s{7};
  int N{20};
  double Ts{0.1};
  double alpha{5.0};
  double beta{0.8};
  /// Use exp(+alpha (progress - beta)) so the weight grows near the goal.
  bool mirrored_guidance{true};
  bool guidance{true};
  double guide_gain{0.15};
  double guide_smoothing{0.1};  ///< m and rad
  ProjectionMode mode{ProjectionMode::Rti};
  std::optional<int> full_max_iter{};
  double budget{0.1};  ///< s per replan, measured only
  double fault_probability{0.0};
  std::optional<int> fail_at_step{};  ///< deterministic projection failure at this flow step
  bool record_iterates{false};
  PlannerVariant variant{PlannerVariant::Safe};
  double manifold_tol{1e-6};
  ProjectionConfig projection{};

  void validate() const
  {
    require(N_s >= 1, "PlannerConfig: N_s must be >= 1");
    require(N >= 2 && Ts > 0.0, "PlannerConfig: invalid grid");
    require(budget > 0.0, "PlannerConfig: budget must be positive");
    require(fault_probability >= 0.0 && fault_probability <= 1.0, "PlannerConfig: fault probability outside [0, 1]");
  }
};

// ---------------------------------------------------------------------------------------------
// Guidance

namespace detail {

/// |x| for delta = 0, else sqrt(x^2 + delta^2) - delta; returns value and derivative factor d/dx = f * x.
inline std::pair<double, double> smooth_abs(double x, double delta)
{
  if (delta <= 0.0) { return {std::abs(x), x != 0.0 ? 1.0 / std::abs(x) : 0.0}; }
  const double r = std::sqrt(x * x + delta * delta);
  return {r - delta, 1.0 / r};
}

}  // namespace detail

/**
 * @brief Sum over knots 1..N of the end-effector pose distance to the goal.
 *
 * With smoothing > 0 each position and angle term |x| becomes sqrt(x^2 + delta^2) - delta, which
 * keeps the gradient continuous at the goal.
 */
inline double guidance_cost(const RobotModel & model, const KnotTrajectory & tr, const Pose2 & goal, double smoothing = 0.0)
{
  double J = 0.0;
  for (int k = 1; k <= tr.N(); ++k) {
    const Pose2 p = fk_ee(model, tr.q.row(k).transpose());
    J += detail::smooth_abs((p.position - goal.position).norm(), smoothing).first;
    J += detail::smooth_abs(wrap_angle(p.orientation - goal.orientation), smoothing).first;
  }
  return J;
}

/// Gradient of guidance_cost with respect to the position knots; row 0 is zero.
inline RowMat guidance_gradient(const RobotModel & model, const KnotTrajectory & tr, const Pose2 & goal,
  double smoothing = 0.0)
{
  RowMat G = RowMat::Zero(tr.N() + 1, tr.dof());
  for (int k = 1; k <= tr.N(); ++k) {
    const Vec q    = tr.q.row(k).transpose();
    const Pose2 p  = fk_ee(model, q);
    const Mat3X J  = jac_ee_pose(model, q);
    const Vec2 d   = p.position - goal.position;
    const double a = wrap_angle(p.orientation - goal.orientation);
    const double fp = detail::smooth_abs(d.norm(), smoothing).second;
    const double fa = detail::smooth_abs(a, smoothing).second;
    const Vec g     = J.topRows<2>().transpose() * (fp * d) + (fa * a) * J.row(2).transpose();
    G.row(k)        = g.transpose();
  }
  return G;
}

inline double guidance_progress(const RobotModel & model, const Vec & q_now, const Pose2 & p0, const Pose2 & pf)
{
  const double den = (p0.position - pf.position).norm();
  if (den <= 0.0) { throw ContractError("guidance_weight: start and goal positions coincide"); }
  return (fk_ee(model, q_now).position - p0.position).norm() / den;
}

/// exp(-alpha (progress - beta)).
inline double guidance_weight(const RobotModel & model, const Vec & q_now, const Pose2 & p0, const Pose2 & pf,
  double alpha, double beta)
{
  return std::exp(-alpha * (guidance_progress(model, q_now, p0, pf) - beta));
}

/// The weight the planner applies. Progress is capped at 1, which is also used when start and goal coincide.
inline double planner_guidance_weight(const PlannerConfig & cfg, const RobotModel & model, const Vec & q_now,
  const Pose2 & p0, const Pose2 & pf)
{
  if (!cfg.guidance) { return 0.0; }
  const double den      = (p0.position - pf.position).norm();
  const double progress = den > 1e-9 ? std::min(1.0, guidance_progress(model, q_now, p0, pf)) : 1.0;
  const double sign     = cfg.mirrored_guidance ? 1.0 : -1.0;
  return std::exp(sign * cfg.alpha * (progress - cfg.beta));
}

// ---------------------------------------------------------------------------------------------
// Observations

/// Recent joint positions, newest last; padded with the oldest entry.
class JointHistory
{
public:
  explicit JointHistory(int H = 10) : H_(H) { require(H >= 1, "JointHistory: H must be >= 1"); }

  void push(const Vec & q)
  {
    buf_.push_back(q);
    while (static_cast<int>(buf_.size()) > H_) { buf_.pop_front(); }
  }

  std::vector<Vec> padded() const
  {
    require(!buf_.empty(), "JointHistory: empty");
    std::vector<Vec> out(static_cast<std::size_t>(H_ - static_cast<int>(buf_.size())), buf_.front());
    out.insert(out.end(), buf_.begin(), buf_.end());
    return out;
  }

  int capacity() const { return H_; }

private:
  int H_;
  std::deque<Vec> buf_;
};

inline Observation observe(const RobotModel & model, const Vec & q_now, const JointHistory & history, const Pose2 & goal)
{
  Observation o;
  o.q_history = history.padded();
  o.keypoints = fk_keypoints(model, q_now);
  o.ee        = fk_ee(model, q_now);
  o.goal      = goal;
  return o;
}

inline ObservationCodec default_codec(const RobotModel & model, const Limits & lim, int H = 10)
{
  ObservationCodec c;
  c.dof           = model.dof();
  c.history       = H;
  c.num_keypoints = model.num_keypoints();
  c.q_scale       = lim.q_min.cwiseAbs().cwiseMax(lim.q_max.cwiseAbs());
  c.reach         = model.reach();
  c.base          = model.base();
  return c;
}

// ---------------------------------------------------------------------------------------------
// One replan

struct PlannerModels
{
  const FlowModel * flow{nullptr};
  const BCModel * bc{nullptr};
};

struct PlanStepResult
{
  KnotTrajectory traj;
  SetAssignment assignment;  ///< assignment under which traj was certified (safe variant)
  std::vector<ProjectionReport> reports;
  bool fallback_taken{false};
  int fail_step{-1};
  int steps_completed{0};
  double wall_time{0.0};
  std::vector<KnotTrajectory> iterates;  ///< q_s after each completed step, input first (if recorded)
};

/// Drops knot 0 and repeats the terminal column, matching shift().
inline SetAssignment shift_assignment(const SetAssignment & a)
{
  SetAssignment out = a;
  for (auto & row : out.cells) {
    row.erase(row.begin());
    SetAssignment::Cell last = row.back();
    last.secondary           = -1;
    row.push_back(last);
  }
  return out;
}

namespace detail {

inline RowMat flow_velocity(const PlannerModels & models, const KnotTrajectory & q_s, double s, const Vec & obs_enc)
{
  if (!models.flow) { return RowMat::Zero(q_s.q.rows(), q_s.q.cols()); }
  return flow_forward(*models.flow, q_s.q, s, obs_enc);
}

}  // namespace detail

/**
 * @brief One replan from the shifted previous plan.
 *
 * `prev` must start at x0 and, for the safe variant, lie on the safety manifold under `prev_assign`.
 * `obs` is the raw observation; each model encodes it with its own codec.
 */
inline PlanStepResult plan_step(const Projector & P, const StateVec & x0, const KnotTrajectory & prev,
  const SetAssignment & prev_assign, const Observation & obs, const Pose2 & goal, const Pose2 & p0,
  const PlannerModels & models, const PlannerConfig & cfg, std::mt19937_64 & fault_rng)
{
  const auto t_start = std::chrono::steady_clock::now();
  const RobotModel & model = P.model();
  const SafetySpec & spec  = P.spec();
  PlanStepResult out;
  out.traj       = prev;
  out.assignment = prev_assign;

  const bool safe = cfg.variant == PlannerVariant::Safe || cfg.variant == PlannerVariant::AllFallback;
  if (safe) {
    const auto c = check_manifold(spec, model, prev, prev_assign, x0, cfg.manifold_tol);
    if (!c.on_manifold) {
      throw ContractError("plan_step: initial trajectory is not on the safety manifold (max_h=" + std::to_string(c.max_h) +
                          ", max|g|=" + std::to_string(c.max_abs_g) + ")");
    }
  }
  auto finish = [&]() {
    out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return out;
  };

  if (cfg.variant == PlannerVariant::BehaviorCloning) {
    require(models.bc != nullptr, "plan_step: behavior cloning needs a BC model");
    KnotTrajectory target = prev;
    target.q              = models.bc->predict_positions(prev, x0, models.bc->codec.encode(obs));
    out.traj              = P.fit_unconstrained(target, x0);
    out.steps_completed   = 1;
    return finish();
  }

  const Vec obs_enc = models.flow ? models.flow->codec.encode(obs) : Vec();
  const double ds   = 1.0 / cfg.N_s;
  const double w    = planner_guidance_weight(cfg, model, x0.q, p0, goal);
  std::bernoulli_distribution fault(cfg.fault_probability);

  KnotTrajectory q_s = prev;
  if (cfg.record_iterates) { out.iterates.push_back(q_s); }
  bool candidate_sets = true;
  for (int i = 0; i < cfg.N_s; ++i) {
    const double s   = i * ds;
    KnotTrajectory c = q_s;
    c.q              = q_s.q + ds * detail::flow_velocity(models, q_s, s, obs_enc);
    if (w != 0.0) { c.q -= (ds * cfg.guide_gain * w) * guidance_gradient(model, q_s, goal, cfg.guide_smoothing); }

    if (cfg.variant == PlannerVariant::Unprojected) {
      q_s = P.fit_unconstrained(c, x0);
      ++out.steps_completed;
      if (cfg.record_iterates) { out.iterates.push_back(q_s); }
      continue;
    }

    bool failed = cfg.variant == PlannerVariant::AllFallback || cfg.fail_at_step == i ||
                  (cfg.fault_probability > 0.0 && fault(fault_rng));
    ProjectionResult r;
    SetAssignment asg;
    if (!failed) {
      auto attempt = [&](const SetAssignment & a) {
        r = cfg.mode == ProjectionMode::Rti ? P.project_rti(c, x0, a, &q_s) : P.project_full(c, x0, a, cfg.full_max_iter);
        out.reports.push_back(r.report);
        return r.report.ok() && check_manifold(spec, model, r.traj, a, x0, cfg.manifold_tol).on_manifold &&
               terminal_contains(spec, model, r.traj).contains;
      };
      // Sets are taken from the candidate so the plan can move into a new region. If that target is
      // out of reach, the sets that certify q_s always give a feasible problem, and the rest of this
      // replan keeps using them so each step costs one projection.
      asg     = candidate_sets ? assign_sets(spec, model, c, false) : out.assignment;
      bool ok = attempt(asg);
      if (!ok && !(asg == out.assignment)) {
        candidate_sets = false;
        asg            = out.assignment;
        ok             = attempt(asg);
      }
      failed = !ok;
    }
    if (failed) {
      out.fallback_taken = true;
      out.fail_step      = i;
      break;
    }
    q_s            = std::move(r.traj);
    out.assignment = std::move(asg);
    ++out.steps_completed;
    if (cfg.record_iterates) { out.iterates.push_back(q_s); }
  }
  out.traj = std::move(q_s);
  return finish();
}

// ---------------------------------------------------------------------------------------------
// Closed loop

struct ReplanRecord
{
  double t{0.0};
  double wall_time{0.0};
  bool fallback{false};
  int fail_step{-1};
  int steps_completed{0};
  double max_h{0.0};        ///< of the plan, under its certifying assignment (safe variants)
  double max_g{0.0};
  double term_dq{0.0};
  double term_ddq{0.0};
  double term_jerk{0.0};
  bool terminal_ok{false};
  double plan_speed_ratio{0.0};  ///< max |dq / dq_max| over the plan's knots
  int projection_iterations{0};
  Pose2 goal;
};

struct EpisodeTrace
{
  std::string method;
  std::uint64_t seed{0};
  Scenario scenario;
  std::string mode;
  std::vector<ReplanRecord> replans;
  KnotTrajectory executed;  ///< knots at every executed replan instant, t0 = 0
  bool success{false};
  std::string end_reason;   ///< success | timeout
  double final_time{0.0};
};

/// Success at time t: all goal events have fired, pose within tolerance, at rest.
inline bool task_success(const Scenario & sc, double t, const StateVec & x)
{
  for (const auto & e : sc.events) {
    if (e.time > t + 1e-12) { return false; }
  }
  const Pose2 g  = sc.goal_at(t);
  const Pose2 ee = fk_ee(sc.robot, x.q);
  return (ee.position - g.position).norm() <= sc.success.pos_tol &&
         std::abs(wrap_angle(ee.orientation - g.orientation)) <= sc.success.ang_tol && x.dq.norm() <= sc.success.rest_tol;
}

inline KnotTrajectory make_executed_path(const std::vector<StateVec> & states, const std::vector<Vec> & jerks, double Ts)
{
  const int dof = states.front().dof();
  const int K   = static_cast<int>(states.size());
  KnotTrajectory tr;
  tr.t0   = 0.0;
  tr.Ts   = Ts;
  tr.q    = RowMat(K, dof);
  tr.dq   = RowMat(K, dof);
  tr.ddq  = RowMat(K, dof);
  tr.jerk = RowMat(K - 1, dof);
  for (int k = 0; k < K; ++k) {
    tr.q.row(k)   = states[k].q.transpose();
    tr.dq.row(k)  = states[k].dq.transpose();
    tr.ddq.row(k) = states[k].ddq.transpose();
    if (k + 1 < K) { tr.jerk.row(k) = jerks[k].transpose(); }
  }
  return tr;
}

/// Called after every replan with the plan-step result and the assignment that certifies its trajectory.
using PlanObserver = std::function<void(const PlanStepResult &, const SetAssignment &)>;

inline EpisodeTrace run_closed_loop(const Scenario & sc, const PlannerModels & models, const PlannerConfig & cfg,
  std::uint64_t seed, const std::string & method = "safeflow", const PlanObserver & on_plan = {})
{
  cfg.validate();
  EpisodeTrace tr;
  tr.method   = method;
  tr.seed     = seed;
  tr.scenario = sc;
  tr.mode     = to_string(cfg.mode);

  const Projector P(sc.safety, sc.robot, cfg.N, cfg.Ts, cfg.projection);
  std::mt19937_64 fault_rng(seed * 0x9E3779B97F4A7C15ULL + 17);
  const int H = models.flow ? models.flow->codec.history : (models.bc ? models.bc->codec.history : 10);
  JointHistory history(H);

  StateVec x = sc.start;
  x.dddq     = Vec::Zero(x.dof());
  KnotTrajectory plan   = rest_trajectory(x.q, cfg.N, cfg.Ts, 0.0);
  SetAssignment plan_as = assign_sets(sc.safety, sc.robot, plan, true);
  std::vector<StateVec> states{x};
  std::vector<Vec> jerks;
  Pose2 goal = sc.goal_at(0.0);
  Pose2 p0   = fk_ee(sc.robot, x.q);
  history.push(x.q);

  const int max_steps = static_cast<int>(std::llround(sc.timeout / cfg.Ts));
  int k               = 0;
  for (;; ++k) {
    const double t = k * cfg.Ts;
    if (task_success(sc, t, x)) {
      tr.success    = true;
      tr.end_reason = "success";
      break;
    }
    if (k >= max_steps) {
      tr.end_reason = "timeout";
      break;
    }
    const Pose2 g_now = sc.goal_at(t);
    if (pose_distance(g_now, goal) > 0.0) {
      goal = g_now;
      p0   = fk_ee(sc.robot, x.q);
    }
    if (k > 0) {
      plan    = shift(plan);
      plan_as = shift_assignment(plan_as);
    }
    const Observation obs = observe(sc.robot, x.q, history, goal);
    PlanStepResult r      = plan_step(P, x, plan, plan_as, obs, goal, p0, models, cfg, fault_rng);

    ReplanRecord rec;
    rec.t               = t;
    rec.wall_time       = r.wall_time;
    rec.fallback        = r.fallback_taken;
    rec.fail_step       = r.fail_step;
    rec.steps_completed = r.steps_completed;
    rec.goal            = goal;
    for (const auto & rep : r.reports) { rec.projection_iterations += rep.iterations; }
    const bool safe_variant = cfg.variant == PlannerVariant::Safe || cfg.variant == PlannerVariant::AllFallback;
    const SetAssignment cert = safe_variant ? r.assignment : assign_sets(sc.safety, sc.robot, r.traj, false);
    const auto mc            = check_manifold(sc.safety, sc.robot, r.traj, cert, x, cfg.manifold_tol);
    rec.max_h                = mc.max_h;
    rec.max_g                = mc.max_abs_g;
    const int N              = r.traj.N();
    rec.term_dq              = r.traj.dq.row(N).norm();
    rec.term_ddq             = r.traj.ddq.row(N).norm();
    rec.term_jerk            = r.traj.jerk.row(N - 1).norm();
    rec.terminal_ok          = terminal_contains(sc.safety, sc.robot, r.traj).contains;
    rec.plan_speed_ratio     = (r.traj.dq.array().rowwise() / sc.safety.limits.dq_max.transpose().array()).abs().maxCoeff();
    tr.replans.push_back(rec);
    if (on_plan) { on_plan(r, cert); }

    plan    = std::move(r.traj);
    plan_as = std::move(r.assignment);
    jerks.push_back(plan.jerk.row(0).transpose());
    x      = plan.state(1);
    x.dddq = Vec::Zero(x.dof());
    states.push_back(x);
    history.push(x.q);
  }
  tr.final_time = k * cfg.Ts;
  tr.executed   = make_executed_path(states, jerks, cfg.Ts);
  return tr;
}

// ---------------------------------------------------------------------------------------------
// Trace serialization

inline nlohmann::json trace_to_json(const EpisodeTrace & tr)
{
  using nlohmann::json;
  json reps = json::array();
  for (const auto & r : tr.replans) {
    reps.push_back({{"t", r.t}, {"wall_time", r.wall_time}, {"fallback", r.fallback}, {"fail_step", r.fail_step},
      {"steps_completed", r.steps_completed}, {"max_h", r.max_h}, {"max_g", r.max_g}, {"term_dq", r.term_dq},
      {"term_ddq", r.term_ddq}, {"term_jerk", r.term_jerk}, {"terminal_ok", r.terminal_ok},
      {"plan_speed_ratio", r.plan_speed_ratio}, {"projection_iterations", r.projection_iterations},
      {"goal", detail::pose_to_json(r.goal)}});
  }
  auto rows = [](const RowMat & m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) { row.push_back(m(i, j)); }
      a.push_back(row);
    }
    return a;
  };
  return {{"method", tr.method}, {"seed", tr.seed}, {"mode", tr.mode}, {"scenario", scenario_to_json(tr.scenario)},
    {"success", tr.success}, {"end_reason", tr.end_reason}, {"final_time", tr.final_time}, {"replans", reps},
    {"executed",
      {{"Ts", tr.executed.Ts}, {"q", rows(tr.executed.q)}, {"dq", rows(tr.executed.dq)}, {"ddq", rows(tr.executed.ddq)},
        {"jerk", rows(tr.executed.jerk)}}}};
}

inline EpisodeTrace trace_from_json(const nlohmann::json & j)
{
  EpisodeTrace tr;
  tr.method     = j.at("method");
  tr.seed       = j.at("seed");
  tr.mode       = j.at("mode");
  tr.scenario   = scenario_from_json(j.at("scenario"), false);
  tr.success    = j.at("success");
  tr.end_reason = j.at("end_reason");
  tr.final_time = j.at("final_time");
  for (const auto & r : j.at("replans")) {
    ReplanRecord rec;
    rec.t                     = r.at("t");
    rec.wall_time             = r.at("wall_time");
    rec.fallback              = r.at("fallback");
    rec.fail_step             = r.at("fail_step");
    rec.steps_completed       = r.at("steps_completed");
    rec.max_h                 = r.at("max_h");
    rec.max_g                 = r.at("max_g");
    rec.term_dq               = r.at("term_dq");
    rec.term_ddq              = r.at("term_ddq");
    rec.term_jerk             = r.at("term_jerk");
    rec.terminal_ok           = r.at("terminal_ok");
    rec.plan_speed_ratio      = r.at("plan_speed_ratio");
    rec.projection_iterations = r.at("projection_iterations");
    rec.goal                  = detail::json_to_pose(r.at("goal"));
    tr.replans.push_back(rec);
  }
  const auto & e = j.at("executed");
  auto mat       = [](const nlohmann::json & a, Eigen::Index cols) {
    RowMat m(static_cast<Eigen::Index>(a.size()), cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index c = 0; c < cols; ++c) { m(i, c) = a.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(c)).get<double>(); }
    }
    return m;
  };
  const Eigen::Index dof = tr.scenario.robot.dof();
  tr.executed.t0         = 0.0;
  tr.executed.Ts         = e.at("Ts");
  tr.executed.q          = mat(e.at("q"), dof);
  tr.executed.dq         = mat(e.at("dq"), dof);
  tr.executed.ddq        = mat(e.at("ddq"), dof);
  tr.executed.jerk       = mat(e.at("jerk"), dof);
  return tr;
}

}  // namespace sfmpc

#endif  // SFMPC__PLANNER_HPP_
