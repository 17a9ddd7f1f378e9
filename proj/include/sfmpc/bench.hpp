#ifndef SFMPC__BENCH_HPP_
#define SFMPC__BENCH_HPP_

/**
 * @file
 * @brief Experiment harness: method matrix, per-episode metrics, aggregate tables and the
 * trace-based verifier.
 *
 * Output directory layout:
 *   metrics.csv / metrics.json   aggregate rows, fully deterministic under fixed seeds
 *   timing.csv                   planning-time statistics (wall clock, not deterministic)
 *   episodes.json                per-episode metrics and the trace file of each episode
 *   traces/<episode>.json|.csv   episode traces and executed trajectories
 *   series/<method>__<family>.csv  per-replan speed ratios and terminal residuals
 */

#include "sfmpc/data.hpp"

#include <cstdio>
#include <set>

namespace sfmpc {

// ---------------------------------------------------------------------------------------------
// Methods and models

struct MethodSpec
{
  std::string name;
  PlannerVariant variant{PlannerVariant::Safe};
  ProjectionMode mode{ProjectionMode::Rti};
  std::string model;  ///< finetuned | stage1 | bc | none
  bool guidance{true};
};

inline std::vector<MethodSpec> known_methods()
{
  return {
    {"safeflow", PlannerVariant::Safe, ProjectionMode::Rti, "finetuned", true},
    {"no_finetune", PlannerVariant::Safe, ProjectionMode::Rti, "stage1", true},
    {"fm", PlannerVariant::Unprojected, ProjectionMode::Rti, "stage1", true},
    {"bc", PlannerVariant::BehaviorCloning, ProjectionMode::Rti, "bc", false},
    {"safeflow_full", PlannerVariant::Safe, ProjectionMode::Full, "finetuned", true},
    {"all_fallback", PlannerVariant::AllFallback, ProjectionMode::Rti, "none", false},
  };
}

inline MethodSpec method_by_name(const std::string & name)
{
  for (const auto & m : known_methods()) {
    if (m.name == name) { return m; }
  }
  throw ValidationError("method", name, "unknown method");
}

/// Models of one training seed.
struct ModelBundle
{
  std::uint64_t train_seed{0};
  std::optional<FlowModel> finetuned;
  std::optional<FlowModel> stage1;
  std::optional<BCModel> bc;

  PlannerModels for_method(const MethodSpec & m) const
  {
    PlannerModels pm;
    if (m.model == "finetuned") {
      if (!finetuned) { throw ValidationError("models", m.name, "needs a finetuned flow model"); }
      pm.flow = &*finetuned;
    } else if (m.model == "stage1") {
      if (!stage1) { throw ValidationError("models", m.name, "needs a stage-1 flow model"); }
      pm.flow = &*stage1;
    } else if (m.model == "bc") {
      if (!bc) { throw ValidationError("models", m.name, "needs a behavior-cloning model"); }
      pm.bc = &*bc;
    }
    return pm;
  }
};

// ---------------------------------------------------------------------------------------------
// Episode metrics

struct EpisodeMetrics
{
  std::string method;
  std::string family;
  int scenario_index{0};
  std::uint64_t scenario_seed{0};
  std::uint64_t train_seed{0};
  bool success{false};  ///< reached the final goal and never penetrated an obstacle
  double T_traj{0.0};   ///< s, time of success (or the timeout)
  double c_obs{0.0};    ///< m, deepest penetration along the executed path
  double max_h{0.0};    ///< worst constraint value over all plans
  double max_speed{0.0};       ///< max |dq / dq_max| over the executed knots
  double max_plan_speed{0.0};  ///< same over every planned knot
  double max_term_dq{0.0}, max_term_ddq{0.0}, max_term_jerk{0.0};
  int replans{0};
  int fallbacks{0};
  double d_demo{std::numeric_limits<double>::quiet_NaN()};
  std::vector<double> wall_ms;
};

/// Mean end-effector distance to the demonstration at common knot times.
inline double demo_distance(const RobotModel & model, const KnotTrajectory & executed, const KnotTrajectory & demo)
{
  const int K = std::min(executed.N(), demo.N());
  double acc  = 0.0;
  for (int k = 0; k <= K; ++k) {
    acc += (fk_ee(model, executed.q.row(k).transpose()).position - fk_ee(model, demo.q.row(k).transpose()).position).norm();
  }
  return acc / (K + 1);
}

inline EpisodeMetrics episode_metrics(const EpisodeTrace & tr, const std::string & family, int index, std::uint64_t train_seed,
  const KnotTrajectory * demo = nullptr)
{
  EpisodeMetrics e;
  e.method         = tr.method;
  e.family         = family;
  e.scenario_index = index;
  e.scenario_seed  = tr.scenario.seed;
  e.train_seed     = train_seed;
  e.c_obs          = collision_depth(tr.scenario.robot, tr.executed, tr.scenario.obstacles);
  e.success        = tr.success && e.c_obs == 0.0;
  e.T_traj         = tr.final_time;
  const Vec & vmax = tr.scenario.safety.limits.dq_max;
  e.max_speed      = (tr.executed.dq.array().rowwise() / vmax.transpose().array()).abs().maxCoeff();
  e.max_h          = -std::numeric_limits<double>::infinity();
  for (const auto & r : tr.replans) {
    e.max_h          = std::max(e.max_h, r.max_h);
    e.max_plan_speed = std::max(e.max_plan_speed, r.plan_speed_ratio);
    e.max_term_dq    = std::max(e.max_term_dq, r.term_dq);
    e.max_term_ddq   = std::max(e.max_term_ddq, r.term_ddq);
    e.max_term_jerk  = std::max(e.max_term_jerk, r.term_jerk);
    e.fallbacks += r.fallback ? 1 : 0;
    e.wall_ms.push_back(1e3 * r.wall_time);
  }
  if (tr.replans.empty()) { e.max_h = 0.0; }
  e.replans = static_cast<int>(tr.replans.size());
  if (demo) { e.d_demo = demo_distance(tr.scenario.robot, tr.executed, *demo); }
  return e;
}

inline nlohmann::json episode_to_json(const EpisodeMetrics & e)
{
  auto num = [](double v) -> nlohmann::json { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"method", e.method}, {"family", e.family}, {"scenario_index", e.scenario_index}, {"scenario_seed", e.scenario_seed},
    {"train_seed", e.train_seed}, {"success", e.success}, {"T_traj", e.T_traj}, {"c_obs", e.c_obs}, {"max_h", e.max_h},
    {"max_speed", e.max_speed}, {"max_plan_speed", e.max_plan_speed}, {"max_term_dq", e.max_term_dq},
    {"max_term_ddq", e.max_term_ddq}, {"max_term_jerk", e.max_term_jerk}, {"replans", e.replans}, {"fallbacks", e.fallbacks},
    {"d_demo", num(e.d_demo)}};
}

// ---------------------------------------------------------------------------------------------
// Aggregation

struct MetricsRow
{
  std::string method;
  std::string family;
  int episodes{0};
  double r_success{0.0};
  double T_traj{std::numeric_limits<double>::quiet_NaN()};  ///< mean over successful episodes
  double T_plan_mean{0.0};  ///< ms
  double T_plan_std{0.0};   ///< ms
  double c_obs{0.0};        ///< max
  double mean_c_obs{0.0};
  double max_h{0.0};
  double max_speed{0.0};
  double max_term_dq{0.0}, max_term_ddq{0.0}, max_term_jerk{0.0};
  double fallback_rate{0.0};
  double d_demo{std::numeric_limits<double>::quiet_NaN()};

  double T_plan_rel_std() const { return T_plan_mean > 0.0 ? T_plan_std / T_plan_mean : 0.0; }
};

/// Rows per (method, family) in first-appearance order.
inline std::vector<MetricsRow> aggregate(const std::vector<EpisodeMetrics> & eps)
{
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto & e : eps) {
    const auto k = std::make_pair(e.method, e.family);
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) { keys.push_back(k); }
  }
  std::vector<MetricsRow> rows;
  for (const auto & [method, family] : keys) {
    MetricsRow r;
    r.method = method;
    r.family = family;
    int succ = 0, reps = 0, fbs = 0, demos = 0;
    double t_acc = 0.0, d_acc = 0.0;
    std::vector<double> walls;
    for (const auto & e : eps) {
      if (e.method != method || e.family != family) { continue; }
      ++r.episodes;
      if (e.success) {
        ++succ;
        t_acc += e.T_traj;
      }
      r.c_obs = std::max(r.c_obs, e.c_obs);
      r.mean_c_obs += e.c_obs;
      r.max_h         = r.episodes == 1 ? e.max_h : std::max(r.max_h, e.max_h);
      r.max_speed     = std::max(r.max_speed, e.max_speed);
      r.max_term_dq   = std::max(r.max_term_dq, e.max_term_dq);
      r.max_term_ddq  = std::max(r.max_term_ddq, e.max_term_ddq);
      r.max_term_jerk = std::max(r.max_term_jerk, e.max_term_jerk);
      reps += e.replans;
      fbs += e.fallbacks;
      walls.insert(walls.end(), e.wall_ms.begin(), e.wall_ms.end());
      if (std::isfinite(e.d_demo)) {
        ++demos;
        d_acc += e.d_demo;
      }
    }
    r.r_success     = static_cast<double>(succ) / r.episodes;
    r.mean_c_obs    = r.mean_c_obs / r.episodes;
    r.T_traj        = succ ? t_acc / succ : std::numeric_limits<double>::quiet_NaN();
    r.fallback_rate = reps ? static_cast<double>(fbs) / reps : 0.0;
    if (demos) { r.d_demo = d_acc / demos; }
    if (!walls.empty()) {
      double m = 0.0;
      for (double w : walls) { m += w; }
      m /= static_cast<double>(walls.size());
      double v = 0.0;
      for (double w : walls) { v += (w - m) * (w - m); }
      r.T_plan_mean = m;
      r.T_plan_std  = std::sqrt(v / static_cast<double>(walls.size()));
    }
    rows.push_back(r);
  }
  return rows;
}

namespace detail {

inline std::string fmt(double v)
{
  if (!std::isfinite(v)) { return "nan"; }
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// Deterministic columns only; planning times go to timing_csv.
inline std::string metrics_csv(const std::vector<MetricsRow> & rows)
{
  std::ostringstream os;
  os << "method,family,episodes,r_success,T_traj,c_obs,mean_c_obs,max_h,max_speed,max_term_dq,max_term_ddq,max_term_jerk,"
        "fallback_rate,d_demo\n";
  for (const auto & r : rows) {
    os << r.method << ',' << r.family << ',' << r.episodes << ',' << detail::fmt(r.r_success) << ',' << detail::fmt(r.T_traj)
       << ',' << detail::fmt(r.c_obs) << ',' << detail::fmt(r.mean_c_obs) << ',' << detail::fmt(r.max_h) << ','
       << detail::fmt(r.max_speed) << ',' << detail::fmt(r.max_term_dq) << ',' << detail::fmt(r.max_term_ddq) << ','
       << detail::fmt(r.max_term_jerk) << ',' << detail::fmt(r.fallback_rate) << ',' << detail::fmt(r.d_demo) << '\n';
  }
  return os.str();
}

inline std::string timing_csv(const std::vector<MetricsRow> & rows)
{
  std::ostringstream os;
  os << "method,family,T_plan_mean_ms,T_plan_std_ms,T_plan_rel_std\n";
  for (const auto & r : rows) {
    os << r.method << ',' << r.family << ',' << detail::fmt(r.T_plan_mean) << ',' << detail::fmt(r.T_plan_std) << ','
       << detail::fmt(r.T_plan_rel_std()) << '\n';
  }
  return os.str();
}

inline nlohmann::json metrics_json(const std::vector<MetricsRow> & rows)
{
  auto num = [](double v) -> nlohmann::json { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json out = nlohmann::json::array();
  for (const auto & r : rows) {
    out.push_back({{"method", r.method}, {"family", r.family}, {"episodes", r.episodes}, {"r_success", r.r_success},
      {"T_traj", num(r.T_traj)}, {"c_obs", r.c_obs}, {"mean_c_obs", r.mean_c_obs}, {"max_h", r.max_h},
      {"max_speed", r.max_speed}, {"max_term_dq", r.max_term_dq}, {"max_term_ddq", r.max_term_ddq},
      {"max_term_jerk", r.max_term_jerk}, {"fallback_rate", r.fallback_rate}, {"d_demo", num(r.d_demo)}});
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Experiments

struct ExperimentSpec
{
  std::vector<std::string> families{"narrow_passage", "unobstructed", "dynamic_goal"};
  int scenarios_per_family{10};
  std::uint64_t scenario_seed{1};  ///< eval-split seed base, shared with the eval demos
  std::vector<MethodSpec> methods;
  PlannerConfig planner{};
  FamilyOptions family_options{};
  std::optional<double> timeout{};
  bool write_traces{true};
};

struct ExperimentResult
{
  std::vector<EpisodeMetrics> episodes;
  std::vector<MetricsRow> rows;
  std::vector<EpisodeTrace> traces;  ///< kept only when requested
};

inline std::vector<Scenario> experiment_scenarios(const ExperimentSpec & spec, const std::string & family)
{
  std::vector<Scenario> out;
  for (int i = 0; i < spec.scenarios_per_family; ++i) {
    Scenario s = make_scenario(family, demo_scenario_seed(spec.scenario_seed, i, true), spec.family_options);
    if (spec.timeout) { s.timeout = *spec.timeout; }
    out.push_back(std::move(s));
  }
  return out;
}

inline PlannerConfig method_config(const PlannerConfig & base, const MethodSpec & m)
{
  PlannerConfig c = base;
  c.variant       = m.variant;
  c.mode          = m.mode;
  c.guidance      = base.guidance && m.guidance;
  return c;
}

namespace detail {

inline std::string episode_stem(const EpisodeMetrics & e)
{
  return e.method + "__" + e.family + "__" + std::to_string(e.scenario_index) + "__seed" + std::to_string(e.train_seed);
}

inline std::string series_csv(const std::vector<std::pair<int, const EpisodeTrace *>> & eps)
{
  std::ostringstream os;
  os << "episode,t,plan_speed_ratio,exec_speed_ratio,term_dq,term_ddq,term_jerk,fallback\n";
  for (const auto & [idx, tr] : eps) {
    const Vec & vmax = tr->scenario.safety.limits.dq_max;
    for (std::size_t k = 0; k < tr->replans.size(); ++k) {
      const auto & r   = tr->replans[k];
      const double ex  = (tr->executed.dq.row(static_cast<Eigen::Index>(k)).array() / vmax.transpose().array()).abs().maxCoeff();
      os << idx << ',' << fmt(r.t) << ',' << fmt(r.plan_speed_ratio) << ',' << fmt(ex) << ',' << fmt(r.term_dq) << ','
         << fmt(r.term_ddq) << ',' << fmt(r.term_jerk) << ',' << (r.fallback ? 1 : 0) << '\n';
    }
  }
  return os.str();
}

}  // namespace detail

/**
 * @brief Runs every (method, training seed, family, scenario) episode and aggregates.
 *
 * Episodes are independent and seeded from their indices, so the result does not depend on
 * `jobs`. `eval_demos` maps a family to held-out demos paired by scenario seed (for d_demo).
 */
inline ExperimentResult run_experiment(const ExperimentSpec & spec, const std::vector<ModelBundle> & bundles,
  const std::optional<std::filesystem::path> & out_dir = std::nullopt, int jobs = 1,
  const std::map<std::string, DemoDataset> * eval_demos = nullptr, bool keep_traces = false)
{
  if (spec.methods.empty()) { throw ValidationError("experiment", "methods", "empty method list"); }
  if (bundles.empty()) { throw ValidationError("experiment", "models", "no model bundle"); }
  spec.planner.validate();

  std::map<std::string, std::vector<Scenario>> scenarios;
  for (const auto & f : spec.families) { scenarios[f] = experiment_scenarios(spec, f); }

  struct Job
  {
    std::size_t method, bundle;
    std::string family;
    int index;
  };
  std::vector<Job> jobs_list;
  for (std::size_t mi = 0; mi < spec.methods.size(); ++mi) {
    // Methods without a model do not depend on the training seed.
    const std::size_t nb = spec.methods[mi].model == "none" ? 1 : bundles.size();
    for (std::size_t bi = 0; bi < nb; ++bi) {
      for (const auto & f : spec.families) {
        for (int i = 0; i < spec.scenarios_per_family; ++i) { jobs_list.push_back({mi, bi, f, i}); }
      }
    }
  }

  std::vector<EpisodeMetrics> eps(jobs_list.size());
  std::vector<EpisodeTrace> traces(jobs_list.size());
  parallel_for(static_cast<int>(jobs_list.size()), jobs, [&](int ji) {
    const Job & j          = jobs_list[static_cast<std::size_t>(ji)];
    const MethodSpec & m   = spec.methods[j.method];
    const ModelBundle & mb = bundles[j.bundle];
    const Scenario & sc    = scenarios[j.family][static_cast<std::size_t>(j.index)];
    const std::uint64_t ep_seed = sc.seed * 1000003ULL + mb.train_seed * 7919ULL + j.method;
    EpisodeTrace tr = run_closed_loop(sc, mb.for_method(m), method_config(spec.planner, m), ep_seed, m.name);
    const KnotTrajectory * demo = nullptr;
    if (eval_demos) {
      const auto it = eval_demos->find(j.family);
      if (it != eval_demos->end()) {
        for (const auto & d : it->second.demos) {
          if (d.scenario.seed == sc.seed) { demo = &d.traj; }
        }
      }
    }
    eps[static_cast<std::size_t>(ji)]    = episode_metrics(tr, j.family, j.index, mb.train_seed, demo);
    traces[static_cast<std::size_t>(ji)] = std::move(tr);
  });

  ExperimentResult res;
  res.episodes = eps;
  res.rows     = aggregate(eps);

  if (out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(*out_dir);
    detail::write_file(*out_dir / "metrics.csv", metrics_csv(res.rows));
    detail::write_file(*out_dir / "metrics.json", metrics_json(res.rows).dump(2));
    detail::write_file(*out_dir / "timing.csv", timing_csv(res.rows));
    nlohmann::json ej = nlohmann::json::array();
    if (spec.write_traces) { fs::create_directories(*out_dir / "traces"); }
    for (std::size_t i = 0; i < eps.size(); ++i) {
      nlohmann::json e = episode_to_json(eps[i]);
      if (spec.write_traces) {
        const std::string stem = detail::episode_stem(eps[i]);
        detail::write_file(*out_dir / "traces" / (stem + ".json"), trace_to_json(traces[i]).dump());
        std::ostringstream csv;
        write_csv(csv, traces[i].executed);
        detail::write_file(*out_dir / "traces" / (stem + ".csv"), csv.str());
        e["trace"] = "traces/" + stem + ".json";
      }
      ej.push_back(e);
    }
    detail::write_file(*out_dir / "episodes.json", ej.dump(2));
    fs::create_directories(*out_dir / "series");
    for (const auto & row : res.rows) {
      std::vector<std::pair<int, const EpisodeTrace *>> sel;
      for (std::size_t i = 0; i < eps.size(); ++i) {
        if (eps[i].method == row.method && eps[i].family == row.family) { sel.emplace_back(static_cast<int>(i), &traces[i]); }
      }
      detail::write_file(*out_dir / "series" / (row.method + "__" + row.family + ".csv"), detail::series_csv(sel));
    }
  }
  if (keep_traces) { res.traces = std::move(traces); }
  return res;
}

// ---------------------------------------------------------------------------------------------
// Verification

struct VerifyReport
{
  bool ok{true};
  int episodes{0};
  std::vector<std::string> problems;

  void fail(const std::string & m)
  {
    ok = false;
    problems.push_back(m);
  }
};

struct VerifyLimits
{
  double h_tol{1e-6};
  double term_dq{1e-3}, term_ddq{1e-2}, term_jerk{1e-1};
  double speed{1.0 + 1e-9};
};

/**
 * @brief Recomputes every metric from the raw traces of a bench output directory.
 *
 * Checks that episodes.json and metrics.csv agree with the recomputation, and that the safety
 * invariants hold for the methods that claim them (every method except fm and bc).
 */
inline VerifyReport verify_bench_dir(const std::filesystem::path & dir, const VerifyLimits & lim = {})
{
  VerifyReport rep;
  const auto ej = nlohmann::json::parse(detail::read_file(dir / "episodes.json"));
  std::vector<EpisodeMetrics> eps;
  for (const auto & e : ej) {
    if (!e.contains("trace")) {
      rep.fail("episode without a trace file; rerun bench with traces");
      continue;
    }
    const EpisodeTrace tr = trace_from_json(nlohmann::json::parse(detail::read_file(dir / e.at("trace").get<std::string>())));
    EpisodeMetrics m = episode_metrics(tr, e.at("family"), e.at("scenario_index"), e.at("train_seed"));
    if (!e.at("d_demo").is_null()) { m.d_demo = e.at("d_demo").get<double>(); }
    const nlohmann::json back = episode_to_json(m);
    for (const auto & [k, v] : back.items()) {
      if (e.at(k) != v) { rep.fail(detail::episode_stem(m) + ": " + k + " recorded " + e.at(k).dump() + " recomputed " + v.dump()); }
    }
    const bool claims_safety = m.method != "fm" && m.method != "bc";
    if (claims_safety) {
      if (m.c_obs != 0.0) { rep.fail(detail::episode_stem(m) + ": collision depth " + detail::fmt(m.c_obs)); }
      if (m.max_h > lim.h_tol) { rep.fail(detail::episode_stem(m) + ": constraint violation " + detail::fmt(m.max_h)); }
      if (m.max_term_dq > lim.term_dq || m.max_term_ddq > lim.term_ddq || m.max_term_jerk > lim.term_jerk) {
        rep.fail(detail::episode_stem(m) + ": terminal residual above tolerance");
      }
      if (m.max_speed > lim.speed || m.max_plan_speed > lim.speed) { rep.fail(detail::episode_stem(m) + ": speed limit exceeded"); }
    }
    eps.push_back(std::move(m));
  }
  rep.episodes = static_cast<int>(eps.size());
  const std::string recorded = detail::read_file(dir / "metrics.csv");
  if (recorded != metrics_csv(aggregate(eps))) { rep.fail("metrics.csv differs from the recomputation"); }
  return rep;
}

}  // namespace sfmpc

#endif  // SFMPC__BENCH_HPP_
