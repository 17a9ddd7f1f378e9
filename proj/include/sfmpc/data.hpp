#ifndef SFMPC__DATA_HPP_
#define SFMPC__DATA_HPP_

/**
 * @file
 * @brief Demonstrations, training windows and the safety dataset.
 *
 * Demonstrations come from a sampling-based via-point planner. Each candidate is a
 * minimum-jerk-norm rollout from the resting start through 2-4 via points to a resting goal
 * configuration, on a duration grid searched in ascending order. A candidate is kept only if it
 * respects every joint limit at the knots, keeps all key points inside the free sets with the
 * safety margin, and has zero collision depth. The shortest feasible duration wins and is polished
 * by a converged projection toward a time-compressed copy.
 */

#include "sfmpc/bc.hpp"
#include "sfmpc/planner.hpp"

#include <filesystem>
#include <map>
#include <mutex>
#include <thread>

namespace sfmpc {

// ---------------------------------------------------------------------------------------------
// Parallel helper

/// Runs f(i) for i in [0, n) on up to `jobs` threads; callers write results by index.
inline void parallel_for(int n, int jobs, const std::function<void(int)> & f)
{
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) { f(i); }
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t) {
    pool.emplace_back([&]() {
      for (int i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(mu);
          if (!err) { err = std::current_exception(); }
        }
      }
    });
  }
  for (auto & th : pool) { th.join(); }
  if (err) { std::rethrow_exception(err); }
}

// ---------------------------------------------------------------------------------------------
// Demonstrations

struct Demo
{
  Scenario scenario;
  KnotTrajectory traj;  ///< resting start to resting goal, t0 = 0, on the planner's Ts
  std::string split;    ///< train | eval
};

struct DemoGenConfig
{
  int candidates{200};  ///< M per round
  int rounds{20};
  double Ts{0.1};
  double T_min{1.0};
  double T_max{12.0};
  double T_step{0.5};
  double via_sigma{0.5};    ///< rad, spread around the joint-space line
  double approach_prob{0.5};
  double explore_prob{0.3};  ///< vias with distal joints drawn uniformly within limits
  double polish_scale{0.9};  ///< time compression of the polishing target
  FamilyOptions family{};
};

namespace detail {

/// Minimum-norm jerk fit through fixed knots on a K-interval grid from a resting start.
class ViaFit
{
public:
  ViaFit(int K, double Ts, int dof, std::vector<int> via_knots) : map_(K, Ts, dof), vias_(std::move(via_knots))
  {
    const int n  = K * dof;
    const int nv = static_cast<int>(vias_.size());
    A_           = Mat::Zero((nv + 4) * dof, n);
    for (int i = 0; i < nv; ++i) { A_.middleRows(i * dof, dof) = map_.Sq_knot(vias_[i]); }
    A_.middleRows(nv * dof, dof)       = map_.Sq_knot(K);
    A_.middleRows((nv + 1) * dof, dof) = map_.Sdq_knot(K);
    A_.middleRows((nv + 2) * dof, dof) = map_.Sddq_knot(K);
    for (int j = 0; j < dof; ++j) { A_((nv + 3) * dof + j, (K - 1) * dof + j) = 1.0; }
    llt_.compute(A_ * A_.transpose());
  }

  bool ok() const { return llt_.info() == Eigen::Success; }

  KnotTrajectory fit(const Vec & q0, const std::vector<Vec> & via, const Vec & qg) const
  {
    const int dof = map_.dof();
    const int nv  = static_cast<int>(vias_.size());
    Vec b         = Vec::Zero((nv + 4) * dof);
    for (int i = 0; i < nv; ++i) { b.segment(i * dof, dof) = via[static_cast<std::size_t>(i)] - q0; }
    b.segment(nv * dof, dof) = qg - q0;
    const Vec u              = A_.transpose() * llt_.solve(b);
    return rollout_flat(StateVec::rest(q0), u, map_.Ts());
  }

private:
  RolloutMap map_;
  std::vector<int> vias_;
  Mat A_;
  Eigen::LLT<Mat> llt_;
};

inline bool within_limits(const KnotTrajectory & tr, const Limits & L, double tol = 1e-9)
{
  for (int k = 0; k <= tr.N(); ++k) {
    for (int j = 0; j < tr.dof(); ++j) {
      if (tr.q(k, j) < L.q_min[j] - tol || tr.q(k, j) > L.q_max[j] + tol) { return false; }
      if (std::abs(tr.dq(k, j)) > L.dq_max[j] + tol || std::abs(tr.ddq(k, j)) > L.ddq_max[j] + tol) { return false; }
      if (k < tr.N() && std::abs(tr.jerk(k, j)) > L.dddq_max[j] + tol) { return false; }
    }
  }
  return true;
}

/// Limits, free-set containment with margin (a strict assignment exists) and zero depth.
inline bool demo_admissible(const Scenario & sc, const KnotTrajectory & tr)
{
  if (!within_limits(tr, sc.safety.limits)) { return false; }
  try {
    (void)assign_sets(sc.safety, sc.robot, tr, true);
  } catch (const AssignmentError &) {
    return false;
  }
  return collision_depth(sc.robot, tr, sc.obstacles) == 0.0;
}

/// Distinct admissible IK solutions of the goal.
inline std::vector<Vec> goal_configurations(const Scenario & sc, std::uint64_t seed)
{
  std::vector<Vec> out;
  const auto & L = sc.safety.limits;
  for (std::uint64_t k = 0; k < 12; ++k) {
    const auto q = solve_ik(sc.robot, sc.goal, L.q_min, L.q_max, seed + k, 8, 1e-10);
    if (!q || !keypoints_inside(sc, *q)) { continue; }
    bool dup = false;
    for (const Vec & o : out) { dup = dup || (o - *q).norm() < 1e-4; }
    if (!dup) { out.push_back(*q); }
  }
  return out;
}

/// Time-compressed copy of a trajectory resampled on the same Ts (positions and jerks).
inline KnotTrajectory time_scaled(const KnotTrajectory & tr, double scale)
{
  const int K2 = std::max(2, static_cast<int>(std::ceil(tr.N() * scale)));
  KnotTrajectory out;
  out.t0   = 0.0;
  out.Ts   = tr.Ts;
  out.q    = RowMat(K2 + 1, tr.dof());
  out.dq   = RowMat::Zero(K2 + 1, tr.dof());
  out.ddq  = RowMat::Zero(K2 + 1, tr.dof());
  out.jerk = RowMat::Zero(K2, tr.dof());
  for (int k = 0; k <= K2; ++k) {
    const double t = std::min(static_cast<double>(tr.N()), k / scale);
    const int a    = std::min(tr.N() - 1, static_cast<int>(std::floor(t)));
    const double f = t - a;
    out.q.row(k)   = (1.0 - f) * tr.q.row(a) + f * tr.q.row(a + 1);
  }
  return out;
}

}  // namespace detail

/**
 * @brief One demonstration for a scenario, or nullopt when no admissible candidate was found.
 */
inline std::optional<KnotTrajectory> plan_demo(const Scenario & sc, const DemoGenConfig & cfg, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int dof  = sc.robot.dof();
  const auto & L = sc.safety.limits;
  const Vec q0   = sc.start.q;
  const auto goals = detail::goal_configurations(sc, rng());
  if (goals.empty()) { return std::nullopt; }

  // Approach configurations: goal pose backed off along the tool heading.
  std::vector<Vec> approaches;
  for (int a = 0; a < 6; ++a) {
    const double back = 0.15 + 0.15 * u(rng);
    const Vec2 dir(std::cos(sc.goal.orientation), std::sin(sc.goal.orientation));
    const Pose2 pre(sc.goal.position - back * dir, sc.goal.orientation);
    const auto q = solve_ik(sc.robot, pre, L.q_min, L.q_max, rng(), 8, 1e-8);
    if (q && detail::keypoints_inside(sc, *q)) { approaches.push_back(*q); }
  }

  std::map<std::pair<int, int>, std::unique_ptr<detail::ViaFit>> fits;
  auto fitter = [&](int K, int nv) -> const detail::ViaFit & {
    auto & f = fits[{K, nv}];
    if (!f) {
      std::vector<int> knots;
      for (int i = 0; i < nv; ++i) { knots.push_back(std::max(1, static_cast<int>(std::lround(K * (i + 1.0) / (nv + 1.0))))); }
      f = std::make_unique<detail::ViaFit>(K, cfg.Ts, dof, knots);
    }
    return *f;
  };

  struct Cand
  {
    std::vector<Vec> via;
    Vec qg;
  };
  for (int round = 0; round < cfg.rounds; ++round) {
    std::vector<Cand> cands;
    for (int m = 0; m < cfg.candidates; ++m) {
      Cand c;
      c.qg          = goals[static_cast<std::size_t>(m) % goals.size()];
      const int nv  = 2 + static_cast<int>(u(rng) * 3.0);
      const bool ap = !approaches.empty() && u(rng) < cfg.approach_prob;
      const bool ex = u(rng) < cfg.explore_prob;
      for (int i = 0; i < nv; ++i) {
        Vec v;
        if (ap && i == nv - 1) {
          v = approaches[static_cast<std::size_t>(u(rng) * approaches.size()) % approaches.size()];
        } else {
          const double f = (i + 1.0) / (nv + 1.0);
          v              = q0 + f * (c.qg - q0);
          for (int j = 0; j < dof; ++j) {
            v[j] = (ex && j > 0) ? L.q_min[j] + u(rng) * (L.q_max[j] - L.q_min[j]) : v[j] + cfg.via_sigma * nd(rng);
          }
        }
        v = v.cwiseMax(L.q_min).cwiseMin(L.q_max);
        c.via.push_back(v);
      }
      cands.push_back(std::move(c));
    }
    for (double T = cfg.T_min; T <= cfg.T_max + 1e-9; T += cfg.T_step) {
      const int K = static_cast<int>(std::lround(T / cfg.Ts));
      std::optional<KnotTrajectory> best;
      double best_cost = std::numeric_limits<double>::infinity();
      for (const auto & c : cands) {
        const auto & fit = fitter(K, static_cast<int>(c.via.size()));
        if (!fit.ok()) { continue; }
        KnotTrajectory tr = fit.fit(q0, c.via, c.qg);
        const double cost = tr.jerk.squaredNorm();
        if (cost >= best_cost || !detail::demo_admissible(sc, tr)) { continue; }
        best_cost = cost;
        best      = std::move(tr);
      }
      if (!best) { continue; }
      // Polish toward a faster copy; keep it only if it stays admissible and ends at the goal.
      const KnotTrajectory target = detail::time_scaled(*best, cfg.polish_scale);
      if (target.N() < best->N()) {
        SafetySpec spec = sc.safety;
        spec.prepare();
        const Projector P(spec, sc.robot, target.N(), cfg.Ts);
        try {
          const auto asg = assign_sets(spec, sc.robot, target, true);
          const auto r   = P.project_full(target, StateVec::rest(q0), asg);
          if (r.report.ok() && detail::demo_admissible(sc, r.traj) && terminal_contains(spec, sc.robot, r.traj).contains &&
              pose_distance(fk_ee(sc.robot, r.traj.q.row(r.traj.N()).transpose()), sc.goal) <= 0.5 * sc.success.pos_tol) {
            return r.traj;
          }
        } catch (const AssignmentError &) {
        }
      }
      return best;
    }
  }
  return std::nullopt;
}

struct DemoDataset
{
  std::string family;
  std::uint64_t seed{0};
  std::vector<Demo> demos;
  std::vector<std::uint64_t> skipped;  ///< scenario seeds without a demo
};

/// Scenario seed of demo i; the eval split uses a disjoint seed range.
inline std::uint64_t demo_scenario_seed(std::uint64_t seed, int i, bool eval)
{
  return (eval ? 1000000ULL : 0ULL) + seed * 100000ULL + static_cast<std::uint64_t>(i);
}

inline DemoDataset generate_demos(const std::string & family, int count, std::uint64_t seed, bool eval = false,
  const DemoGenConfig & cfg = {}, int jobs = 1)
{
  if (count < 0) { throw ContractError("generate_demos: negative count"); }
  DemoDataset ds;
  ds.family = family;
  ds.seed   = seed;
  std::vector<std::optional<Demo>> slots(static_cast<std::size_t>(count));
  parallel_for(count, jobs, [&](int i) {
    const std::uint64_t ss = demo_scenario_seed(seed, i, eval);
    Scenario sc            = make_scenario(family, ss, cfg.family);
    auto tr                = plan_demo(sc, cfg, ss ^ 0x5DEECE66DULL);
    if (tr) { slots[static_cast<std::size_t>(i)] = Demo{std::move(sc), std::move(*tr), eval ? "eval" : "train"}; }
  });
  for (int i = 0; i < count; ++i) {
    if (slots[static_cast<std::size_t>(i)]) {
      ds.demos.push_back(std::move(*slots[static_cast<std::size_t>(i)]));
    } else {
      ds.skipped.push_back(demo_scenario_seed(seed, i, eval));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------------------------
// Windows

/// Knots k..k+N of a demo, holding the last knot past its end.
inline KnotTrajectory demo_window(const KnotTrajectory & demo, int k, int N)
{
  const int dof = demo.dof();
  KnotTrajectory w;
  w.t0   = demo.t0 + k * demo.Ts;
  w.Ts   = demo.Ts;
  w.q    = RowMat(N + 1, dof);
  w.dq   = RowMat::Zero(N + 1, dof);
  w.ddq  = RowMat::Zero(N + 1, dof);
  w.jerk = RowMat::Zero(N, dof);
  for (int i = 0; i <= N; ++i) {
    const int src = k + i;
    if (src <= demo.N()) {
      w.q.row(i)   = demo.q.row(src);
      w.dq.row(i)  = demo.dq.row(src);
      w.ddq.row(i) = demo.ddq.row(src);
      if (i < N && src < demo.N()) { w.jerk.row(i) = demo.jerk.row(src); }
    } else {
      w.q.row(i) = demo.q.row(demo.N());
    }
  }
  return w;
}

/// Observation the planner would see at knot k of the demo.
inline Observation demo_observation(const Demo & d, int k, int H)
{
  JointHistory h(H);
  for (int i = std::max(0, k - H + 1); i <= k; ++i) { h.push(d.traj.q.row(i).transpose()); }
  return observe(d.scenario.robot, d.traj.q.row(k).transpose(), h, d.scenario.goal);
}

/// Training windows at every `stride`-th replan instant of every demo (including the resting end).
inline std::vector<DemoWindow> make_windows(const DemoDataset & ds, const ObservationCodec & codec, int N, int stride = 1)
{
  require(stride >= 1, "make_windows: stride must be >= 1");
  std::vector<DemoWindow> out;
  for (std::size_t di = 0; di < ds.demos.size(); ++di) {
    const Demo & d = ds.demos[di];
    KnotTrajectory prev = rest_trajectory(d.traj.q.row(0).transpose(), N, d.traj.Ts);
    for (int k = 0; k <= d.traj.N(); ++k) {
      const KnotTrajectory cur = demo_window(d.traj, k, N);
      if (k % stride == 0 || k == d.traj.N()) {
        DemoWindow w;
        w.x0      = d.traj.state(k);
        w.x0.dddq = Vec::Zero(d.traj.dof());
        w.prev    = prev;
        w.q1      = cur;
        w.obs     = codec.encode(demo_observation(d, k, codec.history));
        w.demo_id = static_cast<int>(di);
        w.step    = k;
        out.push_back(std::move(w));
      }
      prev = shift(cur);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Safety dataset

struct SafeSample
{
  FlowSample sample;
  int demo_id{0};
  int step{0};
  double ds_fd{0.02};
};

struct SafeDataset
{
  std::vector<SafeSample> samples;
  int attempted{0};
  int discarded{0};
  std::vector<std::string> warnings;

  std::vector<FlowSample> flow_samples() const
  {
    std::vector<FlowSample> out;
    out.reserve(samples.size());
    for (const auto & s : samples) { out.push_back(s.sample); }
    return out;
  }
};

struct SafeDatasetConfig
{
  std::vector<double> s_grid{0.0, 1.0 / 6, 2.0 / 6, 3.0 / 6, 4.0 / 6, 5.0 / 6};
  double ds_fd{0.02};
  double source_sigma_factor{0.2};  ///< x dddq_max
  int window_stride{5};
  int N{20};
};

/**
 * @brief Projected demo windows (q1), projected sources (q0) and finite-difference targets.
 *
 * Every stored q_s and both endpoints are checked on the manifold; failures are discarded.
 */
inline SafeDataset build_safe_dataset(const DemoDataset & demos, const ObservationCodec & codec, const SafeDatasetConfig & cfg,
  std::uint64_t seed, int jobs = 1)
{
  const auto windows = make_windows(demos, codec, cfg.N, cfg.window_stride);
  struct Slot
  {
    std::vector<SafeSample> samples;
    int attempted{0};
    int discarded{0};
  };
  std::vector<Slot> slots(windows.size());
  parallel_for(static_cast<int>(windows.size()), jobs, [&](int wi) {
    const DemoWindow & w = windows[static_cast<std::size_t>(wi)];
    const Scenario & sc  = demos.demos[static_cast<std::size_t>(w.demo_id)].scenario;
    Slot & slot          = slots[static_cast<std::size_t>(wi)];
    slot.attempted       = static_cast<int>(cfg.s_grid.size());
    const Projector P(sc.safety, sc.robot, cfg.N, w.q1.Ts);
    const SourceSampler src(cfg.N, w.q1.Ts, sc.robot.dof(), cfg.source_sigma_factor * sc.safety.limits.dddq_max);
    std::mt19937_64 rng(seed ^ (static_cast<std::uint64_t>(wi) * 0x9E3779B97F4A7C15ULL));
    auto on_m = [&](const KnotTrajectory & t) {
      const auto a = assign_sets(sc.safety, sc.robot, t, false);
      return check_manifold(sc.safety, sc.robot, t, a, w.x0).on_manifold;
    };
    const auto q1 = project_safe(P, w.q1, w.x0);
    const auto q0 = project_safe(P, src.sample(w.x0, rng, w.q1.t0), w.x0);
    if (!q1 || !q0 || !on_m(q1->traj) || !on_m(q0->traj)) {
      slot.discarded = slot.attempted;
      return;
    }
    for (double s : cfg.s_grid) {
      KnotTrajectory q_s;
      SetAssignment asg;
      const auto v = target_flow(P, q0->traj, q1->traj, s, cfg.ds_fd, w.x0, &q_s, &asg);
      if (!v || !check_manifold(sc.safety, sc.robot, q_s, asg, w.x0).on_manifold) {
        ++slot.discarded;
        continue;
      }
      SafeSample ss;
      ss.sample.q_s    = q_s.q;
      ss.sample.s      = s;
      ss.sample.obs    = w.obs;
      ss.sample.target = *v;
      ss.demo_id       = w.demo_id;
      ss.step          = w.step;
      ss.ds_fd         = cfg.ds_fd;
      slot.samples.push_back(std::move(ss));
    }
  });
  SafeDataset out;
  for (auto & s : slots) {
    out.attempted += s.attempted;
    out.discarded += s.discarded;
    for (auto & x : s.samples) { out.samples.push_back(std::move(x)); }
  }
  if (out.attempted > 0 && out.discarded > 0.2 * out.attempted) {
    out.warnings.push_back("discard rate " + std::to_string(static_cast<double>(out.discarded) / out.attempted) +
                           " exceeds 20% (" + std::to_string(out.discarded) + " of " + std::to_string(out.attempted) + ")");
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Dataset directories

namespace detail {

inline std::uint64_t fnv1a(const std::string & bytes)
{
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string read_file(const std::filesystem::path & p)
{
  std::ifstream f(p, std::ios::binary);
  if (!f) { throw ValidationError("dataset", p.string(), "cannot open"); }
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::filesystem::path & p, const std::string & bytes)
{
  std::ofstream f(p, std::ios::binary);
  if (!f) { throw std::runtime_error("cannot write " + p.string()); }
  f << bytes;
}

inline std::string hex(std::uint64_t v)
{
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

/// manifest.json + demo_XXXXX.csv + scenario_XXXXX.json.
inline void save_demos(const std::filesystem::path & dir, const DemoDataset & ds)
{
  std::filesystem::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.demos.size(); ++i) {
    char base[32];
    std::snprintf(base, sizeof(base), "%05zu", i);
    std::ostringstream csv;
    write_csv(csv, ds.demos[i].traj);
    const std::string sc = scenario_to_json(ds.demos[i].scenario).dump(2);
    detail::write_file(dir / ("demo_" + std::string(base) + ".csv"), csv.str());
    detail::write_file(dir / ("scenario_" + std::string(base) + ".json"), sc);
    files.push_back({{"trajectory", "demo_" + std::string(base) + ".csv"}, {"scenario", "scenario_" + std::string(base) + ".json"},
      {"split", ds.demos[i].split}, {"checksum", detail::hex(detail::fnv1a(csv.str() + sc))}});
  }
  nlohmann::json m = {{"kind", "demos"}, {"family", ds.family}, {"seed", ds.seed}, {"count", ds.demos.size()},
    {"skipped", ds.skipped}, {"demos", files}};
  detail::write_file(dir / "manifest.json", m.dump(2));
}

inline DemoDataset load_demos(const std::filesystem::path & dir)
{
  const auto m = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  if (m.value("kind", "") != "demos") { throw ValidationError("dataset", dir.string(), "not a demo dataset"); }
  DemoDataset ds;
  ds.family  = m.at("family");
  ds.seed    = m.at("seed");
  ds.skipped = m.at("skipped").get<std::vector<std::uint64_t>>();
  for (const auto & f : m.at("demos")) {
    const std::string csv = detail::read_file(dir / f.at("trajectory").get<std::string>());
    const std::string sc  = detail::read_file(dir / f.at("scenario").get<std::string>());
    if (detail::hex(detail::fnv1a(csv + sc)) != f.at("checksum")) {
      throw ValidationError("dataset_checksum", f.at("trajectory").get<std::string>(), "checksum mismatch");
    }
    std::istringstream is(csv);
    ds.demos.push_back({scenario_from_json(nlohmann::json::parse(sc), false), read_csv(is), f.at("split")});
  }
  return ds;
}

/// manifest.json + samples.bin (little-endian float64 blocks, one per sample).
inline void save_safe_dataset(const std::filesystem::path & dir, const SafeDataset & ds, const nlohmann::json & meta = {})
{
  std::filesystem::create_directories(dir);
  std::ostringstream bin(std::ios::binary);
  int K = 0, dof = 0, obs = 0;
  if (!ds.samples.empty()) {
    K   = static_cast<int>(ds.samples[0].sample.q_s.rows());
    dof = static_cast<int>(ds.samples[0].sample.q_s.cols());
    obs = static_cast<int>(ds.samples[0].sample.obs.size());
  }
  for (const auto & s : ds.samples) {
    detail::write_f64(bin, s.sample.s);
    detail::write_f64(bin, s.ds_fd);
    detail::write_le_u64(bin, static_cast<std::uint64_t>(s.demo_id));
    detail::write_le_u64(bin, static_cast<std::uint64_t>(s.step));
    for (Eigen::Index i = 0; i < s.sample.obs.size(); ++i) { detail::write_f64(bin, s.sample.obs[i]); }
    for (Eigen::Index i = 0; i < s.sample.q_s.size(); ++i) { detail::write_f64(bin, s.sample.q_s.data()[i]); }
    for (Eigen::Index i = 0; i < s.sample.target.size(); ++i) { detail::write_f64(bin, s.sample.target.data()[i]); }
  }
  const std::string bytes = bin.str();
  detail::write_file(dir / "samples.bin", bytes);
  nlohmann::json m = {{"kind", "safe_dataset"}, {"count", ds.samples.size()}, {"knots", K}, {"dof", dof}, {"obs_dim", obs},
    {"attempted", ds.attempted}, {"discarded", ds.discarded}, {"warnings", ds.warnings},
    {"checksum", detail::hex(detail::fnv1a(bytes))}, {"meta", meta}};
  detail::write_file(dir / "manifest.json", m.dump(2));
}

inline SafeDataset load_safe_dataset(const std::filesystem::path & dir)
{
  const auto m = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  if (m.value("kind", "") != "safe_dataset") { throw ValidationError("dataset", dir.string(), "not a safety dataset"); }
  const std::string bytes = detail::read_file(dir / "samples.bin");
  if (detail::hex(detail::fnv1a(bytes)) != m.at("checksum")) {
    throw ValidationError("dataset_checksum", (dir / "samples.bin").string(), "checksum mismatch");
  }
  SafeDataset ds;
  ds.attempted = m.at("attempted");
  ds.discarded = m.at("discarded");
  ds.warnings  = m.at("warnings").get<std::vector<std::string>>();
  const int n = m.at("count"), K = m.at("knots"), dof = m.at("dof"), obs = m.at("obs_dim");
  std::istringstream in(bytes, std::ios::binary);
  for (int i = 0; i < n; ++i) {
    SafeSample s;
    s.sample.s = detail::read_f64(in);
    s.ds_fd    = detail::read_f64(in);
    s.demo_id  = static_cast<int>(detail::read_le_u64(in));
    s.step     = static_cast<int>(detail::read_le_u64(in));
    s.sample.obs    = Vec(obs);
    s.sample.q_s    = RowMat(K, dof);
    s.sample.target = RowMat(K, dof);
    for (Eigen::Index j = 0; j < obs; ++j) { s.sample.obs[j] = detail::read_f64(in); }
    for (Eigen::Index j = 0; j < s.sample.q_s.size(); ++j) { s.sample.q_s.data()[j] = detail::read_f64(in); }
    for (Eigen::Index j = 0; j < s.sample.target.size(); ++j) { s.sample.target.data()[j] = detail::read_f64(in); }
    ds.samples.push_back(std::move(s));
  }
  if (!in) { throw ValidationError("dataset", (dir / "samples.bin").string(), "truncated"); }
  return ds;
}

}  // namespace sfmpc

#endif  // SFMPC__DATA_HPP_
