#ifndef SFMPC__SCENARIO_HPP_
#define SFMPC__SCENARIO_HPP_

/**
 * @file
 * @brief Scenario definition, JSON (de)serialization, load-time validation and the randomized
 * scenario families used for demonstrations and benchmarks.
 */

#include "sfmpc/safety.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace sfmpc {

using json = nlohmann::json;

inline constexpr int kScenarioSchemaVersion = 1;

struct GoalEvent
{
  double time{0.0};
  Pose2 goal;
};

struct SuccessCriteria
{
  double pos_tol{0.02};   ///< m
  double ang_tol{0.05};   ///< rad
  double rest_tol{1e-3};  ///< rad/s, norm of dq
};

struct Scenario
{
  std::string name;
  std::string family;
  std::uint64_t seed{0};
  RobotModel robot;
  SafetySpec safety;
  std::vector<ConvexPolygon> obstacles;
  StateVec start;
  Pose2 goal;
  std::vector<GoalEvent> events;
  double timeout{30.0};  ///< simulated seconds
  SuccessCriteria success;
  double slot_width{0.0};  ///< narrow-passage families only

  /// Goal in force at simulated time t: the last event with time <= t, else the initial goal.
  Pose2 goal_at(double t) const
  {
    Pose2 g = goal;
    for (const auto & e : events) {
      if (e.time <= t + 1e-12) { g = e.goal; }
    }
    return g;
  }
};

// ---------------------------------------------------------------------------------------------
// JSON

namespace detail {

inline json vec_to_json(const Vec & v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec json_to_vec(const json & j)
{
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json pose_to_json(const Pose2 & p) { return {{"x", p.position.x()}, {"y", p.position.y()}, {"theta", p.orientation}}; }

inline Pose2 json_to_pose(const json & j) { return Pose2(j.at("x").get<double>(), j.at("y").get<double>(), j.at("theta").get<double>()); }

inline json v2(const Vec2 & p) { return json::array({p.x(), p.y()}); }
inline Vec2 j2(const json & j) { return Vec2(j.at(0).get<double>(), j.at(1).get<double>()); }

}  // namespace detail

inline json scenario_to_json(const Scenario & s)
{
  using namespace detail;
  json j;
  j["schema_version"] = kScenarioSchemaVersion;
  j["name"]           = s.name;
  j["family"]         = s.family;
  j["seed"]           = s.seed;
  json kps            = json::array();
  for (const auto & kp : s.robot.key_points()) { kps.push_back({{"link", kp.link}, {"offset", kp.offset}}); }
  j["robot"] = {{"links", s.robot.link_lengths()}, {"key_points", kps}, {"base", v2(s.robot.base())}};
  const auto & L = s.safety.limits;
  j["limits"]    = {{"q_min", vec_to_json(L.q_min)}, {"q_max", vec_to_json(L.q_max)}, {"dq_max", vec_to_json(L.dq_max)},
       {"ddq_max", vec_to_json(L.ddq_max)}, {"dddq_max", vec_to_json(L.dddq_max)}};
  json sets = json::array();
  for (const auto & fs : s.safety.free_sets) {
    json hs = json::array();
    for (const auto & h : fs.halfspaces) { hs.push_back({{"normal", v2(h.normal)}, {"offset", h.offset}}); }
    sets.push_back({{"id", fs.id}, {"halfspaces", hs}});
  }
  j["free_sets"] = sets;
  json obs       = json::array();
  for (const auto & o : s.obstacles) {
    json vs = json::array();
    for (const auto & v : o.vertices) { vs.push_back(v2(v)); }
    obs.push_back({{"id", o.id}, {"vertices", vs}});
  }
  j["obstacles"] = obs;
  json term      = {{"tol_dq", s.safety.terminal.tol_dq}, {"tol_ddq", s.safety.terminal.tol_ddq},
         {"tol_dddq", s.safety.terminal.tol_dddq}};
  if (s.safety.terminal.ee_box) {
    term["ee_box"] = {{"lo", v2(s.safety.terminal.ee_box->lo)}, {"hi", v2(s.safety.terminal.ee_box->hi)}};
  }
  j["terminal"] = term;
  j["margin"]   = s.safety.margin;
  j["start"]    = {{"q", vec_to_json(s.start.q)}, {"dq", vec_to_json(s.start.dq)}, {"ddq", vec_to_json(s.start.ddq)}};
  j["goal"]     = pose_to_json(s.goal);
  json ev       = json::array();
  for (const auto & e : s.events) { ev.push_back({{"time", e.time}, {"goal", pose_to_json(e.goal)}}); }
  j["events"]  = ev;
  j["timeout"] = s.timeout;
  j["success"] = {{"pos_tol", s.success.pos_tol}, {"ang_tol", s.success.ang_tol}, {"rest_tol", s.success.rest_tol}};
  j["slot_width"] = s.slot_width;
  return j;
}

/**
 * @brief Load-time validation. Throws ValidationError naming the failing check and entity.
 *
 * Checks: limits; unit normals; every free set has a strictly interior point; obstacles are convex
 * and counterclockwise; no free set overlaps an obstacle with positive area; the start is at rest,
 * within joint limits and has every key point inside a free set with margin; every goal is
 * reachable by an IK solution whose key points are inside the free sets.
 */
inline void validate_scenario(Scenario & s)
{
  const auto & L = s.safety.limits;
  try {
    s.safety.prepare();
  } catch (const ContractError & e) {
    throw ValidationError("limits", "safety", e.what());
  }
  if (L.dof() != s.robot.dof()) { throw ValidationError("limits", "robot", "limit dimension differs from dof"); }
  for (const auto & fs : s.safety.free_sets) {
    if (fs.halfspaces.empty()) { throw ValidationError("free_set_nonempty", fs.id, "no half-spaces"); }
    for (const auto & h : fs.halfspaces) {
      if (std::abs(h.normal.norm() - 1.0) > 1e-9) { throw ValidationError("unit_normal", fs.id, "normal is not unit length"); }
    }
    const auto ball = chebyshev_ball(fs.halfspaces);
    if (!(ball.radius > 1e-9)) { throw ValidationError("free_set_nonempty", fs.id, "set has no interior point"); }
  }
  for (const auto & o : s.obstacles) {
    if (!is_convex_ccw(o)) { throw ValidationError("obstacle_convex", o.id, "vertices must form a convex CCW polygon"); }
    for (const auto & fs : s.safety.free_sets) {
      if (intersection_radius(fs, o) > 1e-9) {
        throw ValidationError("disjointness", fs.id + "/" + o.id, "free set overlaps obstacle");
      }
    }
  }
  if (s.start.q.size() != s.robot.dof()) { throw ValidationError("start_state", "start", "dimension mismatch"); }
  if (!s.start.dq.isZero(0.0) || !s.start.ddq.isZero(0.0)) {
    throw ValidationError("start_state", "start", "start must be at rest");
  }
  if (((s.start.q - L.q_min).array() < 0.0).any() || ((L.q_max - s.start.q).array() < 0.0).any()) {
    throw ValidationError("start_state", "start", "start outside joint limits");
  }
  for (const Vec2 & p : fk_keypoints(s.robot, s.start.q)) {
    for (const auto & o : s.obstacles) {
      if (o.depth(p) > 0.0) { throw ValidationError("start_safety", o.id, "start key point inside obstacle"); }
    }
  }
  try {
    assign_sets(s.safety, s.robot, rest_trajectory(s.start.q, 2, 0.1), true);
  } catch (const AssignmentError & e) {
    throw ValidationError("start_safety", "start", e.what());
  }
  auto goal_ok = [&](const Pose2 & g, const std::string & id) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto q = solve_ik(s.robot, g, L.q_min, L.q_max, seed, 32, 1e-8);
      if (!q) { continue; }
      bool inside = true;
      for (const Vec2 & p : fk_keypoints(s.robot, *q)) {
        bool any = false;
        for (const auto & fs : s.safety.free_sets) { any = any || fs.clearance(p) >= s.safety.margin; }
        inside = inside && any;
      }
      if (inside) { return; }
    }
    throw ValidationError("goal_feasibility", id, "no IK solution with key points inside the free sets");
  };
  goal_ok(s.goal, "goal");
  for (std::size_t i = 0; i < s.events.size(); ++i) { goal_ok(s.events[i].goal, "event_" + std::to_string(i)); }
}

inline Scenario scenario_from_json(const json & j, bool validate = true)
{
  using namespace detail;
  Scenario s;
  try {
    const int ver = j.at("schema_version").get<int>();
    if (ver != kScenarioSchemaVersion) {
      throw ValidationError("schema_version", "scenario", "unsupported schema version " + std::to_string(ver));
    }
    s.name   = j.value("name", "");
    s.family = j.value("family", "");
    s.seed   = j.value("seed", std::uint64_t{0});
    const auto & r = j.at("robot");
    std::vector<KeyPoint> kps;
    for (const auto & k : r.at("key_points")) { kps.push_back({k.at("link").get<int>(), k.at("offset").get<double>()}); }
    try {
      s.robot = RobotModel(r.at("links").get<std::vector<double>>(), kps, r.contains("base") ? j2(r.at("base")) : Vec2::Zero());
    } catch (const ContractError & e) {
      throw ValidationError("robot", "robot", e.what());
    }
    const auto & l  = j.at("limits");
    auto & L        = s.safety.limits;
    L.q_min         = json_to_vec(l.at("q_min"));
    L.q_max         = json_to_vec(l.at("q_max"));
    L.dq_max        = json_to_vec(l.at("dq_max"));
    L.ddq_max       = json_to_vec(l.at("ddq_max"));
    L.dddq_max      = json_to_vec(l.at("dddq_max"));
    for (const auto & fs : j.at("free_sets")) {
      ConvexFreeSet set;
      set.id = fs.at("id").get<std::string>();
      for (const auto & h : fs.at("halfspaces")) { set.halfspaces.push_back({j2(h.at("normal")), h.at("offset").get<double>()}); }
      s.safety.free_sets.push_back(std::move(set));
    }
    for (const auto & o : j.value("obstacles", json::array())) {
      ConvexPolygon p;
      p.id = o.at("id").get<std::string>();
      for (const auto & v : o.at("vertices")) { p.vertices.push_back(j2(v)); }
      s.obstacles.push_back(std::move(p));
    }
    const auto & t           = j.at("terminal");
    s.safety.terminal.tol_dq   = t.value("tol_dq", 1e-3);
    s.safety.terminal.tol_ddq  = t.value("tol_ddq", 1e-2);
    s.safety.terminal.tol_dddq = t.value("tol_dddq", 1e-1);
    if (t.contains("ee_box")) { s.safety.terminal.ee_box = EeBox{j2(t.at("ee_box").at("lo")), j2(t.at("ee_box").at("hi"))}; }
    s.safety.margin = j.value("margin", 0.02);
    const auto & st = j.at("start");
    s.start.q       = json_to_vec(st.at("q"));
    const auto n    = s.start.q.size();
    s.start.dq      = st.contains("dq") ? json_to_vec(st.at("dq")) : Vec::Zero(n);
    s.start.ddq     = st.contains("ddq") ? json_to_vec(st.at("ddq")) : Vec::Zero(n);
    s.start.dddq    = Vec::Zero(n);
    s.goal          = json_to_pose(j.at("goal"));
    for (const auto & e : j.value("events", json::array())) {
      s.events.push_back({e.at("time").get<double>(), json_to_pose(e.at("goal"))});
    }
    s.timeout = j.value("timeout", 30.0);
    if (j.contains("success")) {
      const auto & sc   = j.at("success");
      s.success.pos_tol  = sc.value("pos_tol", 0.02);
      s.success.ang_tol  = sc.value("ang_tol", 0.05);
      s.success.rest_tol = sc.value("rest_tol", 1e-3);
    }
    s.slot_width = j.value("slot_width", 0.0);
  } catch (const json::exception & e) {
    throw ValidationError("parse", "scenario", e.what());
  }
  if (validate) {
    validate_scenario(s);
  } else {
    s.safety.prepare();
  }
  return s;
}

inline Scenario load_scenario(const std::string & path, bool validate = true)
{
  std::ifstream f(path);
  if (!f) { throw ValidationError("parse", path, "cannot open file"); }
  json j;
  try {
    f >> j;
  } catch (const json::exception & e) {
    throw ValidationError("parse", path, e.what());
  }
  return scenario_from_json(j, validate);
}

inline void save_scenario(const std::string & path, const Scenario & s)
{
  std::ofstream f(path);
  if (!f) { throw std::runtime_error("cannot write " + path); }
  f << scenario_to_json(s).dump(2) << '\n';
}

// ---------------------------------------------------------------------------------------------
// Families

/// The desk-scale arm shared by every family.
inline RobotModel default_robot() { return RobotModel::with_default_keypoints({0.5, 0.4, 0.3}); }

inline Limits default_limits()
{
  Limits L;
  L.q_min    = Vec(3);
  L.q_max    = Vec(3);
  L.q_min << -kPi, -2.6, -2.6;
  L.q_max << kPi, 2.6, 2.6;
  L.dq_max   = Vec::Constant(3, 1.0);
  L.ddq_max  = Vec::Constant(3, 3.0);
  L.dddq_max = Vec::Constant(3, 20.0);
  return L;
}

/// Proxy for the arm's cross-section, used to classify tight passages.
inline constexpr double kArmThickness = 0.06;

struct FamilyOptions
{
  double timeout{10.0};
  bool adversarial{false};  ///< narrow passage: slot width <= 1.5 x arm thickness
};

namespace detail {

inline bool keypoints_inside(const Scenario & s, const Vec & q, double extra = 0.0)
{
  for (const Vec2 & p : fk_keypoints(s.robot, q)) {
    bool any = false;
    for (const auto & fs : s.safety.free_sets) { any = any || fs.clearance(p) >= s.safety.margin + extra; }
    if (!any) { return false; }
  }
  return true;
}

/// Random resting configuration with the end effector in a given polar window.
inline Vec sample_start(const Scenario & s, std::mt19937_64 & rng, double ang_lo, double ang_hi)
{
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto & L = s.safety.limits;
  for (int tries = 0; tries < 500; ++tries) {
    const double r  = 0.55 + 0.4 * u(rng);
    const double a  = ang_lo + (ang_hi - ang_lo) * u(rng);
    const double th = -kPi + 2.0 * kPi * u(rng);
    const auto q    = solve_ik(s.robot, Pose2(r * std::cos(a), r * std::sin(a), th), L.q_min, L.q_max, rng(), 4, 1e-8);
    if (q && keypoints_inside(s, *q, 0.01)) { return *q; }
  }
  throw std::runtime_error("sample_start: no admissible start found");
}

inline bool goal_reachable(const Scenario & s, const Pose2 & g, std::uint64_t seed)
{
  const auto & L = s.safety.limits;
  for (std::uint64_t k = 0; k < 4; ++k) {
    const auto q = solve_ik(s.robot, g, L.q_min, L.q_max, seed + k, 32, 1e-8);
    if (q && keypoints_inside(s, *q, 0.005)) { return true; }
  }
  return false;
}

inline Scenario base_scenario(const std::string & family, std::uint64_t seed, const FamilyOptions & opt)
{
  Scenario s;
  s.family         = family;
  s.seed           = seed;
  s.name           = family + "_" + std::to_string(seed);
  s.robot          = default_robot();
  s.safety.limits  = default_limits();
  s.safety.margin  = 0.02;
  s.timeout        = opt.timeout;
  return s;
}

}  // namespace detail

/**
 * @brief Two blocks leave a horizontal slot on the right; the goal puts the end effector inside
 * the slot, pointing into it.
 *
 * Free sets: the open half-plane left of the blocks ("open") and the slot itself ("slot"), which
 * overlap in a 0.1 m window in front of the slot mouth.
 */
inline Scenario make_narrow_passage(std::uint64_t seed, const FamilyOptions & opt = {})
{
  std::mt19937_64 rng(seed * 7919 + 17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int attempt = 0; attempt < 200; ++attempt) {
    Scenario s      = detail::base_scenario("narrow_passage", seed, opt);
    const double x0 = 0.6;  // block face
    const double w  = opt.adversarial ? 0.07 + 0.02 * u(rng) : 0.10 + 0.08 * u(rng);
    const double c  = -0.15 + 0.4 * u(rng);
    s.slot_width    = w;
    s.obstacles     = {box_polygon("lower_block", x0, -0.9, 1.4, c - w / 2), box_polygon("upper_block", x0, c + w / 2, 1.4, 0.9)};
    s.safety.free_sets = {box_set("open", -1.5, -1.5, x0, 1.5), box_set("slot", x0 - 0.1, c - w / 2, 1.4, c + w / 2)};
    s.safety.prepare();
    const double gx = 0.78 + 0.1 * u(rng);
    s.goal          = Pose2(gx, c, 0.0);
    if (!detail::goal_reachable(s, s.goal, rng())) { continue; }
    try {
      s.start.q = detail::sample_start(s, rng, 0.6 * kPi, 0.95 * kPi);
    } catch (const std::runtime_error &) {
      continue;
    }
    s.start = StateVec::rest(s.start.q);
    return s;
  }
  throw std::runtime_error("make_narrow_passage: could not build an instance");
}

/// No obstacles, one workspace-sized free set, random reachable goal.
inline Scenario make_unobstructed(std::uint64_t seed, const FamilyOptions & opt = {})
{
  std::mt19937_64 rng(seed * 104729 + 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int attempt = 0; attempt < 200; ++attempt) {
    Scenario s         = detail::base_scenario("unobstructed", seed, opt);
    s.safety.free_sets = {box_set("workspace", -1.5, -1.5, 1.5, 1.5)};
    s.safety.prepare();
    s.start.q = detail::sample_start(s, rng, 0.5 * kPi, 1.0 * kPi);
    s.start   = StateVec::rest(s.start.q);
    const double r = 0.6 + 0.35 * u(rng);
    const double a = -0.3 * kPi + 0.6 * kPi * u(rng);
    s.goal         = Pose2(r * std::cos(a), r * std::sin(a), -kPi / 2 + kPi * u(rng));
    if (detail::goal_reachable(s, s.goal, rng())) { return s; }
  }
  throw std::runtime_error("make_unobstructed: could not build an instance");
}

/// Unobstructed geometry with 1-3 goal changes at uniform times in (0, 0.6 timeout).
inline Scenario make_dynamic_goal(std::uint64_t seed, const FamilyOptions & opt = {})
{
  Scenario s = make_unobstructed(seed, opt);
  s.family   = "dynamic_goal";
  s.name     = "dynamic_goal_" + std::to_string(seed);
  std::mt19937_64 rng(seed * 15485863 + 11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int k = 1 + static_cast<int>(u(rng) * 3.0);
  std::vector<double> times;
  for (int i = 0; i < k; ++i) { times.push_back(std::max(0.1, 0.6 * s.timeout * u(rng))); }
  std::sort(times.begin(), times.end());
  for (double t : times) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      // Perturb the current goal, like an object being moved.
      const Pose2 prev = s.events.empty() ? s.goal : s.events.back().goal;
      const Pose2 g(prev.position + Vec2(0.3 * (u(rng) - 0.5), 0.3 * (u(rng) - 0.5)), prev.orientation + 0.6 * (u(rng) - 0.5));
      if (detail::goal_reachable(s, g, rng())) {
        s.events.push_back({t, g});
        break;
      }
    }
  }
  return s;
}

inline Scenario make_scenario(const std::string & family, std::uint64_t seed, const FamilyOptions & opt = {})
{
  if (family == "narrow_passage") { return make_narrow_passage(seed, opt); }
  if (family == "narrow_passage_tight") {
    FamilyOptions o = opt;
    o.adversarial   = true;
    Scenario s      = make_narrow_passage(seed, o);
    s.family        = family;
    s.name          = family + "_" + std::to_string(seed);
    return s;
  }
  if (family == "unobstructed") { return make_unobstructed(seed, opt); }
  if (family == "dynamic_goal") { return make_dynamic_goal(seed, opt); }
  throw ContractError("unknown scenario family '" + family + "'");
}

}  // namespace sfmpc

#endif  // SFMPC__SCENARIO_HPP_
