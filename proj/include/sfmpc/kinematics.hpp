#ifndef SFMPC__KINEMATICS_HPP_
#define SFMPC__KINEMATICS_HPP_

/**
 * @file
 * @brief Planar serial-chain kinematics: end-effector pose, collision key points and their
 * analytic Jacobians.
 *
 * Joint j rotates everything distal to it, so the absolute angle of link j is the cumulative sum
 * of q_0..q_j. A key point sits on link `link` (1-based, link == dof is the last link) at a
 * fraction `offset` of that link's length.
 */

#include "sfmpc/core.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace sfmpc {

struct KeyPoint
{
  int link{1};         ///< 1-based link index
  double offset{1.0};  ///< fraction along the link in [0, 1]

  bool operator==(const KeyPoint &) const = default;
};

struct Pose2
{
  Vec2 position{Vec2::Zero()};
  double orientation{0.0};  ///< (-pi, pi]

  Pose2() = default;
  Pose2(Vec2 p, double theta) : position(std::move(p)), orientation(wrap_angle(theta)) {}
  Pose2(double x, double y, double theta) : position(x, y), orientation(wrap_angle(theta)) {}
};

/// Position distance plus absolute wrapped angle difference.
inline double pose_distance(const Pose2 & a, const Pose2 & b)
{
  return (a.position - b.position).norm() + std::abs(wrap_angle(a.orientation - b.orientation));
}

class RobotModel
{
public:
  RobotModel() = default;

  RobotModel(std::vector<double> link_lengths, std::vector<KeyPoint> key_points,
    Vec2 base = Vec2::Zero())
      : links_(std::move(link_lengths)), key_points_(std::move(key_points)), base_(std::move(base))
  {
    validate();
  }

  /// Default key points: one per link midpoint plus the tip.
  static RobotModel with_default_keypoints(std::vector<double> link_lengths, Vec2 base = Vec2::Zero())
  {
    std::vector<KeyPoint> kps;
    const int n = static_cast<int>(link_lengths.size());
    for (int l = 1; l <= n; ++l) { kps.push_back({l, 0.5}); }
    kps.push_back({n, 1.0});
    return RobotModel(std::move(link_lengths), std::move(kps), std::move(base));
  }

  int dof() const { return static_cast<int>(links_.size()); }
  int num_keypoints() const { return static_cast<int>(key_points_.size()); }
  const std::vector<double> & link_lengths() const { return links_; }
  const std::vector<KeyPoint> & key_points() const { return key_points_; }
  const Vec2 & base() const { return base_; }
  double reach() const
  {
    double r = 0.0;
    for (double l : links_) { r += l; }
    return r;
  }
  /// Index of the end-effector tip in key_points().
  int tip_index() const
  {
    for (int i = 0; i < num_keypoints(); ++i) {
      if (key_points_[i].link == dof() && key_points_[i].offset == 1.0) { return i; }
    }
    return -1;
  }

  bool operator==(const RobotModel &) const = default;

private:
  void validate() const
  {
    require(!links_.empty(), "RobotModel: dof must be >= 1");
    for (double l : links_) { require(l > 0.0, "RobotModel: link lengths must be positive"); }
    int tips = 0;
    for (const auto & kp : key_points_) {
      require(kp.link >= 1 && kp.link <= dof(), "RobotModel: key point link out of range");
      require(kp.offset >= 0.0 && kp.offset <= 1.0, "RobotModel: key point offset outside [0,1]");
      if (kp.link == dof() && kp.offset == 1.0) { ++tips; }
    }
    require(tips == 1, "RobotModel: key points must contain the tip exactly once");
  }

  std::vector<double> links_;
  std::vector<KeyPoint> key_points_;
  Vec2 base_{Vec2::Zero()};
};

namespace detail {

inline void check_dim(const RobotModel & m, const Vec & q)
{
  if (q.size() != m.dof()) {
    throw ContractError("joint vector has length " + std::to_string(q.size()) + ", expected " +
                        std::to_string(m.dof()));
  }
}

/// Absolute link angles (cumulative joint sums).
inline Vec link_angles(const Vec & q)
{
  Vec th(q.size());
  double acc = 0.0;
  for (Eigen::Index j = 0; j < q.size(); ++j) {
    acc += q[j];
    th[j] = acc;
  }
  return th;
}

/// Effective length of link j (0-based) up to a key point.
inline double partial_length(const RobotModel & m, const KeyPoint & kp, int j)
{
  const int last = kp.link - 1;
  if (j < last) { return m.link_lengths()[j]; }
  if (j == last) { return kp.offset * m.link_lengths()[j]; }
  return 0.0;
}

}  // namespace detail

inline Vec2 fk_point(const RobotModel & model, const Vec & q, const KeyPoint & kp)
{
  detail::check_dim(model, q);
  const Vec th = detail::link_angles(q);
  Vec2 p = model.base();
  for (int j = 0; j < kp.link; ++j) {
    const double l = detail::partial_length(model, kp, j);
    p += l * Vec2(std::cos(th[j]), std::sin(th[j]));
  }
  return p;
}

inline Pose2 fk_ee(const RobotModel & model, const Vec & q)
{
  detail::check_dim(model, q);
  return Pose2(fk_point(model, q, KeyPoint{model.dof(), 1.0}), q.sum());
}

inline std::vector<Vec2> fk_keypoints(const RobotModel & model, const Vec & q)
{
  detail::check_dim(model, q);
  std::vector<Vec2> out;
  out.reserve(model.key_points().size());
  for (const auto & kp : model.key_points()) { out.push_back(fk_point(model, q, kp)); }
  return out;
}

inline Mat2X jac_point(const RobotModel & model, const Vec & q, const KeyPoint & kp)
{
  detail::check_dim(model, q);
  const Vec th = detail::link_angles(q);
  const int n = model.dof();
  // Link-wise contributions, then suffix sums give the column for each joint.
  Mat2X link_d = Mat2X::Zero(2, n);
  for (int j = 0; j < kp.link; ++j) {
    const double l = detail::partial_length(model, kp, j);
    link_d(0, j) = -l * std::sin(th[j]);
    link_d(1, j) = l * std::cos(th[j]);
  }
  Mat2X J = Mat2X::Zero(2, n);
  Vec2 acc = Vec2::Zero();
  for (int c = n - 1; c >= 0; --c) {
    acc += link_d.col(c);
    J.col(c) = acc;
  }
  return J;
}

inline Mat2X jac_keypoint(const RobotModel & model, const Vec & q, int idx)
{
  if (idx < 0 || idx >= model.num_keypoints()) {
    throw ContractError("key point index " + std::to_string(idx) + " out of range");
  }
  return jac_point(model, q, model.key_points()[static_cast<std::size_t>(idx)]);
}

/// Rows: x, y, orientation.
inline Mat3X jac_ee_pose(const RobotModel & model, const Vec & q)
{
  detail::check_dim(model, q);
  Mat3X J(3, model.dof());
  J.topRows<2>() = jac_point(model, q, KeyPoint{model.dof(), 1.0});
  J.row(2).setOnes();
  return J;
}

/**
 * @brief Damped least-squares inverse kinematics for a full planar pose.
 *
 * Tries `seeds` random restarts inside [q_min, q_max] and returns the first solution whose pose
 * error is below `tol` (position in m plus wrapped angle in rad), or nullopt.
 */
inline std::optional<Vec> solve_ik(const RobotModel & model, const Pose2 & target, const Vec & q_min,
  const Vec & q_max, std::uint64_t seed = 0, int seeds = 32, double tol = 1e-6)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const int n = model.dof();
  for (int attempt = 0; attempt < seeds; ++attempt) {
    Vec q(n);
    for (int j = 0; j < n; ++j) { q[j] = q_min[j] + uni(rng) * (q_max[j] - q_min[j]); }
    for (int it = 0; it < 200; ++it) {
      const Pose2 p = fk_ee(model, q);
      Eigen::Vector3d e;
      e.head<2>() = target.position - p.position;
      e[2]        = wrap_angle(target.orientation - p.orientation);
      if (e.head<2>().norm() + std::abs(e[2]) < tol) { break; }
      const Mat3X J = jac_ee_pose(model, q);
      const double lambda = 1e-4;
      const Mat JJt = J * J.transpose() + lambda * Mat::Identity(3, 3);
      const Vec dq  = J.transpose() * JJt.ldlt().solve(e);
      q += dq;
      for (int j = 0; j < n; ++j) { q[j] = wrap_angle(q[j]); }
    }
    const bool in_limits = ((q - q_min).array() >= 0.0).all() && ((q_max - q).array() >= 0.0).all();
    if (in_limits && pose_distance(fk_ee(model, q), target) < tol) { return q; }
  }
  return std::nullopt;
}

}  // namespace sfmpc

#endif  // SFMPC__KINEMATICS_HPP_
