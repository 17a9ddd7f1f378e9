#include "sfmpc/kinematics.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace sfmpc;

namespace {

RobotModel two_link() { return RobotModel::with_default_keypoints({1.0, 0.8}); }

Vec vec(std::initializer_list<double> v)
{
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) { out[i++] = x; }
  return out;
}

Mat fd_jacobian(const std::function<Vec(const Vec &)> & f, const Vec & q, double h = 1e-6)
{
  const Vec f0 = f(q);
  Mat J(f0.size(), q.size());
  for (Eigen::Index j = 0; j < q.size(); ++j) {
    Vec qp = q, qm = q;
    qp[j] += h;
    qm[j] -= h;
    J.col(j) = (f(qp) - f(qm)) / (2 * h);
  }
  return J;
}

double rel_err(const Mat & a, const Mat & b) { return (a - b).norm() / std::max(1.0, b.norm()); }

}  // namespace

TEST(Kinematics, FkEeExamples)
{
  const auto m = two_link();
  auto p       = fk_ee(m, vec({0, 0}));
  EXPECT_NEAR(p.position.x(), 1.8, 1e-15);
  EXPECT_NEAR(p.position.y(), 0.0, 1e-15);
  EXPECT_NEAR(p.orientation, 0.0, 1e-15);
  p = fk_ee(m, vec({kPi / 2, 0}));
  EXPECT_NEAR(p.position.x(), 0.0, 1e-15);
  EXPECT_NEAR(p.position.y(), 1.8, 1e-15);
  EXPECT_NEAR(p.orientation, kPi / 2, 1e-15);
  p = fk_ee(m, vec({kPi / 2, -kPi / 2}));
  EXPECT_NEAR(p.position.x(), 0.8, 1e-15);
  EXPECT_NEAR(p.position.y(), 1.0, 1e-15);
  EXPECT_NEAR(p.orientation, 0.0, 1e-15);
}

TEST(Kinematics, KeypointExamples)
{
  const auto m = two_link();
  const auto a = fk_keypoints(m, vec({0, 0}));
  EXPECT_NEAR(a[0].x(), 0.5, 1e-15);
  EXPECT_NEAR(a[0].y(), 0.0, 1e-15);
  const auto b = fk_keypoints(m, vec({kPi / 2, -kPi / 2}));
  EXPECT_NEAR(b[1].x(), 0.4, 1e-15);
  EXPECT_NEAR(b[1].y(), 1.0, 1e-15);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  for (int i = 0; i < 50; ++i) {
    const Vec q = vec({u(rng), u(rng)});
    EXPECT_LT((fk_keypoints(m, q)[m.tip_index()] - fk_ee(m, q).position).norm(), 1e-15);
  }
}

TEST(Kinematics, DimensionMismatchThrows)
{
  const auto m = two_link();
  EXPECT_THROW(fk_ee(m, vec({0, 0, 0})), ContractError);
  EXPECT_THROW(fk_keypoints(m, vec({0})), ContractError);
  EXPECT_THROW(jac_keypoint(m, vec({0, 0}), 3), ContractError);
}

TEST(Kinematics, ModelInvariants)
{
  EXPECT_THROW(RobotModel({}, {}), ContractError);
  EXPECT_THROW(RobotModel({1.0, -0.1}, {{2, 1.0}}), ContractError);
  EXPECT_THROW(RobotModel({1.0}, {{1, 1.5}}), ContractError);
  EXPECT_THROW(RobotModel({1.0}, {{1, 0.5}}), ContractError);               // no tip
  EXPECT_THROW(RobotModel({1.0}, {{1, 1.0}, {1, 1.0}}), ContractError);     // tip twice
  EXPECT_NO_THROW(RobotModel({1.0}, {{1, 1.0}}));
}

TEST(Kinematics, JacobianExamples)
{
  const auto m = two_link();
  const Mat2X J = jac_keypoint(m, vec({0, 0}), m.tip_index());
  EXPECT_NEAR(J(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(J(1, 0), 1.8, 1e-15);
  EXPECT_NEAR(J(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(J(1, 1), 0.8, 1e-15);
  const Mat2X J1 = jac_keypoint(m, vec({0.3, -1.1}), 0);
  EXPECT_EQ(J1.col(1), Vec2::Zero());

  const auto one = RobotModel::with_default_keypoints({1.0});
  const Mat3X P  = jac_ee_pose(one, vec({0}));
  EXPECT_NEAR(P(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(P(1, 0), 1.0, 1e-15);
  EXPECT_NEAR(P(2, 0), 1.0, 1e-15);
}

TEST(Kinematics, JacobiansMatchFiniteDifferences)
{
  const auto m = RobotModel::with_default_keypoints({0.5, 0.4, 0.3}, Vec2(0.1, -0.2));
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const Vec q = vec({u(rng), u(rng), u(rng)});
    for (int i = 0; i < m.num_keypoints(); ++i) {
      const Mat fd = fd_jacobian([&](const Vec & x) { return Vec(fk_keypoints(m, x)[i]); }, q);
      worst        = std::max(worst, rel_err(jac_keypoint(m, q, i), fd));
    }
    const Mat fd = fd_jacobian(
      [&](const Vec & x) {
        const Pose2 p = fk_ee(m, x);
        // Unwrapped angle keeps the difference quotient continuous.
        return Vec(vec({p.position.x(), p.position.y(), x.sum()}));
      },
      q);
    worst = std::max(worst, rel_err(jac_ee_pose(m, q), fd));
    EXPECT_TRUE((jac_ee_pose(m, q).row(2).array() == 1.0).all());
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Kinematics, ReachabilityAndPeriodicity)
{
  const auto m = RobotModel::with_default_keypoints({0.5, 0.4, 0.3});
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  for (int t = 0; t < 200; ++t) {
    const Vec q   = vec({u(rng), u(rng), u(rng)});
    const auto kp = fk_keypoints(m, q);
    for (int i = 0; i < m.num_keypoints(); ++i) {
      double bound = 0.0;
      for (int j = 0; j < m.dof(); ++j) { bound += detail::partial_length(m, m.key_points()[i], j); }
      EXPECT_LE(kp[i].norm(), bound + 1e-12);
    }
    Vec q2 = q;
    q2[t % 3] += 2 * kPi;
    EXPECT_NEAR(wrap_angle(fk_ee(m, q).orientation - fk_ee(m, q2).orientation), 0.0, 1e-12);
    EXPECT_GT(fk_ee(m, q2).orientation, -kPi);
    EXPECT_LE(fk_ee(m, q2).orientation, kPi);
  }
}

TEST(Kinematics, PoseDistanceWrapsAngles)
{
  EXPECT_NEAR(pose_distance(Pose2(0, 0, kPi - 0.1), Pose2(3, 4, -kPi + 0.1)), 5.2, 1e-12);
}

TEST(Kinematics, InverseKinematicsHitsTarget)
{
  const auto m = RobotModel::with_default_keypoints({0.5, 0.4, 0.3});
  const Vec lo = Vec::Constant(3, -kPi), hi = Vec::Constant(3, kPi);
  const Pose2 target(0.6, 0.4, 0.3);
  const auto q = solve_ik(m, target, lo, hi, 5);
  ASSERT_TRUE(q.has_value());
  EXPECT_LT(pose_distance(fk_ee(m, *q), target), 1e-6);
  EXPECT_FALSE(solve_ik(m, Pose2(5, 0, 0), lo, hi, 5, 4).has_value());
}
