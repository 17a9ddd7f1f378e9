#ifndef SFMPC__CORE_HPP_
#define SFMPC__CORE_HPP_

/**
 * @file
 * @brief Common aliases, error types and small numeric helpers.
 */

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sfmpc {

using Vec   = Eigen::VectorXd;
using Mat   = Eigen::MatrixXd;
using Vec2  = Eigen::Vector2d;
using Mat2X = Eigen::Matrix<double, 2, Eigen::Dynamic>;
using Mat3X = Eigen::Matrix<double, 3, Eigen::Dynamic>;
/// Row-major dynamic matrix, used for knot-major trajectory storage.
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kPi = std::numbers::pi;

/// A precondition of an operation was violated by the caller.
class ContractError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

/// Input data failed a load-time validation check.
class ValidationError : public std::runtime_error
{
public:
  ValidationError(std::string check, std::string entity, const std::string & what)
      : std::runtime_error(check + " [" + entity + "]: " + what), check_(std::move(check)),
        entity_(std::move(entity))
  {}

  const std::string & check() const noexcept { return check_; }
  const std::string & entity() const noexcept { return entity_; }

private:
  std::string check_;
  std::string entity_;
};

/// No free set contains a key point of the reference trajectory.
class AssignmentError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const char * msg)
{
  if (!cond) { throw ContractError(msg); }
}

inline void require(bool cond, const std::string & msg)
{
  if (!cond) { throw ContractError(msg); }
}

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a)
{
  double r = std::remainder(a, 2.0 * kPi);  // [-pi, pi]
  if (r <= -kPi) { r += 2.0 * kPi; }
  return r;
}

}  // namespace sfmpc

#endif  // SFMPC__CORE_HPP_
