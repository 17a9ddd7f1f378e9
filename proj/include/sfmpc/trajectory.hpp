#ifndef SFMPC__TRAJECTORY_HPP_
#define SFMPC__TRAJECTORY_HPP_

/**
 * @file
 * @brief Knot-grid trajectories driven by piecewise-constant jerk.
 *
 * A trajectory with horizon N has N+1 knots (positions, velocities, accelerations) and N jerk
 * controls; jerk k acts on the interval [t_k, t_{k+1}]. Propagation between knots is the exact
 * triple-integrator flight, so every state on the grid is an affine function of the initial
 * state and the jerk sequence.
 */

#include "sfmpc/core.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace sfmpc {

/// Joint state at one instant. The jerk block is the control of the interval that starts here.
struct StateVec
{
  Vec q, dq, ddq, dddq;

  static StateVec rest(const Vec & q)
  {
    const auto n = q.size();
    return {q, Vec::Zero(n), Vec::Zero(n), Vec::Zero(n)};
  }

  int dof() const { return static_cast<int>(q.size()); }
};

struct KnotTrajectory
{
  double t0{0.0};
  double Ts{0.1};
  RowMat q;     ///< (N+1) x dof
  RowMat dq;    ///< (N+1) x dof
  RowMat ddq;   ///< (N+1) x dof
  RowMat jerk;  ///< N x dof

  int N() const { return static_cast<int>(jerk.rows()); }
  int dof() const { return static_cast<int>(q.cols()); }
  double horizon() const { return Ts * N(); }

  StateVec state(int k) const
  {
    StateVec s;
    s.q    = q.row(k).transpose();
    s.dq   = dq.row(k).transpose();
    s.ddq  = ddq.row(k).transpose();
    s.dddq = k < N() ? Vec(jerk.row(k).transpose()) : Vec::Zero(dof());
    return s;
  }

  /// Jerk controls flattened interval-major: u[k * dof + j].
  Vec controls() const { return Eigen::Map<const Vec>(jerk.data(), jerk.size()); }

  /// Positions flattened knot-major: q[k * dof + j].
  Vec positions() const { return Eigen::Map<const Vec>(q.data(), q.size()); }

  bool operator==(const KnotTrajectory & o) const
  {
    return t0 == o.t0 && Ts == o.Ts && q == o.q && dq == o.dq && ddq == o.ddq && jerk == o.jerk;
  }
};

struct Derivs
{
  Vec q, dq, ddq;
};

inline Derivs integrate_step(const Vec & q, const Vec & dq, const Vec & ddq, const Vec & jerk, double Ts)
{
  require(q.size() == dq.size() && q.size() == ddq.size() && q.size() == jerk.size(),
    "integrate_step: dimension mismatch");
  const double T2 = Ts * Ts / 2.0;
  const double T3 = Ts * Ts * Ts / 6.0;
  return {q + Ts * dq + T2 * ddq + T3 * jerk, dq + Ts * ddq + T2 * jerk, ddq + Ts * jerk};
}

/// Continuous evaluation inside interval k at local time tau in [0, Ts].
inline Derivs eval_in_interval(const KnotTrajectory & tr, int k, double tau)
{
  const Vec q   = tr.q.row(k).transpose();
  const Vec dq  = tr.dq.row(k).transpose();
  const Vec ddq = tr.ddq.row(k).transpose();
  const Vec j   = tr.jerk.row(k).transpose();
  return integrate_step(q, dq, ddq, j, tau);
}

inline KnotTrajectory rollout(const StateVec & x0, const RowMat & jerks, double Ts, double t0 = 0.0)
{
  const int n = x0.dof();
  require(jerks.cols() == n, "rollout: jerk columns must equal dof");
  require(x0.dq.size() == n && x0.ddq.size() == n, "rollout: state dimension mismatch");
  require(Ts > 0.0, "rollout: Ts must be positive");
  const int N = static_cast<int>(jerks.rows());
  KnotTrajectory tr;
  tr.t0   = t0;
  tr.Ts   = Ts;
  tr.q    = RowMat(N + 1, n);
  tr.dq   = RowMat(N + 1, n);
  tr.ddq  = RowMat(N + 1, n);
  tr.jerk = jerks;
  tr.q.row(0)   = x0.q.transpose();
  tr.dq.row(0)  = x0.dq.transpose();
  tr.ddq.row(0) = x0.ddq.transpose();
  for (int k = 0; k < N; ++k) {
    const auto nx = integrate_step(tr.q.row(k).transpose(), tr.dq.row(k).transpose(),
      tr.ddq.row(k).transpose(), jerks.row(k).transpose(), Ts);
    tr.q.row(k + 1)   = nx.q.transpose();
    tr.dq.row(k + 1)  = nx.dq.transpose();
    tr.ddq.row(k + 1) = nx.ddq.transpose();
  }
  return tr;
}

inline KnotTrajectory rollout_flat(const StateVec & x0, const Vec & u, double Ts, double t0 = 0.0)
{
  const int n = x0.dof();
  require(u.size() % n == 0, "rollout_flat: control length not a multiple of dof");
  RowMat jerks = Eigen::Map<const RowMat>(u.data(), u.size() / n, n);
  return rollout(x0, jerks, Ts, t0);
}

/// A trajectory resting at q for N intervals.
inline KnotTrajectory rest_trajectory(const Vec & q, int N, double Ts, double t0 = 0.0)
{
  return rollout(StateVec::rest(q), RowMat::Zero(N, q.size()), Ts, t0);
}

/// Largest absolute mismatch between stored knots and the exact constant-jerk propagation.
inline double propagation_error(const KnotTrajectory & tr)
{
  double err = 0.0;
  for (int k = 0; k < tr.N(); ++k) {
    const auto nx = eval_in_interval(tr, k, tr.Ts);
    err = std::max(err, (nx.q - tr.q.row(k + 1).transpose()).cwiseAbs().maxCoeff());
    err = std::max(err, (nx.dq - tr.dq.row(k + 1).transpose()).cwiseAbs().maxCoeff());
    err = std::max(err, (nx.ddq - tr.ddq.row(k + 1).transpose()).cwiseAbs().maxCoeff());
  }
  return err;
}

/**
 * @brief Controller applied beyond the horizon end.
 *
 * Returns the jerk to apply from a terminal state, or nullopt if it cannot keep the state safe.
 */
using TerminalController = std::function<std::optional<Vec>(const StateVec &)>;

/// Hold at rest: zero jerk. From a resting state this repeats the last position forever.
inline TerminalController hold_controller()
{
  return [](const StateVec & s) -> std::optional<Vec> { return Vec::Zero(s.dof()); };
}

/**
 * @brief Receding-horizon shift: knots 1..N become 0..N-1, the terminal controller generates the
 * new last interval, and t0 advances by Ts.
 */
inline KnotTrajectory shift(const KnotTrajectory & tr, const TerminalController & terminal = hold_controller())
{
  const int N = tr.N();
  const int n = tr.dof();
  require(N >= 1, "shift: empty trajectory");
  const StateVec last = tr.state(N);
  const auto u_term   = terminal(last);
  if (!u_term) { throw std::runtime_error("shift: terminal controller infeasible"); }
  require(u_term->size() == n, "shift: terminal controller returned wrong dimension");

  KnotTrajectory out;
  out.t0   = tr.t0 + tr.Ts;
  out.Ts   = tr.Ts;
  out.q    = RowMat(N + 1, n);
  out.dq   = RowMat(N + 1, n);
  out.ddq  = RowMat(N + 1, n);
  out.jerk = RowMat(N, n);
  out.q.topRows(N)   = tr.q.bottomRows(N);
  out.dq.topRows(N)  = tr.dq.bottomRows(N);
  out.ddq.topRows(N) = tr.ddq.bottomRows(N);
  if (N > 1) { out.jerk.topRows(N - 1) = tr.jerk.bottomRows(N - 1); }
  out.jerk.row(N - 1) = u_term->transpose();
  const auto nx = integrate_step(last.q, last.dq, last.ddq, *u_term, tr.Ts);
  out.q.row(N)   = nx.q.transpose();
  out.dq.row(N)  = nx.dq.transpose();
  out.ddq.row(N) = nx.ddq.transpose();
  return out;
}

struct DistanceWeights
{
  double w_q{1.0};
  double w_u{1e-4};
};

inline void require_same_grid(const KnotTrajectory & a, const KnotTrajectory & b)
{
  if (a.N() != b.N() || a.dof() != b.dof() || a.Ts != b.Ts) {
    throw ContractError("trajectories are on different grids");
  }
}

/// Weighted squared distance over position knots and jerk controls.
inline double traj_distance(const KnotTrajectory & a, const KnotTrajectory & b, const DistanceWeights & w = {})
{
  require_same_grid(a, b);
  return w.w_q * (a.q - b.q).squaredNorm() + w.w_u * (a.jerk - b.jerk).squaredNorm();
}

/**
 * @brief Constant linear map from jerk controls to knot states.
 *
 * For u stacked interval-major and states stacked knot-major, q = q_free(x0) + Sq u, and likewise
 * for dq and ddq. The matrices only depend on (N, Ts, dof).
 */
class RolloutMap
{
public:
  RolloutMap() = default;
  RolloutMap(int N, double Ts, int dof) : N_(N), Ts_(Ts), dof_(dof)
  {
    const int rows = (N + 1) * dof;
    const int cols = N * dof;
    Sq_   = Mat::Zero(rows, cols);
    Sdq_  = Mat::Zero(rows, cols);
    Sddq_ = Mat::Zero(rows, cols);
    for (int k = 1; k <= N; ++k) {
      for (int l = 0; l < k; ++l) {
        const double m  = static_cast<double>(k - l - 1);
        const double cq = Ts * Ts * Ts * (1.0 / 6.0 + m / 2.0 + m * m / 2.0);
        const double cv = Ts * Ts * (0.5 + m);
        const double ca = Ts;
        for (int j = 0; j < dof; ++j) {
          Sq_(k * dof + j, l * dof + j)   = cq;
          Sdq_(k * dof + j, l * dof + j)  = cv;
          Sddq_(k * dof + j, l * dof + j) = ca;
        }
      }
    }
  }

  int N() const { return N_; }
  double Ts() const { return Ts_; }
  int dof() const { return dof_; }
  int num_controls() const { return N_ * dof_; }

  const Mat & Sq() const { return Sq_; }
  const Mat & Sdq() const { return Sdq_; }
  const Mat & Sddq() const { return Sddq_; }

  /// Rows of Sq belonging to knot k (dof x N*dof).
  auto Sq_knot(int k) const { return Sq_.middleRows(k * dof_, dof_); }
  auto Sdq_knot(int k) const { return Sdq_.middleRows(k * dof_, dof_); }
  auto Sddq_knot(int k) const { return Sddq_.middleRows(k * dof_, dof_); }

private:
  int N_{0};
  double Ts_{0.0};
  int dof_{0};
  Mat Sq_, Sdq_, Sddq_;
};

/// CSV trace: t, q_*, dq_*, ddq_*, jerk_*. The last knot carries the zero hold jerk.
inline void write_csv(std::ostream & os, const KnotTrajectory & tr)
{
  const int n = tr.dof();
  os << "t";
  for (const char * name : {"q", "dq", "ddq", "jerk"}) {
    for (int j = 0; j < n; ++j) { os << ',' << name << '_' << j; }
  }
  os << '\n' << std::setprecision(17);
  for (int k = 0; k <= tr.N(); ++k) {
    os << tr.t0 + k * tr.Ts;
    for (int j = 0; j < n; ++j) { os << ',' << tr.q(k, j); }
    for (int j = 0; j < n; ++j) { os << ',' << tr.dq(k, j); }
    for (int j = 0; j < n; ++j) { os << ',' << tr.ddq(k, j); }
    for (int j = 0; j < n; ++j) { os << ',' << (k < tr.N() ? tr.jerk(k, j) : 0.0); }
    os << '\n';
  }
}

inline void write_csv(const std::string & path, const KnotTrajectory & tr)
{
  std::ofstream f(path);
  if (!f) { throw std::runtime_error("cannot open " + path); }
  write_csv(f, tr);
}

inline KnotTrajectory read_csv(std::istream & is)
{
  std::string line;
  if (!std::getline(is, line)) { throw std::runtime_error("read_csv: empty input"); }
  const auto cols = static_cast<int>(std::count(line.begin(), line.end(), ',')) + 1;
  if ((cols - 1) % 4 != 0) { throw std::runtime_error("read_csv: unexpected column count"); }
  const int n = (cols - 1) / 4;
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) { continue; }
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) { vals.push_back(std::stod(cell)); }
    if (static_cast<int>(vals.size()) != cols) { throw std::runtime_error("read_csv: ragged row"); }
    rows.push_back(std::move(vals));
  }
  if (rows.size() < 2) { throw std::runtime_error("read_csv: need at least two knots"); }
  const int N = static_cast<int>(rows.size()) - 1;
  KnotTrajectory tr;
  tr.t0   = rows[0][0];
  // Knot times are printed with full precision; recover Ts to the nanosecond.
  tr.Ts   = std::round((rows[N][0] - rows[0][0]) / N * 1e9) / 1e9;
  tr.q    = RowMat(N + 1, n);
  tr.dq   = RowMat(N + 1, n);
  tr.ddq  = RowMat(N + 1, n);
  tr.jerk = RowMat(N, n);
  for (int k = 0; k <= N; ++k) {
    for (int j = 0; j < n; ++j) {
      tr.q(k, j)   = rows[k][1 + j];
      tr.dq(k, j)  = rows[k][1 + n + j];
      tr.ddq(k, j) = rows[k][1 + 2 * n + j];
      if (k < N) { tr.jerk(k, j) = rows[k][1 + 3 * n + j]; }
    }
  }
  return tr;
}

inline KnotTrajectory read_csv(const std::string & path)
{
  std::ifstream f(path);
  if (!f) { throw std::runtime_error("cannot open " + path); }
  return read_csv(f);
}

}  // namespace sfmpc

#endif  // SFMPC__TRAJECTORY_HPP_
