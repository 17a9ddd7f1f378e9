#ifndef SFMPC__QP_HPP_
#define SFMPC__QP_HPP_

/**
 * @file
 * @brief Dense strictly convex quadratic programming.
 *
 * Solves
 *   min  1/2 x^T H x + g^T x
 *   s.t. A_eq x  = b_eq,
 *        A_in x <= b_in,
 *        lb <= x <= ub,
 * with H positive definite, using the dual active-set method of Goldfarb and Idnani. The method
 * starts from the unconstrained minimizer and adds violated constraints one at a time while
 * keeping dual feasibility, so it either terminates at the optimum or proves primal
 * infeasibility. The factor J = L^-T Q of H^-1 and the triangular R of the active normals are
 * updated with Givens rotations.
 *
 * Multipliers follow H x + g + A_eq^T y + A_in^T lambda - lambda_lb + lambda_ub = 0 with all
 * inequality multipliers non-negative.
 */

#include "sfmpc/core.hpp"

#include <limits>
#include <optional>
#include <vector>

namespace sfmpc {

struct QpProblem
{
  Mat H;
  Vec g;
  Mat A_in;
  Vec b_in;
  Mat A_eq;
  Vec b_eq;
  Vec lb;  ///< empty or size n, -inf allowed
  Vec ub;  ///< empty or size n, +inf allowed

  int num_vars() const { return static_cast<int>(g.size()); }
};

enum class QpStatus { Optimal, Infeasible, MaxIter, NumericalFailure };

inline const char * to_string(QpStatus s)
{
  switch (s) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::Infeasible: return "infeasible";
    case QpStatus::MaxIter: return "max_iter";
    case QpStatus::NumericalFailure: return "numerical_failure";
  }
  return "unknown";
}

struct QpResult
{
  QpStatus status{QpStatus::NumericalFailure};
  Vec x;
  Vec y_eq;
  Vec lambda_in;
  Vec lambda_lb;
  Vec lambda_ub;
  double objective{std::numeric_limits<double>::quiet_NaN()};
  int iterations{0};
  std::vector<int> active_in;  ///< indices of active A_in rows at the solution
};

struct QpSettings
{
  double tol{1e-9};    ///< primal feasibility on unit-normalized rows
  int max_iter{2000};  ///< active-set changes
};

/**
 * @brief Goldfarb-Idnani solver with a cached Cholesky factor of H.
 *
 * Construct once per Hessian; `solve` can then be called with any gradient and constraint set.
 * Not thread-safe; use one instance per thread.
 */
class QpSolver
{
public:
  QpSolver() = default;

  explicit QpSolver(const Mat & H) { factorize(H); }

  /// Returns false if H is not positive definite.
  bool factorize(const Mat & H)
  {
    require(H.rows() == H.cols(), "QpSolver: Hessian must be square");
    n_ = static_cast<int>(H.rows());
    llt_.compute(H);
    ok_ = llt_.info() == Eigen::Success;
    if (ok_) {
      // J0 = L^-T
      Mat I = Mat::Identity(n_, n_);
      J0_   = llt_.matrixU().solve(I);
      H_    = H;
    }
    return ok_;
  }

  bool factorized() const { return ok_; }
  int num_vars() const { return n_; }
  const Mat & hessian() const { return H_; }

  QpResult solve(const QpProblem & p, const QpSettings & s = {}) const
  {
    require(ok_, "QpSolver: Hessian not factorized or not positive definite");
    require(p.g.size() == n_, "QpSolver: gradient dimension mismatch");
    return run(p, s);
  }

private:
  struct Row
  {
    Vec n;        // GI normal (constraint n . x - d >= 0 or == 0)
    double d;     // GI offset
    double scale; // 1 / |original row|
    int kind;     // 0 eq, 1 in, 2 lb, 3 ub
    int index;    // index within its kind
  };

  QpResult run(const QpProblem & p, const QpSettings & s) const
  {
    const int n   = n_;
    const double inf = std::numeric_limits<double>::infinity();
    const double eps = std::numeric_limits<double>::epsilon();
    QpResult res;
    res.x         = Vec::Zero(n);
    res.y_eq      = Vec::Zero(p.A_eq.rows());
    res.lambda_in = Vec::Zero(p.A_in.rows());
    res.lambda_lb = Vec::Zero(p.lb.size());
    res.lambda_ub = Vec::Zero(p.ub.size());

    // Equalities first, then inequalities in GI ">= 0" form with unit normals.
    std::vector<Row> rows;
    require(p.A_eq.rows() == p.b_eq.size() && (p.A_eq.rows() == 0 || p.A_eq.cols() == n),
      "QpSolver: equality block dimension mismatch");
    require(p.A_in.rows() == p.b_in.size() && (p.A_in.rows() == 0 || p.A_in.cols() == n),
      "QpSolver: inequality block dimension mismatch");
    require(p.lb.size() == 0 || p.lb.size() == n, "QpSolver: lb dimension mismatch");
    require(p.ub.size() == 0 || p.ub.size() == n, "QpSolver: ub dimension mismatch");
    for (Eigen::Index i = 0; i < p.A_eq.rows(); ++i) {
      const double nr = p.A_eq.row(i).norm();
      if (nr == 0.0) {
        if (std::abs(p.b_eq[i]) > s.tol) {
          res.status = QpStatus::Infeasible;
          return res;
        }
        continue;
      }
      rows.push_back({p.A_eq.row(i).transpose() / nr, p.b_eq[i] / nr, 1.0 / nr, 0, static_cast<int>(i)});
    }
    const int me = static_cast<int>(rows.size());
    for (Eigen::Index i = 0; i < p.A_in.rows(); ++i) {
      const double nr = p.A_in.row(i).norm();
      if (nr == 0.0) {
        if (p.b_in[i] < -s.tol) {
          res.status = QpStatus::Infeasible;
          return res;
        }
        continue;
      }
      rows.push_back({-p.A_in.row(i).transpose() / nr, -p.b_in[i] / nr, 1.0 / nr, 1, static_cast<int>(i)});
    }
    for (Eigen::Index j = 0; j < p.lb.size(); ++j) {
      if (std::isfinite(p.lb[j])) { rows.push_back({Vec::Unit(n, j), p.lb[j], 1.0, 2, static_cast<int>(j)}); }
    }
    for (Eigen::Index j = 0; j < p.ub.size(); ++j) {
      if (std::isfinite(p.ub[j])) { rows.push_back({-Vec::Unit(n, j), -p.ub[j], 1.0, 3, static_cast<int>(j)}); }
    }
    const int mtot = static_cast<int>(rows.size());
    const int mi   = mtot - me;

    // Inequality normals as columns for fast slack evaluation.
    Mat NI(n, mi);
    Vec dI(mi);
    for (int i = 0; i < mi; ++i) {
      NI.col(i) = rows[me + i].n;
      dI[i]     = rows[me + i].d;
    }

    Mat J = J0_;
    Mat R = Mat::Zero(n, n);
    Vec x = -llt_.solve(p.g);
    Vec u = Vec::Zero(n + 1);
    std::vector<int> A(n + 1, -1);  // row ids (into `rows`) of the active set
    std::vector<char> active(mtot, 0), excluded(mtot, 0);
    int q          = 0;
    double R_norm  = 1.0;
    Vec d(n), z(n), r(n);

    auto compute_step = [&](const Vec & np) {
      d.noalias() = J.transpose() * np;
      z.noalias() = J.rightCols(n - q) * d.tail(n - q);
      if (q > 0) {
        r.head(q) = R.topLeftCorner(q, q).triangularView<Eigen::Upper>().solve(d.head(q));
      }
    };

    auto add_constraint = [&]() -> bool {
      for (int j = n - 1; j >= q + 1; --j) {
        const double a = d[j - 1], b = d[j];
        const double h = std::hypot(a, b);
        if (h == 0.0) { continue; }
        const double c = a / h, sn = b / h;
        d[j - 1] = h;
        d[j]     = 0.0;
        for (int k = 0; k < n; ++k) {
          const double t1 = J(k, j - 1), t2 = J(k, j);
          J(k, j - 1) = c * t1 + sn * t2;
          J(k, j)     = -sn * t1 + c * t2;
        }
      }
      ++q;
      R.col(q - 1).head(q) = d.head(q);
      if (std::abs(d[q - 1]) <= eps * R_norm) { return false; }
      R_norm = std::max(R_norm, std::abs(d[q - 1]));
      return true;
    };

    // Remove active position l; the pending multiplier at u[q] moves down with it.
    auto delete_constraint = [&](int l) {
      active[A[l]] = 0;
      for (int i = l; i < q - 1; ++i) {
        A[i]     = A[i + 1];
        u[i]     = u[i + 1];
        R.col(i) = R.col(i + 1);
      }
      A[q - 1] = A[q];
      u[q - 1] = u[q];
      A[q]     = -1;
      u[q]     = 0.0;
      R.col(q - 1).setZero();
      --q;
      for (int j = l; j < q; ++j) {
        const double a = R(j, j), b = R(j + 1, j);
        const double h = std::hypot(a, b);
        if (h == 0.0) { continue; }
        const double c = a / h, sn = b / h;
        R(j, j)     = h;
        R(j + 1, j) = 0.0;
        for (int k = j + 1; k < q; ++k) {
          const double t1 = R(j, k), t2 = R(j + 1, k);
          R(j, k)     = c * t1 + sn * t2;
          R(j + 1, k) = -sn * t1 + c * t2;
        }
        for (int k = 0; k < n; ++k) {
          const double t1 = J(k, j), t2 = J(k, j + 1);
          J(k, j)     = c * t1 + sn * t2;
          J(k, j + 1) = -sn * t1 + c * t2;
        }
      }
    };

    // Equality constraints.
    for (int i = 0; i < me; ++i) {
      const Vec & np = rows[i].n;
      compute_step(np);
      const double zn = z.dot(np);
      const double sv = np.dot(x) - rows[i].d;
      if (std::abs(zn) <= eps * (1.0 + z.norm())) {
        if (std::abs(sv) > s.tol) {
          res.status = QpStatus::Infeasible;
          return res;
        }
        continue;  // redundant
      }
      const double t2 = -sv / zn;
      x += t2 * z;
      u[q] = t2;
      for (int k = 0; k < q; ++k) { u[k] -= t2 * r[k]; }
      A[q]      = i;
      active[i] = 1;
      if (!add_constraint()) {
        res.status = QpStatus::NumericalFailure;
        return res;
      }
    }

    int iter = 0;
    Vec slack(mi);
    while (true) {
      if (++iter > s.max_iter) {
        res.status = QpStatus::MaxIter;
        break;
      }
      slack.noalias() = NI.transpose() * x - dI;
      int ip       = -1;
      double worst = -s.tol;
      for (int i = 0; i < mi; ++i) {
        if (active[me + i] || excluded[me + i]) { continue; }
        if (slack[i] < worst) {
          worst = slack[i];
          ip    = me + i;
        }
      }
      if (ip < 0) {
        res.status = QpStatus::Optimal;
        break;
      }
      const Vec np = rows[ip].n;
      double s_ip  = slack[ip - me];
      u[q]         = 0.0;
      A[q]         = ip;

      bool restart = false;
      while (!restart) {
        compute_step(np);
        int l     = -1;
        double t1 = inf;
        for (int k = 0; k < q; ++k) {
          if (A[k] < me) { continue; }  // equality multipliers are free
          if (r[k] > 0.0 && u[k] / r[k] < t1) {
            t1 = u[k] / r[k];
            l  = k;
          }
        }
        const double zn = z.dot(np);
        double t2       = inf;
        if (z.norm() > 1e3 * eps && zn > eps) {
          t2 = -s_ip / zn;
          if (t2 < 0.0) { t2 = inf; }
        }
        const double t = std::min(t1, t2);
        if (!std::isfinite(t)) {
          res.status = QpStatus::Infeasible;
          finish(p, rows, A, u, q, x, res);
          res.iterations = iter;
          return res;
        }
        if (!std::isfinite(t2)) {
          for (int k = 0; k < q; ++k) { u[k] -= t * r[k]; }
          u[q] += t;
          delete_constraint(l);
          continue;
        }
        x += t * z;
        for (int k = 0; k < q; ++k) { u[k] -= t * r[k]; }
        u[q] += t;
        if (t == t2) {
          active[ip] = 1;
          if (!add_constraint()) {
            res.status = QpStatus::NumericalFailure;
            finish(p, rows, A, u, q, x, res);
            res.iterations = iter;
            return res;
          }
          restart = true;
        } else {
          delete_constraint(l);
          s_ip = np.dot(x) - rows[ip].d;
          if (++iter > s.max_iter) {
            res.status = QpStatus::MaxIter;
            finish(p, rows, A, u, q, x, res);
            res.iterations = iter;
            return res;
          }
        }
      }
    }
    finish(p, rows, A, u, q, x, res);
    res.iterations = iter;
    return res;
  }

  void finish(const QpProblem & p, const std::vector<Row> & rows, const std::vector<int> & A, const Vec & u, int q,
    const Vec & x, QpResult & res) const
  {
    res.x = x;
    for (int k = 0; k < q; ++k) {
      const Row & rw = rows[A[k]];
      const double m = u[k] * rw.scale;
      switch (rw.kind) {
        case 0: res.y_eq[rw.index] = -m; break;
        case 1:
          res.lambda_in[rw.index] = m;
          res.active_in.push_back(rw.index);
          break;
        case 2: res.lambda_lb[rw.index] = m; break;
        case 3: res.lambda_ub[rw.index] = m; break;
        default: break;
      }
    }
    std::sort(res.active_in.begin(), res.active_in.end());
    res.objective = 0.5 * x.dot(p.H.rows() ? p.H * x : H_ * x) + p.g.dot(x);
  }

  int n_{0};
  bool ok_{false};
  Eigen::LLT<Mat> llt_;
  Mat J0_;
  Mat H_;
};

/// One-shot convenience wrapper.
inline QpResult solve_qp(const QpProblem & p, const QpSettings & s = {})
{
  QpSolver solver;
  if (!solver.factorize(p.H)) {
    QpResult r;
    r.status = QpStatus::NumericalFailure;
    return r;
  }
  return solver.solve(p, s);
}

struct KktResiduals
{
  double stationarity{0.0};
  double primal{0.0};
  double dual{0.0};
  double complementarity{0.0};
};

/// KKT certificate of a QP result.
inline KktResiduals kkt_residuals(const QpProblem & p, const QpResult & r)
{
  const Mat & H = p.H;
  Vec grad      = H * r.x + p.g;
  if (p.A_eq.rows()) { grad += p.A_eq.transpose() * r.y_eq; }
  if (p.A_in.rows()) { grad += p.A_in.transpose() * r.lambda_in; }
  if (p.lb.size()) { grad -= r.lambda_lb; }
  if (p.ub.size()) { grad += r.lambda_ub; }
  KktResiduals k;
  k.stationarity = grad.cwiseAbs().maxCoeff();
  auto upd       = [](double & a, double b) { a = std::max(a, b); };
  if (p.A_eq.rows()) { upd(k.primal, (p.A_eq * r.x - p.b_eq).cwiseAbs().maxCoeff()); }
  if (p.A_in.rows()) {
    const Vec s = p.A_in * r.x - p.b_in;
    upd(k.primal, std::max(0.0, s.maxCoeff()));
    upd(k.dual, std::max(0.0, -r.lambda_in.minCoeff()));
    upd(k.complementarity, (r.lambda_in.array() * s.array()).abs().maxCoeff());
  }
  for (Eigen::Index j = 0; j < p.lb.size(); ++j) {
    if (!std::isfinite(p.lb[j])) { continue; }
    upd(k.primal, std::max(0.0, p.lb[j] - r.x[j]));
    upd(k.dual, std::max(0.0, -r.lambda_lb[j]));
    upd(k.complementarity, std::abs(r.lambda_lb[j] * (r.x[j] - p.lb[j])));
  }
  for (Eigen::Index j = 0; j < p.ub.size(); ++j) {
    if (!std::isfinite(p.ub[j])) { continue; }
    upd(k.primal, std::max(0.0, r.x[j] - p.ub[j]));
    upd(k.dual, std::max(0.0, -r.lambda_ub[j]));
    upd(k.complementarity, std::abs(r.lambda_ub[j] * (p.ub[j] - r.x[j])));
  }
  return k;
}

}  // namespace sfmpc

#endif  // SFMPC__QP_HPP_
