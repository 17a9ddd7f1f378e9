#ifndef SFMPC_TESTS__QP_ORACLE_HPP_
#define SFMPC_TESTS__QP_ORACLE_HPP_

// Random QPs with a planted optimum and a brute-force active-set enumeration oracle.

#include "sfmpc/qp.hpp"

#include <random>

namespace sfmpc::oracle {

struct PlantedQp
{
  QpProblem qp;
  Vec x_star;
};

/// n vars, m inequalities, me equalities, the optimum has k <= 3 active inequalities.
inline PlantedQp random_planted_qp(std::mt19937_64 & rng, int n, int m, int me, int k)
{
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ud(0.1, 1.0);
  auto randn = [&](int r, int c) {
    Mat M(r, c);
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) { M(i, j) = nd(rng); }
    }
    return M;
  };
  PlantedQp p;
  const Mat B = randn(n, n);
  p.qp.H      = B * B.transpose() / n + 0.1 * Mat::Identity(n, n);
  p.x_star    = randn(n, 1);
  p.qp.A_in   = randn(m, n);
  p.qp.A_eq   = randn(me, n);
  p.qp.b_eq   = p.qp.A_eq * p.x_star;
  p.qp.b_in.resize(m);
  Vec lambda = Vec::Zero(m);
  for (int i = 0; i < m; ++i) {
    const double ax = p.qp.A_in.row(i).dot(p.x_star);
    if (i < k) {
      p.qp.b_in[i] = ax;
      lambda[i]    = ud(rng);
    } else {
      p.qp.b_in[i] = ax + ud(rng);
    }
  }
  const Vec y = randn(me, 1);
  p.qp.g      = -p.qp.H * p.x_star - p.qp.A_in.transpose() * lambda - p.qp.A_eq.transpose() * y;
  return p;
}

/**
 * @brief Minimum objective over all working sets of at most `max_active` inequalities (plus all
 * equalities) whose equality-constrained minimizer is feasible.
 *
 * Uses x(W) = x_u - H^-1 C^T mu with (C H^-1 C^T) mu = C x_u - d, so every subset costs one small
 * dense solve plus a feasibility scan against the precomputed A H^-1 A^T.
 */
inline double enumeration_oracle(const QpProblem & qp, int max_active, double feas_tol = 1e-9)
{
  const int n  = static_cast<int>(qp.g.size());
  const int m  = static_cast<int>(qp.A_in.rows());
  const int me = static_cast<int>(qp.A_eq.rows());
  Eigen::LLT<Mat> llt(qp.H);
  const Vec xu = -llt.solve(qp.g);
  const double fu = 0.5 * xu.dot(qp.H * xu) + qp.g.dot(xu);

  Mat A(me + m, n);
  Vec d(me + m);
  A << qp.A_eq, qp.A_in;
  d << qp.b_eq, qp.b_in;
  const Mat HiAt = llt.solve(A.transpose());
  const Mat M    = A * HiAt;
  const Vec Axu  = A * xu;

  double best = std::numeric_limits<double>::infinity();
  std::vector<int> W;
  auto evaluate = [&]() {
    std::vector<int> C;
    for (int i = 0; i < me; ++i) { C.push_back(i); }
    for (int w : W) { C.push_back(me + w); }
    const int c = static_cast<int>(C.size());
    Vec mu = Vec::Zero(0);
    Vec Ax = Axu;
    double f = fu;
    if (c > 0) {
      Mat Mc(c, c);
      Vec rhs(c);
      for (int a = 0; a < c; ++a) {
        rhs[a] = Axu[C[a]] - d[C[a]];
        for (int b = 0; b < c; ++b) { Mc(a, b) = M(C[a], C[b]); }
      }
      Eigen::FullPivLU<Mat> lu(Mc);
      if (lu.rank() < c) { return; }
      mu = lu.solve(rhs);
      for (int a = 0; a < c; ++a) { Ax -= M.col(C[a]) * mu[a]; }
      f += 0.5 * mu.dot(Mc * mu);
    }
    for (int i = 0; i < m; ++i) {
      if (Ax[me + i] > qp.b_in[i] + feas_tol * (1.0 + std::abs(qp.b_in[i]))) { return; }
    }
    for (int i = 0; i < me; ++i) {
      if (std::abs(Ax[i] - d[i]) > 1e-7) { return; }
    }
    best = std::min(best, f);
  };
  // Recursive subset walk.
  auto rec = [&](auto & self, int start) -> void {
    evaluate();
    if (static_cast<int>(W.size()) == max_active) { return; }
    for (int i = start; i < m; ++i) {
      W.push_back(i);
      self(self, i + 1);
      W.pop_back();
    }
  };
  rec(rec, 0);
  return best;
}

}  // namespace sfmpc::oracle

#endif  // SFMPC_TESTS__QP_ORACLE_HPP_
