#ifndef SFMPC__NN_HPP_
#define SFMPC__NN_HPP_

/**
 * @file
 * @brief Minimal neural-network toolkit: a flat parameter store, batched 1D convolution, dense
 * layers, SiLU, pooling/upsampling along time, and Adam.
 *
 * Activations are row-major matrices whose rows are (sample, time) pairs, sample-major, and whose
 * columns are channels. Every op has an explicit backward; nothing is taped.
 */

#include "sfmpc/core.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sfmpc::nn {

/// Named tensors laid out back to back in one flat vector (row-major inside each tensor).
class ParamStore
{
public:
  struct Entry
  {
    std::string name;
    int rows{0};
    int cols{0};
    Eigen::Index offset{0};
  };

  int add(const std::string & name, int rows, int cols)
  {
    entries_.push_back({name, rows, cols, size_});
    size_ += static_cast<Eigen::Index>(rows) * cols;
    theta_.conservativeResize(size_);
    theta_.tail(static_cast<Eigen::Index>(rows) * cols).setZero();
    return static_cast<int>(entries_.size()) - 1;
  }

  Eigen::Map<RowMat> operator()(int id) { return map(theta_, id); }
  Eigen::Map<const RowMat> operator()(int id) const { return cmap(theta_, id); }

  Eigen::Map<RowMat> map(Vec & flat, int id) const
  {
    const auto & e = entries_[static_cast<std::size_t>(id)];
    return Eigen::Map<RowMat>(flat.data() + e.offset, e.rows, e.cols);
  }
  Eigen::Map<const RowMat> cmap(const Vec & flat, int id) const
  {
    const auto & e = entries_[static_cast<std::size_t>(id)];
    return Eigen::Map<const RowMat>(flat.data() + e.offset, e.rows, e.cols);
  }

  Vec & theta() { return theta_; }
  const Vec & theta() const { return theta_; }
  Eigen::Index size() const { return size_; }
  const std::vector<Entry> & entries() const { return entries_; }

private:
  std::vector<Entry> entries_;
  Vec theta_;
  Eigen::Index size_{0};
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline RowMat silu(const RowMat & z)
{
  return z.unaryExpr([](double x) { return x * sigmoid(x); });
}

/// dL/dz given dL/dy for y = silu(z).
inline RowMat silu_backward(const RowMat & z, const RowMat & dy)
{
  return dy.binaryExpr(z, [](double g, double x) {
    const double s = sigmoid(x);
    return g * s * (1.0 + x * (1.0 - s));
  });
}

/// He-style uniform initialization.
inline void init_uniform(Eigen::Map<RowMat> w, int fan_in, std::mt19937_64 & rng, double gain = 1.0)
{
  const double a = gain * std::sqrt(3.0 / std::max(1, fan_in));
  std::uniform_real_distribution<double> u(-a, a);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) { w(i, j) = u(rng); }
  }
}

/// Dense layer: Y = X W + b, W is (in x out).
struct Linear
{
  int W{-1}, b{-1};
  int in{0}, out{0};

  void declare(ParamStore & ps, const std::string & name, int in_, int out_)
  {
    in  = in_;
    out = out_;
    W   = ps.add(name + ".weight", in, out);
    b   = ps.add(name + ".bias", 1, out);
  }

  RowMat forward(const ParamStore & ps, const RowMat & X) const
  {
    RowMat Y = X * ps(W);
    Y.rowwise() += ps(b).row(0);
    return Y;
  }

  /// Accumulates parameter gradients into `grad`; returns dL/dX.
  RowMat backward(const ParamStore & ps, const RowMat & X, const RowMat & dY, Vec & grad) const
  {
    ps.map(grad, W).noalias() += X.transpose() * dY;
    ps.map(grad, b).row(0) += dY.colwise().sum();
    return dY * ps(W).transpose();
  }
};

/// Kernel-3 convolution along time with zero padding at each sample's ends.
struct Conv1d
{
  int W{-1}, b{-1};
  int cin{0}, cout{0};

  void declare(ParamStore & ps, const std::string & name, int cin_, int cout_)
  {
    cin  = cin_;
    cout = cout_;
    W    = ps.add(name + ".weight", 3 * cin, cout);
    b    = ps.add(name + ".bias", 1, cout);
  }

  static RowMat im2col(const RowMat & X, int B, int L)
  {
    const auto C = X.cols();
    RowMat col   = RowMat::Zero(X.rows(), 3 * C);
    for (int s = 0; s < B; ++s) {
      for (int t = 0; t < L; ++t) {
        const Eigen::Index r = static_cast<Eigen::Index>(s) * L + t;
        for (int k = 0; k < 3; ++k) {
          const int tt = t + k - 1;
          if (tt < 0 || tt >= L) { continue; }
          col.block(r, k * C, 1, C) = X.row(static_cast<Eigen::Index>(s) * L + tt);
        }
      }
    }
    return col;
  }

  RowMat forward(const ParamStore & ps, const RowMat & X, int B, int L, RowMat * col_out = nullptr) const
  {
    RowMat col = im2col(X, B, L);
    RowMat Y   = col * ps(W);
    Y.rowwise() += ps(b).row(0);
    if (col_out) { *col_out = std::move(col); }
    return Y;
  }

  RowMat backward(const ParamStore & ps, const RowMat & col, const RowMat & dY, int B, int L, Vec & grad,
    bool need_dx = true) const
  {
    ps.map(grad, W).noalias() += col.transpose() * dY;
    ps.map(grad, b).row(0) += dY.colwise().sum();
    if (!need_dx) { return {}; }
    const RowMat dcol = dY * ps(W).transpose();
    RowMat dX         = RowMat::Zero(dY.rows(), cin);
    for (int s = 0; s < B; ++s) {
      for (int t = 0; t < L; ++t) {
        const Eigen::Index r = static_cast<Eigen::Index>(s) * L + t;
        for (int k = 0; k < 3; ++k) {
          const int tt = t + k - 1;
          if (tt < 0 || tt >= L) { continue; }
          dX.row(static_cast<Eigen::Index>(s) * L + tt) += dcol.block(r, k * cin, 1, cin);
        }
      }
    }
    return dX;
  }
};

/// Adds a per-sample row (B x C) to every time step of that sample.
inline void add_per_sample(RowMat & Y, const RowMat & cb, int B, int L)
{
  for (int s = 0; s < B; ++s) { Y.middleRows(static_cast<Eigen::Index>(s) * L, L).rowwise() += cb.row(s); }
}

inline RowMat sum_per_sample(const RowMat & dY, int B, int L)
{
  RowMat out(B, dY.cols());
  for (int s = 0; s < B; ++s) { out.row(s) = dY.middleRows(static_cast<Eigen::Index>(s) * L, L).colwise().sum(); }
  return out;
}

/// Average pooling by 2 along time (L even).
inline RowMat pool2(const RowMat & X, int B, int L)
{
  RowMat Y(static_cast<Eigen::Index>(B) * (L / 2), X.cols());
  for (int s = 0; s < B; ++s) {
    for (int t = 0; t < L / 2; ++t) {
      const auto src = static_cast<Eigen::Index>(s) * L + 2 * t;
      Y.row(static_cast<Eigen::Index>(s) * (L / 2) + t) = 0.5 * (X.row(src) + X.row(src + 1));
    }
  }
  return Y;
}

inline RowMat pool2_backward(const RowMat & dY, int B, int L)
{
  RowMat dX(static_cast<Eigen::Index>(B) * L, dY.cols());
  for (int s = 0; s < B; ++s) {
    for (int t = 0; t < L / 2; ++t) {
      const auto dst = static_cast<Eigen::Index>(s) * L + 2 * t;
      const auto g   = 0.5 * dY.row(static_cast<Eigen::Index>(s) * (L / 2) + t);
      dX.row(dst)     = g;
      dX.row(dst + 1) = g;
    }
  }
  return dX;
}

/// Nearest-neighbour upsampling by 2 along time; L is the input length.
inline RowMat up2(const RowMat & X, int B, int L)
{
  RowMat Y(static_cast<Eigen::Index>(B) * 2 * L, X.cols());
  for (int s = 0; s < B; ++s) {
    for (int t = 0; t < L; ++t) {
      const auto dst = static_cast<Eigen::Index>(s) * 2 * L + 2 * t;
      Y.row(dst)     = X.row(static_cast<Eigen::Index>(s) * L + t);
      Y.row(dst + 1) = X.row(static_cast<Eigen::Index>(s) * L + t);
    }
  }
  return Y;
}

inline RowMat up2_backward(const RowMat & dY, int B, int L)
{
  RowMat dX(static_cast<Eigen::Index>(B) * L, dY.cols());
  for (int s = 0; s < B; ++s) {
    for (int t = 0; t < L; ++t) {
      const auto src = static_cast<Eigen::Index>(s) * 2 * L + 2 * t;
      dX.row(static_cast<Eigen::Index>(s) * L + t) = dY.row(src) + dY.row(src + 1);
    }
  }
  return dX;
}

/// Adam with optional global-norm gradient clipping.
class Adam
{
public:
  double lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double eps{1e-8};
  double clip_norm{1.0};  ///< <= 0 disables clipping

  void step(Vec & theta, Vec grad)
  {
    if (m_.size() != theta.size()) {
      m_ = Vec::Zero(theta.size());
      v_ = Vec::Zero(theta.size());
      t_ = 0;
    }
    if (clip_norm > 0.0) {
      const double n = grad.norm();
      if (n > clip_norm) { grad *= clip_norm / n; }
    }
    ++t_;
    m_ = beta1 * m_ + (1.0 - beta1) * grad;
    v_ = beta2 * v_ + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    theta.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
  }

  std::int64_t steps() const { return t_; }

private:
  Vec m_, v_;
  std::int64_t t_{0};
};

}  // namespace sfmpc::nn

#endif  // SFMPC__NN_HPP_
