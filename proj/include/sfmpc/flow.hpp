#ifndef SFMPC__FLOW_HPP_
#define SFMPC__FLOW_HPP_

/**
 * @file
 * @brief Conditional flow-matching model over position trajectories.
 *
 * The velocity field u(q, s | O) is a small 1D encoder-decoder along the knot axis:
 *
 *   x (L=Lp) -> B1 -> pool -> B2 -> pool -> B3 -> up (+B2) -> B4 -> up -> B5 (+B1) -> conv_out
 *
 * where each block is conv(k=3) + conditioning bias + SiLU. The conditioning vector is
 * SiLU(MLP(obs) + W_s phi(s)) with phi a sinusoidal feature map of the flow time; a separate linear
 * head maps it to a per-channel bias for each block. The knot sequence is padded to a multiple of 4
 * by repeating the last knot and the output is cropped back. The output convolution starts at
 * zero, so a fresh model is the zero field.
 *
 * Loss convention: mean over the batch of the squared error summed over knots and joints, divided
 * by (N+1)*dof.
 */

#include "sfmpc/nn.hpp"
#include "sfmpc/projection.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>

namespace sfmpc {

// ---------------------------------------------------------------------------------------------
// Observations

struct Observation
{
  std::vector<Vec> q_history;  ///< oldest first, length H
  std::vector<Vec2> keypoints;
  Pose2 ee;
  Pose2 goal;
};

/// Normalization: joints by q_scale, Cartesian offsets from the base by the reach, angles by pi.
struct ObservationCodec
{
  int dof{3};
  int history{10};
  int num_keypoints{4};
  Vec q_scale;
  double reach{1.0};
  Vec2 base{Vec2::Zero()};

  int dim() const { return history * dof + 2 * num_keypoints + 6; }

  Vec encode(const Observation & o) const
  {
    require(static_cast<int>(o.q_history.size()) == history, "ObservationCodec: wrong history length");
    require(static_cast<int>(o.keypoints.size()) == num_keypoints, "ObservationCodec: wrong key-point count");
    Vec v(dim());
    int i = 0;
    for (const Vec & q : o.q_history) {
      require(q.size() == dof, "ObservationCodec: joint vector length");
      for (int j = 0; j < dof; ++j) { v[i++] = q[j] / q_scale[j]; }
    }
    for (const Vec2 & p : o.keypoints) {
      v[i++] = (p.x() - base.x()) / reach;
      v[i++] = (p.y() - base.y()) / reach;
    }
    for (const Pose2 * p : {&o.ee, &o.goal}) {
      v[i++] = (p->position.x() - base.x()) / reach;
      v[i++] = (p->position.y() - base.y()) / reach;
      v[i++] = p->orientation / kPi;
    }
    return v;
  }

  Observation decode(const Vec & v) const
  {
    require(v.size() == dim(), "ObservationCodec: wrong encoded length");
    Observation o;
    int i = 0;
    for (int h = 0; h < history; ++h) {
      Vec q(dof);
      for (int j = 0; j < dof; ++j) { q[j] = v[i++] * q_scale[j]; }
      o.q_history.push_back(q);
    }
    for (int k = 0; k < num_keypoints; ++k) {
      const double x = v[i++] * reach + base.x();
      const double y = v[i++] * reach + base.y();
      o.keypoints.emplace_back(x, y);
    }
    for (Pose2 * p : {&o.ee, &o.goal}) {
      const double x  = v[i++] * reach + base.x();
      const double y  = v[i++] * reach + base.y();
      p->position     = Vec2(x, y);
      p->orientation  = v[i++] * kPi;  // already in (-pi, pi]
    }
    return o;
  }
};

// ---------------------------------------------------------------------------------------------
// Model

struct FlowConfig
{
  int dof{3};
  int N{20};
  int history{10};
  int num_keypoints{4};
  int c1{32};
  int c2{48};
  int emb{64};
  int obs_hidden{64};
  int s_freqs{6};
};

class FlowModel
{
public:
  FlowConfig cfg;
  ObservationCodec codec;
  nn::ParamStore ps;
  nn::Linear obs1, obs2, s_lin;
  nn::Linear cond[5];
  nn::Conv1d conv[5];
  nn::Conv1d conv_out;

  FlowModel() = default;

  static FlowModel create(const FlowConfig & cfg, const ObservationCodec & codec, std::uint64_t seed)
  {
    require(cfg.N >= 2 && cfg.dof >= 1, "FlowModel: invalid shape");
    require(codec.dof == cfg.dof && codec.history == cfg.history && codec.num_keypoints == cfg.num_keypoints,
      "FlowModel: codec does not match config");
    FlowModel m;
    m.cfg   = cfg;
    m.codec = codec;
    m.declare();
    std::mt19937_64 rng(seed);
    auto init = [&](const auto & layer, int fan_in) { nn::init_uniform(m.ps(layer.W), fan_in, rng); };
    init(m.obs1, m.obs1.in);
    init(m.obs2, m.obs2.in);
    init(m.s_lin, m.s_lin.in);
    for (auto & c : m.cond) { nn::init_uniform(m.ps(c.W), c.in, rng, 0.5); }
    for (auto & c : m.conv) { init(c, 3 * c.cin); }
    // conv_out stays zero: the untrained field is identically zero.
    return m;
  }

  int padded_len() const { return ((cfg.N + 1 + 3) / 4) * 4; }
  int obs_dim() const { return codec.dim(); }
  Eigen::Index num_params() const { return ps.size(); }

  void declare()
  {
    ps = nn::ParamStore();
    obs1.declare(ps, "obs.fc1", obs_dim(), cfg.obs_hidden);
    obs2.declare(ps, "obs.fc2", cfg.obs_hidden, cfg.emb);
    s_lin.declare(ps, "time.fc", 2 * cfg.s_freqs, cfg.emb);
    const int outs[5] = {cfg.c1, cfg.c2, cfg.c2, cfg.c2, cfg.c1};
    const int ins[5]  = {cfg.dof, cfg.c1, cfg.c2, cfg.c2, cfg.c2};
    for (int i = 0; i < 5; ++i) {
      cond[i].declare(ps, "block" + std::to_string(i) + ".cond", cfg.emb, outs[i]);
      conv[i].declare(ps, "block" + std::to_string(i) + ".conv", ins[i], outs[i]);
    }
    conv_out.declare(ps, "out.conv", cfg.c1, cfg.dof);
  }

  RowMat time_features(const Vec & s) const
  {
    RowMat f(s.size(), 2 * cfg.s_freqs);
    for (Eigen::Index b = 0; b < s.size(); ++b) {
      for (int i = 0; i < cfg.s_freqs; ++i) {
        const double w    = std::ldexp(1.0, i);
        f(b, 2 * i)       = std::sin(w * s[b]);
        f(b, 2 * i + 1)   = std::cos(w * s[b]);
      }
    }
    return f;
  }
};

/// Intermediate values of one batched forward pass, kept for backward.
struct FlowCache
{
  int B{0};
  RowMat obs, sfeat, a1, h1o, a2, e;
  RowMat cb[5];
  RowMat col[5], z[5], h[5];
  RowMat u2, u1, v, col_out;
};

namespace detail {

/// Stack B trajectories ((N+1) x dof each) into padded (B*Lp x dof), scaled by q_scale.
inline RowMat pad_inputs(const FlowModel & m, const std::vector<const RowMat *> & qs)
{
  const int Lp = m.padded_len(), K = m.cfg.N + 1, n = m.cfg.dof;
  RowMat X(static_cast<Eigen::Index>(qs.size()) * Lp, n);
  for (std::size_t b = 0; b < qs.size(); ++b) {
    const RowMat & q = *qs[b];
    require(q.rows() == K && q.cols() == n, "flow_forward: trajectory shape does not match the model");
    for (int t = 0; t < Lp; ++t) {
      const int src = std::min(t, K - 1);
      for (int j = 0; j < n; ++j) { X(static_cast<Eigen::Index>(b) * Lp + t, j) = q(src, j) / m.codec.q_scale[j]; }
    }
  }
  return X;
}

}  // namespace detail

/// Batched forward; out is (B*(N+1)) x dof, sample-major.
inline RowMat flow_forward_batch(const FlowModel & m, const std::vector<const RowMat *> & qs, const Vec & s,
  const RowMat & obs, FlowCache * cache = nullptr)
{
  const int B  = static_cast<int>(qs.size());
  const int Lp = m.padded_len(), K = m.cfg.N + 1;
  require(s.size() == B && obs.rows() == B, "flow_forward: batch size mismatch");
  require(obs.cols() == m.obs_dim(), "flow_forward: observation length mismatch");
  FlowCache local;
  FlowCache & c = cache ? *cache : local;
  c.B           = B;
  c.obs         = obs;
  c.sfeat       = m.time_features(s);
  c.a1          = m.obs1.forward(m.ps, obs);
  c.h1o         = nn::silu(c.a1);
  c.a2          = m.obs2.forward(m.ps, c.h1o) + c.sfeat * m.ps(m.s_lin.W);
  c.a2.rowwise() += m.ps(m.s_lin.b).row(0);
  c.e = nn::silu(c.a2);
  for (int i = 0; i < 5; ++i) { c.cb[i] = m.cond[i].forward(m.ps, c.e); }

  const RowMat x0 = detail::pad_inputs(m, qs);
  auto block      = [&](int i, const RowMat & in, int L) {
    c.z[i] = m.conv[i].forward(m.ps, in, B, L, &c.col[i]);
    nn::add_per_sample(c.z[i], c.cb[i], B, L);
    c.h[i] = nn::silu(c.z[i]);
  };
  block(0, x0, Lp);
  block(1, nn::pool2(c.h[0], B, Lp), Lp / 2);
  block(2, nn::pool2(c.h[1], B, Lp / 2), Lp / 4);
  c.u2 = nn::up2(c.h[2], B, Lp / 4) + c.h[1];
  block(3, c.u2, Lp / 2);
  c.u1 = nn::up2(c.h[3], B, Lp / 2);
  block(4, c.u1, Lp);
  c.v              = c.h[4] + c.h[0];
  const RowMat out = m.conv_out.forward(m.ps, c.v, B, Lp, &c.col_out);

  RowMat y(static_cast<Eigen::Index>(B) * K, m.cfg.dof);
  for (int b = 0; b < B; ++b) { y.middleRows(static_cast<Eigen::Index>(b) * K, K) = out.middleRows(static_cast<Eigen::Index>(b) * Lp, K); }
  return y;
}

/// Parameter gradient of sum(dy .* y) for the cached forward pass.
inline Vec flow_backward(const FlowModel & m, const FlowCache & c, const RowMat & dy)
{
  const int B = c.B, Lp = m.padded_len(), K = m.cfg.N + 1;
  Vec grad    = Vec::Zero(m.ps.size());
  RowMat dout = RowMat::Zero(static_cast<Eigen::Index>(B) * Lp, m.cfg.dof);
  for (int b = 0; b < B; ++b) { dout.middleRows(static_cast<Eigen::Index>(b) * Lp, K) = dy.middleRows(static_cast<Eigen::Index>(b) * K, K); }

  const RowMat dv = m.conv_out.backward(m.ps, c.col_out, dout, B, Lp, grad);
  RowMat de       = RowMat::Zero(B, m.cfg.emb);
  // Block backward: returns dL/d(input) and accumulates the conditioning gradient.
  auto block_back = [&](int i, const RowMat & dh, int L, bool need_dx) {
    const RowMat dz  = nn::silu_backward(c.z[i], dh);
    const RowMat dcb = nn::sum_per_sample(dz, B, L);
    de += m.cond[i].backward(m.ps, c.e, dcb, grad);
    return m.conv[i].backward(m.ps, c.col[i], dz, B, L, grad, need_dx);
  };
  RowMat dh0      = dv;  // skip connection into v
  const RowMat du1 = block_back(4, dv, Lp, true);
  const RowMat dh3 = nn::up2_backward(du1, B, Lp / 2);
  const RowMat du2 = block_back(3, dh3, Lp / 2, true);
  const RowMat dh2 = nn::up2_backward(du2, B, Lp / 4);
  RowMat dh1       = du2;  // skip connection into u2
  const RowMat dp2 = block_back(2, dh2, Lp / 4, true);
  dh1 += nn::pool2_backward(dp2, B, Lp / 2);
  const RowMat dp1 = block_back(1, dh1, Lp / 2, true);
  dh0 += nn::pool2_backward(dp1, B, Lp);
  block_back(0, dh0, Lp, false);

  const RowMat da2 = nn::silu_backward(c.a2, de);
  m.ps.map(grad, m.s_lin.W).noalias() += c.sfeat.transpose() * da2;
  m.ps.map(grad, m.s_lin.b).row(0) += da2.colwise().sum();
  const RowMat dh1o = m.obs2.backward(m.ps, c.h1o, da2, grad);
  const RowMat da1  = nn::silu_backward(c.a1, dh1o);
  m.obs1.backward(m.ps, c.obs, da1, grad);
  return grad;
}

/// Single-sample velocity field, (N+1) x dof.
inline RowMat flow_forward(const FlowModel & m, const RowMat & q, double s, const Vec & obs_encoded)
{
  require(s >= 0.0 && s <= 1.0, "flow_forward: s must be in [0, 1]");
  Vec sv = Vec::Constant(1, s);
  RowMat o(1, obs_encoded.size());
  o.row(0) = obs_encoded.transpose();
  return flow_forward_batch(m, {&q}, sv, o);
}

// ---------------------------------------------------------------------------------------------
// Samples and loss

struct FlowSample
{
  RowMat q_s;     ///< network input, (N+1) x dof
  double s{0.0};
  Vec obs;        ///< encoded observation
  RowMat target;  ///< regression target, (N+1) x dof
};

struct LossGrad
{
  double loss{0.0};
  Vec grad;
};

inline LossGrad fm_loss(const FlowModel & m, const std::vector<const FlowSample *> & batch, bool with_grad = true)
{
  require(!batch.empty(), "fm_loss: empty batch");
  const int B = static_cast<int>(batch.size()), K = m.cfg.N + 1, n = m.cfg.dof;
  std::vector<const RowMat *> qs;
  Vec s(B);
  RowMat obs(B, m.obs_dim());
  RowMat tgt(static_cast<Eigen::Index>(B) * K, n);
  for (int b = 0; b < B; ++b) {
    qs.push_back(&batch[b]->q_s);
    s[b]       = batch[b]->s;
    obs.row(b) = batch[b]->obs.transpose();
    tgt.middleRows(static_cast<Eigen::Index>(b) * K, K) = batch[b]->target;
  }
  FlowCache cache;
  const RowMat y    = flow_forward_batch(m, qs, s, obs, with_grad ? &cache : nullptr);
  const RowMat diff = y - tgt;
  const double norm = static_cast<double>(B) * K * n;
  LossGrad out;
  out.loss = diff.squaredNorm() / norm;
  if (with_grad) { out.grad = flow_backward(m, cache, (2.0 / norm) * diff); }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Source distribution and target flow

/**
 * @brief Samples of p_0: a minimum-norm braking trajectory from x0 (terminal rest), with Gaussian
 * jerk noise, re-corrected onto the terminal-rest equalities so every sample ends at rest.
 */
class SourceSampler
{
public:
  SourceSampler(int N, double Ts, int dof, Vec jerk_sigma) : map_(N, Ts, dof), sigma_(std::move(jerk_sigma))
  {
    const int n = N * dof;
    A_          = Mat::Zero(3 * dof, n);
    A_.topRows(dof)         = map_.Sdq_knot(N);
    A_.middleRows(dof, dof) = map_.Sddq_knot(N);
    for (int j = 0; j < dof; ++j) { A_(2 * dof + j, (N - 1) * dof + j) = 1.0; }
    AAt_.compute(A_ * A_.transpose());
  }

  /// Minimum-norm jerks that bring x0 to rest.
  Vec braking_controls(const StateVec & x0) const
  {
    const KnotTrajectory free = rollout_flat(x0, Vec::Zero(map_.num_controls()), map_.Ts());
    const int N = map_.N(), dof = map_.dof();
    Vec b(3 * dof);
    b << -free.dq.row(N).transpose(), -free.ddq.row(N).transpose(), Vec::Zero(dof);
    return A_.transpose() * AAt_.solve(b);
  }

  /// Projects jerks onto the terminal-rest equalities (minimum-norm correction).
  Vec restore_rest(const StateVec & x0, const Vec & u) const
  {
    const KnotTrajectory tr = rollout_flat(x0, u, map_.Ts());
    const int N = map_.N(), dof = map_.dof();
    Vec r(3 * dof);
    r << tr.dq.row(N).transpose(), tr.ddq.row(N).transpose(), u.segment((N - 1) * dof, dof);
    return u - A_.transpose() * AAt_.solve(r);
  }

  KnotTrajectory sample(const StateVec & x0, std::mt19937_64 & rng, double t0 = 0.0) const
  {
    std::normal_distribution<double> nd(0.0, 1.0);
    Vec u = braking_controls(x0);
    const int dof = map_.dof();
    for (Eigen::Index i = 0; i < u.size(); ++i) { u[i] += sigma_[i % dof] * nd(rng); }
    return rollout_flat(x0, restore_rest(x0, u), map_.Ts(), t0);
  }

  KnotTrajectory braking(const StateVec & x0, double t0 = 0.0) const
  {
    return rollout_flat(x0, braking_controls(x0), map_.Ts(), t0);
  }

private:
  RolloutMap map_;
  Vec sigma_;
  Mat A_;
  Eigen::LLT<Mat> AAt_;
};

/// Linear interpolation a + s (b - a) of every field; a rollout from a shared x0 stays a rollout.
inline KnotTrajectory lerp(const KnotTrajectory & a, const KnotTrajectory & b, double s)
{
  require_same_grid(a, b);
  KnotTrajectory o = a;
  o.q              = a.q + s * (b.q - a.q);
  o.dq             = a.dq + s * (b.dq - a.dq);
  o.ddq            = a.ddq + s * (b.ddq - a.ddq);
  o.jerk           = a.jerk + s * (b.jerk - a.jerk);
  return o;
}

/// Projection used for dataset construction: converged SQP with an assignment taken from the input.
inline std::optional<ProjectionResult> project_safe(const Projector & P, const KnotTrajectory & tr, const StateVec & x0,
  const SetAssignment * assign = nullptr)
{
  const SetAssignment a = assign ? *assign : assign_sets(P.spec(), P.model(), tr, false);
  auto r                = P.project_full(tr, x0, a);
  if (!r.report.ok()) { return std::nullopt; }
  return r;
}

/**
 * @brief Forward-difference derivative of the projected interpolation path at s.
 *
 * Both evaluation points use the assignment of the point at s so the difference is taken on one
 * smooth branch of the projection.
 */
inline std::optional<RowMat> target_flow(const Projector & P, const KnotTrajectory & q0, const KnotTrajectory & q1, double s,
  double ds_fd, const StateVec & x0, KnotTrajectory * q_s_out = nullptr, SetAssignment * assign_out = nullptr)
{
  require(s >= 0.0 && s + ds_fd <= 1.0 + 1e-12 && ds_fd > 0.0, "target_flow: need 0 <= s <= 1 - ds_fd");
  const KnotTrajectory a = lerp(q0, q1, s);
  const KnotTrajectory b = lerp(q0, q1, s + ds_fd);
  const SetAssignment asg = assign_sets(P.spec(), P.model(), a, false);
  const auto pa = project_safe(P, a, x0, &asg);
  const auto pb = project_safe(P, b, x0, &asg);
  if (!pa || !pb) { return std::nullopt; }
  if (q_s_out) { *q_s_out = pa->traj; }
  if (assign_out) { *assign_out = asg; }
  return RowMat((pb->traj.q - pa->traj.q) / ds_fd);
}

// ---------------------------------------------------------------------------------------------
// Training

/// One training window: the state at a replan instant, the demonstrated next horizon, and O(t).
struct DemoWindow
{
  StateVec x0;
  KnotTrajectory prev;  ///< previous window shifted by one interval (rest at the demo start)
  KnotTrajectory q1;
  Vec obs;  ///< encoded
  int demo_id{0};
  int step{0};
};

struct TrainConfig
{
  int steps{2000};
  int batch{64};
  double lr{1e-3};
  std::uint64_t seed{0};
  double clip_norm{1.0};
  double final_lr_fraction{1.0};  ///< cosine decay from lr to this fraction of it; 1 keeps lr constant

  double lr_at(int it) const
  {
    if (final_lr_fraction >= 1.0 || steps <= 1) { return lr; }
    const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * it / (steps - 1)));
    return lr * (final_lr_fraction + (1.0 - final_lr_fraction) * c);
  }
};

struct TrainLog
{
  std::vector<double> loss;
};

/**
 * @brief Stage 1: plain conditional flow matching on demonstrations.
 *
 * q1 from the windows, q0 from the source sampler rolled out from the same x0, straight-line paths,
 * target q1 - q0. Nothing is projected.
 */
inline TrainLog train_stage1(FlowModel & m, const std::vector<DemoWindow> & windows, const SourceSampler & src,
  const TrainConfig & tc)
{
  if (windows.empty()) { throw ContractError("train_stage1: empty dataset"); }
  std::mt19937_64 rng(tc.seed);
  std::uniform_int_distribution<std::size_t> pick(0, windows.size() - 1);
  std::uniform_real_distribution<double> us(0.0, 1.0);
  nn::Adam opt;
  opt.lr        = tc.lr;
  opt.clip_norm = tc.clip_norm;
  TrainLog log;
  std::vector<FlowSample> samples(static_cast<std::size_t>(tc.batch));
  std::vector<const FlowSample *> ptrs;
  for (auto & s : samples) { ptrs.push_back(&s); }
  for (int it = 0; it < tc.steps; ++it) {
    for (auto & smp : samples) {
      const DemoWindow & w     = windows[pick(rng)];
      const KnotTrajectory q0  = src.sample(w.x0, rng, w.q1.t0);
      smp.s                    = us(rng);
      smp.q_s                  = q0.q + smp.s * (w.q1.q - q0.q);
      smp.target               = w.q1.q - q0.q;
      smp.obs                  = w.obs;
    }
    const LossGrad lg = fm_loss(m, ptrs);
    log.loss.push_back(lg.loss);
    opt.lr = tc.lr_at(it);
    opt.step(m.ps.theta(), lg.grad);
  }
  return log;
}

/// Trains on a fixed sample set (stage-2 finetuning and overfit checks).
inline TrainLog train_on_samples(FlowModel & m, const std::vector<FlowSample> & data, const TrainConfig & tc)
{
  if (data.empty()) { throw ContractError("train_on_samples: empty dataset"); }
  std::mt19937_64 rng(tc.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  nn::Adam opt;
  opt.lr        = tc.lr;
  opt.clip_norm = tc.clip_norm;
  TrainLog log;
  std::vector<const FlowSample *> ptrs(static_cast<std::size_t>(tc.batch));
  for (int it = 0; it < tc.steps; ++it) {
    for (auto & p : ptrs) { p = &data[pick(rng)]; }
    const LossGrad lg = fm_loss(m, ptrs);
    log.loss.push_back(lg.loss);
    opt.lr = tc.lr_at(it);
    opt.step(m.ps.theta(), lg.grad);
  }
  return log;
}

/// Stage 2: continue training on the safety dataset with a lower learning rate (0.1x by default).
inline TrainLog finetune_stage2(FlowModel & m, const std::vector<FlowSample> & safe_samples, TrainConfig tc,
  double lr_factor = 0.1)
{
  if (safe_samples.empty()) { throw ContractError("finetune_stage2: empty dataset"); }
  tc.lr *= lr_factor;
  return train_on_samples(m, safe_samples, tc);
}

/// Mean loss over a sample set, in chunks.
inline double dataset_loss(const FlowModel & m, const std::vector<FlowSample> & data, int chunk = 128)
{
  double acc = 0.0;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(chunk)) {
    std::vector<const FlowSample *> ptrs;
    for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(chunk)); ++j) { ptrs.push_back(&data[j]); }
    acc += fm_loss(m, ptrs, false).loss * static_cast<double>(ptrs.size());
  }
  return acc / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------------------------
// Model container: "SFMPC-FLOW-v1\n", u64 header length, JSON header, then float64 tensors.

inline constexpr const char * kModelMagic = "SFMPC-FLOW-v1\n";

namespace detail {

inline void write_le_u64(std::ostream & os, std::uint64_t v)
{
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) { b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF); }
  os.write(reinterpret_cast<const char *>(b), 8);
}

inline std::uint64_t read_le_u64(std::istream & is)
{
  unsigned char b[8];
  is.read(reinterpret_cast<char *>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) { v |= static_cast<std::uint64_t>(b[i]) << (8 * i); }
  return v;
}

inline void write_f64(std::ostream & os, double d)
{
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  write_le_u64(os, u);
}

inline double read_f64(std::istream & is)
{
  const std::uint64_t u = read_le_u64(is);
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}

}  // namespace detail

inline void write_container(const std::string & path, nlohmann::json header, const nn::ParamStore & ps)
{
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto & e : ps.entries()) { tensors.push_back({{"name", e.name}, {"shape", {e.rows, e.cols}}}); }
  header["tensors"] = tensors;
  const std::string h = header.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) { throw std::runtime_error("cannot write " + path); }
  f.write(kModelMagic, static_cast<std::streamsize>(std::strlen(kModelMagic)));
  detail::write_le_u64(f, h.size());
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (Eigen::Index i = 0; i < ps.size(); ++i) { detail::write_f64(f, ps.theta()[i]); }
}

/// Reads header and raw parameters; the caller rebuilds the layout and checks it against "tensors".
inline std::pair<nlohmann::json, Vec> read_container(const std::string & path)
{
  std::ifstream f(path, std::ios::binary);
  if (!f) { throw ValidationError("model_file", path, "cannot open"); }
  std::string magic(std::strlen(kModelMagic), '\0');
  f.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (magic != kModelMagic) { throw ValidationError("model_file", path, "bad magic"); }
  const std::uint64_t n = detail::read_le_u64(f);
  std::string h(n, '\0');
  f.read(h.data(), static_cast<std::streamsize>(n));
  nlohmann::json header = nlohmann::json::parse(h);
  Eigen::Index total    = 0;
  for (const auto & t : header.at("tensors")) { total += t.at("shape").at(0).get<Eigen::Index>() * t.at("shape").at(1).get<Eigen::Index>(); }
  Vec theta(total);
  for (Eigen::Index i = 0; i < total; ++i) { theta[i] = detail::read_f64(f); }
  if (!f) { throw ValidationError("model_file", path, "truncated parameter block"); }
  return {header, theta};
}

inline void check_layout(const nlohmann::json & header, const nn::ParamStore & ps, const std::string & path)
{
  const auto & t = header.at("tensors");
  if (t.size() != ps.entries().size()) { throw ValidationError("model_file", path, "tensor count mismatch"); }
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto & e = ps.entries()[i];
    if (t[i].at("name") != e.name || t[i].at("shape").at(0) != e.rows || t[i].at("shape").at(1) != e.cols) {
      throw ValidationError("model_file", path, "tensor layout mismatch at " + e.name);
    }
  }
}

inline nlohmann::json codec_to_json(const ObservationCodec & c)
{
  return {{"dof", c.dof}, {"history", c.history}, {"num_keypoints", c.num_keypoints},
    {"q_scale", std::vector<double>(c.q_scale.data(), c.q_scale.data() + c.q_scale.size())}, {"reach", c.reach},
    {"base", {c.base.x(), c.base.y()}}};
}

inline ObservationCodec codec_from_json(const nlohmann::json & j)
{
  ObservationCodec c;
  c.dof           = j.at("dof");
  c.history       = j.at("history");
  c.num_keypoints = j.at("num_keypoints");
  const auto qs   = j.at("q_scale").get<std::vector<double>>();
  c.q_scale       = Eigen::Map<const Vec>(qs.data(), static_cast<Eigen::Index>(qs.size()));
  c.reach         = j.at("reach");
  c.base          = Vec2(j.at("base").at(0).get<double>(), j.at("base").at(1).get<double>());
  return c;
}

inline void save_flow_model(const std::string & path, const FlowModel & m, const nlohmann::json & meta = {})
{
  nlohmann::json h;
  h["kind"]   = "flow";
  h["config"] = {{"dof", m.cfg.dof}, {"N", m.cfg.N}, {"history", m.cfg.history}, {"num_keypoints", m.cfg.num_keypoints},
    {"c1", m.cfg.c1}, {"c2", m.cfg.c2}, {"emb", m.cfg.emb}, {"obs_hidden", m.cfg.obs_hidden}, {"s_freqs", m.cfg.s_freqs}};
  h["codec"] = codec_to_json(m.codec);
  h["meta"]  = meta;
  write_container(path, h, m.ps);
}

inline FlowModel load_flow_model(const std::string & path)
{
  auto [h, theta] = read_container(path);
  if (h.value("kind", "") != "flow") { throw ValidationError("model_file", path, "not a flow model"); }
  FlowModel m;
  const auto & c = h.at("config");
  m.cfg          = {c.at("dof"), c.at("N"), c.at("history"), c.at("num_keypoints"), c.at("c1"), c.at("c2"), c.at("emb"),
             c.at("obs_hidden"), c.at("s_freqs")};
  m.codec        = codec_from_json(h.at("codec"));
  m.declare();
  check_layout(h, m.ps, path);
  m.ps.theta() = theta;
  return m;
}

}  // namespace sfmpc

#endif  // SFMPC__FLOW_HPP_
