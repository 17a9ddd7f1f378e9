#ifndef SFMPC__BC_HPP_
#define SFMPC__BC_HPP_

/**
 * @file
 * @brief Behavior-cloning baseline: an MLP from (previous plan, current state, observation) to the
 * next plan's positions.
 *
 * The network predicts a residual over the previous plan's positions (in q_scale units); its last
 * layer starts at zero so the untrained model repeats the shifted previous plan. The output is
 * made dynamically consistent by an unconstrained jerk fit. No safety projection is involved.
 */

#include "sfmpc/flow.hpp"

namespace sfmpc {

struct BCConfig
{
  int dof{3};
  int N{20};
  int hidden{128};
};

class BCModel
{
public:
  BCConfig cfg;
  ObservationCodec codec;
  Vec dq_scale, ddq_scale;
  nn::ParamStore ps;
  nn::Linear l1, l2, l3;

  static BCModel create(const BCConfig & cfg, const ObservationCodec & codec, const Limits & lim, std::uint64_t seed)
  {
    BCModel m;
    m.cfg       = cfg;
    m.codec     = codec;
    m.dq_scale  = lim.dq_max;
    m.ddq_scale = lim.ddq_max;
    m.declare();
    std::mt19937_64 rng(seed);
    nn::init_uniform(m.ps(m.l1.W), m.l1.in, rng);
    nn::init_uniform(m.ps(m.l2.W), m.l2.in, rng);
    return m;
  }

  int traj_len() const { return (cfg.N + 1) * cfg.dof; }
  int input_dim() const { return traj_len() + 3 * cfg.dof + codec.dim(); }

  void declare()
  {
    ps = nn::ParamStore();
    l1.declare(ps, "fc1", input_dim(), cfg.hidden);
    l2.declare(ps, "fc2", cfg.hidden, cfg.hidden);
    l3.declare(ps, "fc3", cfg.hidden, traj_len());
  }

  Vec features(const KnotTrajectory & prev, const StateVec & x0, const Vec & obs) const
  {
    require(prev.N() == cfg.N && prev.dof() == cfg.dof, "BCModel: previous plan has the wrong shape");
    require(obs.size() == codec.dim(), "BCModel: observation length mismatch");
    Vec f(input_dim());
    int i = 0;
    for (int k = 0; k <= cfg.N; ++k) {
      for (int j = 0; j < cfg.dof; ++j) { f[i++] = prev.q(k, j) / codec.q_scale[j]; }
    }
    for (int j = 0; j < cfg.dof; ++j) { f[i++] = x0.q[j] / codec.q_scale[j]; }
    for (int j = 0; j < cfg.dof; ++j) { f[i++] = x0.dq[j] / dq_scale[j]; }
    for (int j = 0; j < cfg.dof; ++j) { f[i++] = x0.ddq[j] / ddq_scale[j]; }
    f.tail(obs.size()) = obs;
    return f;
  }

  struct Cache
  {
    RowMat X, a1, h1, a2, h2;
  };

  /// Residuals in q_scale units, one row per sample.
  RowMat forward(const RowMat & X, Cache * c = nullptr) const
  {
    Cache local;
    Cache & k = c ? *c : local;
    k.X       = X;
    k.a1      = l1.forward(ps, X);
    k.h1      = nn::silu(k.a1);
    k.a2      = l2.forward(ps, k.h1);
    k.h2      = nn::silu(k.a2);
    return l3.forward(ps, k.h2);
  }

  Vec backward(const Cache & c, const RowMat & dY) const
  {
    Vec grad          = Vec::Zero(ps.size());
    const RowMat dh2  = l3.backward(ps, c.h2, dY, grad);
    const RowMat dh1  = l2.backward(ps, c.h1, nn::silu_backward(c.a2, dh2), grad);
    l1.backward(ps, c.X, nn::silu_backward(c.a1, dh1), grad);
    return grad;
  }

  /// Predicted next-plan positions, (N+1) x dof.
  RowMat predict_positions(const KnotTrajectory & prev, const StateVec & x0, const Vec & obs) const
  {
    RowMat X(1, input_dim());
    X.row(0)      = features(prev, x0, obs).transpose();
    const RowMat r = forward(X);
    RowMat q       = prev.q;
    for (int k = 0; k <= cfg.N; ++k) {
      for (int j = 0; j < cfg.dof; ++j) { q(k, j) += r(0, k * cfg.dof + j) * codec.q_scale[j]; }
    }
    return q;
  }
};

struct BCSample
{
  Vec x;       ///< features
  Vec target;  ///< residual in q_scale units
};

inline BCSample make_bc_sample(const BCModel & m, const DemoWindow & w)
{
  BCSample s;
  s.x      = m.features(w.prev, w.x0, w.obs);
  s.target = Vec(m.traj_len());
  for (int k = 0; k <= m.cfg.N; ++k) {
    for (int j = 0; j < m.cfg.dof; ++j) {
      s.target[k * m.cfg.dof + j] = (w.q1.q(k, j) - w.prev.q(k, j)) / m.codec.q_scale[j];
    }
  }
  return s;
}

/// Same reduction as the flow loss: mean squared entry.
inline LossGrad bc_loss(const BCModel & m, const std::vector<const BCSample *> & batch, bool with_grad = true)
{
  require(!batch.empty(), "bc_loss: empty batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  RowMat X(B, m.input_dim()), T(B, m.traj_len());
  for (Eigen::Index b = 0; b < B; ++b) {
    X.row(b) = batch[static_cast<std::size_t>(b)]->x.transpose();
    T.row(b) = batch[static_cast<std::size_t>(b)]->target.transpose();
  }
  BCModel::Cache c;
  const RowMat diff = m.forward(X, with_grad ? &c : nullptr) - T;
  const double norm = static_cast<double>(B) * m.traj_len();
  LossGrad out;
  out.loss = diff.squaredNorm() / norm;
  if (with_grad) { out.grad = m.backward(c, (2.0 / norm) * diff); }
  return out;
}

inline TrainLog train_bc(BCModel & m, const std::vector<DemoWindow> & windows, const TrainConfig & tc)
{
  if (windows.empty()) { throw ContractError("train_bc: empty dataset"); }
  std::vector<BCSample> data;
  data.reserve(windows.size());
  for (const auto & w : windows) { data.push_back(make_bc_sample(m, w)); }
  std::mt19937_64 rng(tc.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  nn::Adam opt;
  opt.lr        = tc.lr;
  opt.clip_norm = tc.clip_norm;
  TrainLog log;
  std::vector<const BCSample *> batch(static_cast<std::size_t>(tc.batch));
  for (int it = 0; it < tc.steps; ++it) {
    for (auto & p : batch) { p = &data[pick(rng)]; }
    const LossGrad lg = bc_loss(m, batch);
    log.loss.push_back(lg.loss);
    opt.lr = tc.lr_at(it);
    opt.step(m.ps.theta(), lg.grad);
  }
  return log;
}

inline void save_bc_model(const std::string & path, const BCModel & m, const nlohmann::json & meta = {})
{
  nlohmann::json h;
  h["kind"]      = "bc";
  h["config"]    = {{"dof", m.cfg.dof}, {"N", m.cfg.N}, {"hidden", m.cfg.hidden}};
  h["codec"]     = codec_to_json(m.codec);
  h["dq_scale"]  = std::vector<double>(m.dq_scale.data(), m.dq_scale.data() + m.dq_scale.size());
  h["ddq_scale"] = std::vector<double>(m.ddq_scale.data(), m.ddq_scale.data() + m.ddq_scale.size());
  h["meta"]      = meta;
  write_container(path, h, m.ps);
}

inline BCModel load_bc_model(const std::string & path)
{
  auto [h, theta] = read_container(path);
  if (h.value("kind", "") != "bc") { throw ValidationError("model_file", path, "not a behavior-cloning model"); }
  BCModel m;
  m.cfg   = {h.at("config").at("dof"), h.at("config").at("N"), h.at("config").at("hidden")};
  m.codec = codec_from_json(h.at("codec"));
  const auto dq  = h.at("dq_scale").get<std::vector<double>>();
  const auto ddq = h.at("ddq_scale").get<std::vector<double>>();
  m.dq_scale     = Eigen::Map<const Vec>(dq.data(), static_cast<Eigen::Index>(dq.size()));
  m.ddq_scale    = Eigen::Map<const Vec>(ddq.data(), static_cast<Eigen::Index>(ddq.size()));
  m.declare();
  check_layout(h, m.ps, path);
  m.ps.theta() = theta;
  return m;
}

}  // namespace sfmpc

#endif  // SFMPC__BC_HPP_
