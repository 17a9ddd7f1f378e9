#include "fixtures.hpp"
#include "sfmpc/flow.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace sfmpc;

namespace {

FlowConfig tiny_config() { return {2, 6, 2, 2, 4, 6, 8, 8, 3}; }

ObservationCodec tiny_codec() { return {2, 2, 2, Vec::Constant(2, 3.0), 1.5, Vec2(0.1, 0.2)}; }

std::vector<FlowSample> random_samples(std::mt19937_64 & rng, const FlowModel & m, int count)
{
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> us;
  const int K = m.cfg.N + 1, n = m.cfg.dof;
  std::vector<FlowSample> out(static_cast<std::size_t>(count));
  for (auto & d : out) {
    d.q_s    = RowMat(K, n);
    d.target = RowMat(K, n);
    for (Eigen::Index i = 0; i < d.q_s.size(); ++i) {
      d.q_s.data()[i]    = nd(rng);
      d.target.data()[i] = nd(rng);
    }
    d.s   = us(rng);
    d.obs = Vec(m.obs_dim());
    for (Eigen::Index i = 0; i < d.obs.size(); ++i) { d.obs[i] = nd(rng); }
  }
  return out;
}

std::vector<const FlowSample *> ptrs(const std::vector<FlowSample> & v)
{
  std::vector<const FlowSample *> p;
  for (const auto & s : v) { p.push_back(&s); }
  return p;
}

}  // namespace

TEST(Flow, CodecRoundTrip)
{
  ObservationCodec c{3, 10, 4, Vec::Constant(3, kPi), 1.2, Vec2(0.0, 0.0)};
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  Observation o;
  for (int h = 0; h < 10; ++h) { o.q_history.push_back(Vec::Random(3)); }
  for (int k = 0; k < 4; ++k) { o.keypoints.emplace_back(u(rng), u(rng)); }
  o.ee   = Pose2(u(rng), u(rng), 2.9);
  o.goal = Pose2(u(rng), u(rng), -1.0);
  const Vec v = c.encode(o);
  EXPECT_EQ(v.size(), 44);
  const Observation d = c.decode(v);
  for (int h = 0; h < 10; ++h) { EXPECT_LE((d.q_history[h] - o.q_history[h]).norm(), 1e-12); }
  for (int k = 0; k < 4; ++k) { EXPECT_LE((d.keypoints[k] - o.keypoints[k]).norm(), 1e-12); }
  EXPECT_NEAR(d.ee.orientation, 2.9, 1e-12);
  EXPECT_NEAR(d.goal.position.x(), o.goal.position.x(), 1e-12);
  EXPECT_LE((c.encode(d) - v).norm(), 1e-12);
  o.q_history.pop_back();
  EXPECT_THROW(c.encode(o), ContractError);
}

TEST(Flow, FreshModelIsTheZeroField)
{
  ObservationCodec c{3, 10, 4, Vec::Constant(3, kPi), 1.2, Vec2::Zero()};
  const FlowModel m = FlowModel::create(FlowConfig{}, c, 7);
  std::mt19937_64 rng(2);
  const RowMat q = RowMat::Random(21, 3);
  const RowMat v = flow_forward(m, q, 0.37, Vec::Random(44));
  EXPECT_EQ(v.rows(), 21);
  EXPECT_TRUE((v.array() == 0.0).all());
}

TEST(Flow, ForwardIsDeterministicAndBatchInvariant)
{
  FlowModel m = FlowModel::create(tiny_config(), tiny_codec(), 3);
  std::mt19937_64 rng(4);
  nn::init_uniform(m.ps(m.conv_out.W), 12, rng);
  const auto data = random_samples(rng, m, 3);
  const RowMat a  = flow_forward(m, data[1].q_s, data[1].s, data[1].obs);
  const RowMat b  = flow_forward(m, data[1].q_s, data[1].s, data[1].obs);
  EXPECT_EQ(a, b);
  RowMat obs(3, m.obs_dim());
  Vec s(3);
  std::vector<const RowMat *> qs;
  for (int i = 0; i < 3; ++i) {
    obs.row(i) = data[i].obs.transpose();
    s[i]       = data[i].s;
    qs.push_back(&data[i].q_s);
  }
  const RowMat batch = flow_forward_batch(m, qs, s, obs);
  EXPECT_LE((batch.middleRows(7, 7) - a).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(flow_forward(m, data[0].q_s, 1.5, data[0].obs), ContractError);
}

TEST(Flow, ParameterGradientsMatchFiniteDifferences)
{
  FlowModel m = FlowModel::create(tiny_config(), tiny_codec(), 1);
  std::mt19937_64 rng(3);
  nn::init_uniform(m.ps(m.conv_out.W), 12, rng);
  nn::init_uniform(m.ps(m.conv_out.b), 12, rng);
  ASSERT_LE(m.num_params(), 5000);
  const auto data = random_samples(rng, m, 3);
  const auto p    = ptrs(data);
  const LossGrad lg = fm_loss(m, p);
  const Vec th      = m.ps.theta();
  double worst      = 0.0;
  for (Eigen::Index i = 0; i < th.size(); ++i) {
    m.ps.theta()    = th;
    m.ps.theta()[i] += 1e-5;
    const double lp = fm_loss(m, p, false).loss;
    m.ps.theta()    = th;
    m.ps.theta()[i] -= 1e-5;
    const double lm = fm_loss(m, p, false).loss;
    const double fd = (lp - lm) / 2e-5;
    worst = std::max(worst, std::abs(fd - lg.grad[i]) / std::max(1e-6, std::abs(fd) + std::abs(lg.grad[i])));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Flow, LossConvention)
{
  // Zero field: the loss is the mean squared target entry.
  FlowModel m = FlowModel::create(tiny_config(), tiny_codec(), 1);
  std::mt19937_64 rng(5);
  auto data = random_samples(rng, m, 4);
  double acc = 0.0;
  for (const auto & d : data) { acc += d.target.squaredNorm(); }
  EXPECT_NEAR(fm_loss(m, ptrs(data), false).loss, acc / (4.0 * 7 * 2), 1e-14);
}

TEST(Flow, TrainingReducesLossOnAFixedSet)
{
  FlowModel m = FlowModel::create(tiny_config(), tiny_codec(), 2);
  std::mt19937_64 rng(6);
  auto data = random_samples(rng, m, 8);
  for (auto & d : data) { d.target = 0.5 * d.q_s; }  // learnable: a linear function of the input
  const double before = dataset_loss(m, data);
  TrainConfig tc;
  tc.steps = 300;
  tc.batch = 8;
  tc.lr    = 3e-3;
  const auto log = train_on_samples(m, data, tc);
  EXPECT_EQ(log.loss.size(), 300u);
  EXPECT_LT(dataset_loss(m, data), 0.2 * before);
}

TEST(Flow, ModelFileRoundTrip)
{
  FlowModel m = FlowModel::create(tiny_config(), tiny_codec(), 9);
  std::mt19937_64 rng(7);
  nn::init_uniform(m.ps(m.conv_out.W), 12, rng);
  const auto path = (std::filesystem::temp_directory_path() / "sfmpc_flow_test.bin").string();
  save_flow_model(path, m, {{"note", "test"}});
  const FlowModel back = load_flow_model(path);
  EXPECT_EQ(back.ps.theta(), m.ps.theta());
  EXPECT_EQ(back.cfg.c2, m.cfg.c2);
  EXPECT_EQ(back.codec.q_scale, m.codec.q_scale);
  const auto data = random_samples(rng, m, 1);
  EXPECT_EQ(flow_forward(back, data[0].q_s, data[0].s, data[0].obs), flow_forward(m, data[0].q_s, data[0].s, data[0].obs));
  {
    std::ofstream f(path, std::ios::binary);
    f << "garbage";
  }
  EXPECT_THROW(load_flow_model(path), ValidationError);
  std::filesystem::remove(path);
}

TEST(Flow, SourceSamplesEndAtRest)
{
  const Scenario s = make_scenario("narrow_passage", 1);
  StateVec x0      = s.start;
  x0.dq            = Vec::Constant(3, 0.3);
  x0.ddq           = Vec::Constant(3, -0.5);
  const SourceSampler src(20, 0.1, 3, Vec::Constant(3, 4.0));
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto tr = src.sample(x0, rng);
    EXPECT_LE(tr.dq.row(20).norm(), 1e-9);
    EXPECT_LE(tr.ddq.row(20).norm(), 1e-9);
    EXPECT_LE(tr.jerk.row(19).norm(), 1e-9);
    EXPECT_LE((tr.dq.row(0).transpose() - x0.dq).norm(), 1e-15);
  }
}

TEST(Flow, TargetFlowOfASafePairIsTheirDifference)
{
  // If both endpoints are safe and the segment stays safe, projection is the identity along it.
  const Scenario s = make_scenario("unobstructed", 3);
  Projector P(s.safety, s.robot, 20, 0.1);
  const auto rest = rest_trajectory(s.start.q, 20, 0.1);
  const auto cand = fixtures::goalward_candidate(s, 0.05);
  const auto asg  = assign_sets(s.safety, s.robot, cand, false);
  const auto q1   = P.project_full(cand, s.start, asg).traj;
  const auto v    = target_flow(P, rest, q1, 0.3, 0.02, s.start);
  ASSERT_TRUE(v.has_value());
  EXPECT_LE((*v - (q1.q - rest.q)).cwiseAbs().maxCoeff(), 1e-5);
}
