#include "muesli/model.hpp"

#include <gtest/gtest.h>

using namespace muesli;

namespace {

AgentNet make_net(Representation rep) {
  NetSpec s;
  s.representation = rep;
  s.num_obs = 3;
  s.num_actions = 3;
  s.hidden = 4;
  s.model_hidden = 6;
  return AgentNet(s);
}

ParamVector random_params(const AgentNet& net, std::uint64_t seed) {
  ParamVector p = net.init(seed);
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  for (auto& x : p.values()) x = u(rng);
  return p;
}

ModelTargets random_targets(std::size_t K, std::size_t A, Rng& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::bernoulli_distribution coin(0.8);
  ModelTargets t = ModelTargets::empty(K);
  t.root_value = u(rng);
  t.root_value_valid = coin(rng);
  for (std::size_t k = 0; k < K; ++k) {
    t.rewards[static_cast<Eigen::Index>(k)] = u(rng);
    t.values[static_cast<Eigen::Index>(k)] = u(rng);
    Vector p(static_cast<Eigen::Index>(A));
    for (auto& x : p) x = std::exp(u(rng));
    t.policies[k] = p / p.sum();
    t.reward_valid[k] = coin(rng);
    t.value_valid[k] = coin(rng);
    t.policy_valid[k] = coin(rng);
  }
  return t;
}

}  // namespace

TEST(Model, UnrollShapes) {
  const AgentNet net = make_net(Representation::tabular);
  const ParamVector p = random_params(net, 1);
  const std::vector<std::size_t> actions = {0, 2, 1};
  const ModelUnroll u = unroll(net, p, net.forward(p, 1).hidden, actions);
  EXPECT_EQ(u.length(), 3u);
  EXPECT_EQ(u.states.size(), 4u);
  EXPECT_EQ(u.r_hat.size(), 3);
  EXPECT_EQ(u.policy_logits.size(), 3u);
  for (const auto& m : u.states) EXPECT_LT(m.cwiseAbs().maxCoeff(), 1.0);
}

TEST(Model, UnrollRejectsBadInput) {
  const AgentNet net = make_net(Representation::tabular);
  const ParamVector p = random_params(net, 1);
  const Vector h = net.forward(p, 0).hidden;
  const std::vector<std::size_t> none, bad = {3};
  EXPECT_THROW(unroll(net, p, h, none), std::invalid_argument);
  EXPECT_THROW(unroll(net, p, h, bad), std::invalid_argument);
  const std::vector<std::size_t> ok = {0};
  EXPECT_THROW(unroll(net, p, Vector::Zero(5), ok), std::invalid_argument);
}

TEST(Model, OneStepQMatchesUnroll) {
  for (auto rep : {Representation::tabular, Representation::mlp}) {
    const AgentNet net = make_net(rep);
    const ParamVector p = random_params(net, 2);
    const Vector h = net.forward(p, 2).hidden;
    const Vector q = one_step_q(net, p, h, 0.9);
    for (std::size_t a = 0; a < 3; ++a) {
      const std::vector<std::size_t> act = {a};
      const ModelUnroll u = unroll(net, p, h, act);
      EXPECT_NEAR(q[static_cast<Eigen::Index>(a)], u.r_hat[0] + 0.9 * u.v_hat[0], 1e-14);
    }
  }
}

TEST(Model, OpenLoopDependsOnActions) {
  const AgentNet net = make_net(Representation::tabular);
  const ParamVector p = random_params(net, 3);
  const Vector h = net.forward(p, 0).hidden;
  const std::vector<std::size_t> a = {0, 0}, b = {0, 1};
  const ModelUnroll ua = unroll(net, p, h, a), ub = unroll(net, p, h, b);
  EXPECT_EQ(ua.r_hat[0], ub.r_hat[0]);
  EXPECT_NE(ua.r_hat[1], ub.r_hat[1]);
}

TEST(Model, LossGradientsMatchFiniteDifferences) {
  Rng rng(11);
  for (auto rep : {Representation::tabular, Representation::mlp}) {
    const AgentNet net = make_net(rep);
    const ParamVector p = random_params(net, 4);
    for (std::size_t K = 1; K <= 5; ++K) {
      std::vector<std::size_t> actions(K);
      for (auto& a : actions) a = rng() % 3;
      const ModelTargets t = random_targets(K, 3, rng);
      const std::size_t obs = rng() % 3;
      const ModelLossWeights w{0.25, 1.0, 3.0};
      const LossFn loss = [&](const ParamVector& q, ParamVector* g) {
        const NetOutput root = net.forward(q, obs);
        const ModelLossResult r = model_losses(net, q, root, actions, t, w, true, g);
        if (g) net.backward(q, obs, r.root, *g);
        return r.total;
      };
      const FdReport r = fd_check(p, loss, 1e-5, {1e-5, 1e-6});
      EXPECT_TRUE(r.passed) << to_string(rep) << " K=" << K << " " << r.worst_slice << " "
                            << r.max_rel_error;
    }
  }
}

TEST(Model, PolicyHeadCanBeFrozen) {
  const AgentNet net = make_net(Representation::tabular);
  const ParamVector p = random_params(net, 5);
  Rng rng(5);
  const ModelTargets t = random_targets(3, 3, rng);
  const std::vector<std::size_t> actions = {1, 1, 0};
  ParamVector g = ParamVector::zeros_like(p);
  const ModelLossResult r = model_losses(net, p, net.forward(p, 0), actions, t, {}, false, &g);
  EXPECT_EQ(r.policy, 0.0);
  EXPECT_EQ(g.vec("model.policy.w").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.vec("model.policy.b").cwiseAbs().maxCoeff(), 0.0);
}

TEST(Model, LossesAreMeansOverValidEntries) {
  const AgentNet net = make_net(Representation::tabular);
  const ParamVector p = random_params(net, 6);
  ModelTargets t = ModelTargets::empty(2);
  t.root_value = 0.0;
  const std::vector<std::size_t> actions = {0, 1};
  const NetOutput root = net.forward(p, 0);
  const ModelLossResult r = model_losses(net, p, root, actions, t, {}, true, nullptr);
  EXPECT_NEAR(r.value, root.value * root.value / 3.0, 1e-15);
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_NEAR(r.total, 0.25 * r.value, 1e-15);
  ModelTargets misaligned = ModelTargets::empty(3);
  EXPECT_THROW(model_losses(net, p, root, actions, misaligned, {}, true, nullptr),
               std::invalid_argument);
}
