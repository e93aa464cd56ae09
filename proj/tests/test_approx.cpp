#include "muesli/approx.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace muesli;

namespace {

NetSpec mlp_spec() {
  NetSpec s;
  s.representation = Representation::mlp;
  s.num_obs = 3;
  s.num_actions = 2;
  s.hidden = 4;
  s.model_hidden = 5;
  s.init_scale = 0.5;
  return s;
}

// Loss touching every head and the representation adjoint.
LossFn head_loss(const AgentNet& net, const Vector& dh_weight) {
  return [&net, dh_weight](const ParamVector& p, ParamVector* g) {
    double total = 0.0;
    for (std::size_t o = 0; o < net.spec().num_obs; ++o) {
      const NetOutput out = net.forward(p, o);
      const Vector target = (Vector(2) << 0.3, 0.7).finished();
      total += -target.dot(log_softmax(out.logits)) + 0.5 * out.value * out.value +
               dh_weight.dot(out.hidden);
      if (g) {
        NetAdjoint adj{cross_entropy_logit_grad(out.logits, target), out.value,
                       out.hidden.size() == dh_weight.size() ? dh_weight : Vector()};
        net.backward(p, o, adj, *g);
      }
    }
    return total;
  };
}

}  // namespace

TEST(Approx, LayoutIsContiguous) {
  const AgentNet net(mlp_spec());
  Eigen::Index next = 0;
  for (const Slice& s : net.layout()->slices()) {
    EXPECT_EQ(s.offset, next) << s.name;
    next += s.size();
  }
  EXPECT_EQ(next, net.layout()->total());
  EXPECT_EQ(net.layout()->find("model.dyn.w").cols, 5 + 2);
  EXPECT_THROW(net.layout()->find("nope"), std::out_of_range);
  ParamLayout l;
  l.add("a", 2);
  EXPECT_THROW(l.add("a", 1), std::invalid_argument);
}

TEST(Approx, TabularForwardReadsColumns) {
  NetSpec s;
  s.num_obs = 3;
  s.num_actions = 2;
  const AgentNet net(s);
  ParamVector p = net.init(1);
  EXPECT_EQ(p.mat("policy").cwiseAbs().maxCoeff(), 0.0);
  p.mat("policy")(1, 2) = 2.0;
  p.vec("value")[2] = -0.5;
  const NetOutput out = net.forward(p, 2);
  EXPECT_EQ(out.logits[1], 2.0);
  EXPECT_EQ(out.value, -0.5);
  EXPECT_EQ(out.hidden.sum(), 1.0);
  EXPECT_EQ(out.hidden[2], 1.0);
  EXPECT_THROW(net.forward(p, 3), std::out_of_range);
}

TEST(Approx, ZeroInitIsUniform) {
  for (auto rep : {Representation::tabular, Representation::mlp}) {
    NetSpec s = mlp_spec();
    s.representation = rep;
    const AgentNet net(s);
    const Matrix pi = net.policy_table(net.init(7));
    EXPECT_LT((pi.array() - 0.5).abs().maxCoeff(), 1e-15);
  }
}

TEST(Approx, MlpComputesAffineTanh) {
  const AgentNet net(mlp_spec());
  ParamVector p = net.init(3);
  Rng rng(4);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& x : p.values()) x = u(rng);
  // Setting torso.w so tanh hits chosen activations checks the wiring end to end.
  const Vector want = (Vector(4) << 0.1, -0.2, 0.3, 0.4).finished();
  p.mat("torso.w").col(1) = want.array().atanh().matrix() - p.vec("torso.b");
  const NetOutput out = net.forward(p, 1);
  EXPECT_LT((out.hidden - want).cwiseAbs().maxCoeff(), 1e-14);
  const Vector logits = p.mat("policy.w") * want + p.vec("policy.b");
  EXPECT_LT((out.logits - logits).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_NEAR(out.value, p.vec("value.w").dot(want) + p.vec("value.b")[0], 1e-14);
}

TEST(Approx, BackwardMatchesFiniteDifferences) {
  for (auto rep : {Representation::tabular, Representation::mlp}) {
    NetSpec s = mlp_spec();
    s.representation = rep;
    const AgentNet net(s);
    ParamVector p = net.init(5);
    Rng rng(6);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto& x : p.values()) x = u(rng);
    const Vector dh = (Vector(4) << 0.3, -0.1, 0.2, 0.5).finished();
    const FdReport r = fd_check(p, head_loss(net, dh), 1e-6);
    EXPECT_TRUE(r.passed) << to_string(rep) << " " << r.worst_slice << " " << r.max_rel_error;
  }
}

TEST(Approx, FdCheckCatchesWrongGradient) {
  const AgentNet net(mlp_spec());
  const ParamVector p = net.init(2);
  const LossFn wrong = [](const ParamVector& q, ParamVector* g) {
    if (g) g->values() = 3.0 * q.values();
    return q.values().squaredNorm();
  };
  const FdReport r = fd_check(p, wrong, 1e-4);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.3);
  EXPECT_FALSE(r.worst_slice.empty());
}

TEST(Approx, ParamsRoundTrip) {
  const AgentNet net(mlp_spec());
  ParamVector p = net.init(9);
  p.values()[0] = 1.0 / 3.0;
  std::stringstream ss;
  save_params(ss, p);
  const ParamVector r = load_params(ss);
  EXPECT_TRUE(r.same_layout(p));
  EXPECT_EQ(r.values(), p.values());
}

TEST(Approx, LoadParamsRejectsGarbage) {
  std::istringstream bad("MUESLI-PARAMS 2\n");
  EXPECT_THROW(load_params(bad), std::runtime_error);
  const AgentNet net(mlp_spec());
  std::stringstream ss;
  save_params(ss, net.init(1));
  std::string s = ss.str();
  s.resize(s.size() - 8);
  std::istringstream truncated(s);
  EXPECT_THROW(load_params(truncated), std::runtime_error);
}
