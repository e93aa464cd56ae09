#include "muesli/oracle.hpp"
#include "muesli/returns.hpp"

#include <gtest/gtest.h>

using namespace muesli;

namespace {

Step make_step(std::size_t a, double r, double disc, const Vector& mu) {
  Step s;
  s.obs = 0;
  s.state = 0;
  s.action = a;
  s.reward = r;
  s.discount = disc;
  s.behavior_probs = mu;
  return s;
}

struct Window {
  std::vector<Step> steps;
  Matrix q, pi;
  Vector v;
};

Window random_window(std::size_t L, Eigen::Index A, Rng& rng, bool on_policy) {
  std::uniform_real_distribution<double> u(-1, 1), pu(0.05, 1.0);
  Window w;
  w.q = Matrix(static_cast<Eigen::Index>(L) + 1, A);
  w.pi = Matrix(static_cast<Eigen::Index>(L) + 1, A);
  for (Eigen::Index i = 0; i <= static_cast<Eigen::Index>(L); ++i)
    for (Eigen::Index a = 0; a < A; ++a) {
      w.q(i, a) = u(rng);
      w.pi(i, a) = pu(rng);
    }
  for (Eigen::Index i = 0; i < w.pi.rows(); ++i) w.pi.row(i) /= w.pi.row(i).sum();
  w.v = expected_q_exact(w.q, w.pi);
  for (std::size_t t = 0; t < L; ++t) {
    Vector mu(A);
    for (Eigen::Index a = 0; a < A; ++a) mu[a] = pu(rng);
    mu /= mu.sum();
    if (on_policy) mu = w.pi.row(static_cast<Eigen::Index>(t)).transpose();
    const std::size_t a = sample_categorical(mu, rng);
    const double disc = (t + 1 == L && u(rng) > 0.5) ? 0.0 : 0.9;
    w.steps.push_back(make_step(a, u(rng), disc, mu));
  }
  return w;
}

// Direct sum over j of (prod gamma c) delta_j.
Vector retrace_naive(const Window& w, double lambda) {
  const auto L = static_cast<Eigen::Index>(w.steps.size());
  const Vector eq = expected_q_exact(w.q, w.pi);
  Vector G(L);
  for (Eigen::Index t = 0; t < L; ++t) {
    double acc = w.q(t, static_cast<Eigen::Index>(w.steps[t].action));
    double coef = 1.0;
    for (Eigen::Index j = t; j < L; ++j) {
      if (j > t) {
        const Step& s = w.steps[j];
        const auto a = static_cast<Eigen::Index>(s.action);
        coef *= w.steps[j - 1].discount * lambda * std::min(1.0, w.pi(j, a) / s.behavior_probs[a]);
      }
      const Step& s = w.steps[j];
      const double delta = s.reward + s.discount * eq[j + 1] - w.q(j, static_cast<Eigen::Index>(s.action));
      acc += coef * delta;
    }
    G[t] = acc;
  }
  return G;
}

}  // namespace

TEST(Returns, RetraceMatchesNaiveSum) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const Window w = random_window(1 + trial % 8, 2 + trial % 3, rng, false);
    for (double lambda : {0.0, 0.5, 0.95, 1.0}) {
      const ReturnEstimate r = retrace(w.steps, w.q, w.pi, w.v, lambda);
      const Vector naive = retrace_naive(w, lambda);
      ASSERT_LT((r.G - naive).cwiseAbs().maxCoeff(), 1e-12);
      ASSERT_LT((r.advantage - (r.G - w.v.head(r.G.size()))).cwiseAbs().maxCoeff(), 1e-15);
    }
  }
}

TEST(Returns, LambdaZeroIsOneStep) {
  Rng rng(5);
  const Window w = random_window(6, 3, rng, false);
  const ReturnEstimate r = retrace(w.steps, w.q, w.pi, w.v, 0.0);
  const Vector eq = expected_q_exact(w.q, w.pi);
  for (Eigen::Index t = 0; t < 6; ++t)
    EXPECT_NEAR(r.G[t], w.steps[t].reward + w.steps[t].discount * eq[t + 1], 1e-14);
}

TEST(Returns, OnPolicyLambdaOneTelescopesToMonteCarlo) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Window w = random_window(1 + trial % 7, 3, rng, true);
    // Action-independent q makes every correction term vanish.
    for (Eigen::Index i = 0; i < w.q.rows(); ++i) w.q.row(i).setConstant(w.q(i, 0));
    const ReturnEstimate r = retrace(w.steps, w.q, w.pi, w.v, 1.0);
    const auto L = static_cast<Eigen::Index>(w.steps.size());
    const Vector eq = expected_q_exact(w.q, w.pi);
    double g = eq[L];
    for (Eigen::Index t = L - 1; t >= 0; --t) {
      g = w.steps[t].reward + w.steps[t].discount * g;
      EXPECT_NEAR(r.G[t], g, 1e-12);
    }
  }
}

TEST(Returns, TerminalStopsBootstrap) {
  const Vector mu = (Vector(2) << 0.5, 0.5).finished();
  std::vector<Step> steps = {make_step(0, 1.0, 1.0, mu), make_step(1, 2.0, 0.0, mu)};
  Matrix q = Matrix::Constant(3, 2, 7.0);
  const Matrix pi = Matrix::Constant(3, 2, 0.5);
  const ReturnEstimate r = retrace(steps, q, pi, Vector::Zero(3), 1.0);
  EXPECT_DOUBLE_EQ(r.G[1], 2.0);
  EXPECT_DOUBLE_EQ(r.G[0], 3.0);
}

TEST(Returns, RejectsBadWindow) {
  const Vector mu = (Vector(2) << 1.0, 0.0).finished();
  std::vector<Step> steps = {make_step(1, 0.0, 1.0, mu)};
  const Matrix q = Matrix::Zero(2, 2), pi = Matrix::Constant(2, 2, 0.5);
  EXPECT_THROW(retrace(steps, q, pi, Vector::Zero(2), 0.5), std::invalid_argument);
  steps[0].action = 0;
  EXPECT_THROW(retrace(steps, Matrix::Zero(3, 2), Matrix::Constant(3, 2, 0.5), Vector::Zero(3), 0.5),
               std::invalid_argument);
  EXPECT_THROW(retrace(steps, q, pi, Vector::Zero(2), 1.5), std::invalid_argument);
}

TEST(Returns, SampledExpectationConverges) {
  Rng rng(8);
  const Window w = random_window(3, 3, rng, false);
  const Vector exact = expected_q_exact(w.q, w.pi);
  const Vector sampled = expected_q_sampled(w.q, w.pi, 200000, rng);
  EXPECT_LT((exact - sampled).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Returns, RetraceMatchesOracleOffPolicy) {
  const TabularMDP m = random_mdp(5, 2, 3, {.discount = 0.9, .with_terminal = true});
  Rng rng(21);
  const Matrix pi = random_policy(5, 2, rng);
  const Matrix mu = random_policy(5, 2, rng);
  const ExactEvaluation e = evaluate(m, pi);
  // Per-state observations make the per-obs policies per-state.
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  for (int ep = 0; ep < 20000; ++ep) {
    const Trajectory t = sample_episode(m, mu, rng, 200);
    const auto L = static_cast<Eigen::Index>(t.size());
    Matrix q(L + 1, 2), pr(L + 1, 2);
    for (Eigen::Index i = 0; i < L; ++i) {
      q.row(i) = e.q.row(static_cast<Eigen::Index>(t.steps[i].state));
      pr.row(i) = pi.row(static_cast<Eigen::Index>(t.steps[i].state));
    }
    q.row(L) = e.q.row(static_cast<Eigen::Index>(t.steps.back().next_state));
    pr.row(L) = pi.row(static_cast<Eigen::Index>(t.steps.back().next_state));
    const ReturnEstimate r = retrace(t.steps, q, pr, Vector::Zero(L + 1), 0.95);
    const double err = r.G[0] - q(0, static_cast<Eigen::Index>(t.steps[0].action));
    sum += err;
    sum_sq += err * err;
    ++n;
  }
  // With exact q the Retrace correction has zero mean.
  const double mean = sum / n, sd = std::sqrt(sum_sq / n - mean * mean);
  EXPECT_LT(std::abs(mean), 4.0 * sd / std::sqrt(double(n)) + 1e-12);
}

TEST(Returns, VtraceOnPolicyLambdaOneIsMonteCarlo) {
  Rng rng(12);
  const Window w = random_window(5, 3, rng, true);
  const VtraceResult r = vtrace(w.steps, w.v, w.pi, 1.0);
  double g = w.v[5];
  for (Eigen::Index t = 4; t >= 0; --t) {
    g = w.steps[t].reward + w.steps[t].discount * g;
    EXPECT_NEAR(r.vs[t], g, 1e-12);
  }
  for (Eigen::Index t = 0; t < 4; ++t)
    EXPECT_NEAR(r.estimate.G[t], w.steps[t].reward + w.steps[t].discount * r.vs[t + 1], 1e-14);
}

TEST(Returns, VtraceLambdaZeroClipsToOneStep) {
  Rng rng(13);
  const Window w = random_window(4, 2, rng, false);
  const VtraceResult r = vtrace(w.steps, w.v, w.pi, 0.0);
  for (Eigen::Index t = 0; t < 4; ++t) {
    const Step& s = w.steps[t];
    const auto a = static_cast<Eigen::Index>(s.action);
    const double rho = std::min(1.0, w.pi(t, a) / s.behavior_probs[a]);
    EXPECT_NEAR(r.vs[t], w.v[t] + rho * (s.reward + s.discount * w.v[t + 1] - w.v[t]), 1e-14);
  }
}

TEST(Returns, NormalizerFrozen) {
  AdvNormState s;
  const std::vector<double> a = {2.0, -2.0};
  s = norm_update(s, a);
  EXPECT_NEAR(s.var, 0.04, 1e-15);
  EXPECT_NEAR(s.corrected_var(), 4.0, 1e-12);
  EXPECT_NEAR(normalize(s, 2.0), 1.0, 1e-12);
  const std::vector<double> b = {1.0};
  s = norm_update(s, b);
  EXPECT_NEAR(s.var, 0.99 * 0.04 + 0.01, 1e-15);
  EXPECT_NEAR(s.corrected_var(), (0.99 * 0.04 + 0.01) / (1.0 - 0.99 * 0.99), 1e-12);
}

TEST(Returns, NormalizerIsScaleFree) {
  Rng rng(14);
  std::normal_distribution<double> n(0, 1);
  AdvNormState a, b;
  std::vector<double> batch(8);
  for (int i = 0; i < 100; ++i) {
    for (auto& x : batch) x = n(rng);
    a = norm_update(a, batch);
    for (auto& x : batch) x *= 1e3;
    b = norm_update(b, batch);
  }
  EXPECT_NEAR(normalize(a, 0.7), normalize(b, 700.0), 1e-9);
}

TEST(Returns, NormalizeBeforeUpdateThrows) {
  EXPECT_THROW(normalize(AdvNormState{}, 1.0), std::logic_error);
  EXPECT_THROW(norm_update(AdvNormState{}, std::span<const double>{}), std::invalid_argument);
}
