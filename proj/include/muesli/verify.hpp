#pragma once

// Verifier suites shared by the command line and the test binaries.

#include "muesli/approx.hpp"
#include "muesli/env.hpp"
#include "muesli/model.hpp"
#include "muesli/oracle.hpp"
#include "muesli/targets.hpp"
#include "muesli/trainer.hpp"
#include "muesli/updates.hpp"

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace muesli::verify {

struct CaseResult {
  std::string name;
  double value = 0.0;
  double reference = 0.0;
  double error = 0.0;
  bool passed = false;
};

struct SuiteResult {
  std::vector<CaseResult> cases;

  std::size_t passed() const {
    std::size_t n = 0;
    for (const auto& c : cases) n += c.passed ? 1 : 0;
    return n;
  }
  bool ok() const { return !cases.empty() && passed() == cases.size(); }
  double max_error() const {
    double m = 0.0;
    for (const auto& c : cases) m = std::max(m, c.error);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Theorem: max TV between the CMPO target and its prior
// ---------------------------------------------------------------------------

inline SuiteResult theorem(const std::vector<double>& cs) {
  SuiteResult out;
  for (double c : cs) {
    const TheoremReport r = verify_theorem(ClipConfig(c));
    std::ostringstream name;
    name << "c=" << c;
    out.cases.push_back({name.str(), r.numeric_max, r.analytic_max,
                         std::abs(r.numeric_max - r.analytic_max), r.passed});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Performance-difference lemma and TRPO bound on random MDPs
// ---------------------------------------------------------------------------

inline constexpr double kLemmaTolerance = 1e-8;

/// Random MDP with 2..8 states (the last terminal for odd seeds), 2..4
/// actions and discount 0.9, plus two random policies.
struct RandomInstance {
  TabularMDP mdp;
  Matrix pi_new;
  Matrix pi_prior;
};

inline RandomInstance random_instance(std::uint64_t seed) {
  Rng rng(seed * 7919 + 17);
  std::uniform_int_distribution<std::size_t> states(2, 8), actions(2, 4);
  const std::size_t S = states(rng);
  const std::size_t A = actions(rng);
  RandomMdpOptions opts;
  opts.discount = 0.9;
  opts.with_terminal = seed % 2 == 1;
  TabularMDP mdp = random_mdp(S, A, seed, opts);
  Matrix pi_prior = random_policy(S, A, rng);
  Matrix pi_new = random_policy(S, A, rng);
  // Half of the instances use a small step from the prior.
  if (seed % 4 < 2) pi_new = 0.9 * pi_prior + 0.1 * pi_new;
  return {std::move(mdp), std::move(pi_new), std::move(pi_prior)};
}

inline SuiteResult lemma(std::size_t count, std::uint64_t first_seed = 0) {
  SuiteResult out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t seed = first_seed + i;
    const RandomInstance inst = random_instance(seed);
    const double lhs = evaluate(inst.mdp, inst.pi_new).J - evaluate(inst.mdp, inst.pi_prior).J;
    const double rhs = performance_difference(inst.mdp, inst.pi_new, inst.pi_prior);
    const double err = std::abs(lhs - rhs);
    out.cases.push_back({"mdp seed " + std::to_string(seed), rhs, lhs, err, err < kLemmaTolerance});
  }
  return out;
}

inline SuiteResult bound(std::size_t count, std::uint64_t first_seed = 0) {
  SuiteResult out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t seed = first_seed + i;
    const RandomInstance inst = random_instance(seed);
    const TrpoBound b = trpo_lower_bound(inst.mdp, inst.pi_new, inst.pi_prior);
    out.cases.push_back({"mdp seed " + std::to_string(seed), b.actual_difference, b.bound,
                         std::max(0.0, b.bound - b.actual_difference), b.holds});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference checks of every loss
// ---------------------------------------------------------------------------

inline constexpr double kGradientTolerance = 1e-4;

inline FdOptions gradient_fd_options() {
  FdOptions o;
  o.step = 1e-5;
  o.scale_floor = 1e-5;
  return o;
}

namespace detail {

inline Vector random_distribution(Eigen::Index n, Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  Vector p(n);
  for (auto& x : p) x = std::max(g(rng), 1e-3);
  return p / p.sum();
}

inline Vector random_vector(Eigen::Index n, double scale, Rng& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Vector v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline std::shared_ptr<const ParamLayout> logits_layout(Eigen::Index n) {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("logits", n);
  return layout;
}

/// Random policy-loss inputs. Sampled KL is used on odd points.
inline PolicyLossInputs random_policy_inputs(const Vector& logits, const UpdateConfig& cfg,
                                             std::size_t point, Rng& rng) {
  const auto A = logits.size();
  PolicyLossInputs in;
  in.action = std::uniform_int_distribution<std::size_t>(0, static_cast<std::size_t>(A) - 1)(rng);
  in.behavior = random_distribution(A, rng);
  in.prior = random_distribution(A, rng);
  in.pg_advantage = random_vector(1, 2.0, rng)[0];
  in.is_scale = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  const Vector adv = random_vector(A, 2.0, rng);
  const ClipConfig clip(cfg.clip_c);
  in.cmpo = cmpo_target(in.prior, adv, clip).probs;
  in.mpo = mpo_target(in.prior, adv, cfg.mpo_temperature);
  if (point % 2 == 1) {
    in.kl_actions.resize(16);
    for (auto& a : in.kl_actions) a = sample_categorical(in.prior, rng);
    in.kl_weights = kl_sample_weights(in.prior, adv, clip, in.kl_actions, cfg.z_init);
  }
  return in;
}

/// PPO's objective has a kink where the ratio meets the clip edges.
inline bool near_ppo_kink(const Vector& logits, const PolicyLossInputs& in, double eps) {
  const Vector p = softmax(logits);
  const auto a = static_cast<Eigen::Index>(in.action);
  const double rho = p[a] / in.behavior[a];
  return std::abs(rho - (1.0 - eps)) < 1e-3 || std::abs(rho - (1.0 + eps)) < 1e-3;
}

inline void record(SuiteResult& out, const std::string& name, const FdReport& r) {
  out.cases.push_back({name, r.analytic_at_worst, r.numeric_at_worst, r.max_rel_error, r.passed});
}

}  // namespace detail

/// Policy losses of every variant as functions of the logits.
inline SuiteResult policy_gradients(std::size_t points, std::uint64_t seed = 0) {
  SuiteResult out;
  Rng rng(seed);
  for (Variant v : kAllVariants) {
    UpdateConfig cfg;
    cfg.variant = v;
    for (std::size_t i = 0; i < points; ++i) {
      ParamVector params(detail::logits_layout(4));
      PolicyLossInputs in;
      do {
        params.values() = detail::random_vector(4, 2.0, rng);
        in = detail::random_policy_inputs(params.values(), cfg, i, rng);
      } while (v == Variant::ppo && detail::near_ppo_kink(params.values(), in, cfg.ppo_epsilon));
      const LossFn loss = [&](const ParamVector& p, ParamVector* grad) {
        const LogitLoss l = policy_loss(p.values(), in, cfg);
        if (grad) grad->values() += l.dlogits;
        return l.value;
      };
      detail::record(out, std::string(to_string(v)) + " #" + std::to_string(i),
                     fd_check(params, loss, kGradientTolerance, gradient_fd_options()));
    }
  }
  return out;
}

/// Model losses (value, reward, policy) through the representation.
inline SuiteResult model_gradients(std::size_t points, std::uint64_t seed = 0) {
  SuiteResult out;
  Rng rng(seed + 1);
  for (Representation rep : {Representation::tabular, Representation::mlp}) {
    NetSpec spec;
    spec.representation = rep;
    spec.num_obs = 3;
    spec.num_actions = 3;
    spec.hidden = 5;
    spec.model_hidden = 6;
    const AgentNet net(spec);
    for (std::size_t i = 0; i < points; ++i) {
      ParamVector params = net.init(rng());
      params.values() = detail::random_vector(params.size(), 0.7, rng);
      const std::size_t K = 1 + i % 5;
      const std::size_t obs = i % spec.num_obs;
      std::vector<std::size_t> actions(K);
      for (auto& a : actions) a = rng() % spec.num_actions;
      ModelTargets t = ModelTargets::empty(K);
      t.root_value = detail::random_vector(1, 1.0, rng)[0];
      t.root_value_valid = i % 3 != 0;
      t.rewards = detail::random_vector(static_cast<Eigen::Index>(K), 1.0, rng);
      t.values = detail::random_vector(static_cast<Eigen::Index>(K), 1.0, rng);
      for (std::size_t k = 0; k < K; ++k) {
        t.policies[k] = detail::random_distribution(3, rng);
        t.reward_valid[k] = (i + k) % 4 != 3;
        t.value_valid[k] = (i + k) % 5 != 4;
        t.policy_valid[k] = (i + k) % 3 != 2;
      }
      const ModelLossWeights w{0.25, 1.0, 3.0};
      const LossFn loss = [&](const ParamVector& p, ParamVector* grad) {
        const NetOutput root = net.forward(p, obs);
        const ModelLossResult r = model_losses(net, p, root, actions, t, w, true, grad);
        if (grad) net.backward(p, obs, r.root, *grad);
        return r.total;
      };
      detail::record(out, std::string("model/") + to_string(rep) + " #" + std::to_string(i),
                     fd_check(params, loss, kGradientTolerance, gradient_fd_options()));
    }
  }
  return out;
}

/// The trainer's full batch loss for every variant on an MLP agent.
inline SuiteResult batch_gradients(std::size_t points, std::uint64_t seed = 0) {
  SuiteResult out;
  RandomMdpOptions opts;
  opts.discount = 0.9;
  const TabularMDP mdp = random_mdp(5, 3, seed + 3, opts);
  for (Variant v : kAllVariants) {
    TrainConfig cfg;
    cfg.representation = Representation::mlp;
    cfg.hidden = 5;
    cfg.model_hidden = 5;
    cfg.init_scale = 0.5;
    cfg.batch_size = 3;
    cfg.sequence_length = 3;
    cfg.unroll_length = 3;
    cfg.total_steps = 1000;
    cfg.learning_rate = 1e-2;
    cfg.seed = seed;
    cfg.update.variant = v;
    cfg.update.kl_samples = 4;
    Trainer trainer(mdp, cfg);
    Rng rng(seed + 11);
    std::size_t i = 0;
    for (std::size_t attempt = 0; i < points && attempt < 5 * points; ++attempt) {
      trainer.train_step();
      AdvNormState norm = trainer.norm();
      const PreparedBatch batch =
          prepare_batch(cfg, trainer.net(), trainer.params(), trainer.target(), mdp.discount(),
                        trainer.next_batch(), norm, rng);
      bool kinked = false;
      if (v == Variant::ppo)
        for (const auto& p : batch.positions)
          kinked |= detail::near_ppo_kink(trainer.net().forward(trainer.params(), p.obs).logits,
                                          p.policy, cfg.update.ppo_epsilon);
      if (kinked) continue;
      const LossFn loss = [&](const ParamVector& p, ParamVector* grad) {
        return batch_loss(cfg, trainer.net(), p, batch, grad).total;
      };
      detail::record(out, std::string("batch/") + to_string(v) + " #" + std::to_string(i),
                     fd_check(trainer.params(), loss, kGradientTolerance, gradient_fd_options()));
      ++i;
    }
  }
  return out;
}

}  // namespace muesli::verify
