#pragma once

// Value-equivalent model. From a representation h(s_t) the model embeds a
// hidden state and advances it open-loop with the chosen actions,
// predicting at each step k the reward E[R_{t+k}], the value
// E[v(S_{t+k})], and policy logits.
//
//   m_0 = tanh(W_e h + b_e)
//   m_k = tanh(W_d [m_{k-1}; onehot(a_{t+k-1})] + b_d)
//   r_k = w_r . m_k + b_r,  v_k = w_v . m_k + b_v,  logits_k = W_p m_k + b_p

#include "muesli/approx.hpp"
#include "muesli/targets.hpp"

#include <span>
#include <stdexcept>
#include <vector>

namespace muesli {

inline constexpr std::size_t kMaxUnrollLength = 8;

struct ModelUnroll {
  /// Hidden states m_0..m_K.
  std::vector<Vector> states;
  std::vector<std::size_t> actions;
  /// Predictions for k = 1..K (index k-1).
  Vector r_hat;
  Vector v_hat;
  std::vector<Vector> policy_logits;

  std::size_t length() const { return actions.size(); }
};

inline ModelUnroll unroll(const AgentNet& net, const ParamVector& params, const Vector& h,
                          std::span<const std::size_t> actions) {
  const std::size_t K = actions.size();
  if (K == 0) throw std::invalid_argument("unroll needs at least one action");
  const auto M = static_cast<Eigen::Index>(net.spec().model_hidden);
  for (auto a : actions)
    if (a >= net.spec().num_actions) throw std::invalid_argument("unroll: invalid action id");
  if (h.size() != static_cast<Eigen::Index>(net.spec().representation_size()))
    throw std::invalid_argument("unroll: representation has the wrong size");

  const auto We = params.mat("model.embed.w");
  const auto Wd = params.mat("model.dyn.w");
  const auto bd = params.vec("model.dyn.b");
  const auto wr = params.vec("model.reward.w");
  const auto wv = params.vec("model.value.w");
  const auto Wp = params.mat("model.policy.w");
  const double br = params.vec("model.reward.b")[0];
  const double bv = params.vec("model.value.b")[0];
  const auto bp = params.vec("model.policy.b");

  ModelUnroll out;
  out.actions.assign(actions.begin(), actions.end());
  out.states.reserve(K + 1);
  out.states.push_back((We * h + params.vec("model.embed.b")).array().tanh().matrix());
  out.r_hat.resize(static_cast<Eigen::Index>(K));
  out.v_hat.resize(static_cast<Eigen::Index>(K));
  out.policy_logits.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    Vector pre = Wd.leftCols(M) * out.states.back() + bd;
    pre += Wd.col(M + static_cast<Eigen::Index>(actions[k]));
    out.states.push_back(pre.array().tanh().matrix());
    const Vector& m = out.states.back();
    out.r_hat[static_cast<Eigen::Index>(k)] = wr.dot(m) + br;
    out.v_hat[static_cast<Eigen::Index>(k)] = wv.dot(m) + bv;
    out.policy_logits.push_back(Wp * m + bp);
  }
  return out;
}

/// Adjoints for the predictions of an unroll (index k-1 for step k). Empty
/// `dlogits` entries mean no policy gradient at that step.
struct UnrollAdjoint {
  Vector dr;
  Vector dv;
  std::vector<Vector> dlogits;
};

/// Accumulates model parameter gradients and returns d(loss)/dh.
inline Vector unroll_backward(const AgentNet& net, const ParamVector& params, const Vector& h,
                              const ModelUnroll& u, const UnrollAdjoint& adj, ParamVector& grad) {
  const auto M = static_cast<Eigen::Index>(net.spec().model_hidden);
  const std::size_t K = u.length();
  const auto Wd = params.mat("model.dyn.w");
  const auto wr = params.vec("model.reward.w");
  const auto wv = params.vec("model.value.w");
  const auto Wp = params.mat("model.policy.w");
  auto gWd = grad.mat("model.dyn.w");
  auto gbd = grad.vec("model.dyn.b");
  auto gwr = grad.vec("model.reward.w");
  auto gwv = grad.vec("model.value.w");
  auto gWp = grad.mat("model.policy.w");
  auto gbp = grad.vec("model.policy.b");

  Vector carry = Vector::Zero(M);
  for (std::size_t kk = K; kk-- > 0;) {
    const auto k = static_cast<Eigen::Index>(kk);
    const Vector& m = u.states[kk + 1];
    Vector dm = carry;
    const double dr = adj.dr.size() > 0 ? adj.dr[k] : 0.0;
    const double dv = adj.dv.size() > 0 ? adj.dv[k] : 0.0;
    dm += dr * wr + dv * wv;
    gwr += dr * m;
    grad.vec("model.reward.b")[0] += dr;
    gwv += dv * m;
    grad.vec("model.value.b")[0] += dv;
    if (kk < adj.dlogits.size() && adj.dlogits[kk].size() > 0) {
      gWp += adj.dlogits[kk] * m.transpose();
      gbp += adj.dlogits[kk];
      dm += Wp.transpose() * adj.dlogits[kk];
    }
    const Vector dpre = dm.cwiseProduct((1.0 - m.array().square()).matrix());
    gWd.leftCols(M) += dpre * u.states[kk].transpose();
    gWd.col(M + static_cast<Eigen::Index>(u.actions[kk])) += dpre;
    gbd += dpre;
    carry = Wd.leftCols(M).transpose() * dpre;
  }
  const Vector& m0 = u.states[0];
  const Vector dpre0 = carry.cwiseProduct((1.0 - m0.array().square()).matrix());
  grad.mat("model.embed.w") += dpre0 * h.transpose();
  grad.vec("model.embed.b") += dpre0;
  return params.mat("model.embed.w").transpose() * dpre0;
}

/// One-step look-ahead action values q(s, a) = r_1(s, a) + gamma v_1(s, a).
inline Vector one_step_q(const AgentNet& net, const ParamVector& params, const Vector& h,
                         double gamma) {
  const auto A = static_cast<Eigen::Index>(net.spec().num_actions);
  const auto M = static_cast<Eigen::Index>(net.spec().model_hidden);
  const Vector m0 =
      (params.mat("model.embed.w") * h + params.vec("model.embed.b")).array().tanh().matrix();
  const auto Wd = params.mat("model.dyn.w");
  const Vector base = Wd.leftCols(M) * m0 + params.vec("model.dyn.b");
  const auto wr = params.vec("model.reward.w");
  const auto wv = params.vec("model.value.w");
  const double br = params.vec("model.reward.b")[0];
  const double bv = params.vec("model.value.b")[0];
  Vector q(A);
  for (Eigen::Index a = 0; a < A; ++a) {
    const Vector m1 = (base + Wd.col(M + a)).array().tanh().matrix();
    q[a] = wr.dot(m1) + br + gamma * (wv.dot(m1) + bv);
  }
  return q;
}

struct ModelLossWeights {
  double value = 0.25;
  double reward = 1.0;
  double policy = 1.0;
};

/// Targets for one unroll of length K, aligned with the states actually
/// visited. Index k-1 holds the target for step k; `root_value` is the
/// target for the network's own value head at s_t.
struct ModelTargets {
  double root_value = 0.0;
  bool root_value_valid = true;
  Vector rewards;
  Vector values;
  std::vector<Vector> policies;
  std::vector<bool> reward_valid;
  std::vector<bool> value_valid;
  std::vector<bool> policy_valid;

  static ModelTargets empty(std::size_t K) {
    ModelTargets t;
    t.rewards = Vector::Zero(static_cast<Eigen::Index>(K));
    t.values = Vector::Zero(static_cast<Eigen::Index>(K));
    t.policies.assign(K, Vector());
    t.reward_valid.assign(K, false);
    t.value_valid.assign(K, false);
    t.policy_valid.assign(K, false);
    return t;
  }
};

struct ModelLossResult {
  /// Mean over k of KL(target_k, softmax(logits_k)).
  double policy = 0.0;
  /// Mean squared value error over the root and the K unrolled steps.
  double value = 0.0;
  /// Mean squared reward error over the K unrolled steps.
  double reward = 0.0;
  /// Weighted sum; gradients are of this quantity.
  double total = 0.0;
  /// Adjoint for the root forward pass (value head and representation).
  NetAdjoint root;
};

/// Model losses for one position. Model parameter gradients accumulate into
/// `grad` (when non-null); the adjoint of the root forward pass is returned
/// so the caller can merge it with the policy-loss adjoint.
inline ModelLossResult model_losses(const AgentNet& net, const ParamVector& params,
                                    const NetOutput& root, std::span<const std::size_t> actions,
                                    const ModelTargets& targets, const ModelLossWeights& weights,
                                    bool train_policy, ParamVector* grad) {
  const std::size_t K = actions.size();
  if (static_cast<std::size_t>(targets.rewards.size()) != K ||
      static_cast<std::size_t>(targets.values.size()) != K || targets.policies.size() != K ||
      targets.reward_valid.size() != K || targets.value_valid.size() != K ||
      targets.policy_valid.size() != K)
    throw std::invalid_argument("model targets are not aligned with the unroll length");

  const ModelUnroll u = unroll(net, params, root.hidden, actions);
  ModelLossResult out;
  UnrollAdjoint adj{Vector::Zero(static_cast<Eigen::Index>(K)),
                    Vector::Zero(static_cast<Eigen::Index>(K)), std::vector<Vector>(K)};
  const double inv_k = 1.0 / static_cast<double>(K);
  const double inv_v = 1.0 / static_cast<double>(K + 1);

  if (targets.root_value_valid) {
    const double err = root.value - targets.root_value;
    out.value += inv_v * err * err;
    out.root.dvalue = weights.value * inv_v * 2.0 * err;
  }
  for (std::size_t kk = 0; kk < K; ++kk) {
    const auto k = static_cast<Eigen::Index>(kk);
    if (targets.reward_valid[kk]) {
      const double err = u.r_hat[k] - targets.rewards[k];
      out.reward += inv_k * err * err;
      adj.dr[k] = weights.reward * inv_k * 2.0 * err;
    }
    if (targets.value_valid[kk]) {
      const double err = u.v_hat[k] - targets.values[k];
      out.value += inv_v * err * err;
      adj.dv[k] = weights.value * inv_v * 2.0 * err;
    }
    if (train_policy && targets.policy_valid[kk]) {
      const Vector& logits = u.policy_logits[kk];
      out.policy += inv_k * kl_divergence(targets.policies[kk], softmax(logits));
      adj.dlogits[kk] = weights.policy * inv_k * cross_entropy_logit_grad(logits, targets.policies[kk]);
    }
  }
  out.total = weights.value * out.value + weights.reward * out.reward + weights.policy * out.policy;
  if (grad) {
    const Vector dh = unroll_backward(net, params, root.hidden, u, adj, *grad);
    if (net.spec().representation == Representation::mlp) out.root.dhidden = dh;
  }
  return out;
}

}  // namespace muesli
