#pragma once

// Multi-step off-policy return estimators and the moving second-moment
// normalizer for advantages.

#include "muesli/env.hpp"

#include <cmath>
#include <span>
#include <stdexcept>

namespace muesli {

struct ReturnEstimate {
  /// Multi-step target for the taken action, G^v(s_t, a_t).
  Vector G;
  /// G^v(s_t, a_t) - v_hat(s_t).
  Vector advantage;
};

/// E_{A~pi}[q_hat(s, A)] per row, by enumeration.
inline Vector expected_q_exact(const Matrix& q_hat, const Matrix& pi) {
  return (q_hat.cwiseProduct(pi)).rowwise().sum();
}

/// E_{A~pi}[q_hat(s, A)] per row, averaged over `samples` draws.
inline Vector expected_q_sampled(const Matrix& q_hat, const Matrix& pi, std::size_t samples,
                                 Rng& rng) {
  Vector out(q_hat.rows());
  for (Eigen::Index i = 0; i < q_hat.rows(); ++i) {
    const Vector row = pi.row(i).transpose();
    double acc = 0.0;
    for (std::size_t k = 0; k < samples; ++k)
      acc += q_hat(i, static_cast<Eigen::Index>(sample_categorical(row, rng)));
    out[i] = acc / static_cast<double>(samples);
  }
  return out;
}

namespace detail {

inline void check_window(std::span<const Step> steps, Eigen::Index rows, double lambda) {
  if (steps.empty()) throw std::invalid_argument("return estimator needs at least one step");
  if (rows != static_cast<Eigen::Index>(steps.size()) + 1)
    throw std::invalid_argument("estimator inputs need one row per step plus a bootstrap row");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  for (const auto& s : steps)
    if (!(s.behavior_probs[static_cast<Eigen::Index>(s.action)] > 0.0))
      throw std::invalid_argument("behavior probability of a taken action is zero");
}

inline double ratio(const Step& s, const Matrix& pi, Eigen::Index row) {
  const auto a = static_cast<Eigen::Index>(s.action);
  return pi(row, a) / s.behavior_probs[a];
}

}  // namespace detail

/// Retrace targets over a window of L steps.
///
///   G_t = q(s_t, a_t) + sum_{j >= t} (prod_{i=t+1..j} gamma_i c_i) delta_j
///   delta_j = r_{j+1} + gamma_{j+1} E_pi q(s_{j+1}, .) - q(s_j, a_j)
///   c_i = lambda min(1, pi(a_i|s_i) / mu(a_i|s_i))
///
/// Discounts come from the steps, so terminal transitions stop the sum.
/// `q_hat`, `pi` and `expected_q` have L + 1 rows; the last row is the state
/// after the window and is used for bootstrapping. `v_hat` (L rows) is the
/// baseline subtracted to form advantages.
inline ReturnEstimate retrace(std::span<const Step> steps, const Matrix& q_hat,
                              const Vector& expected_q, const Matrix& pi, const Vector& v_hat,
                              double lambda) {
  detail::check_window(steps, q_hat.rows(), lambda);
  const auto L = static_cast<Eigen::Index>(steps.size());
  ReturnEstimate out{Vector(L), Vector(L)};
  // Bootstrap from the expected action value after the last step.
  double next_g = 0.0;
  for (Eigen::Index t = L - 1; t >= 0; --t) {
    const Step& s = steps[static_cast<std::size_t>(t)];
    double tail = expected_q[t + 1];
    if (t + 1 < L) {
      const Step& n = steps[static_cast<std::size_t>(t + 1)];
      const double c = lambda * std::min(1.0, detail::ratio(n, pi, t + 1));
      tail += c * (next_g - q_hat(t + 1, static_cast<Eigen::Index>(n.action)));
    }
    out.G[t] = s.reward + s.discount * tail;
    next_g = out.G[t];
  }
  out.advantage = out.G - v_hat.head(L);
  return out;
}

/// Convenience overload with exact expectations.
inline ReturnEstimate retrace(std::span<const Step> steps, const Matrix& q_hat, const Matrix& pi,
                              const Vector& v_hat, double lambda) {
  return retrace(steps, q_hat, expected_q_exact(q_hat, pi), pi, v_hat, lambda);
}

struct VtraceResult {
  ReturnEstimate estimate;
  /// State-value targets v_s (L rows).
  Vector vs;
};

/// V-trace over a window. `v_hat` has L + 1 rows (the last bootstraps), `pi`
/// has at least L rows of target-policy probabilities. The action-value
/// target is G_t = r_{t+1} + gamma_{t+1} v_{t+1}.
inline VtraceResult vtrace(std::span<const Step> steps, const Vector& v_hat, const Matrix& pi,
                           double lambda, double clip_rho = 1.0, double clip_c = 1.0) {
  detail::check_window(steps, v_hat.size(), lambda);
  const auto L = static_cast<Eigen::Index>(steps.size());
  VtraceResult out{{Vector(L), Vector(L)}, Vector(L)};
  double next_vs = v_hat[L];
  for (Eigen::Index t = L - 1; t >= 0; --t) {
    const Step& s = steps[static_cast<std::size_t>(t)];
    const double ratio = detail::ratio(s, pi, t);
    const double rho = std::min(clip_rho, ratio);
    const double c = lambda * std::min(clip_c, ratio);
    const double delta = s.reward + s.discount * v_hat[t + 1] - v_hat[t];
    out.estimate.G[t] = s.reward + s.discount * next_vs;
    out.vs[t] = v_hat[t] + rho * delta + s.discount * c * (next_vs - v_hat[t + 1]);
    next_vs = out.vs[t];
  }
  out.estimate.advantage = out.estimate.G - v_hat.head(L);
  return out;
}

/// Moving estimate of E[(G - v)^2] with Adam-style bias correction.
struct AdvNormState {
  double var = 0.0;
  double beta_product = 1.0;
  double beta_var = 0.99;
  double eps_var = 1e-12;

  /// var / (1 - beta_product); zero before the first update.
  double corrected_var() const {
    return beta_product < 1.0 ? var / (1.0 - beta_product) : 0.0;
  }
  bool initialized() const { return beta_product < 1.0; }
};

inline AdvNormState norm_update(AdvNormState state, std::span<const double> advantages) {
  if (advantages.empty()) throw std::invalid_argument("norm_update needs a non-empty batch");
  double mean_sq = 0.0;
  for (double a : advantages) mean_sq += a * a;
  mean_sq /= static_cast<double>(advantages.size());
  state.var = state.beta_var * state.var + (1.0 - state.beta_var) * mean_sq;
  state.beta_product *= state.beta_var;
  return state;
}

inline double normalize(const AdvNormState& state, double advantage) {
  if (!state.initialized())
    throw std::logic_error("normalize called before any norm_update");
  return advantage / std::sqrt(state.corrected_var() + state.eps_var);
}

}  // namespace muesli
