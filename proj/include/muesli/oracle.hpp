#pragma once

// Exact dynamic-programming ground truth for tabular MDPs.

#include "muesli/env.hpp"
#include "muesli/targets.hpp"

#include <Eigen/LU>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace muesli {

/// Exact values of a per-state policy.
///
/// For discounted MDPs `d` is the normalized discounted visitation
/// (1 - gamma) mu^T (I - gamma P)^-1 and `horizon` is 1 / (1 - gamma). For
/// episodic MDPs with gamma = 1, `d` is the expected number of visits to each
/// non-terminal state divided by the expected episode length, and `horizon`
/// is that expected length. In both cases horizon * d(s) is the expected
/// (discounted) number of visits to s.
struct ExactEvaluation {
  Vector v;
  Matrix q;
  Vector d;
  double J = 0.0;
  double horizon = 1.0;
};

inline constexpr std::size_t kExactSolveMaxStates = 200;

namespace detail {

inline Matrix policy_transition(const TabularMDP& mdp, const Matrix& policy) {
  const auto S = static_cast<Eigen::Index>(mdp.num_states());
  Matrix P = Matrix::Zero(S, S);
  for (Eigen::Index s = 0; s < S; ++s)
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      const double pa = policy(s, static_cast<Eigen::Index>(a));
      if (pa == 0.0) continue;
      for (Eigen::Index n = 0; n < S; ++n)
        P(s, n) += pa * mdp.transition(static_cast<std::size_t>(s), a, static_cast<std::size_t>(n));
    }
  return P;
}

inline Vector policy_reward(const TabularMDP& mdp, const Matrix& policy) {
  const auto S = static_cast<Eigen::Index>(mdp.num_states());
  Vector r = Vector::Zero(S);
  for (Eigen::Index s = 0; s < S; ++s)
    for (std::size_t a = 0; a < mdp.num_actions(); ++a)
      r[s] += policy(s, static_cast<Eigen::Index>(a)) *
              mdp.expected_reward(static_cast<std::size_t>(s), a);
  return r;
}

/// True when every non-terminal state reaches a terminal state with positive
/// probability under P.
inline bool absorbs(const TabularMDP& mdp, const Matrix& P) {
  const auto S = static_cast<Eigen::Index>(mdp.num_states());
  std::vector<bool> reaches(static_cast<std::size_t>(S), false);
  for (Eigen::Index s = 0; s < S; ++s) reaches[static_cast<std::size_t>(s)] = mdp.is_terminal(static_cast<std::size_t>(s));
  bool changed = true;
  while (changed) {
    changed = false;
    for (Eigen::Index s = 0; s < S; ++s) {
      if (reaches[static_cast<std::size_t>(s)]) continue;
      for (Eigen::Index n = 0; n < S; ++n)
        if (P(s, n) > 0.0 && reaches[static_cast<std::size_t>(n)]) {
          reaches[static_cast<std::size_t>(s)] = true;
          changed = true;
          break;
        }
    }
  }
  for (bool r : reaches)
    if (!r) return false;
  return true;
}

/// Solves (I - gamma P_live) x = b restricted to non-terminal states.
/// `transpose` solves the adjoint system used for occupancies.
inline Vector solve_live(const TabularMDP& mdp, const Matrix& P, double gamma, const Vector& b,
                         bool transpose) {
  const auto S = static_cast<Eigen::Index>(mdp.num_states());
  std::vector<Eigen::Index> live;
  for (Eigen::Index s = 0; s < S; ++s)
    if (!mdp.is_terminal(static_cast<std::size_t>(s))) live.push_back(s);
  const auto L = static_cast<Eigen::Index>(live.size());
  Vector out = Vector::Zero(S);
  if (L == 0) return out;
  Vector rhs(L);
  for (Eigen::Index i = 0; i < L; ++i) rhs[i] = b[live[static_cast<std::size_t>(i)]];

  if (mdp.num_states() <= kExactSolveMaxStates) {
    Matrix A = Matrix::Identity(L, L);
    for (Eigen::Index i = 0; i < L; ++i)
      for (Eigen::Index j = 0; j < L; ++j)
        A(i, j) -= gamma * P(live[static_cast<std::size_t>(i)], live[static_cast<std::size_t>(j)]);
    Vector x = transpose ? Vector(A.transpose().partialPivLu().solve(rhs))
                         : Vector(A.partialPivLu().solve(rhs));
    for (Eigen::Index i = 0; i < L; ++i) out[live[static_cast<std::size_t>(i)]] = x[i];
    return out;
  }

  // Iterative fallback for large state spaces.
  Vector x = rhs;
  Matrix Pl(L, L);
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index j = 0; j < L; ++j)
      Pl(i, j) = P(live[static_cast<std::size_t>(i)], live[static_cast<std::size_t>(j)]);
  for (int iter = 0; iter < 1'000'000; ++iter) {
    Vector next = transpose ? Vector(rhs + gamma * Pl.transpose() * x) : Vector(rhs + gamma * Pl * x);
    const double delta = (next - x).cwiseAbs().maxCoeff();
    x = std::move(next);
    if (delta < 1e-13) {
      for (Eigen::Index i = 0; i < L; ++i) out[live[static_cast<std::size_t>(i)]] = x[i];
      return out;
    }
  }
  throw std::runtime_error("iterative policy evaluation did not converge");
}

}  // namespace detail

/// Exact evaluation of a per-state policy (rows indexed by state).
inline ExactEvaluation evaluate(const TabularMDP& mdp, const Matrix& policy) {
  validate_policy(policy, mdp.num_states(), mdp.num_actions());
  const double gamma = mdp.discount();
  const Matrix P = detail::policy_transition(mdp, policy);
  if (gamma >= 1.0 && !detail::absorbs(mdp, P))
    throw std::runtime_error(
        "policy evaluation does not converge: discount is 1 and some state never terminates");

  ExactEvaluation out;
  const Vector r = detail::policy_reward(mdp, policy);
  out.v = detail::solve_live(mdp, P, gamma, r, false);

  const auto S = static_cast<Eigen::Index>(mdp.num_states());
  const auto A = static_cast<Eigen::Index>(mdp.num_actions());
  out.q = Matrix::Zero(S, A);
  for (Eigen::Index s = 0; s < S; ++s) {
    if (mdp.is_terminal(static_cast<std::size_t>(s))) continue;
    for (Eigen::Index a = 0; a < A; ++a) {
      double q = 0.0;
      for (Eigen::Index n = 0; n < S; ++n) {
        const double p = mdp.transition(static_cast<std::size_t>(s), static_cast<std::size_t>(a),
                                        static_cast<std::size_t>(n));
        if (p == 0.0) continue;
        q += p * (mdp.reward(static_cast<std::size_t>(s), static_cast<std::size_t>(a),
                             static_cast<std::size_t>(n)) +
                  gamma * out.v[n]);
      }
      out.q(s, a) = q;
    }
  }
  out.J = mdp.initial().dot(out.v);

  if (gamma < 1.0) {
    // Terminal states absorb with a self-loop, so include them in the solve.
    Matrix M = Matrix::Identity(S, S) - gamma * P;
    if (mdp.num_states() <= kExactSolveMaxStates) {
      out.d = (1.0 - gamma) * Vector(M.transpose().partialPivLu().solve(mdp.initial()));
    } else {
      Vector acc = mdp.initial();
      Vector term = mdp.initial();
      for (int t = 0; t < 1'000'000 && term.cwiseAbs().sum() > 1e-15; ++t) {
        term = gamma * P.transpose() * term;
        acc += term;
      }
      out.d = (1.0 - gamma) * acc;
    }
    out.horizon = 1.0 / (1.0 - gamma);
  } else {
    const Vector visits = detail::solve_live(mdp, P, 1.0, mdp.initial(), true);
    const double length = visits.sum();
    out.horizon = length;
    out.d = length > 0.0 ? Vector(visits / length) : visits;
  }
  return out;
}

/// Evaluates a per-observation policy by expanding it through the obs map.
inline ExactEvaluation evaluate_obs_policy(const TabularMDP& mdp, const Matrix& per_obs) {
  return evaluate(mdp, expand_policy(mdp, per_obs));
}

/// Maximum absolute Bellman residual of `eval.v` under `policy`.
inline double bellman_residual(const TabularMDP& mdp, const Matrix& policy,
                               const ExactEvaluation& eval) {
  double worst = 0.0;
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    if (mdp.is_terminal(s)) {
      worst = std::max(worst, std::abs(eval.v[static_cast<Eigen::Index>(s)]));
      continue;
    }
    double backup = 0.0;
    for (std::size_t a = 0; a < mdp.num_actions(); ++a) {
      double q = 0.0;
      for (std::size_t n = 0; n < mdp.num_states(); ++n)
        q += mdp.transition(s, a, n) *
             (mdp.reward(s, a, n) + mdp.discount() * eval.v[static_cast<Eigen::Index>(n)]);
      backup += policy(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) * q;
    }
    worst = std::max(worst, std::abs(backup - eval.v[static_cast<Eigen::Index>(s)]));
  }
  return worst;
}

/// Values aggregated per observation, weighting each state by how often it
/// is occupied among the states sharing that observation.
struct ObservationValues {
  Matrix q;
  Vector v;
};

inline ObservationValues observation_values(const TabularMDP& mdp, const ExactEvaluation& eval) {
  const auto O = static_cast<Eigen::Index>(mdp.num_observations());
  const auto A = static_cast<Eigen::Index>(mdp.num_actions());
  ObservationValues out{Matrix::Zero(O, A), Vector::Zero(O)};
  Vector mass = Vector::Zero(O);
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    const auto o = static_cast<Eigen::Index>(mdp.observation(s));
    const double w = eval.d[static_cast<Eigen::Index>(s)];
    mass[o] += w;
    out.q.row(o) += w * eval.q.row(static_cast<Eigen::Index>(s));
    out.v[o] += w * eval.v[static_cast<Eigen::Index>(s)];
  }
  for (Eigen::Index o = 0; o < O; ++o)
    if (mass[o] > 0.0) {
      out.q.row(o) /= mass[o];
      out.v[o] /= mass[o];
    }
  return out;
}

/// Closed-form values of the aliased MDP when `up` has probability p in
/// every state. States are numbered as in the usual drawing (1 initial).
struct AliasedClosedForm {
  double v1, v2, v3, q_up, q_down, v_phi;
};

inline AliasedClosedForm aliased_closed_form(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0, 1]");
  return {-4.0 * p * p + 5.0 * p - 1.0,
          -2.0 * p + 1.0,
          2.0 * p - 1.0,
          -2.0 * p + 1.5,
          2.0 * p - 1.0,
          -4.0 * p * p + 4.5 * p - 1.0};
}

/// Deterministic greedy policy; ties go to the lowest action index.
inline Matrix greedy_improve(const Matrix& q) {
  if (!q.allFinite()) throw std::invalid_argument("greedy_improve needs finite action values");
  Matrix pi = Matrix::Zero(q.rows(), q.cols());
  for (Eigen::Index s = 0; s < q.rows(); ++s) {
    Eigen::Index best = 0;
    for (Eigen::Index a = 1; a < q.cols(); ++a)
      if (q(s, a) > q(s, best)) best = a;
    pi(s, best) = 1.0;
  }
  return pi;
}

/// Performance-difference lemma: expected advantage of the prior's action
/// values under the new policy's visitation, scaled by the horizon. Equals
/// J(pi_new) - J(pi_prior).
inline double performance_difference(const TabularMDP& mdp, const Matrix& pi_new,
                                     const Matrix& pi_prior) {
  const ExactEvaluation fresh = evaluate(mdp, pi_new);
  const ExactEvaluation prior = evaluate(mdp, pi_prior);
  double total = 0.0;
  for (Eigen::Index s = 0; s < prior.q.rows(); ++s) {
    double inner = 0.0;
    for (Eigen::Index a = 0; a < prior.q.cols(); ++a)
      inner += pi_new(s, a) * (prior.q(s, a) - prior.v[s]);
    total += fresh.d[s] * inner;
  }
  return fresh.horizon * total;
}

struct TrpoBound {
  double bound = 0.0;
  double actual_difference = 0.0;
  /// Expected prior advantage of the new policy under the prior's visitation.
  double surrogate = 0.0;
  double alpha = 0.0;
  double eps_max = 0.0;
  bool holds = true;
};

/// Lower bound J(new) - J(prior) >= A_prior(new) - 4 alpha^2 gamma eps / (1-gamma)^2.
inline TrpoBound trpo_lower_bound(const TabularMDP& mdp, const Matrix& pi_new,
                                  const Matrix& pi_prior) {
  const double gamma = mdp.discount();
  if (gamma >= 1.0) throw std::invalid_argument("the TRPO bound needs discount < 1");
  const ExactEvaluation fresh = evaluate(mdp, pi_new);
  const ExactEvaluation prior = evaluate(mdp, pi_prior);
  TrpoBound out;
  double surrogate = 0.0;
  for (Eigen::Index s = 0; s < prior.q.rows(); ++s) {
    double inner = 0.0;
    for (Eigen::Index a = 0; a < prior.q.cols(); ++a) {
      const double adv = prior.q(s, a) - prior.v[s];
      inner += pi_new(s, a) * adv;
      out.eps_max = std::max(out.eps_max, std::abs(adv));
    }
    surrogate += prior.d[s] * inner;
    out.alpha = std::max(out.alpha, total_variation(pi_new.row(s).transpose(),
                                                    pi_prior.row(s).transpose()));
  }
  out.surrogate = surrogate / (1.0 - gamma);
  out.bound = out.surrogate -
              4.0 * out.alpha * out.alpha * gamma * out.eps_max / ((1.0 - gamma) * (1.0 - gamma));
  out.actual_difference = fresh.J - prior.J;
  out.holds = out.actual_difference >= out.bound - 1e-8;
  return out;
}

/// Random per-state policy with Dirichlet(1) rows.
inline Matrix random_policy(std::size_t rows, std::size_t actions, Rng& rng) {
  std::gamma_distribution<double> gamma(1.0, 1.0);
  Matrix pi(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(actions));
  for (Eigen::Index s = 0; s < pi.rows(); ++s) {
    for (Eigen::Index a = 0; a < pi.cols(); ++a) pi(s, a) = std::max(gamma(rng), 1e-9);
    pi.row(s) /= pi.row(s).sum();
  }
  return pi;
}

}  // namespace muesli
