#pragma once

// Target policies for regularized policy optimization: the MPO closed form,
// its clipped-advantage variant (CMPO), total variation, and the pieces of
// the sampled KL estimator.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace muesli {

using Vector = Eigen::VectorXd;

inline Vector softmax(const Vector& logits) {
  const Vector shifted = (logits.array() - logits.maxCoeff()).exp().matrix();
  return shifted / shifted.sum();
}

inline Vector log_softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

/// KL(p || q) with the convention 0 log 0 = 0.
inline double kl_divergence(const Vector& p, const Vector& q) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return kl;
}

inline double entropy(const Vector& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

/// Half the L1 distance between two distributions.
inline double total_variation(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw std::invalid_argument("total_variation: length mismatch");
  return 0.5 * (p - q).cwiseAbs().sum();
}

/// Clipping threshold for advantages. Bounds the total variation between
/// the CMPO target and its prior by tanh(c/2).
struct ClipConfig {
  double c = 1.0;

  explicit ClipConfig(double threshold = 1.0) : c(threshold) {
    if (!(threshold > 0.0) || !std::isfinite(threshold))
      throw std::invalid_argument("clipping threshold must be positive and finite");
  }

  /// Threshold whose worst-case total variation equals `max_tv`.
  static ClipConfig for_max_tv(double max_tv) { return ClipConfig(2.0 * std::atanh(max_tv)); }
};

/// Clip to the closed interval [-c, c].
inline double clip_advantage(double adv, const ClipConfig& clip) {
  return std::clamp(adv, -clip.c, clip.c);
}

inline double max_tv(const ClipConfig& clip) { return std::tanh(clip.c / 2.0); }

/// prior(a) exp(q(a)/lambda) / z, computed in the log domain.
inline Vector mpo_target(const Vector& prior, const Vector& q, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("mpo_target: temperature must be positive");
  if (prior.size() != q.size()) throw std::invalid_argument("mpo_target: length mismatch");
  Vector logits(prior.size());
  for (Eigen::Index a = 0; a < prior.size(); ++a)
    logits[a] = prior[a] > 0.0 ? std::log(prior[a]) + q[a] / lambda
                               : -std::numeric_limits<double>::infinity();
  return softmax(logits);
}

struct CmpoTarget {
  Vector probs;
  /// Normalizer sum_a prior(a) exp(clip(adv(a))).
  double z = 1.0;
};

inline CmpoTarget cmpo_target(const Vector& prior, const Vector& advantages,
                              const ClipConfig& clip) {
  if (prior.size() != advantages.size())
    throw std::invalid_argument("cmpo_target: length mismatch");
  CmpoTarget out;
  out.probs.resize(prior.size());
  double z = 0.0;
  for (Eigen::Index a = 0; a < prior.size(); ++a) {
    out.probs[a] = prior[a] * std::exp(clip_advantage(advantages[a], clip));
    z += out.probs[a];
  }
  out.probs /= z;
  out.z = z;
  return out;
}

struct TheoremReport {
  double c = 0.0;
  double numeric_max = 0.0;
  double analytic_max = 0.0;
  double argmax_p = 0.0;
  double analytic_argmax_p = 0.0;
  bool passed = false;
  std::string message;
};

/// Numerically maximizes TV(cmpo_target([p, 1-p], [c, -c]), [p, 1-p]) over p
/// with a dense grid followed by Newton steps on finite-difference
/// derivatives, and compares the result with tanh(c/2) and
/// p* = (1 - e^-c) / (e^c - e^-c).
inline TheoremReport verify_theorem(const ClipConfig& clip, double resolution = 1e-4) {
  const double c = clip.c;
  const Vector adv = (Vector(2) << c, -c).finished();
  auto tv = [&](double p) {
    const Vector prior = (Vector(2) << p, 1.0 - p).finished();
    return total_variation(cmpo_target(prior, adv, clip).probs, prior);
  };

  TheoremReport r;
  r.c = c;
  const auto cells = static_cast<long>(std::ceil(1.0 / resolution));
  double best_p = 0.0;
  double best = -1.0;
  for (long i = 0; i <= cells; ++i) {
    const double p = std::min(1.0, static_cast<double>(i) * resolution);
    const double value = tv(p);
    if (value > best) {
      best = value;
      best_p = p;
    }
  }
  const double h = std::min(1e-4, resolution);
  double p = best_p;
  for (int step = 0; step < 3; ++step) {
    const double mid = std::clamp(p, h, 1.0 - h);
    const double f0 = tv(mid);
    const double fp = tv(mid + h);
    const double fm = tv(mid - h);
    const double d1 = (fp - fm) / (2.0 * h);
    const double d2 = (fp - 2.0 * f0 + fm) / (h * h);
    if (d2 >= 0.0) break;
    p = std::clamp(mid - d1 / d2, 0.0, 1.0);
  }
  if (tv(p) >= best) {
    best = tv(p);
    best_p = p;
  }
  r.numeric_max = best;
  r.argmax_p = best_p;
  r.analytic_max = max_tv(clip);
  r.analytic_argmax_p = (1.0 - std::exp(-c)) / (std::exp(c) - std::exp(-c));

  const double max_err = std::abs(r.numeric_max - r.analytic_max);
  const double arg_err = std::abs(r.argmax_p - r.analytic_argmax_p);
  r.passed = max_err < 1e-6 && arg_err < 1e-5;
  std::ostringstream msg;
  msg.precision(9);
  if (r.passed) {
    msg << "ok";
  } else {
    msg << "mismatch at p=" << r.argmax_p << ": |max error|=" << max_err
        << ", |argmax error|=" << arg_err;
  }
  r.message = msg.str();
  return r;
}

/// Leave-one-out estimate of the CMPO normalizer for sample i:
/// (z_init + sum_{k != i} exp_clipped_advs[k]) / N.
inline double z_estimate(std::span<const double> exp_clipped_advs, std::size_t leave_out,
                         double z_init = 1.0) {
  const std::size_t n = exp_clipped_advs.size();
  if (n == 0) throw std::invalid_argument("z_estimate needs at least one sample");
  if (leave_out >= n) throw std::invalid_argument("z_estimate: leave-out index out of range");
  double sum = z_init;
  for (std::size_t k = 0; k < n; ++k)
    if (k != leave_out) sum += exp_clipped_advs[k];
  return sum / static_cast<double>(n);
}

/// Per-sample weights of the sampled KL(pi_cmpo, pi) loss. The loss is
/// -lambda * sum_k w_k log pi(a_k), with w_k = exp(clip(adv(a_k))) / z_k / N.
/// z_k is the leave-one-out estimate unless `exact_z` is set, in which case
/// the exact normalizer over `prior` is used for every sample.
inline Vector kl_sample_weights(const Vector& prior, const Vector& advantages,
                                const ClipConfig& clip, std::span<const std::size_t> sampled,
                                double z_init = 1.0, bool exact_z = false) {
  const std::size_t n = sampled.size();
  if (n == 0) throw std::invalid_argument("kl_sample_weights needs at least one sample");
  std::vector<double> e(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (sampled[k] >= static_cast<std::size_t>(advantages.size()))
      throw std::invalid_argument("kl_sample_weights: action id out of range");
    e[k] = std::exp(clip_advantage(advantages[static_cast<Eigen::Index>(sampled[k])], clip));
  }
  const double z = exact_z ? cmpo_target(prior, advantages, clip).z : 0.0;
  Vector w(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < n; ++k) {
    const double zk = exact_z ? z : z_estimate(e, k, z_init);
    w[static_cast<Eigen::Index>(k)] = e[k] / zk / static_cast<double>(n);
  }
  return w;
}

}  // namespace muesli
