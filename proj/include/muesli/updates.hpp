#pragma once

// Policy losses for one state, written as functions of the online policy
// logits. Everything that depends on the target network or on sampled data
// arrives precomputed in PolicyLossInputs and is held constant, so the
// returned logit gradients are exact gradients of the returned values.

#include "muesli/targets.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace muesli {

enum class Variant { muesli, pg, pg_trpo, ppo, mpo_indirect, mpo_direct, cmpo_indirect };

inline constexpr std::array<Variant, 7> kAllVariants = {
    Variant::muesli,       Variant::pg,         Variant::pg_trpo,      Variant::ppo,
    Variant::mpo_indirect, Variant::mpo_direct, Variant::cmpo_indirect};

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::muesli: return "muesli";
    case Variant::pg: return "pg";
    case Variant::pg_trpo: return "pg_trpo";
    case Variant::ppo: return "ppo";
    case Variant::mpo_indirect: return "mpo_indirect";
    case Variant::mpo_direct: return "mpo_direct";
    case Variant::cmpo_indirect: return "cmpo_indirect";
  }
  return "?";
}

inline std::string variant_names() {
  std::string out;
  for (auto v : kAllVariants) {
    if (!out.empty()) out += ", ";
    out += to_string(v);
  }
  return out;
}

inline Variant parse_variant(std::string_view name) {
  for (auto v : kAllVariants)
    if (name == to_string(v)) return v;
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "'; valid variants: " + variant_names());
}

/// Entropy bonus weight used when none is configured.
inline double default_entropy_weight(Variant v) {
  switch (v) {
    case Variant::pg: return 0.003;
    case Variant::pg_trpo:
    case Variant::ppo: return 0.0003;
    default: return 0.0;
  }
}

/// True for variants whose loss includes the policy-model distillation term.
inline bool uses_model_policy_loss(Variant v) {
  return v == Variant::muesli || v == Variant::mpo_indirect || v == Variant::cmpo_indirect;
}

struct UpdateConfig {
  Variant variant = Variant::muesli;
  /// Weight of KL(pi_cmpo, pi) in the Muesli loss.
  double lambda_cmpo = 1.0;
  /// Unset means the variant default.
  std::optional<double> entropy_weight;
  double trpo_weight = 0.01;
  double ppo_epsilon = 0.5;
  /// Number of sampled actions for KL(pi_cmpo, pi); 0 means exact.
  std::size_t kl_samples = 16;
  double z_init = 1.0;
  double clip_c = 1.0;
  /// Fixed temperature of the unclipped MPO target.
  double mpo_temperature = 1.0;
  /// Penalty weight of KL(pi, pi_prior) in direct MPO.
  double mpo_direct_weight = 1.0;
  double policy_loss_weight = 3.0;

  double entropy() const { return entropy_weight.value_or(default_entropy_weight(variant)); }

  void validate() const {
    auto nonneg = [](double x, const char* name) {
      if (!(x >= 0.0) || !std::isfinite(x))
        throw std::invalid_argument(std::string(name) + " must be a non-negative number");
    };
    nonneg(lambda_cmpo, "lambda_cmpo");
    nonneg(entropy(), "entropy_weight");
    nonneg(trpo_weight, "trpo_weight");
    nonneg(ppo_epsilon, "ppo_epsilon");
    nonneg(policy_loss_weight, "policy_loss_weight");
    nonneg(mpo_direct_weight, "mpo_direct_weight");
    if (!(mpo_temperature > 0.0)) throw std::invalid_argument("mpo_temperature must be positive");
    if (!(clip_c > 0.0)) throw std::invalid_argument("clip_c must be positive");
    if (!(z_init > 0.0)) throw std::invalid_argument("z_init must be positive");
  }
};

/// Constants for one state, prepared from the target network and the data.
struct PolicyLossInputs {
  std::size_t action = 0;
  Vector behavior;
  Vector prior;
  /// Normalized multi-step advantage (G^v - v_prior) / sigma.
  double pg_advantage = 0.0;
  /// min(1, 1/rho) for the importance ratio rho at preparation time, so the
  /// clipped importance weight equals scale * rho.
  double is_scale = 1.0;
  /// Exact CMPO target.
  Vector cmpo;
  /// Sampled actions and their weights for the sampled KL; empty for exact.
  std::vector<std::size_t> kl_actions;
  Vector kl_weights;
  /// Unclipped MPO target (indirect MPO only).
  Vector mpo;
};

struct LogitLoss {
  double value = 0.0;
  Vector dlogits;
  /// Policy-gradient (or surrogate) part of `value`.
  double pg = 0.0;
  /// Regularizer part of `value` (KL, entropy and penalty terms).
  double regularizer = 0.0;
};

namespace loss_terms {

/// -clip(rho) * adv with the clip frozen as a rescaling of rho.
inline LogitLoss clipped_is_pg(const Vector& probs, const PolicyLossInputs& in) {
  const auto a = static_cast<Eigen::Index>(in.action);
  const double rho = probs[a] / in.behavior[a];
  LogitLoss out;
  out.value = -in.is_scale * rho * in.pg_advantage;
  out.dlogits = -in.is_scale * rho * in.pg_advantage * (-probs);
  out.dlogits[a] += -in.is_scale * rho * in.pg_advantage;
  out.pg = out.value;
  return out;
}

/// KL(target || softmax(logits)).
inline LogitLoss kl_to(const Vector& probs, const Vector& target, double weight) {
  LogitLoss out;
  out.value = weight * kl_divergence(target, probs);
  out.dlogits = weight * (probs - target);
  out.regularizer = out.value;
  return out;
}

/// -weight * sum_k w_k log pi(a_k): cross-entropy form of the sampled KL.
inline LogitLoss sampled_kl(const Vector& log_probs, const Vector& probs,
                            const std::vector<std::size_t>& actions, const Vector& weights,
                            double weight) {
  LogitLoss out;
  out.dlogits = Vector::Zero(probs.size());
  double total_w = 0.0;
  for (std::size_t k = 0; k < actions.size(); ++k) {
    const auto a = static_cast<Eigen::Index>(actions[k]);
    const double w = weights[static_cast<Eigen::Index>(k)];
    out.value -= weight * w * log_probs[a];
    out.dlogits[a] -= weight * w;
    total_w += w;
  }
  out.dlogits += weight * total_w * probs;
  out.regularizer = out.value;
  return out;
}

/// -weight * H[softmax(logits)].
inline LogitLoss negative_entropy(const Vector& log_probs, const Vector& probs, double weight) {
  LogitLoss out;
  const double h = entropy(probs);
  out.value = -weight * h;
  out.dlogits = weight * probs.cwiseProduct((log_probs.array() + h).matrix());
  out.regularizer = out.value;
  return out;
}

/// weight * KL(softmax(logits) || prior).
inline LogitLoss reverse_kl(const Vector& log_probs, const Vector& probs, const Vector& prior,
                            double weight) {
  LogitLoss out;
  const Vector log_ratio = log_probs - prior.array().log().matrix();
  const double kl = probs.dot(log_ratio);
  out.value = weight * kl;
  out.dlogits = weight * probs.cwiseProduct((log_ratio.array() - kl).matrix());
  out.regularizer = out.value;
  return out;
}

inline LogitLoss& operator+=(LogitLoss& a, const LogitLoss& b) {
  a.value += b.value;
  a.pg += b.pg;
  a.regularizer += b.regularizer;
  if (a.dlogits.size() == 0) {
    a.dlogits = b.dlogits;
  } else {
    a.dlogits += b.dlogits;
  }
  return a;
}

}  // namespace loss_terms

inline LogitLoss cmpo_kl_term(const Vector& log_probs, const Vector& probs,
                              const PolicyLossInputs& in, double weight) {
  if (in.kl_actions.empty()) return loss_terms::kl_to(probs, in.cmpo, weight);
  return loss_terms::sampled_kl(log_probs, probs, in.kl_actions, in.kl_weights, weight);
}

/// Clipped importance-weighted policy gradient plus lambda KL(pi_cmpo, pi).
/// The policy-model term is added by the caller.
inline LogitLoss muesli_loss(const Vector& logits, const PolicyLossInputs& in,
                             const UpdateConfig& cfg) {
  using namespace loss_terms;
  const Vector log_probs = log_softmax(logits);
  const Vector probs = log_probs.array().exp().matrix();
  LogitLoss out = clipped_is_pg(probs, in);
  if (cfg.lambda_cmpo > 0.0) out += cmpo_kl_term(log_probs, probs, in, cfg.lambda_cmpo);
  return out;
}

/// Sampled policy gradient with an entropy bonus.
inline LogitLoss pg_loss(const Vector& logits, const PolicyLossInputs& in,
                         const UpdateConfig& cfg) {
  using namespace loss_terms;
  const Vector log_probs = log_softmax(logits);
  const Vector probs = log_probs.array().exp().matrix();
  LogitLoss out = clipped_is_pg(probs, in);
  out += negative_entropy(log_probs, probs, cfg.entropy());
  return out;
}

/// pg_loss plus a KL(pi_b, pi) penalty.
inline LogitLoss pg_trpo_loss(const Vector& logits, const PolicyLossInputs& in,
                              const UpdateConfig& cfg) {
  using namespace loss_terms;
  LogitLoss out = pg_loss(logits, in, cfg);
  out += kl_to(softmax(logits), in.behavior, cfg.trpo_weight);
  return out;
}

/// Clipped surrogate -min(rho A, clip(rho, 1-eps, 1+eps) A) minus an
/// entropy bonus.
inline LogitLoss ppo_loss(const Vector& logits, const PolicyLossInputs& in,
                          const UpdateConfig& cfg) {
  using namespace loss_terms;
  const Vector log_probs = log_softmax(logits);
  const Vector probs = log_probs.array().exp().matrix();
  const auto a = static_cast<Eigen::Index>(in.action);
  const double rho = probs[a] / in.behavior[a];
  const double adv = in.pg_advantage;
  const double clipped = std::clamp(rho, 1.0 - cfg.ppo_epsilon, 1.0 + cfg.ppo_epsilon);
  LogitLoss out;
  out.dlogits = Vector::Zero(probs.size());
  if (rho * adv <= clipped * adv) {
    out.value = -rho * adv;
    out.dlogits = -adv * rho * (-probs);
    out.dlogits[a] += -adv * rho;
  } else {
    out.value = -clipped * adv;
  }
  out.pg = out.value;
  out += negative_entropy(log_probs, probs, cfg.entropy());
  return out;
}

/// Distillation KL(pi_mpo, pi) with a fixed-temperature MPO target.
inline LogitLoss mpo_indirect_loss(const Vector& logits, const PolicyLossInputs& in,
                                   const UpdateConfig& /*cfg*/) {
  return loss_terms::kl_to(softmax(logits), in.mpo, 1.0);
}

/// Policy gradient plus the KL(pi, pi_prior) penalty.
inline LogitLoss mpo_direct_loss(const Vector& logits, const PolicyLossInputs& in,
                                 const UpdateConfig& cfg) {
  using namespace loss_terms;
  const Vector log_probs = log_softmax(logits);
  const Vector probs = log_probs.array().exp().matrix();
  LogitLoss out = clipped_is_pg(probs, in);
  out += reverse_kl(log_probs, probs, in.prior, cfg.mpo_direct_weight);
  return out;
}

/// Distillation of the CMPO target alone, KL(pi_cmpo, pi).
inline LogitLoss cmpo_indirect_loss(const Vector& logits, const PolicyLossInputs& in,
                                    const UpdateConfig& /*cfg*/) {
  const Vector log_probs = log_softmax(logits);
  const Vector probs = log_probs.array().exp().matrix();
  return cmpo_kl_term(log_probs, probs, in, 1.0);
}

inline LogitLoss policy_loss(const Vector& logits, const PolicyLossInputs& in,
                             const UpdateConfig& cfg) {
  switch (cfg.variant) {
    case Variant::muesli: return muesli_loss(logits, in, cfg);
    case Variant::pg: return pg_loss(logits, in, cfg);
    case Variant::pg_trpo: return pg_trpo_loss(logits, in, cfg);
    case Variant::ppo: return ppo_loss(logits, in, cfg);
    case Variant::mpo_indirect: return mpo_indirect_loss(logits, in, cfg);
    case Variant::mpo_direct: return mpo_direct_loss(logits, in, cfg);
    case Variant::cmpo_indirect: return cmpo_indirect_loss(logits, in, cfg);
  }
  throw std::logic_error("unhandled variant");
}

}  // namespace muesli
