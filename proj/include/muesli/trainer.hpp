#pragma once

// Single-process actor/learner loop: act with the target-network policy,
// store fragments in a replay buffer and an online queue, assemble mixed
// batches, and take one clipped Adam step on the total loss per batch.

#include "muesli/approx.hpp"
#include "muesli/env.hpp"
#include "muesli/model.hpp"
#include "muesli/oracle.hpp"
#include "muesli/returns.hpp"
#include "muesli/targets.hpp"
#include "muesli/updates.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace muesli {

enum class ReturnEstimator { retrace, vtrace };

inline const char* to_string(ReturnEstimator r) {
  return r == ReturnEstimator::retrace ? "retrace" : "vtrace";
}

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t sequence_length = 10;
  std::size_t unroll_length = 5;
  double replay_fraction = 0.75;
  std::size_t buffer_capacity = 50'000;
  double target_alpha = 0.1;
  std::size_t total_steps = 50'000;
  std::uint64_t seed = 0;
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double retrace_lambda = 0.95;
  /// Samples for E_pi[q_hat]; 0 means exact.
  std::size_t retrace_samples = 16;
  ReturnEstimator return_estimator = ReturnEstimator::retrace;
  double value_loss_weight = 0.25;
  double reward_loss_weight = 1.0;
  bool model_policy_loss = true;
  /// Mix 0.3% uniform and 3% behavior into pi_prior when forming targets.
  bool prior_mixture = false;
  double beta_var = 0.99;
  double eps_var = 1e-12;
  std::size_t max_episode_length = kDefaultMaxEpisodeLength;
  std::size_t eval_interval = 1000;
  Representation representation = Representation::tabular;
  std::size_t hidden = 16;
  std::size_t model_hidden = 32;
  double init_scale = 0.05;
  UpdateConfig update;

  std::size_t replay_count() const {
    return static_cast<std::size_t>(
        std::llround(replay_fraction * static_cast<double>(batch_size)));
  }
  std::size_t online_count() const { return batch_size - replay_count(); }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw std::invalid_argument(std::string(name) + " must be positive");
    };
    positive(batch_size, "batch_size");
    positive(sequence_length, "sequence_length");
    positive(total_steps, "total_steps");
    positive(eval_interval, "eval_interval");
    positive(max_episode_length, "max_episode_length");
    positive(model_hidden, "model_hidden");
    if (representation == Representation::mlp) positive(hidden, "hidden");
    if (unroll_length < 1 || unroll_length > kMaxUnrollLength)
      throw std::invalid_argument("unroll_length must lie in [1, " +
                                  std::to_string(kMaxUnrollLength) + "]");
    if (!(replay_fraction >= 0.0 && replay_fraction <= 1.0))
      throw std::invalid_argument("replay_fraction must lie in [0, 1]");
    if (buffer_capacity < sequence_length)
      throw std::invalid_argument("buffer_capacity must hold at least one sequence");
    if (!(target_alpha > 0.0 && target_alpha <= 1.0))
      throw std::invalid_argument("target_alpha must lie in (0, 1]");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw std::invalid_argument("learning_rate must be a non-negative number");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw std::invalid_argument("Adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) throw std::invalid_argument("adam_epsilon must be positive");
    if (!(retrace_lambda >= 0.0 && retrace_lambda <= 1.0))
      throw std::invalid_argument("retrace_lambda must lie in [0, 1]");
    if (!(value_loss_weight >= 0.0) || !(reward_loss_weight >= 0.0))
      throw std::invalid_argument("loss weights must be non-negative");
    if (!(beta_var >= 0.0 && beta_var < 1.0))
      throw std::invalid_argument("beta_var must lie in [0, 1)");
    if (!(eps_var >= 0.0)) throw std::invalid_argument("eps_var must be non-negative");
    if (!(init_scale >= 0.0)) throw std::invalid_argument("init_scale must be non-negative");
    update.validate();
  }
};

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// A window [start, start + length) of a stored episode. The episode is kept
/// whole so that targets may look past the end of the fragment.
struct Fragment {
  std::shared_ptr<const Trajectory> episode;
  std::size_t start = 0;
  std::size_t length = 0;
};

inline std::vector<Fragment> split_episode(const std::shared_ptr<const Trajectory>& ep,
                                           std::size_t sequence_length) {
  std::vector<Fragment> out;
  for (std::size_t s = 0; s < ep->size(); s += sequence_length)
    out.push_back({ep, s, std::min(sequence_length, ep->size() - s)});
  return out;
}

/// FIFO ring of fragments bounded by the number of stored steps.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity_steps) : capacity_(capacity_steps) {}

  void add(const Fragment& f) {
    items_.push_back(f);
    steps_ += f.length;
    while (steps_ > capacity_ && items_.size() > 1) {
      steps_ -= items_.front().length;
      items_.pop_front();
    }
  }

  const Fragment& sample(Rng& rng) const {
    if (items_.empty()) throw std::logic_error("sampling from an empty replay buffer");
    std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
    return items_[pick(rng)];
  }

  std::size_t size() const { return items_.size(); }
  std::size_t steps() const { return steps_; }
  std::size_t capacity() const { return capacity_; }
  const std::deque<Fragment>& items() const { return items_; }

 private:
  std::size_t capacity_;
  std::size_t steps_ = 0;
  std::deque<Fragment> items_;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimizerState {
  Vector m;
  Vector v;
  std::uint64_t step = 0;
  double base_lr = 3e-4;
  double final_lr = 0.0;
  std::uint64_t total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Linear decay from base_lr to final_lr over total_steps updates.
  double learning_rate(std::uint64_t t) const {
    const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(total_steps));
    return base_lr + (final_lr - base_lr) * frac;
  }
};

inline OptimizerState make_optimizer(const TrainConfig& cfg, Eigen::Index size) {
  OptimizerState s;
  s.m = Vector::Zero(size);
  s.v = Vector::Zero(size);
  s.base_lr = cfg.learning_rate;
  s.total_steps = cfg.total_steps;
  s.beta1 = cfg.adam_beta1;
  s.beta2 = cfg.adam_beta2;
  s.epsilon = cfg.adam_epsilon;
  return s;
}

/// One Adam step on `params` with the normalized update clipped to [-1, 1]
/// before scaling by the learning rate. Returns the learning rate used.
inline double adam_step(OptimizerState& s, ParamVector& params, const ParamVector& grad) {
  if (s.m.size() != params.size() || grad.size() != params.size())
    throw std::invalid_argument("optimizer state does not match the parameters");
  s.step += 1;
  const double lr = s.learning_rate(s.step);
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  const Vector& g = grad.values();
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * g;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * g.cwiseProduct(g);
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double u = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + s.epsilon);
    params.values()[i] -= lr * std::clamp(u, -1.0, 1.0);
  }
  return lr;
}

inline void ema_update(ParamVector& target, const ParamVector& online, double alpha) {
  target.values() = (1.0 - alpha) * target.values() + alpha * online.values();
}

// ---------------------------------------------------------------------------
// Batch preparation
// ---------------------------------------------------------------------------

/// Everything the loss needs for one position, computed from the target
/// network and the data and held constant during differentiation.
struct PreparedPosition {
  std::size_t obs = 0;
  PolicyLossInputs policy;
  std::vector<std::size_t> unroll_actions;
  ModelTargets model;
};

struct PreparedBatch {
  std::vector<PreparedPosition> positions;
  /// Largest TV(pi_cmpo, pi_prior) over every state in the batch.
  double tv_max = 0.0;
  /// Standard deviation of the normalized policy-gradient advantages.
  double adv_std = 0.0;
};

/// Per-observation outputs of the target network.
struct TargetTable {
  Matrix probs;
  Vector v;
  Matrix q;
};

inline TargetTable target_table(const AgentNet& net, const ParamVector& target, double gamma) {
  const auto O = static_cast<Eigen::Index>(net.spec().num_obs);
  const auto A = static_cast<Eigen::Index>(net.spec().num_actions);
  TargetTable t{Matrix(O, A), Vector(O), Matrix(O, A)};
  for (Eigen::Index o = 0; o < O; ++o) {
    const NetOutput out = net.forward(target, static_cast<std::size_t>(o));
    t.probs.row(o) = out.probs().transpose();
    t.v[o] = out.value;
    t.q.row(o) = one_step_q(net, target, out.hidden, gamma).transpose();
  }
  return t;
}

inline Vector mix_prior(const Vector& target_probs, const Vector& behavior) {
  const double n = static_cast<double>(target_probs.size());
  return (1.0 - 0.003 - 0.03) * target_probs + 0.003 * Vector::Constant(target_probs.size(), 1.0 / n) +
         0.03 * behavior;
}

namespace detail {

/// Targets for one window row.
struct RowTargets {
  Vector prior;
  double v_prior = 0.0;
  Vector q;
  Vector cmpo;
  Vector mpo;
  /// State-value target for this row's state.
  double value_target = 0.0;
};

inline bool ends_in_terminal(const Trajectory& ep) {
  return !ep.empty() && !ep.steps.back().truncated;
}

}  // namespace detail

/// Builds the constant part of the loss for a batch of fragments. Updates
/// the advantage normalizer with the batch before normalizing it.
inline PreparedBatch prepare_batch(const TrainConfig& cfg, const AgentNet& net,
                                   const ParamVector& online, const ParamVector& target,
                                   double gamma, const std::vector<Fragment>& fragments,
                                   AdvNormState& norm, Rng& rng) {
  const auto A = static_cast<Eigen::Index>(net.spec().num_actions);
  const std::size_t K = cfg.unroll_length;
  const ClipConfig clip(cfg.update.clip_c);
  const TargetTable table = target_table(net, target, gamma);
  std::unordered_map<std::size_t, Vector> online_probs;
  auto online_pi = [&](std::size_t obs) -> const Vector& {
    auto it = online_probs.find(obs);
    if (it == online_probs.end()) it = online_probs.emplace(obs, net.forward(online, obs).probs()).first;
    return it->second;
  };

  struct FragmentRows {
    std::vector<detail::RowTargets> rows;
    std::vector<double> advantages;
  };
  std::vector<FragmentRows> per_fragment;
  per_fragment.reserve(fragments.size());
  std::vector<double> all_adv;

  for (const Fragment& f : fragments) {
    const Trajectory& ep = *f.episode;
    const std::size_t end = std::min(ep.size(), f.start + f.length + K);
    const std::span<const Step> window(ep.steps.data() + f.start, end - f.start);
    const auto L = static_cast<Eigen::Index>(window.size());
    Matrix q_hat(L + 1, A), pi(L + 1, A);
    Vector v_hat(L + 1);
    FragmentRows fr;
    fr.rows.resize(static_cast<std::size_t>(L));
    for (Eigen::Index i = 0; i <= L; ++i) {
      const bool boot = i == L;
      const std::size_t obs = boot ? window.back().next_obs : window[static_cast<std::size_t>(i)].obs;
      const auto o = static_cast<Eigen::Index>(obs);
      Vector prior = table.probs.row(o).transpose();
      if (cfg.prior_mixture && !boot) prior = mix_prior(prior, window[static_cast<std::size_t>(i)].behavior_probs);
      pi.row(i) = prior.transpose();
      q_hat.row(i) = table.q.row(o);
      v_hat[i] = table.v[o];
      if (!boot) {
        auto& row = fr.rows[static_cast<std::size_t>(i)];
        row.prior = prior;
        row.v_prior = table.v[o];
        row.q = table.q.row(o).transpose();
      }
    }
    if (cfg.return_estimator == ReturnEstimator::retrace) {
      const Vector eq = cfg.retrace_samples == 0
                            ? expected_q_exact(q_hat, pi)
                            : expected_q_sampled(q_hat, pi, cfg.retrace_samples, rng);
      const ReturnEstimate est = retrace(window, q_hat, eq, pi, v_hat.head(L), cfg.retrace_lambda);
      for (Eigen::Index i = 0; i < L; ++i) {
        const Step& s = window[static_cast<std::size_t>(i)];
        const auto a = static_cast<Eigen::Index>(s.action);
        const double c = cfg.retrace_lambda * std::min(1.0, pi(i, a) / s.behavior_probs[a]);
        fr.rows[static_cast<std::size_t>(i)].value_target = eq[i] + c * (est.G[i] - q_hat(i, a));
      }
      for (std::size_t i = 0; i < f.length; ++i)
        fr.advantages.push_back(est.advantage[static_cast<Eigen::Index>(i)]);
    } else {
      const VtraceResult res = vtrace(window, v_hat, pi, cfg.retrace_lambda);
      for (Eigen::Index i = 0; i < L; ++i) fr.rows[static_cast<std::size_t>(i)].value_target = res.vs[i];
      for (std::size_t i = 0; i < f.length; ++i)
        fr.advantages.push_back(res.estimate.advantage[static_cast<Eigen::Index>(i)]);
    }
    all_adv.insert(all_adv.end(), fr.advantages.begin(), fr.advantages.end());
    per_fragment.push_back(std::move(fr));
  }

  norm = norm_update(norm, all_adv);
  const double sigma = std::sqrt(norm.corrected_var() + norm.eps_var);

  PreparedBatch batch;
  double sum = 0.0, sum_sq = 0.0;
  std::uniform_int_distribution<std::size_t> random_action(0, net.spec().num_actions - 1);
  for (std::size_t fi = 0; fi < fragments.size(); ++fi) {
    const Fragment& f = fragments[fi];
    const Trajectory& ep = *f.episode;
    FragmentRows& fr = per_fragment[fi];
    for (auto& row : fr.rows) {
      const Vector adv = (row.q.array() - row.v_prior).matrix() / sigma;
      row.cmpo = cmpo_target(row.prior, adv, clip).probs;
      if (cfg.update.variant == Variant::mpo_indirect)
        row.mpo = mpo_target(row.prior, (row.q.array() - row.v_prior).matrix(),
                             cfg.update.mpo_temperature);
      batch.tv_max = std::max(batch.tv_max, total_variation(row.cmpo, row.prior));
    }
    const bool terminal_end = detail::ends_in_terminal(ep);
    for (std::size_t i = 0; i < f.length; ++i) {
      const std::size_t t = f.start + i;
      const Step& s = ep.steps[t];
      const auto& row = fr.rows[i];
      PreparedPosition p;
      p.obs = s.obs;
      auto& in = p.policy;
      in.action = s.action;
      in.behavior = s.behavior_probs;
      in.prior = row.prior;
      in.pg_advantage = fr.advantages[i] / sigma;
      sum += in.pg_advantage;
      sum_sq += in.pg_advantage * in.pg_advantage;
      const auto a = static_cast<Eigen::Index>(s.action);
      const double rho = online_pi(s.obs)[a] / s.behavior_probs[a];
      in.is_scale = std::min(1.0, 1.0 / rho);
      in.cmpo = row.cmpo;
      if (cfg.update.variant == Variant::mpo_indirect) in.mpo = row.mpo;
      if (cfg.update.kl_samples > 0) {
        in.kl_actions.resize(cfg.update.kl_samples);
        for (auto& k : in.kl_actions) k = sample_categorical(row.prior, rng);
        const Vector adv = (row.q.array() - row.v_prior).matrix() / sigma;
        in.kl_weights = kl_sample_weights(row.prior, adv, clip, in.kl_actions, cfg.update.z_init);
      }

      p.model = ModelTargets::empty(K);
      p.model.root_value = row.value_target;
      p.unroll_actions.resize(K);
      for (std::size_t k = 1; k <= K; ++k) {
        const std::size_t j = t + k;
        const std::size_t kk = k - 1;
        if (j - 1 < ep.size()) {
          p.unroll_actions[kk] = ep.steps[j - 1].action;
          p.model.rewards[static_cast<Eigen::Index>(kk)] = ep.steps[j - 1].reward;
          p.model.reward_valid[kk] = true;
        } else {
          p.unroll_actions[kk] = random_action(rng);
          p.model.reward_valid[kk] = terminal_end;
        }
        if (j < ep.size()) {
          const auto& target_row = fr.rows[j - f.start];
          p.model.values[static_cast<Eigen::Index>(kk)] = target_row.value_target;
          p.model.value_valid[kk] = true;
          p.model.policies[kk] =
              cfg.update.variant == Variant::mpo_indirect ? target_row.mpo : target_row.cmpo;
          p.model.policy_valid[kk] = true;
        } else {
          p.model.value_valid[kk] = terminal_end;
        }
      }
      batch.positions.push_back(std::move(p));
    }
  }
  const double n = static_cast<double>(batch.positions.size());
  batch.adv_std = std::sqrt(std::max(0.0, sum_sq / n - (sum / n) * (sum / n)));
  return batch;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;
  /// Mean policy loss (policy-gradient part plus regularizers).
  double policy = 0.0;
  double pg = 0.0;
  double regularizer = 0.0;
  double model_policy = 0.0;
  double value = 0.0;
  double reward = 0.0;
};

/// Mean over positions of
///   w_pi (policy loss + L_m) + w_v L_v + w_r L_r,
/// with gradients accumulated into `grad` when non-null.
inline LossBreakdown batch_loss(const TrainConfig& cfg, const AgentNet& net,
                                const ParamVector& params, const PreparedBatch& batch,
                                ParamVector* grad) {
  if (batch.positions.empty()) throw std::invalid_argument("empty batch");
  const double inv_n = 1.0 / static_cast<double>(batch.positions.size());
  const double w_pi = cfg.update.policy_loss_weight;
  const bool train_policy_head = cfg.model_policy_loss && uses_model_policy_loss(cfg.update.variant);
  const ModelLossWeights weights{cfg.value_loss_weight * inv_n, cfg.reward_loss_weight * inv_n,
                                 w_pi * inv_n};

  std::map<std::size_t, NetOutput> forward;
  std::map<std::size_t, NetAdjoint> adjoint;
  LossBreakdown out;
  for (const auto& p : batch.positions) {
    auto it = forward.find(p.obs);
    if (it == forward.end()) it = forward.emplace(p.obs, net.forward(params, p.obs)).first;
    const NetOutput& root = it->second;

    const LogitLoss pl = policy_loss(root.logits, p.policy, cfg.update);
    out.policy += inv_n * pl.value;
    out.pg += inv_n * pl.pg;
    out.regularizer += inv_n * pl.regularizer;

    const ModelLossResult ml = model_losses(net, params, root, p.unroll_actions, p.model, weights,
                                            train_policy_head, grad);
    out.model_policy += inv_n * ml.policy;
    out.value += inv_n * ml.value;
    out.reward += inv_n * ml.reward;

    if (grad) {
      auto [adj, fresh] = adjoint.try_emplace(p.obs);
      NetAdjoint& a = adj->second;
      if (fresh) {
        a.dlogits = Vector::Zero(root.logits.size());
        if (ml.root.dhidden.size() > 0) a.dhidden = Vector::Zero(root.hidden.size());
      }
      a.dlogits += w_pi * inv_n * pl.dlogits;
      a.dvalue += ml.root.dvalue;
      if (ml.root.dhidden.size() > 0) a.dhidden += ml.root.dhidden;
    }
  }
  out.total = w_pi * (out.policy + out.model_policy) + cfg.value_loss_weight * out.value +
              cfg.reward_loss_weight * out.reward;
  if (grad)
    for (const auto& [obs, adj] : adjoint) net.backward(params, obs, adj, *grad);
  return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetricsRow {
  std::uint64_t step = 0;
  std::uint64_t episodes = 0;
  std::uint64_t env_steps = 0;
  double learning_rate = 0.0;
  /// Exact return of the online policy.
  double J = 0.0;
  /// Max over non-terminal observations of TV(pi_cmpo, pi_prior).
  double tv_max_obs = 0.0;
  /// Max over every batch state since the previous row.
  double tv_max_batch = 0.0;
  double tv_bound = 0.0;
  LossBreakdown loss;
  double adv_std = 0.0;
};

inline constexpr int kMetricsSchemaVersion = 1;

inline std::string metrics_header() {
  return "step,episodes,env_steps,learning_rate,J,tv_max_obs,tv_max_batch,tv_bound,"
         "loss_total,loss_policy,loss_pg,loss_regularizer,loss_model_policy,loss_value,"
         "loss_reward,adv_std";
}

inline std::string metrics_csv(const MetricsRow& r) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << r.step << ',' << r.episodes << ',' << r.env_steps << ',' << r.learning_rate << ',' << r.J
     << ',' << r.tv_max_obs << ',' << r.tv_max_batch << ',' << r.tv_bound << ',' << r.loss.total
     << ',' << r.loss.policy << ',' << r.loss.pg << ',' << r.loss.regularizer << ','
     << r.loss.model_policy << ',' << r.loss.value << ',' << r.loss.reward << ',' << r.adv_std;
  return os.str();
}

/// Writes the versioned preamble and the column header.
inline void write_metrics_header(std::ostream& out) {
  out << "# muesli-metrics schema " << kMetricsSchemaVersion << "\n" << metrics_header() << "\n";
}

struct RunSummary {
  std::vector<MetricsRow> history;
  Matrix policy;
  double final_J = 0.0;
  /// Largest TV(pi_cmpo, pi_prior) seen over the whole run.
  double tv_max = 0.0;
};

class Trainer {
 public:
  using RowCallback = std::function<void(const MetricsRow&)>;

  Trainer(TabularMDP mdp, TrainConfig cfg)
      : mdp_(std::move(mdp)),
        cfg_(std::move(cfg)),
        net_(make_spec(mdp_, cfg_)),
        buffer_(cfg_.buffer_capacity) {
    cfg_.validate();
    params_ = net_.init(cfg_.seed);
    target_ = params_;
    opt_ = make_optimizer(cfg_, params_.size());
    norm_.beta_var = cfg_.beta_var;
    norm_.eps_var = cfg_.eps_var;
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed),
                      static_cast<std::uint32_t>(cfg_.seed >> 32), 0x6d75u};
    rng_.seed(seq);
  }

  const TabularMDP& mdp() const { return mdp_; }
  const TrainConfig& config() const { return cfg_; }
  const AgentNet& net() const { return net_; }
  const ParamVector& params() const { return params_; }
  const ParamVector& target() const { return target_; }
  const AdvNormState& norm() const { return norm_; }
  const OptimizerState& optimizer() const { return opt_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const std::deque<Fragment>& online_queue() const { return online_; }
  std::uint64_t step() const { return opt_.step; }
  bool done() const { return opt_.step >= cfg_.total_steps; }

  /// Per-observation acting policy of the target network.
  Matrix prior_policy() const { return net_.policy_table(target_); }
  Matrix online_policy() const { return net_.policy_table(params_); }

  /// Samples one episode with pi_prior and appends its fragments to the
  /// replay buffer and the online queue.
  void act_and_store() {
    auto ep = std::make_shared<const Trajectory>(
        sample_episode(mdp_, prior_policy(), rng_, cfg_.max_episode_length));
    episodes_ += 1;
    env_steps_ += ep->size();
    for (const Fragment& f : split_episode(ep, cfg_.sequence_length)) {
      buffer_.add(f);
      online_.push_back(f);
    }
  }

  /// Acts until the online queue can supply its share, then returns a batch
  /// of exactly replay_count() replay and online_count() online fragments.
  std::vector<Fragment> next_batch() {
    const std::size_t n_online = cfg_.online_count();
    if (n_online == 0) {
      act_and_store();
      online_.clear();
    }
    while (online_.size() < n_online) act_and_store();
    std::vector<Fragment> batch;
    batch.reserve(cfg_.batch_size);
    for (std::size_t i = 0; i < cfg_.replay_count(); ++i) batch.push_back(buffer_.sample(rng_));
    for (std::size_t i = 0; i < n_online; ++i) {
      batch.push_back(online_.front());
      online_.pop_front();
    }
    return batch;
  }

  /// One learner update. Returns the loss of the batch before the update.
  LossBreakdown train_step() {
    const auto fragments = next_batch();
    const PreparedBatch batch =
        prepare_batch(cfg_, net_, params_, target_, mdp_.discount(), fragments, norm_, rng_);
    ParamVector grad = ParamVector::zeros_like(params_);
    const LossBreakdown loss = batch_loss(cfg_, net_, params_, batch, &grad);
    if (!std::isfinite(loss.total) || !grad.all_finite()) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << opt_.step + 1 << ": total=" << loss.total
          << " policy=" << loss.policy << " model_policy=" << loss.model_policy
          << " value=" << loss.value << " reward=" << loss.reward
          << " sigma^2=" << norm_.corrected_var();
      throw NonFiniteLoss(msg.str());
    }
    last_lr_ = adam_step(opt_, params_, grad);
    ema_update(target_, params_, cfg_.target_alpha);
    tv_since_row_ = std::max(tv_since_row_, batch.tv_max);
    tv_run_max_ = std::max(tv_run_max_, batch.tv_max);
    last_loss_ = loss;
    last_adv_std_ = batch.adv_std;
    return loss;
  }

  /// TV(pi_cmpo, pi_prior) maximized over non-terminal observations, using
  /// the current normalizer.
  double tv_max_over_observations() const {
    const TargetTable table = target_table(net_, target_, mdp_.discount());
    const double sigma =
        norm_.initialized() ? std::sqrt(norm_.corrected_var() + norm_.eps_var) : 1.0;
    const ClipConfig clip(cfg_.update.clip_c);
    std::vector<bool> live(mdp_.num_observations(), false);
    for (std::size_t s = 0; s < mdp_.num_states(); ++s)
      if (!mdp_.is_terminal(s)) live[mdp_.observation(s)] = true;
    double best = 0.0;
    for (std::size_t o = 0; o < live.size(); ++o) {
      if (!live[o]) continue;
      const auto oi = static_cast<Eigen::Index>(o);
      const Vector prior = table.probs.row(oi).transpose();
      const Vector adv = (table.q.row(oi).transpose().array() - table.v[oi]).matrix() / sigma;
      best = std::max(best, total_variation(cmpo_target(prior, adv, clip).probs, prior));
    }
    return best;
  }

  MetricsRow metrics_row() {
    MetricsRow r;
    r.step = opt_.step;
    r.episodes = episodes_;
    r.env_steps = env_steps_;
    r.learning_rate = opt_.step == 0 ? opt_.learning_rate(0) : last_lr_;
    r.J = evaluate_obs_policy(mdp_, online_policy()).J;
    r.tv_max_obs = tv_max_over_observations();
    r.tv_max_batch = tv_since_row_;
    r.tv_bound = max_tv(ClipConfig(cfg_.update.clip_c));
    r.loss = last_loss_;
    r.adv_std = last_adv_std_;
    tv_since_row_ = 0.0;
    return r;
  }

  /// Trains until total_steps, emitting a row at step 0 (fresh runs), every
  /// eval_interval steps, and at the end.
  RunSummary run(const RowCallback& on_row = {}) {
    RunSummary out;
    auto emit = [&] {
      MetricsRow r = metrics_row();
      if (on_row) on_row(r);
      out.history.push_back(r);
    };
    if (opt_.step == 0) emit();
    while (!done()) {
      train_step();
      if (opt_.step % cfg_.eval_interval == 0 || done()) emit();
    }
    out.policy = online_policy();
    out.final_J = evaluate_obs_policy(mdp_, out.policy).J;
    out.tv_max = tv_run_max_;
    return out;
  }

  /// Stops after `steps` more updates (or at the end); rows as in run().
  RunSummary run_for(std::uint64_t steps, const RowCallback& on_row = {}) {
    RunSummary out;
    auto emit = [&] {
      MetricsRow r = metrics_row();
      if (on_row) on_row(r);
      out.history.push_back(r);
    };
    if (opt_.step == 0 && steps > 0) emit();
    for (std::uint64_t i = 0; i < steps && !done(); ++i) {
      train_step();
      if (opt_.step % cfg_.eval_interval == 0 || done()) emit();
    }
    out.policy = online_policy();
    out.final_J = evaluate_obs_policy(mdp_, out.policy).J;
    out.tv_max = tv_run_max_;
    return out;
  }

  void save_checkpoint(std::ostream& out) const;
  void load_checkpoint(std::istream& in);

 private:
  static NetSpec make_spec(const TabularMDP& mdp, const TrainConfig& cfg) {
    NetSpec s;
    s.representation = cfg.representation;
    s.num_obs = mdp.num_observations();
    s.num_actions = mdp.num_actions();
    s.hidden = cfg.hidden;
    s.model_hidden = cfg.model_hidden;
    s.init_scale = cfg.init_scale;
    return s;
  }

  TabularMDP mdp_;
  TrainConfig cfg_;
  AgentNet net_;
  ParamVector params_;
  ParamVector target_;
  OptimizerState opt_;
  AdvNormState norm_;
  ReplayBuffer buffer_;
  std::deque<Fragment> online_;
  Rng rng_;
  std::uint64_t episodes_ = 0;
  std::uint64_t env_steps_ = 0;
  double last_lr_ = 0.0;
  double tv_since_row_ = 0.0;
  double tv_run_max_ = 0.0;
  LossBreakdown last_loss_;
  double last_adv_std_ = 0.0;
};

// ---------------------------------------------------------------------------
// Checkpoints: binary, little-endian, fixed-width fields.
// ---------------------------------------------------------------------------

namespace ckpt {

inline constexpr char kMagic[] = "MUESLI-CKPT 1\n";

inline void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void put_vector(std::ostream& out, const Vector& v) {
  put_u64(out, static_cast<std::uint64_t>(v.size()));
  detail::write_doubles(out, v);
}

inline std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("truncated checkpoint");
  return v;
}
inline double get_f64(std::istream& in) {
  double v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("truncated checkpoint");
  return v;
}
inline std::string get_string(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  if (n > (1u << 26)) throw std::runtime_error("corrupt checkpoint string");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("truncated checkpoint");
  return s;
}
inline Vector get_vector(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  if (n > (1u << 28)) throw std::runtime_error("corrupt checkpoint vector");
  return detail::read_doubles(in, static_cast<Eigen::Index>(n));
}

inline void put_params(std::ostream& out, const ParamVector& p) {
  std::ostringstream os;
  save_params(os, p);
  put_string(out, os.str());
}
inline ParamVector get_params(std::istream& in) {
  std::istringstream is(get_string(in));
  return load_params(is);
}

inline void put_episode(std::ostream& out, const Trajectory& ep) {
  put_u64(out, ep.size());
  for (const Step& s : ep.steps) {
    put_u64(out, s.obs);
    put_u64(out, s.state);
    put_u64(out, s.action);
    put_f64(out, s.reward);
    put_f64(out, s.discount);
    put_vector(out, s.behavior_probs);
    put_u64(out, s.next_obs);
    put_u64(out, s.next_state);
    put_u64(out, s.truncated ? 1 : 0);
  }
}
inline Trajectory get_episode(std::istream& in) {
  Trajectory ep;
  const std::uint64_t n = get_u64(in);
  ep.steps.resize(n);
  for (Step& s : ep.steps) {
    s.obs = get_u64(in);
    s.state = get_u64(in);
    s.action = get_u64(in);
    s.reward = get_f64(in);
    s.discount = get_f64(in);
    s.behavior_probs = get_vector(in);
    s.next_obs = get_u64(in);
    s.next_state = get_u64(in);
    s.truncated = get_u64(in) != 0;
  }
  return ep;
}

}  // namespace ckpt

/// Params, target params, normalizer, optimizer, RNG, episode counters and
/// the stored data, so a resumed run continues bit-exactly.
inline void Trainer::save_checkpoint(std::ostream& out) const {
  using namespace ckpt;
  out.write(kMagic, sizeof kMagic - 1);
  put_u64(out, cfg_.seed);
  put_u64(out, cfg_.total_steps);
  put_params(out, params_);
  put_params(out, target_);
  put_f64(out, norm_.var);
  put_f64(out, norm_.beta_product);
  put_f64(out, norm_.beta_var);
  put_f64(out, norm_.eps_var);
  put_vector(out, opt_.m);
  put_vector(out, opt_.v);
  put_u64(out, opt_.step);
  put_f64(out, opt_.base_lr);
  put_f64(out, opt_.final_lr);
  put_u64(out, opt_.total_steps);
  std::ostringstream rng_state;
  rng_state << rng_;
  put_string(out, rng_state.str());
  put_u64(out, episodes_);
  put_u64(out, env_steps_);
  put_f64(out, last_lr_);
  put_f64(out, tv_since_row_);
  put_f64(out, tv_run_max_);
  for (double x : {last_loss_.total, last_loss_.policy, last_loss_.pg, last_loss_.regularizer,
                   last_loss_.model_policy, last_loss_.value, last_loss_.reward, last_adv_std_})
    put_f64(out, x);

  std::map<const Trajectory*, std::uint64_t> ids;
  std::vector<const Trajectory*> order;
  auto id_of = [&](const Fragment& f) {
    auto [it, fresh] = ids.try_emplace(f.episode.get(), order.size());
    if (fresh) order.push_back(f.episode.get());
    return it->second;
  };
  std::vector<std::uint64_t> buffer_ids, queue_ids;
  for (const auto& f : buffer_.items()) buffer_ids.push_back(id_of(f));
  for (const auto& f : online_) queue_ids.push_back(id_of(f));
  put_u64(out, order.size());
  for (const Trajectory* ep : order) put_episode(out, *ep);
  auto put_fragments = [&](const auto& items, const std::vector<std::uint64_t>& idv) {
    put_u64(out, idv.size());
    std::size_t i = 0;
    for (const auto& f : items) {
      put_u64(out, idv[i++]);
      put_u64(out, f.start);
      put_u64(out, f.length);
    }
  };
  put_fragments(buffer_.items(), buffer_ids);
  put_fragments(online_, queue_ids);
  if (!out) throw std::runtime_error("failed to write checkpoint");
}

inline void Trainer::load_checkpoint(std::istream& in) {
  using namespace ckpt;
  std::string magic(sizeof kMagic - 1, '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kMagic) throw std::runtime_error("not a checkpoint file");
  if (get_u64(in) != cfg_.seed || get_u64(in) != cfg_.total_steps)
    throw std::runtime_error("checkpoint was written with a different seed or step budget");
  ParamVector p = get_params(in);
  ParamVector t = get_params(in);
  if (!p.same_layout(params_) || !t.same_layout(params_))
    throw std::runtime_error("checkpoint parameter layout does not match the configuration");
  params_.values() = p.values();
  target_.values() = t.values();
  norm_.var = get_f64(in);
  norm_.beta_product = get_f64(in);
  norm_.beta_var = get_f64(in);
  norm_.eps_var = get_f64(in);
  opt_.m = get_vector(in);
  opt_.v = get_vector(in);
  if (opt_.m.size() != params_.size() || opt_.v.size() != params_.size())
    throw std::runtime_error("checkpoint optimizer moments have the wrong size");
  opt_.step = get_u64(in);
  opt_.base_lr = get_f64(in);
  opt_.final_lr = get_f64(in);
  opt_.total_steps = get_u64(in);
  std::istringstream rng_state(get_string(in));
  rng_state >> rng_;
  if (!rng_state) throw std::runtime_error("corrupt RNG state in checkpoint");
  episodes_ = get_u64(in);
  env_steps_ = get_u64(in);
  last_lr_ = get_f64(in);
  tv_since_row_ = get_f64(in);
  tv_run_max_ = get_f64(in);
  for (double* x : {&last_loss_.total, &last_loss_.policy, &last_loss_.pg, &last_loss_.regularizer,
                    &last_loss_.model_policy, &last_loss_.value, &last_loss_.reward,
                    &last_adv_std_})
    *x = get_f64(in);

  const std::uint64_t n_eps = get_u64(in);
  std::vector<std::shared_ptr<const Trajectory>> eps;
  eps.reserve(n_eps);
  for (std::uint64_t i = 0; i < n_eps; ++i)
    eps.push_back(std::make_shared<const Trajectory>(get_episode(in)));
  auto get_fragments = [&]() {
    std::vector<Fragment> out;
    const std::uint64_t n = get_u64(in);
    for (std::uint64_t i = 0; i < n; ++i) {
      const std::uint64_t id = get_u64(in);
      if (id >= eps.size()) throw std::runtime_error("checkpoint fragment refers to a missing episode");
      Fragment f{eps[id], get_u64(in), 0};
      f.length = get_u64(in);
      if (f.start + f.length > f.episode->size())
        throw std::runtime_error("checkpoint fragment exceeds its episode");
      out.push_back(f);
    }
    return out;
  };
  buffer_ = ReplayBuffer(cfg_.buffer_capacity);
  for (const auto& f : get_fragments()) buffer_.add(f);
  online_.clear();
  for (const auto& f : get_fragments()) online_.push_back(f);
}

}  // namespace muesli
