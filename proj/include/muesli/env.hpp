#pragma once

// Exact finite MDPs, trajectories and episode sampling.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace muesli {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

inline constexpr double kRowSumTolerance = 1e-12;
inline constexpr double kPolicyRowTolerance = 1e-9;
inline constexpr std::size_t kDefaultMaxEpisodeLength = 1000;

/// Draws an index from a discrete distribution by inverting the CDF.
inline std::size_t sample_categorical(const Vector& probs, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = unit(rng);
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = static_cast<std::size_t>(i);
    cumulative += probs[i];
    if (u < cumulative) return last_positive;
  }
  return last_positive;
}

/// Exact finite MDP with state aliasing. Immutable once constructed.
///
/// Transitions and rewards are dense tensors indexed [state][action][next].
/// Terminal states are absorbing with zero reward. `observation(s)` gives the
/// observation id the agent sees in state s; the map need not be injective.
class TabularMDP {
 public:
  TabularMDP(std::size_t num_states, std::size_t num_actions,
             std::vector<double> transition, std::vector<double> reward,
             Vector initial, double discount, std::vector<bool> terminal,
             std::vector<std::size_t> obs_map)
      : num_states_(num_states),
        num_actions_(num_actions),
        transition_(std::move(transition)),
        reward_(std::move(reward)),
        initial_(std::move(initial)),
        discount_(discount),
        terminal_(std::move(terminal)),
        obs_map_(std::move(obs_map)) {
    validate();
    num_obs_ = 0;
    for (auto o : obs_map_) num_obs_ = std::max(num_obs_, o + 1);
  }

  std::size_t num_states() const { return num_states_; }
  std::size_t num_actions() const { return num_actions_; }
  std::size_t num_observations() const { return num_obs_; }
  double discount() const { return discount_; }
  const Vector& initial() const { return initial_; }
  bool is_terminal(std::size_t s) const { return terminal_.at(s); }
  std::size_t observation(std::size_t s) const { return obs_map_.at(s); }
  const std::vector<std::size_t>& obs_map() const { return obs_map_; }

  double transition(std::size_t s, std::size_t a, std::size_t next) const {
    return transition_[index(s, a, next)];
  }
  double reward(std::size_t s, std::size_t a, std::size_t next) const {
    return reward_[index(s, a, next)];
  }
  double expected_reward(std::size_t s, std::size_t a) const {
    double r = 0.0;
    for (std::size_t n = 0; n < num_states_; ++n)
      r += transition_[index(s, a, n)] * reward_[index(s, a, n)];
    return r;
  }

  /// Copy with every reward multiplied by `scale`.
  TabularMDP with_reward_scale(double scale) const {
    std::vector<double> scaled = reward_;
    for (auto& r : scaled) r *= scale;
    return TabularMDP(num_states_, num_actions_, transition_, std::move(scaled),
                      initial_, discount_, terminal_, obs_map_);
  }

 private:
  std::size_t index(std::size_t s, std::size_t a, std::size_t n) const {
    return (s * num_actions_ + a) * num_states_ + n;
  }

  void validate() const {
    if (num_states_ == 0 || num_actions_ == 0)
      throw std::invalid_argument("MDP needs at least one state and one action");
    const std::size_t cells = num_states_ * num_actions_ * num_states_;
    if (transition_.size() != cells || reward_.size() != cells)
      throw std::invalid_argument("transition/reward tensor has wrong size");
    if (static_cast<std::size_t>(initial_.size()) != num_states_)
      throw std::invalid_argument("initial distribution has wrong size");
    if (terminal_.size() != num_states_)
      throw std::invalid_argument("terminal flags have wrong size");
    if (obs_map_.size() != num_states_)
      throw std::invalid_argument("observation map must cover every state");
    if (!(discount_ >= 0.0 && discount_ <= 1.0))
      throw std::invalid_argument("discount must lie in [0, 1]");
    for (std::size_t s = 0; s < num_states_; ++s) {
      for (std::size_t a = 0; a < num_actions_; ++a) {
        double row = 0.0;
        for (std::size_t n = 0; n < num_states_; ++n) {
          const double p = transition_[index(s, a, n)];
          if (!(p >= 0.0) || !std::isfinite(reward_[index(s, a, n)]))
            throw std::invalid_argument("negative probability or non-finite reward at state " +
                                        std::to_string(s));
          row += p;
        }
        if (std::abs(row - 1.0) > kRowSumTolerance)
          throw std::invalid_argument("transition row (" + std::to_string(s) + ", " +
                                      std::to_string(a) + ") does not sum to 1");
        if (terminal_[s]) {
          if (transition_[index(s, a, s)] != 1.0)
            throw std::invalid_argument("terminal state " + std::to_string(s) +
                                        " must self-loop");
          for (std::size_t n = 0; n < num_states_; ++n)
            if (reward_[index(s, a, n)] != 0.0)
              throw std::invalid_argument("terminal state " + std::to_string(s) +
                                          " must have zero reward");
        }
      }
    }
    if (initial_.minCoeff() < 0.0 || std::abs(initial_.sum() - 1.0) > kRowSumTolerance)
      throw std::invalid_argument("initial distribution must sum to 1");
  }

  std::size_t num_states_;
  std::size_t num_actions_;
  std::size_t num_obs_ = 0;
  std::vector<double> transition_;
  std::vector<double> reward_;
  Vector initial_;
  double discount_;
  std::vector<bool> terminal_;
  std::vector<std::size_t> obs_map_;
};

/// Accumulates sparse transitions; terminal rows are filled in on build().
class MdpBuilder {
 public:
  MdpBuilder(std::size_t num_states, std::size_t num_actions)
      : num_states_(num_states),
        num_actions_(num_actions),
        transition_(num_states * num_actions * num_states, 0.0),
        reward_(num_states * num_actions * num_states, 0.0),
        initial_(Vector::Zero(static_cast<Eigen::Index>(num_states))),
        terminal_(num_states, false),
        obs_map_(num_states) {
    for (std::size_t s = 0; s < num_states; ++s) obs_map_[s] = s;
  }

  MdpBuilder& transition(std::size_t s, std::size_t a, std::size_t next, double prob,
                         double reward) {
    check_state(s);
    check_state(next);
    if (a >= num_actions_) throw std::invalid_argument("action id out of range");
    const std::size_t i = (s * num_actions_ + a) * num_states_ + next;
    transition_[i] = prob;
    reward_[i] = reward;
    return *this;
  }
  MdpBuilder& initial(std::size_t s, double prob) {
    check_state(s);
    initial_[static_cast<Eigen::Index>(s)] = prob;
    return *this;
  }
  MdpBuilder& terminal(std::size_t s) {
    check_state(s);
    terminal_[s] = true;
    return *this;
  }
  MdpBuilder& observation(std::size_t s, std::size_t obs) {
    check_state(s);
    obs_map_[s] = obs;
    return *this;
  }
  MdpBuilder& discount(double gamma) {
    discount_ = gamma;
    return *this;
  }

  TabularMDP build() const {
    auto transition = transition_;
    auto reward = reward_;
    for (std::size_t s = 0; s < num_states_; ++s) {
      if (!terminal_[s]) continue;
      for (std::size_t a = 0; a < num_actions_; ++a) {
        for (std::size_t n = 0; n < num_states_; ++n) {
          const std::size_t i = (s * num_actions_ + a) * num_states_ + n;
          transition[i] = n == s ? 1.0 : 0.0;
          reward[i] = 0.0;
        }
      }
    }
    return TabularMDP(num_states_, num_actions_, std::move(transition), std::move(reward),
                      initial_, discount_, terminal_, obs_map_);
  }

 private:
  void check_state(std::size_t s) const {
    if (s >= num_states_) throw std::invalid_argument("state id out of range");
  }

  std::size_t num_states_;
  std::size_t num_actions_;
  std::vector<double> transition_;
  std::vector<double> reward_;
  Vector initial_;
  double discount_ = 1.0;
  std::vector<bool> terminal_;
  std::vector<std::size_t> obs_map_;
};

namespace aliased {
inline constexpr std::size_t kUp = 0;
inline constexpr std::size_t kDown = 1;
}  // namespace aliased

/// The four-state, two-action episodic MDP in which every non-terminal state
/// produces the same observation, so the best memory-less policy is stochastic
/// (up with probability 5/8).
///
/// State ids are shifted by one relative to the usual drawing: 0 is the
/// initial state, 1 is reached by `up`, 2 by `down`, and 3 is terminal.
/// A `down` move from the initial state pays 0; the closed-form value
/// v(0) = -4p^2 + 5p - 1 only holds with that reward.
inline TabularMDP aliased_mdp() {
  using aliased::kDown;
  using aliased::kUp;
  MdpBuilder b(4, 2);
  b.transition(0, kUp, 1, 1.0, 1.0)
      .transition(0, kDown, 2, 1.0, 0.0)
      .transition(1, kUp, 3, 1.0, -1.0)
      .transition(1, kDown, 3, 1.0, 1.0)
      .transition(2, kUp, 3, 1.0, 1.0)
      .transition(2, kDown, 3, 1.0, -1.0)
      .terminal(3)
      .initial(0, 1.0)
      .discount(1.0)
      .observation(0, 0)
      .observation(1, 0)
      .observation(2, 0)
      .observation(3, 1);
  return b.build();
}

struct RandomMdpOptions {
  double discount = 0.9;
  /// Adds an absorbing terminal state that every non-terminal state reaches
  /// with positive probability. Ignored for single-state MDPs.
  bool with_terminal = true;
  double dirichlet_alpha = 1.0;
};

/// Random MDP for fuzzing: Dirichlet transition rows, rewards uniform in
/// [-1, 1], Dirichlet initial distribution over non-terminal states.
inline TabularMDP random_mdp(std::size_t num_states, std::size_t num_actions,
                             std::uint64_t seed, const RandomMdpOptions& options = {}) {
  if (num_states == 0 || num_actions == 0)
    throw std::invalid_argument("random_mdp needs at least one state and one action");
  Rng rng(seed);
  std::gamma_distribution<double> gamma(options.dirichlet_alpha, 1.0);
  std::uniform_real_distribution<double> reward(-1.0, 1.0);
  const bool has_terminal = options.with_terminal && num_states > 1;
  if (!has_terminal && options.discount >= 1.0)
    throw std::invalid_argument("an MDP without terminal states needs discount < 1");
  const std::size_t live = has_terminal ? num_states - 1 : num_states;

  MdpBuilder b(num_states, num_actions);
  b.discount(options.discount);
  for (std::size_t s = 0; s < live; ++s) {
    for (std::size_t a = 0; a < num_actions; ++a) {
      std::vector<double> row(num_states);
      double total = 0.0;
      for (auto& x : row) {
        // Floor keeps every entry (in particular the terminal one) positive.
        x = std::max(gamma(rng), 1e-6);
        total += x;
      }
      for (std::size_t n = 0; n < num_states; ++n) b.transition(s, a, n, row[n] / total, reward(rng));
    }
  }
  if (has_terminal) b.terminal(num_states - 1);

  std::vector<double> init(live);
  double total = 0.0;
  for (auto& x : init) {
    x = std::max(gamma(rng), 1e-6);
    total += x;
  }
  // Renormalize so the row sums to 1 within round-off.
  double acc = 0.0;
  for (std::size_t s = 0; s + 1 < live; ++s) {
    const double p = init[s] / total;
    b.initial(s, p);
    acc += p;
  }
  b.initial(live - 1, 1.0 - acc);
  return b.build();
}

/// One environment transition as seen by the learner.
struct Step {
  std::size_t obs = 0;
  std::size_t state = 0;
  std::size_t action = 0;
  double reward = 0.0;
  /// Discount applied to the value of the next state; 0 on termination.
  double discount = 0.0;
  Vector behavior_probs;
  std::size_t next_obs = 0;
  std::size_t next_state = 0;
  /// Set on the last step of an episode cut at the length limit.
  bool truncated = false;
};

struct Trajectory {
  std::vector<Step> steps;

  std::size_t size() const { return steps.size(); }
  bool empty() const { return steps.empty(); }
  double undiscounted_return() const {
    double g = 0.0;
    for (const auto& s : steps) g += s.reward;
    return g;
  }
};

inline void validate_policy(const Matrix& policy, std::size_t rows, std::size_t actions) {
  if (static_cast<std::size_t>(policy.rows()) != rows ||
      static_cast<std::size_t>(policy.cols()) != actions)
    throw std::invalid_argument("policy table has shape " + std::to_string(policy.rows()) + "x" +
                                std::to_string(policy.cols()) + ", expected " +
                                std::to_string(rows) + "x" + std::to_string(actions));
  for (Eigen::Index i = 0; i < policy.rows(); ++i) {
    if (!policy.row(i).allFinite() || policy.row(i).minCoeff() < 0.0 ||
        std::abs(policy.row(i).sum() - 1.0) > kPolicyRowTolerance)
      throw std::invalid_argument("policy row " + std::to_string(i) +
                                  " is not a probability distribution");
  }
}

/// Expands a per-observation policy into a per-state policy via the obs map.
inline Matrix expand_policy(const TabularMDP& mdp, const Matrix& per_obs) {
  validate_policy(per_obs, mdp.num_observations(), mdp.num_actions());
  Matrix out(static_cast<Eigen::Index>(mdp.num_states()),
             static_cast<Eigen::Index>(mdp.num_actions()));
  for (std::size_t s = 0; s < mdp.num_states(); ++s)
    out.row(static_cast<Eigen::Index>(s)) = per_obs.row(static_cast<Eigen::Index>(mdp.observation(s)));
  return out;
}

/// Uniform policy over actions for every observation.
inline Matrix uniform_policy(std::size_t rows, std::size_t actions) {
  return Matrix::Constant(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(actions),
                          1.0 / static_cast<double>(actions));
}

/// Per-observation policy giving probability p to `up` on the aliased MDP.
inline Matrix aliased_policy(double p) {
  Matrix pi(2, 2);
  pi << p, 1.0 - p, 0.5, 0.5;
  return pi;
}

/// Samples one episode from mu under a per-observation policy. Behavior
/// probabilities are recorded for every step. Episodes reaching `max_length`
/// steps are cut and the last step is flagged for bootstrapping.
inline Trajectory sample_episode(const TabularMDP& mdp, const Matrix& policy, Rng& rng,
                                 std::size_t max_length = kDefaultMaxEpisodeLength) {
  validate_policy(policy, mdp.num_observations(), mdp.num_actions());
  Trajectory traj;
  std::size_t state = sample_categorical(mdp.initial(), rng);
  const auto num_states = static_cast<Eigen::Index>(mdp.num_states());
  Vector next_dist(num_states);
  while (!mdp.is_terminal(state) && traj.steps.size() < max_length) {
    Step step;
    step.state = state;
    step.obs = mdp.observation(state);
    step.behavior_probs = policy.row(static_cast<Eigen::Index>(step.obs)).transpose();
    step.action = sample_categorical(step.behavior_probs, rng);
    for (Eigen::Index n = 0; n < num_states; ++n)
      next_dist[n] = mdp.transition(state, step.action, static_cast<std::size_t>(n));
    const std::size_t next = sample_categorical(next_dist, rng);
    step.reward = mdp.reward(state, step.action, next);
    step.discount = mdp.is_terminal(next) ? 0.0 : mdp.discount();
    step.next_state = next;
    step.next_obs = mdp.observation(next);
    traj.steps.push_back(std::move(step));
    state = next;
  }
  if (!traj.steps.empty() && !mdp.is_terminal(state)) traj.steps.back().truncated = true;
  return traj;
}

// ---------------------------------------------------------------------------
// Text format
//
//   states <N>
//   actions <A>
//   discount <gamma>
//   initial <state> <prob>                   (repeatable)
//   terminal <state> [<state> ...]
//   obs <obs of state 0> ... <obs of state N-1>
//   t <state> <action> <next> <prob> <reward> (repeatable, sparse)
//
// Blank lines and anything after '#' are ignored.
// ---------------------------------------------------------------------------

inline TabularMDP load_mdp(std::istream& in) {
  std::size_t states = 0;
  std::size_t actions = 0;
  double discount = 1.0;
  struct Triple {
    std::size_t s, a, n;
    double p, r;
  };
  std::vector<Triple> triples;
  std::vector<std::pair<std::size_t, double>> init;
  std::vector<std::size_t> terminals;
  std::vector<std::size_t> obs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    auto fail = [&](const std::string& what) {
      throw std::invalid_argument("MDP file line " + std::to_string(line_no) + ": " + what);
    };
    if (key == "states") {
      if (!(ls >> states)) fail("expected state count");
    } else if (key == "actions") {
      if (!(ls >> actions)) fail("expected action count");
    } else if (key == "discount") {
      if (!(ls >> discount)) fail("expected discount");
    } else if (key == "initial") {
      std::size_t s;
      double p;
      if (!(ls >> s >> p)) fail("expected '<state> <prob>'");
      init.emplace_back(s, p);
    } else if (key == "terminal") {
      std::size_t s;
      while (ls >> s) terminals.push_back(s);
    } else if (key == "obs") {
      std::size_t o;
      while (ls >> o) obs.push_back(o);
    } else if (key == "t") {
      Triple t{};
      if (!(ls >> t.s >> t.a >> t.n >> t.p >> t.r))
        fail("expected '<state> <action> <next> <prob> <reward>'");
      triples.push_back(t);
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (states == 0 || actions == 0) throw std::invalid_argument("MDP file must set states and actions");
  MdpBuilder b(states, actions);
  b.discount(discount);
  for (const auto& t : triples) b.transition(t.s, t.a, t.n, t.p, t.r);
  for (const auto& [s, p] : init) b.initial(s, p);
  for (auto s : terminals) b.terminal(s);
  if (!obs.empty()) {
    if (obs.size() != states) throw std::invalid_argument("obs line must list one id per state");
    for (std::size_t s = 0; s < states; ++s) b.observation(s, obs[s]);
  }
  return b.build();
}

inline TabularMDP load_mdp_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open MDP file '" + path + "'");
  return load_mdp(in);
}

inline void save_mdp(std::ostream& out, const TabularMDP& mdp) {
  out.precision(17);
  out << "states " << mdp.num_states() << "\n";
  out << "actions " << mdp.num_actions() << "\n";
  out << "discount " << mdp.discount() << "\n";
  for (std::size_t s = 0; s < mdp.num_states(); ++s)
    if (mdp.initial()[static_cast<Eigen::Index>(s)] > 0.0)
      out << "initial " << s << " " << mdp.initial()[static_cast<Eigen::Index>(s)] << "\n";
  bool any_terminal = false;
  for (std::size_t s = 0; s < mdp.num_states(); ++s) any_terminal |= mdp.is_terminal(s);
  if (any_terminal) {
    out << "terminal";
    for (std::size_t s = 0; s < mdp.num_states(); ++s)
      if (mdp.is_terminal(s)) out << " " << s;
    out << "\n";
  }
  out << "obs";
  for (auto o : mdp.obs_map()) out << " " << o;
  out << "\n";
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    if (mdp.is_terminal(s)) continue;
    for (std::size_t a = 0; a < mdp.num_actions(); ++a)
      for (std::size_t n = 0; n < mdp.num_states(); ++n)
        if (mdp.transition(s, a, n) > 0.0)
          out << "t " << s << " " << a << " " << n << " " << mdp.transition(s, a, n) << " "
              << mdp.reward(s, a, n) << "\n";
  }
}

/// Reads a policy table: one whitespace-separated row of action
/// probabilities per line, '#' comments allowed.
inline Matrix load_policy(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<double> row;
    double x;
    while (ls >> x) row.push_back(x);
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::invalid_argument("policy file is empty");
  Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw std::invalid_argument("ragged policy file");
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return out;
}

}  // namespace muesli
