#pragma once

// Run configuration: `key = value` lines with `#` comments. Every key has a
// default; unknown keys are rejected.

#include "muesli/env.hpp"
#include "muesli/trainer.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace muesli {

enum class MdpSource { aliased, random, file };

inline const char* to_string(MdpSource s) {
  switch (s) {
    case MdpSource::aliased: return "aliased";
    case MdpSource::random: return "random";
    case MdpSource::file: return "file";
  }
  return "?";
}

struct RunConfig {
  TrainConfig train;
  MdpSource mdp = MdpSource::aliased;
  std::string mdp_file;
  std::size_t random_states = 10;
  std::size_t random_actions = 3;
  std::uint64_t random_seed = 0;
  double random_discount = 0.9;
  /// Multiplies every reward of the MDP.
  double reward_scale = 1.0;
  std::string output_dir = "out";
  std::string run_name = "run";

  TabularMDP build_mdp() const {
    TabularMDP m = [&] {
      switch (mdp) {
        case MdpSource::aliased: return aliased_mdp();
        case MdpSource::random: {
          RandomMdpOptions o;
          o.discount = random_discount;
          return random_mdp(random_states, random_actions, random_seed, o);
        }
        case MdpSource::file: return load_mdp_file(mdp_file);
      }
      throw std::logic_error("unhandled MDP source");
    }();
    return reward_scale == 1.0 ? m : m.with_reward_scale(reward_scale);
  }

  void validate() const {
    train.validate();
    if (!(reward_scale > 0.0) || !std::isfinite(reward_scale))
      throw std::invalid_argument("reward_scale must be positive and finite");
    if (mdp == MdpSource::file && mdp_file.empty())
      throw std::invalid_argument("mdp = file needs mdp_file");
    if (mdp == MdpSource::random && (random_states < 2 || random_actions < 1))
      throw std::invalid_argument("random MDPs need at least 2 states and 1 action");
    if (run_name.empty()) throw std::invalid_argument("run_name must not be empty");
  }
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Shortest of 15..17 significant digits that reads back exactly.
inline std::string fmt(double v) {
  std::string s;
  for (int digits = 15; digits <= std::numeric_limits<double>::max_digits10; ++digits) {
    std::ostringstream os;
    os << std::setprecision(digits) << v;
    s = os.str();
    if (std::stod(s) == v) break;
  }
  return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!text.empty() && text[0] == '-')
      throw ConfigError("'" + key + "' must be a non-negative integer, got '" + text + "'");
  }
  if (!(is >> v) || !(is >> std::ws).eof())
    throw ConfigError("'" + key + "' has an invalid value '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("'" + key + "' must be true or false, got '" + text + "'");
}

struct Entry {
  std::string key;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Entry number(std::string key, std::string doc, T RunConfig::*outer) {
  return {key, std::move(doc),
          [outer](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.*outer);
            else return std::to_string(c.*outer);
          },
          [outer, key](RunConfig& c, const std::string& v) { c.*outer = parse_number<T>(key, v); }};
}

template <class T>
Entry train_number(std::string key, std::string doc, T TrainConfig::*field) {
  return {key, std::move(doc),
          [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.train.*field);
            else return std::to_string(c.train.*field);
          },
          [field, key](RunConfig& c, const std::string& v) {
            c.train.*field = parse_number<T>(key, v);
          }};
}

template <class T>
Entry update_number(std::string key, std::string doc, T UpdateConfig::*field) {
  return {key, std::move(doc),
          [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.train.update.*field);
            else return std::to_string(c.train.update.*field);
          },
          [field, key](RunConfig& c, const std::string& v) {
            c.train.update.*field = parse_number<T>(key, v);
          }};
}

inline Entry train_flag(std::string key, std::string doc, bool TrainConfig::*field) {
  return {key, std::move(doc),
          [field](const RunConfig& c) { return std::string(c.train.*field ? "true" : "false"); },
          [field, key](RunConfig& c, const std::string& v) { c.train.*field = parse_bool(key, v); }};
}

inline const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back({"mdp", "aliased | random | file",
                 [](const RunConfig& c) { return std::string(to_string(c.mdp)); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "aliased") c.mdp = MdpSource::aliased;
                   else if (v == "random") c.mdp = MdpSource::random;
                   else if (v == "file") c.mdp = MdpSource::file;
                   else throw ConfigError("'mdp' must be aliased, random or file, got '" + v + "'");
                 }});
    t.push_back({"mdp_file", "MDP text file when mdp = file",
                 [](const RunConfig& c) { return c.mdp_file; },
                 [](RunConfig& c, const std::string& v) { c.mdp_file = v; }});
    t.push_back(number("random_states", "states of the random MDP, terminal included",
                       &RunConfig::random_states));
    t.push_back(number("random_actions", "actions of the random MDP", &RunConfig::random_actions));
    t.push_back(number("random_seed", "seed of the random MDP", &RunConfig::random_seed));
    t.push_back(number("random_discount", "discount of the random MDP", &RunConfig::random_discount));
    t.push_back(number("reward_scale", "multiplier applied to every reward", &RunConfig::reward_scale));
    t.push_back({"output_dir", "directory for CSV, summary and checkpoint",
                 [](const RunConfig& c) { return c.output_dir; },
                 [](RunConfig& c, const std::string& v) { c.output_dir = v; }});
    t.push_back({"run_name", "file name stem of the run artifacts",
                 [](const RunConfig& c) { return c.run_name; },
                 [](RunConfig& c, const std::string& v) { c.run_name = v; }});

    t.push_back(train_number("seed", "seed for initialization, acting and sampling", &TrainConfig::seed));
    t.push_back(train_number("total_steps", "learner updates", &TrainConfig::total_steps));
    t.push_back(train_number("eval_interval", "updates between metrics rows", &TrainConfig::eval_interval));
    t.push_back(train_number("batch_size", "sequences per batch", &TrainConfig::batch_size));
    t.push_back(train_number("sequence_length", "steps per sequence", &TrainConfig::sequence_length));
    t.push_back(train_number("unroll_length", "model unroll steps K", &TrainConfig::unroll_length));
    t.push_back(train_number("replay_fraction", "share of replayed sequences per batch",
                             &TrainConfig::replay_fraction));
    t.push_back(train_number("buffer_capacity", "replay capacity in steps", &TrainConfig::buffer_capacity));
    t.push_back(train_number("target_alpha", "target network update rate", &TrainConfig::target_alpha));
    t.push_back(train_number("learning_rate", "initial learning rate, decayed linearly to 0",
                             &TrainConfig::learning_rate));
    t.push_back(train_number("adam_beta1", "Adam first-moment decay", &TrainConfig::adam_beta1));
    t.push_back(train_number("adam_beta2", "Adam second-moment decay", &TrainConfig::adam_beta2));
    t.push_back(train_number("adam_epsilon", "Adam epsilon", &TrainConfig::adam_epsilon));
    t.push_back(train_number("retrace_lambda", "trace coefficient", &TrainConfig::retrace_lambda));
    t.push_back(train_number("retrace_samples", "samples for E_pi[q]; 0 = exact",
                             &TrainConfig::retrace_samples));
    t.push_back({"return_estimator", "retrace | vtrace",
                 [](const RunConfig& c) { return std::string(to_string(c.train.return_estimator)); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "retrace") c.train.return_estimator = ReturnEstimator::retrace;
                   else if (v == "vtrace") c.train.return_estimator = ReturnEstimator::vtrace;
                   else throw ConfigError("'return_estimator' must be retrace or vtrace, got '" + v + "'");
                 }});
    t.push_back(train_number("value_loss_weight", "weight of L_v", &TrainConfig::value_loss_weight));
    t.push_back(train_number("reward_loss_weight", "weight of L_r", &TrainConfig::reward_loss_weight));
    t.push_back(train_flag("model_policy_loss", "train the model policy head (L_m)",
                           &TrainConfig::model_policy_loss));
    t.push_back(train_flag("prior_mixture", "mix uniform and behavior policies into the prior",
                           &TrainConfig::prior_mixture));
    t.push_back(train_number("beta_var", "advantage variance decay", &TrainConfig::beta_var));
    t.push_back(train_number("eps_var", "advantage variance offset", &TrainConfig::eps_var));
    t.push_back(train_number("max_episode_length", "episode length cap", &TrainConfig::max_episode_length));
    t.push_back({"representation", "tabular | mlp",
                 [](const RunConfig& c) { return std::string(to_string(c.train.representation)); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "tabular") c.train.representation = Representation::tabular;
                   else if (v == "mlp") c.train.representation = Representation::mlp;
                   else throw ConfigError("'representation' must be tabular or mlp, got '" + v + "'");
                 }});
    t.push_back(train_number("hidden", "MLP torso width", &TrainConfig::hidden));
    t.push_back(train_number("model_hidden", "model hidden width", &TrainConfig::model_hidden));
    t.push_back(train_number("init_scale", "initial hidden weight range", &TrainConfig::init_scale));

    t.push_back({"variant", "policy loss: " + variant_names(),
                 [](const RunConfig& c) { return std::string(to_string(c.train.update.variant)); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.train.update.variant = parse_variant(v);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(e.what());
                   }
                 }});
    t.push_back(update_number("lambda_cmpo", "weight of KL(pi_cmpo, pi)", &UpdateConfig::lambda_cmpo));
    t.push_back({"entropy_weight", "entropy bonus; 'default' uses the variant's value",
                 [](const RunConfig& c) {
                   return c.train.update.entropy_weight ? fmt(*c.train.update.entropy_weight)
                                                        : std::string("default");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "default") c.train.update.entropy_weight.reset();
                   else c.train.update.entropy_weight = parse_number<double>("entropy_weight", v);
                 }});
    t.push_back(update_number("trpo_weight", "weight of KL(pi_b, pi) in pg_trpo", &UpdateConfig::trpo_weight));
    t.push_back(update_number("ppo_epsilon", "PPO ratio clip", &UpdateConfig::ppo_epsilon));
    t.push_back(update_number("kl_samples", "sampled actions for KL(pi_cmpo, pi); 0 = exact",
                              &UpdateConfig::kl_samples));
    t.push_back(update_number("z_init", "initial normalizer estimate", &UpdateConfig::z_init));
    t.push_back(update_number("clip_c", "advantage clipping threshold", &UpdateConfig::clip_c));
    t.push_back(update_number("mpo_temperature", "temperature of the unclipped MPO target",
                              &UpdateConfig::mpo_temperature));
    t.push_back(update_number("mpo_direct_weight", "weight of KL(pi, pi_prior) in mpo_direct",
                              &UpdateConfig::mpo_direct_weight));
    t.push_back(update_number("policy_loss_weight", "weight of the policy loss and L_m",
                              &UpdateConfig::policy_loss_weight));
    return t;
  }();
  return table;
}

inline const Entry& find(const std::string& key) {
  for (const auto& e : entries())
    if (e.key == key) return e;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace config_detail

/// Applies one `key = value` (or `key=value`) assignment.
inline void apply_setting(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key = value, got '" + assignment + "'");
  const std::string key = config_detail::trim(assignment.substr(0, eq));
  const std::string value = config_detail::trim(assignment.substr(eq + 1));
  config_detail::find(key).set(cfg, value);
}

inline RunConfig parse_config(std::istream& in, RunConfig cfg = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_setting(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  return parse_config(in);
}

inline std::string config_value(const RunConfig& cfg, const std::string& key) {
  return config_detail::find(key).get(cfg);
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& e : config_detail::entries()) out.push_back(e.key);
  return out;
}

/// Every key with its current value; the output parses back to `cfg`.
inline void print_config(std::ostream& out, const RunConfig& cfg) {
  std::size_t width = 0;
  for (const auto& e : config_detail::entries()) width = std::max(width, e.key.size());
  for (const auto& e : config_detail::entries()) {
    const std::string value = e.get(cfg);
    out << std::left << std::setw(static_cast<int>(width)) << e.key << " = " << value;
    out << std::string(value.size() < 12 ? 12 - value.size() : 1, ' ') << "# " << e.doc << "\n";
  }
}

}  // namespace muesli
