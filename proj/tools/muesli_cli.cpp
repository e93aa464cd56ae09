// Command-line front end: run, verify, oracle, sweep, print-config.

#include "muesli/config.hpp"
#include "muesli/experiment.hpp"
#include "muesli/oracle.hpp"
#include "muesli/verify.hpp"

#include <CLI11.hpp>

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

extern char** environ;

namespace {

using namespace muesli;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;
constexpr const char* kOutDirEnv = "MUESLI_OUT_DIR";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path output_dir(const RunConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutDirEnv); env && *env) return env;
  return cfg.output_dir;
}

RunConfig build_config(const std::string& path, const std::vector<std::string>& sets,
                       const std::optional<std::uint64_t>& seed) {
  RunConfig cfg;
  try {
    if (!path.empty()) cfg = load_config_file(path);
    for (const auto& s : sets) apply_setting(cfg, s);
    if (seed) cfg.train.seed = *seed;
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

void print_table(const verify::SuiteResult& r, const std::string& value_label,
                 const std::string& ref_label) {
  std::cout << std::left << std::setw(24) << "case" << std::right << std::setw(16) << value_label
            << std::setw(16) << ref_label << std::setw(14) << "error" << "  result\n";
  std::cout << std::setprecision(6);
  for (const auto& c : r.cases)
    std::cout << std::left << std::setw(24) << c.name << std::right << std::setw(16) << c.value
              << std::setw(16) << c.reference << std::setw(14) << c.error << "  "
              << (c.passed ? "PASS" : "FAIL") << "\n";
  std::cout << r.passed() << "/" << r.cases.size() << " passed, max error " << r.max_error()
            << "\n";
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("invalid number '" + item + "' in list");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunOptions {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string resume;
  std::uint64_t stop_after = 0;
  bool quiet = false;
};

int cmd_run(const RunOptions& o) {
  const RunConfig cfg = build_config(o.config, o.sets, o.seed);
  const fs::path dir = output_dir(cfg, o.out_dir);
  const RunOutcome r = run_to_files(cfg, dir, o.resume, o.stop_after, [&](const MetricsRow& row) {
    if (!o.quiet)
      std::cout << "step " << row.step << "  J " << std::setprecision(6) << row.J << "  tv "
                << row.tv_max_batch << "  loss " << row.loss.total << "\n";
  });
  std::cout << std::setprecision(6) << "final J " << r.summary.final_J << ", max TV "
            << r.summary.tv_max << " (bound " << max_tv(ClipConfig(cfg.train.update.clip_c))
            << ")\n";
  for (Eigen::Index obs = 0; obs < r.summary.policy.rows(); ++obs)
    std::cout << "pi(.|obs " << obs << ") = " << r.summary.policy.row(obs) << "\n";
  std::cout << "metrics: " << r.paths.csv.string() << "\nsummary: " << r.paths.summary.string()
            << "\ncheckpoint: " << r.paths.checkpoint.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

struct OracleOptions {
  std::string mdp;
  std::string policy;
  std::optional<double> p;
};

int cmd_oracle(const OracleOptions& o) {
  TabularMDP mdp = o.mdp.empty() ? aliased_mdp() : load_mdp_file(o.mdp);
  Matrix per_obs;
  if (!o.policy.empty()) {
    std::ifstream in(o.policy);
    if (!in) throw std::runtime_error("cannot open policy file '" + o.policy + "'");
    per_obs = load_policy(in);
  } else if (o.p) {
    if (!o.mdp.empty()) throw UsageError("--p applies to the aliased MDP only");
    if (*o.p < 0.0 || *o.p > 1.0) throw UsageError("--p must lie in [0, 1]");
    per_obs = aliased_policy(*o.p);
  } else {
    per_obs = uniform_policy(mdp.num_observations(), mdp.num_actions());
  }
  const ExactEvaluation e = evaluate_obs_policy(mdp, per_obs);
  std::cout << std::setprecision(10);
  std::cout << "J = " << e.J << "\nhorizon = " << e.horizon << "\n";
  std::cout << "state  terminal  obs  d  v  q...\n";
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    const auto i = static_cast<Eigen::Index>(s);
    std::cout << s << "  " << (mdp.is_terminal(s) ? "yes" : "no") << "  " << mdp.observation(s)
              << "  " << e.d[i] << "  " << e.v[i];
    for (Eigen::Index a = 0; a < e.q.cols(); ++a) std::cout << "  " << e.q(i, a);
    std::cout << "\n";
  }
  const ObservationValues ov = observation_values(mdp, e);
  std::cout << "obs  v  q...\n";
  for (Eigen::Index obs = 0; obs < ov.q.rows(); ++obs) {
    std::cout << obs << "  " << ov.v[obs];
    for (Eigen::Index a = 0; a < ov.q.cols(); ++a) std::cout << "  " << ov.q(obs, a);
    std::cout << "\n";
  }
  if (o.mdp.empty() && (o.p || o.policy.empty())) {
    const double p = per_obs(0, aliased::kUp);
    const AliasedClosedForm cf = aliased_closed_form(p);
    std::cout << "closed form at p = " << p << ": v = " << cf.v1 << ", q(up) = " << cf.q_up
              << ", q(down) = " << cf.q_down << ", v_phi = " << cf.v_phi << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepOptions {
  std::string config;
  std::vector<std::string> grid;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::size_t jobs = 1;
  std::string name = "sweep";
};

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

GridAxis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw UsageError("grid axis must look like key=v1,v2,..., got '" + spec + "'");
  GridAxis axis{spec.substr(0, eq), {}};
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ',')) axis.values.push_back(v);
  return axis;
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' ? c : '_';
  return out;
}

struct Cell {
  std::vector<std::string> values;
  std::string run_name;
  int status = -1;
};

pid_t spawn_cell(const std::string& exe, const std::vector<std::string>& args) {
  std::vector<char*> argv;
  argv.push_back(const_cast<char*>(exe.c_str()));
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, exe.c_str(), &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw std::runtime_error("failed to start sweep cell");
  return pid;
}

int cmd_sweep(const SweepOptions& o) {
  const RunConfig base = build_config(o.config, o.sets, o.seed);
  const fs::path dir = output_dir(base, o.out_dir);
  std::vector<GridAxis> axes;
  for (const auto& g : o.grid) {
    axes.push_back(parse_axis(g));
    RunConfig probe = base;
    for (const auto& v : axes.back().values) {
      try {
        apply_setting(probe, axes.back().key + "=" + v);
        probe.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    }
  }

  std::vector<Cell> cells;
  if (!axes.empty()) {
    std::vector<std::size_t> idx(axes.size(), 0);
    while (true) {
      Cell c;
      std::string name = base.run_name;
      for (std::size_t a = 0; a < axes.size(); ++a) {
        c.values.push_back(axes[a].values[idx[a]]);
        name += "__" + sanitize(axes[a].key) + "-" + sanitize(axes[a].values[idx[a]]);
      }
      c.run_name = name;
      cells.push_back(std::move(c));
      std::size_t a = axes.size();
      while (a > 0 && ++idx[a - 1] == axes[a - 1].values.size()) idx[--a] = 0;
      if (a == 0) break;
    }
  }

  fs::create_directories(dir);
  const std::string exe = fs::read_symlink("/proc/self/exe").string();
  std::size_t next = 0;
  std::vector<std::pair<pid_t, std::size_t>> running;
  auto reap_one = [&] {
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    for (auto it = running.begin(); it != running.end(); ++it) {
      if (it->first != pid) continue;
      cells[it->second].status = WIFEXITED(status) ? WEXITSTATUS(status) : 128;
      std::cout << "cell " << cells[it->second].run_name << ": "
                << (cells[it->second].status == 0 ? "ok" : "FAILED") << "\n";
      running.erase(it);
      return;
    }
  };
  while (next < cells.size() || !running.empty()) {
    while (next < cells.size() && running.size() < std::max<std::size_t>(1, o.jobs)) {
      std::vector<std::string> args{"run", "--quiet", "--out-dir", dir.string()};
      if (!o.config.empty()) args.insert(args.end(), {"--config", o.config});
      for (const auto& s : o.sets) args.insert(args.end(), {"--set", s});
      if (o.seed) args.insert(args.end(), {"--seed", std::to_string(*o.seed)});
      for (std::size_t a = 0; a < axes.size(); ++a)
        args.insert(args.end(), {"--set", axes[a].key + "=" + cells[next].values[a]});
      args.insert(args.end(), {"--set", "run_name=" + cells[next].run_name});
      running.emplace_back(spawn_cell(exe, args), next);
      ++next;
    }
    if (!running.empty()) reap_one();
  }

  const fs::path table = dir / (o.name + ".csv");
  std::ofstream out(table);
  if (!out) throw std::runtime_error("cannot write '" + table.string() + "'");
  out << "run_name";
  for (const auto& a : axes) out << "," << a.key;
  out << ",status,final_J,tv_max,greedy\n";
  bool any_failed = false;
  for (const auto& c : cells) {
    std::map<std::string, std::string> s;
    if (c.status == 0) {
      std::ifstream in(run_paths(dir, c.run_name).summary);
      s = read_summary(in);
    }
    any_failed |= c.status != 0;
    out << c.run_name;
    for (const auto& v : c.values) out << "," << v;
    out << "," << (c.status == 0 ? "ok" : "failed(" + std::to_string(c.status) + ")") << ","
        << s["final_J"] << "," << s["tv_max"] << "," << s["greedy"] << "\n";
  }
  std::cout << cells.size() << " cells, aggregate table: " << table.string() << "\n";
  return any_failed ? kFailure : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regularized policy optimization lab on tabular MDPs"};
  app.require_subcommand(1);

  RunOptions run;
  auto* run_cmd = app.add_subcommand("run", "Train one configuration and write CSV, summary, checkpoint");
  run_cmd->add_option("--config", run.config, "Config file (key = value)");
  run_cmd->add_option("--set", run.sets, "Override one key, e.g. --set variant=pg")->take_all();
  run_cmd->add_option("--seed", run.seed, "Override the config seed");
  run_cmd->add_option("--out-dir", run.out_dir,
                      std::string("Output directory (else $") + kOutDirEnv + ", else output_dir)");
  run_cmd->add_option("--resume", run.resume, "Continue from a checkpoint");
  run_cmd->add_option("--stop-after", run.stop_after, "Pause after this many updates");
  run_cmd->add_flag("--quiet", run.quiet, "Only print the final summary");

  auto* verify_cmd = app.add_subcommand("verify", "Run a verifier suite");
  verify_cmd->require_subcommand(1);
  std::string c_list = "0.1,0.5,1,2";
  auto* theorem_cmd = verify_cmd->add_subcommand("theorem", "Max TV of the CMPO target vs tanh(c/2)");
  theorem_cmd->add_option("--c", c_list, "Comma-separated clipping thresholds");
  std::size_t seeds = 100;
  std::uint64_t first_seed = 0;
  auto* lemma_cmd = verify_cmd->add_subcommand("lemma", "Performance-difference lemma on random MDPs");
  lemma_cmd->add_option("--seeds", seeds, "Number of random MDPs");
  lemma_cmd->add_option("--first-seed", first_seed, "First MDP seed");
  auto* bound_cmd = verify_cmd->add_subcommand("bound", "TRPO lower bound on random MDPs");
  bound_cmd->add_option("--seeds", seeds, "Number of random MDPs");
  bound_cmd->add_option("--first-seed", first_seed, "First MDP seed");
  std::size_t points = 20;
  std::uint64_t grad_seed = 0;
  auto* grad_cmd = verify_cmd->add_subcommand("gradients", "Finite-difference checks of every loss");
  grad_cmd->add_option("--points", points, "Random points per loss");
  grad_cmd->add_option("--seed", grad_seed, "Seed for the random points");

  OracleOptions oracle;
  auto* oracle_cmd = app.add_subcommand("oracle", "Exact evaluation of a policy");
  oracle_cmd->add_option("--mdp", oracle.mdp, "MDP text file (default: the aliased MDP)");
  oracle_cmd->add_option("--policy", oracle.policy, "Per-observation policy file (default: uniform)");
  oracle_cmd->add_option("--p", oracle.p, "Probability of 'up' on the aliased MDP");

  SweepOptions sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run a grid of configurations as separate processes");
  sweep_cmd->add_option("--config", sweep.config, "Base config file");
  sweep_cmd->add_option("--grid", sweep.grid, "Axis key=v1,v2,... (repeatable)")->take_all();
  sweep_cmd->add_option("--set", sweep.sets, "Override one key in every cell")->take_all();
  sweep_cmd->add_option("--seed", sweep.seed, "Override the config seed in every cell");
  sweep_cmd->add_option("--out-dir", sweep.out_dir, "Output directory");
  sweep_cmd->add_option("--jobs", sweep.jobs, "Cells run concurrently");
  sweep_cmd->add_option("--name", sweep.name, "File name stem of the aggregate table");

  std::string print_path;
  auto* print_cmd = app.add_subcommand("print-config", "Print every config key with its value");
  print_cmd->add_option("--config", print_path, "Config file to apply first");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*verify_cmd) {
      verify::SuiteResult r;
      if (*theorem_cmd) {
        r = verify::theorem(parse_list(c_list));
        print_table(r, "numeric max", "tanh(c/2)");
      } else if (*lemma_cmd) {
        r = verify::lemma(seeds, first_seed);
        print_table(r, "lemma", "J difference");
      } else if (*bound_cmd) {
        r = verify::bound(seeds, first_seed);
        print_table(r, "J difference", "lower bound");
      } else {
        for (auto* suite : {&verify::policy_gradients, &verify::model_gradients, &verify::batch_gradients}) {
          const auto part = (*suite)(points, grad_seed);
          r.cases.insert(r.cases.end(), part.cases.begin(), part.cases.end());
        }
        print_table(r, "analytic", "numeric");
      }
      return r.ok() ? kOk : kFailure;
    }
    if (*oracle_cmd) return cmd_oracle(oracle);
    if (*sweep_cmd) return cmd_sweep(sweep);
    if (*print_cmd) {
      const RunConfig cfg = build_config(print_path, {}, std::nullopt);
      print_config(std::cout, cfg);
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
