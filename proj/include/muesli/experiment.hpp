#pragma once

// Run artifacts: metrics CSV, summary file and checkpoint for one
// configuration, plus the summary reader used by sweeps.

#include "muesli/config.hpp"
#include "muesli/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>

namespace muesli {

struct RunPaths {
  std::filesystem::path csv;
  std::filesystem::path summary;
  std::filesystem::path checkpoint;
};

inline RunPaths run_paths(const std::filesystem::path& dir, const std::string& run_name) {
  return {dir / (run_name + ".csv"), dir / (run_name + ".summary.txt"), dir / (run_name + ".ckpt")};
}

/// Index of the largest entry per row; ties go to the lowest index.
inline std::vector<std::size_t> greedy_actions(const Matrix& policy) {
  std::vector<std::size_t> out;
  for (Eigen::Index r = 0; r < policy.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index a = 1; a < policy.cols(); ++a)
      if (policy(r, a) > policy(r, best)) best = a;
    out.push_back(static_cast<std::size_t>(best));
  }
  return out;
}

inline void write_summary(std::ostream& out, const RunConfig& cfg, const RunSummary& s,
                          std::uint64_t steps) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "# muesli run summary\n";
  out << "run_name = " << cfg.run_name << "\n";
  out << "variant = " << to_string(cfg.train.update.variant) << "\n";
  out << "seed = " << cfg.train.seed << "\n";
  out << "steps = " << steps << "\n";
  out << "final_J = " << s.final_J << "\n";
  out << "tv_max = " << s.tv_max << "\n";
  out << "tv_bound = " << max_tv(ClipConfig(cfg.train.update.clip_c)) << "\n";
  for (Eigen::Index o = 0; o < s.policy.rows(); ++o) {
    out << "policy." << o << " =";
    for (Eigen::Index a = 0; a < s.policy.cols(); ++a) out << " " << s.policy(o, a);
    out << "\n";
  }
  out << "greedy =";
  for (auto a : greedy_actions(s.policy)) out << " " << a;
  out << "\n";
}

/// Reads `key = value` lines of a summary file.
inline std::map<std::string, std::string> read_summary(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[config_detail::trim(line.substr(0, eq))] = config_detail::trim(line.substr(eq + 1));
  }
  return out;
}

struct RunOutcome {
  RunPaths paths;
  RunSummary summary;
};

/// Runs (or resumes) one configuration, streaming metrics to CSV and writing
/// the summary and a checkpoint into `dir`. A nonzero `stop_after` pauses
/// after that many updates; the checkpoint then resumes the run.
inline RunOutcome run_to_files(const RunConfig& cfg, const std::filesystem::path& dir,
                               const std::string& resume_from = "", std::uint64_t stop_after = 0,
                               const Trainer::RowCallback& on_row = {}) {
  cfg.validate();
  std::filesystem::create_directories(dir);
  RunOutcome out;
  out.paths = run_paths(dir, cfg.run_name);
  Trainer trainer(cfg.build_mdp(), cfg.train);
  const bool resuming = !resume_from.empty();
  if (resuming) {
    std::ifstream in(resume_from, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + resume_from + "'");
    trainer.load_checkpoint(in);
  }
  std::ofstream csv(out.paths.csv, resuming ? std::ios::app : std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write '" + out.paths.csv.string() + "'");
  if (!resuming) write_metrics_header(csv);
  const auto write_row = [&](const MetricsRow& r) {
    csv << metrics_csv(r) << "\n";
    csv.flush();
    if (on_row) on_row(r);
  };
  out.summary = stop_after > 0 ? trainer.run_for(stop_after, write_row) : trainer.run(write_row);
  std::ofstream summary(out.paths.summary);
  if (!summary) throw std::runtime_error("cannot write '" + out.paths.summary.string() + "'");
  write_summary(summary, cfg, out.summary, trainer.step());
  std::ofstream ckpt(out.paths.checkpoint, std::ios::binary);
  if (!ckpt) throw std::runtime_error("cannot write '" + out.paths.checkpoint.string() + "'");
  trainer.save_checkpoint(ckpt);
  return out;
}

}  // namespace muesli
