// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance <output dir> <configs dir>

#include "muesli/config.hpp"
#include "muesli/experiment.hpp"
#include "muesli/oracle.hpp"
#include "muesli/verify.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

using namespace muesli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& what, const Outcome& o) {
  std::cout << (o.passed ? "[PASS] " : "[FAIL] ") << id << " " << what << " -- " << o.detail
            << std::endl;
  if (!o.passed) ++failures;
}

std::string num(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Numeric columns of a metrics CSV, keyed by header name.
std::map<std::string, std::vector<double>> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::vector<std::string> names;
  std::map<std::string, std::vector<double>> out;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (names.empty()) {
      names = cells;
      continue;
    }
    for (std::size_t i = 0; i < cells.size() && i < names.size(); ++i)
      out[names[i]].push_back(std::stod(cells[i]));
  }
  return out;
}

RunConfig aliased_config(const fs::path& configs) {
  return load_config_file((configs / "aliased_muesli.cfg").string());
}

RunOutcome train(RunConfig cfg, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome r = run_to_files(cfg, dir);
  std::cerr << "  trained " << cfg.run_name << " in " << num(seconds_since(t0), 3) << " s\n";
  return r;
}

// ---------------------------------------------------------------------------

Outcome theorem_check() {
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream d;
  bool ok = true;
  for (double c : {0.1, 0.5, 1.0, 2.0}) {
    const TheoremReport r = verify_theorem(ClipConfig(c));
    const double max_err = std::abs(r.numeric_max - r.analytic_max);
    const double arg_err = std::abs(r.argmax_p - r.analytic_argmax_p);
    ok &= max_err < 1e-6 && arg_err < 1e-5;
    d << "c=" << c << " |dTV|=" << num(max_err, 2) << " |dp|=" << num(arg_err, 2) << "; ";
  }
  const double elapsed = seconds_since(t0);
  ok &= elapsed < 1.0;
  d << "runtime " << num(elapsed, 3) << " s";
  return {ok, d.str()};
}

Outcome aliased_optimum(const std::vector<RunOutcome>& runs) {
  std::ostringstream d;
  bool ok = runs.size() == 5;
  for (const auto& r : runs) {
    const double p = r.summary.policy(0, aliased::kUp);
    const double J = evaluate_obs_policy(aliased_mdp(), r.summary.policy).J;
    ok &= p >= 0.60 && p <= 0.65 && std::abs(J - 9.0 / 16.0) < 0.01;
    d << "p=" << num(p, 4) << " J=" << num(J, 5) << "; ";
  }
  d << "target p=0.625 J=0.5625";
  return {ok, d.str()};
}

Outcome q_degeneracy() {
  const TabularMDP m = aliased_mdp();
  const ExactEvaluation e = evaluate_obs_policy(m, aliased_policy(5.0 / 8.0));
  const ObservationValues ov = observation_values(m, e);
  const auto cf = aliased_closed_form(5.0 / 8.0);
  const double q_up = ov.q(0, aliased::kUp), q_down = ov.q(0, aliased::kDown);
  const double v_phi = ov.v[0], v_state2 = e.v[1];
  bool ok = std::abs(q_up - q_down) < 1e-10 && std::abs(q_up - 0.25) < 1e-10 &&
            std::abs(q_down - 0.25) < 1e-10;
  ok &= std::abs(v_phi - cf.v_phi) < 1e-10 && std::abs(v_state2 - cf.v2) < 1e-10;
  ok &= std::abs(v_phi - v_state2) > 0.1;
  std::ostringstream d;
  d << "q(up)=" << num(q_up, 12) << " q(down)=" << num(q_down, 12) << " v_phi=" << num(v_phi, 12)
    << " v(state 2)=" << num(v_state2, 12);
  return {ok, d.str()};
}

Outcome lemma_and_bound() {
  const auto lemma = verify::lemma(100);
  const auto bound = verify::bound(100);
  std::ostringstream d;
  d << "lemma " << lemma.passed() << "/100 max err " << num(lemma.max_error(), 3) << "; bound "
    << bound.passed() << "/100 violations " << bound.cases.size() - bound.passed();
  return {lemma.ok() && bound.ok() && lemma.cases.size() == 100 && bound.cases.size() == 100,
          d.str()};
}

Outcome runtime_tv(const std::vector<RunOutcome>& runs, double c) {
  const double bound = std::tanh(c / 2.0);
  double worst = 0.0;
  std::size_t rows = 0;
  bool ok = !runs.empty();
  for (const auto& r : runs) {
    const auto cols = read_metrics(r.paths.csv);
    for (const char* name : {"tv_max_obs", "tv_max_batch"}) {
      const auto it = cols.find(name);
      if (it == cols.end() || it->second.empty()) {
        ok = false;
        continue;
      }
      for (double v : it->second) worst = std::max(worst, v);
      rows += it->second.size();
    }
    worst = std::max(worst, r.summary.tv_max);
  }
  ok &= worst <= bound + 1e-9;
  std::ostringstream d;
  d << "max logged TV " << num(worst, 8) << " over " << rows / 2 << " rows x 2 columns, bound "
    << num(bound, 10);
  return {ok, d.str()};
}

// Visits every multiset of n draws from the prior with its multinomial probability.
void for_each_draw(const Vector& prior, std::size_t n,
                   const std::function<void(const std::vector<std::size_t>&, double)>& f) {
  const auto k = static_cast<std::size_t>(prior.size());
  std::vector<std::size_t> counts(k, 0);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t left) {
    if (i + 1 == k) {
      counts[i] = left;
      double logp = std::lgamma(static_cast<double>(n) + 1.0);
      std::vector<std::size_t> draws;
      for (std::size_t a = 0; a < k; ++a) {
        logp -= std::lgamma(static_cast<double>(counts[a]) + 1.0);
        logp += static_cast<double>(counts[a]) * std::log(prior[static_cast<Eigen::Index>(a)]);
        draws.insert(draws.end(), counts[a], a);
      }
      f(draws, std::exp(logp));
      return;
    }
    for (std::size_t c = 0; c <= left; ++c) {
      counts[i] = c;
      rec(i + 1, left - c);
    }
  };
  rec(0, n);
}

Outcome estimators() {
  std::ostringstream d;
  bool ok = true;

  // (a) Retrace with exact q has expected target q_pi(s, a) for every start pair.
  RandomMdpOptions opts;
  opts.discount = 0.9;
  const TabularMDP m = random_mdp(5, 2, 5, opts);
  Rng rng(2024);
  const Matrix pi = random_policy(5, 2, rng);
  const Matrix mu = random_policy(5, 2, rng);
  const ExactEvaluation e = evaluate(m, pi);
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> samples;
  for (int ep = 0; ep < 40000; ++ep) {
    const Trajectory t = sample_episode(m, mu, rng, 500);
    const auto L = static_cast<Eigen::Index>(t.size());
    Matrix q(L + 1, 2), pr(L + 1, 2);
    for (Eigen::Index i = 0; i <= L; ++i) {
      const auto s = static_cast<Eigen::Index>(i < L ? t.steps[i].state : t.steps.back().next_state);
      q.row(i) = e.q.row(s);
      pr.row(i) = pi.row(s);
    }
    const ReturnEstimate r = retrace(t.steps, q, pr, Vector::Zero(L + 1), 0.95);
    samples[{t.steps[0].state, t.steps[0].action}].push_back(r.G[0]);
  }
  double worst_z = 0.0;
  for (const auto& [key, g] : samples) {
    double mean = 0.0, sq = 0.0;
    for (double x : g) mean += x;
    mean /= static_cast<double>(g.size());
    for (double x : g) sq += (x - mean) * (x - mean);
    const double se = std::sqrt(sq / static_cast<double>(g.size() - 1) / static_cast<double>(g.size()));
    const double diff = std::abs(mean - e.q(static_cast<Eigen::Index>(key.first),
                                            static_cast<Eigen::Index>(key.second)));
    worst_z = std::max(worst_z, diff / se);
    ok &= diff <= 3.0 * se;
  }
  d << "(a) " << samples.size() << " start pairs, worst |mean - q|/se " << num(worst_z, 3) << "; ";

  // (b) Expected sampled-KL logit gradient against the enumerated KL gradient.
  const Vector prior = (Vector(4) << 0.4, 0.3, 0.2, 0.1).finished();
  const Vector adv = (Vector(4) << 1.5, 0.5, -0.5, -1.5).finished();
  const Vector logits = (Vector(4) << 0.2, -0.1, 0.4, 0.0).finished();
  const ClipConfig clip(1.0);
  const Vector target = cmpo_target(prior, adv, clip).probs;
  const Vector log_probs = log_softmax(logits);
  const Vector probs = softmax(logits);
  const Vector exact = loss_terms::kl_to(probs, target, 1.0).dlogits;
  auto expected_grad = [&](std::size_t n, bool exact_z) {
    Vector g = Vector::Zero(4);
    for_each_draw(prior, n, [&](const std::vector<std::size_t>& draws, double p) {
      const Vector w = kl_sample_weights(prior, adv, clip, draws, 1.0, exact_z);
      g += p * loss_terms::sampled_kl(log_probs, probs, draws, w, 1.0).dlogits;
    });
    return g;
  };
  double exact_err = 0.0;
  for (std::size_t n : {1u, 2u, 4u, 16u})
    exact_err = std::max(exact_err, (expected_grad(n, true) - exact).cwiseAbs().maxCoeff());
  ok &= exact_err < 1e-9;
  d << "(b) exact-z gradient error " << num(exact_err, 3) << "; leave-one-out bias";
  double last = std::numeric_limits<double>::infinity();
  for (std::size_t n : {1u, 2u, 4u, 16u}) {
    const double bias = (expected_grad(n, false) - exact).cwiseAbs().sum();
    ok &= bias < last;
    last = bias;
    d << " N=" << n << ":" << num(bias, 4);
  }
  return {ok, d.str()};
}

Outcome gradients() {
  const auto policy = verify::policy_gradients(20, 0);
  const auto model = verify::model_gradients(20, 0);
  const auto batch = verify::batch_gradients(20, 0);
  std::map<std::string, std::pair<std::size_t, std::size_t>> per_loss;
  double worst = 0.0;
  for (const auto* suite : {&policy, &model, &batch})
    for (const auto& c : suite->cases) {
      const std::string loss = c.name.substr(0, c.name.find(" #"));
      per_loss[loss].first += c.passed ? 1 : 0;
      per_loss[loss].second += 1;
      worst = std::max(worst, c.error);
    }
  bool ok = !per_loss.empty();
  std::ostringstream d;
  for (const auto& [loss, counts] : per_loss) {
    ok &= counts.second >= 20 && counts.first == counts.second;
    if (counts.first != counts.second)
      d << loss << " " << counts.first << "/" << counts.second << " ";
  }
  d << per_loss.size() << " losses x >= 20 points, worst relative error " << num(worst, 3);
  return {ok, d.str()};
}

Outcome scale_robustness(const RunConfig& base, const RunOutcome& unit_run, const fs::path& dir) {
  std::ostringstream d;
  const auto unit_greedy = greedy_actions(unit_run.summary.policy);
  bool ok = true;
  for (double scale : {1e-3, 1e3}) {
    RunConfig cfg = base;
    cfg.reward_scale = scale;
    cfg.run_name = "scale_" + num(scale);
    const RunOutcome r = train(cfg, dir);
    const bool same = greedy_actions(r.summary.policy) == unit_greedy;
    ok &= same;
    d << "scale " << num(scale) << " p(up)=" << num(r.summary.policy(0, aliased::kUp), 4)
      << (same ? " same" : " DIFFERENT") << "; ";
  }
  d << "unit p(up)=" << num(unit_run.summary.policy(0, aliased::kUp), 4);

  // Unclipped MPO contrast, reported only.
  std::ostringstream contrast;
  std::vector<double> p_up;
  for (double scale : {1.0, 1e3}) {
    RunConfig cfg = base;
    apply_setting(cfg, "variant = mpo_indirect");
    cfg.reward_scale = scale;
    cfg.run_name = "mpo_scale_" + num(scale);
    try {
      const RunOutcome r = train(cfg, dir);
      p_up.push_back(r.summary.policy(0, aliased::kUp));
      contrast << " scale " << num(scale) << " p(up)=" << num(p_up.back(), 4);
    } catch (const NonFiniteLoss&) {
      contrast << " scale " << num(scale) << " diverged";
    }
  }
  d << "; unclipped MPO (not graded):" << contrast.str();
  return {ok, d.str()};
}

Outcome ablation(const fs::path& configs, const fs::path& dir) {
  const RunConfig base = load_config_file((configs / "random10_ablation.cfg").string());
  struct Arm {
    const char* name;
    const char* settings[2];
  };
  const Arm arms[] = {{"k5_policy_head", {"unroll_length = 5", "model_policy_loss = true"}},
                      {"k1", {"unroll_length = 1", "model_policy_loss = true"}},
                      {"k5_no_policy_head", {"unroll_length = 5", "model_policy_loss = false"}}};
  std::ostringstream d;
  bool ok = true;
  std::size_t expected_rows = 0;
  std::string header;
  for (const Arm& arm : arms) {
    RunConfig cfg = base;
    for (const char* s : arm.settings) apply_setting(cfg, s);
    cfg.run_name = std::string("ablation_") + arm.name;
    try {
      const RunOutcome r = train(cfg, dir);
      std::ifstream in(r.paths.csv);
      std::string preamble, head;
      std::getline(in, preamble);
      std::getline(in, head);
      std::size_t rows = 0;
      for (std::string line; std::getline(in, line);) rows += line.empty() ? 0 : 1;
      if (header.empty()) {
        header = head;
        expected_rows = rows;
      }
      ok &= head == header && rows == expected_rows && rows > 0 &&
            std::isfinite(r.summary.final_J);
      d << arm.name << " J=" << num(r.summary.final_J, 4) << " rows=" << rows << "; ";
    } catch (const std::exception& e) {
      ok = false;
      d << arm.name << " failed: " << e.what() << "; ";
    }
  }
  d << "CSVs in " << dir.string();
  return {ok, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  const fs::path configs = argc > 2 ? fs::path(argv[2]) : fs::path("configs");
  fs::create_directories(out);
  try {
    report(1, "CMPO max TV equals tanh(c/2)", theorem_check());

    const RunConfig base = aliased_config(configs);
    std::vector<RunOutcome> runs;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      RunConfig cfg = base;
      cfg.train.seed = seed;
      cfg.run_name = "aliased_seed" + std::to_string(seed);
      runs.push_back(train(cfg, out / "aliased"));
    }
    report(2, "Muesli reaches the aliased-MDP optimum on 5 seeds", aliased_optimum(runs));
    report(3, "Action values are degenerate at p = 5/8", q_degeneracy());
    report(4, "Performance-difference lemma and TRPO bound on 100 MDPs", lemma_and_bound());
    report(5, "Logged CMPO TV stays under tanh(c/2) during training",
           runtime_tv(runs, base.train.update.clip_c));
    report(6, "Retrace and sampled-KL estimators", estimators());
    report(7, "Finite-difference checks of every loss", gradients());
    report(8, "Greedy policy is invariant to reward scale",
           scale_robustness(base, runs.front(), out / "scale"));
    report(9, "Model ablation arms complete on a 10-state MDP", ablation(configs, out / "ablation"));
  } catch (const std::exception& e) {
    std::cout << "[FAIL] acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
