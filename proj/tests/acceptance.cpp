// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metartl/diagnostics.hpp"
#include "metartl/errors.hpp"
#include "metartl/harness.hpp"
#include "metartl/meta.hpp"
#include "metartl/rl.hpp"
#include "metartl/rng.hpp"
#include "metartl/tasks.hpp"

using namespace metartl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> random_simplex(Rng& rng, std::size_t m) {
  std::vector<double> p(m);
  double total = 0.0;
  for (auto& x : p) total += (x = rng.exponential());
  for (auto& x : p) x /= total;
  return p;
}

ParameterVector random_like(const ParameterVector& layout, Rng& rng) {
  ParameterVector p = layout;
  for (auto& v : p.values()) v = rng.normal();
  return p;
}

ChoiceInstance random_instance(Rng& rng, std::size_t n, std::size_t dim) {
  std::vector<std::vector<double>> c(n, std::vector<double>(dim));
  for (auto& row : c)
    for (auto& x : row) x = rng.normal();
  return ChoiceInstance::make(c, rng.index(n));
}

std::map<std::string, double> final_means(const ExperimentResult& r) {
  std::map<std::string, double> out;
  for (const auto& s : summarize(r.rows())) out[s.method] = s.final_mean;
  return out;
}

Outcome gradient_correctness() {
  const auto report = run_gradient_suite(100, 0, 1e-4);
  std::string detail;
  for (const auto& e : report.entries) detail += fmt("%s %.2e; ", e.name.c_str(), e.max_rel_error);
  detail += fmt("%.1f s", report.seconds);
  return {report.passed() && report.seconds < 60.0, detail};
}

Outcome exact_normalization() {
  Rng rng(7);
  double worst = 0.0;
  std::size_t cases = 0;
  for (std::size_t m = 2; m <= 6; ++m)
    for (std::size_t k = 1; k <= 3; ++k)
      for (double eps : {0.0, 0.2, 0.7, 1.0})
        for (int t = 0; t < 50; ++t) {
          const auto p = random_simplex(rng, m);
          double total = 0.0;
          for (const auto& e : enumerate_trajectories(p, std::min(k, m), eps)) total += e.probability;
          worst = std::max(worst, std::abs(total - 1.0));
          ++cases;
        }
  double worst_freq = 0.0;
  const int draws = 200000;
  for (double eps : {0.0, 0.2, 0.7, 1.0}) {
    const auto p = random_simplex(rng, 3);
    std::map<std::vector<std::size_t>, int> counts;
    for (int s = 0; s < draws; ++s) ++counts[sample_trajectory(p, eps, 2, derive_seed(99, {std::uint64_t(s)})).indices];
    for (const auto& e : enumerate_trajectories(p, 2, eps))
      worst_freq = std::max(worst_freq, std::abs(counts[e.indices] / double(draws) - e.probability));
  }
  return {worst <= 1e-9 && worst_freq <= 0.005,
          fmt("%zu distributions, max |sum-1| = %.2e; sampler max freq error %.4f", cases, worst, worst_freq)};
}

Outcome uniform_reduction() {
  Rng rng(31);
  int reptile_equal = 0;
  int fomaml_equal = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const MetaModel model({.input_dim = 2 + rng.index(4), .hidden_dim = 2 + rng.index(4), .layers = 1 + rng.index(2)});
    const std::size_t m = 1 + rng.index(6);
    const auto theta = random_like(model.layout(), rng);
    std::vector<ParameterVector> branches;
    std::vector<std::vector<ChoiceInstance>> queries(m);
    for (std::size_t j = 0; j < m; ++j) {
      branches.push_back(theta);
      for (auto& v : branches.back().values()) v += 0.1 * rng.normal();
      for (int q = 0; q < 3; ++q) queries[j].push_back(random_instance(rng, 2 + rng.index(3), model.config().input_dim));
    }
    const std::vector<double> c(m, 1.0 / static_cast<double>(m));
    const double beta = rng.uniform();
    reptile_equal += weighted_update(theta, branches, c, beta) == reptile_update(theta, branches, beta);
    fomaml_equal += fomaml_update(model, theta, branches, queries, c, beta) ==
                    fomaml_update(model, theta, branches, queries, beta);
  }
  return {reptile_equal == 100 && fomaml_equal == 100,
          fmt("reptile %d/100 bitwise, fomaml %d/100 bitwise", reptile_equal, fomaml_equal)};
}

Outcome zero_adaptation() {
  Rng rng(5);
  int neutral_updates = 0;
  const MetaModel model({.input_dim = 4, .hidden_dim = 5, .layers = 1});
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.index(6);
    const auto theta = random_like(model.layout(), rng);
    std::vector<ParameterVector> branches;
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<ChoiceInstance> support{random_instance(rng, 3, 4), random_instance(rng, 3, 4)};
      branches.push_back(inner_adapt(model, theta, support, 0.1, 0));
    }
    std::vector<double> c(m);
    for (auto& x : c) x = 2.0 * rng.uniform();
    neutral_updates += weighted_update(theta, branches, c, rng.uniform()) == theta;
  }

  std::vector<TaskDataset> sources;
  const auto reference = random_unit_vector(6, 1);
  for (std::size_t j = 0; j < 4; ++j) {
    SyntheticFamilySpec s{.family_id = j + 1, .input_dim = 6, .reference_concept = reference,
                          .relatedness = 0.3 * static_cast<double>(j), .instances = 60};
    sources.push_back(make_synthetic_family(s, 10 + j));
  }
  SyntheticFamilySpec ts{.family_id = 0, .input_dim = 6, .reference_concept = reference, .relatedness = 1.0,
                         .instances = 40};
  const auto target = make_synthetic_family(ts, 3);
  bool loop_ok = true;
  std::size_t records = 0;
  for (auto strategy : {WeightStrategy::uniform, WeightStrategy::random, WeightStrategy::greedy,
                        WeightStrategy::temperature, WeightStrategy::rl}) {
    for (auto outer : {OuterAlgorithm::reptile, OuterAlgorithm::fomaml}) {
      MetaIterationConfig cfg;
      cfg.sources = &sources;
      cfg.target = &target;
      cfg.strategy = strategy;
      cfg.outer = outer;
      cfg.meta.inner_steps = 0;
      cfg.meta.support_size = 6;
      cfg.meta.query_size = 4;
      cfg.meta.target_batch = 8;
      const MetaModel m6({.input_dim = 6, .hidden_dim = 6, .layers = 1});
      auto state = make_meta_state(m6, cfg, 4);
      const auto theta0 = state.theta;
      for (int it = 0; it < 5; ++it) {
        const auto rec = run_meta_iteration(m6, state, cfg, 4);
        for (double r : rec.rewards) loop_ok = loop_ok && r == 0.0;
        ++records;
        // fomaml steps along query gradients, not branch differences
        if (outer == OuterAlgorithm::reptile) loop_ok = loop_ok && state.theta == theta0;
      }
    }
  }
  return {neutral_updates == 100 && loop_ok,
          fmt("weighted update with random C unchanged %d/100; %zu meta iterations all rewards 0: %s", neutral_updates,
              records, loop_ok ? "yes" : "no")};
}

Outcome bandit_convergence() {
  const auto t0 = std::chrono::steady_clock::now();
  RLHyperparams hp;
  const std::vector<double> rewards{-1.0, -1.0, 1.0, -1.0};
  int converged = 0;
  std::string probs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto learner = PolicyLearner::create({.num_tasks = 4}, hp, seed);
    for (std::uint64_t it = 0; it < 1500; ++it) {
      auto round = policy_propose(learner, hp, derive_seed(seed, {it}));
      policy_feedback(learner, round, rewards, hp);
    }
    const double p_good = learner.net.step(learner.phi, learner.state).first[2];
    probs += fmt("%.3f ", p_good);
    converged += p_good > 0.6;
  }
  const double secs = seconds_since(t0);
  return {converged == 5 && secs < 120.0, fmt("P(good) per seed: %s(%d/5), %.1f s", probs.c_str(), converged, secs)};
}

Outcome table_ordering(const fs::path& root) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = load_run_config(root / "configs" / "synthetic_four_source.json");
  cfg.methods = {Method::target_finetune, Method::reptile, Method::meta_rtl_reptile};
  cfg.seeds.clear();
  for (std::uint64_t s = 0; s < 10; ++s) cfg.seeds.push_back(s);
  auto mean = final_means(run_experiment(cfg));
  const double rtl = mean["meta_rtl_reptile"];
  const double rep = mean["reptile"];
  const double tgt = mean["target_finetune"];
  const double secs = seconds_since(t0);
  return {rtl >= rep + 0.02 && rep > tgt && secs < 600.0,
          fmt("meta_rtl_reptile %.4f, reptile %.4f, target_finetune %.4f (margin %+.4f), %.0f s", rtl, rep, tgt,
              rtl - rep, secs)};
}

Outcome low_resource_trend(const fs::path& root) {
  auto cfg = load_run_config(root / "configs" / "low_resource.json");
  cfg.methods = {Method::target_finetune, Method::meta_rtl_reptile};
  cfg.seeds.clear();
  for (std::uint64_t s = 0; s < 10; ++s) cfg.seeds.push_back(s);
  std::vector<double> gaps;
  std::string detail;
  for (double f : {0.05, 0.2, 0.4}) {
    cfg.target_fraction = f;
    auto mean = final_means(run_experiment(cfg));
    gaps.push_back(mean["meta_rtl_reptile"] - mean["target_finetune"]);
    detail += fmt("%.0f%%: %.4f-%.4f=%+.4f; ", 100.0 * f, mean["meta_rtl_reptile"], mean["target_finetune"], gaps.back());
  }
  return {gaps[0] >= gaps[1] && gaps[1] >= gaps[2], detail + "gap non-increasing"};
}

Outcome temperature_formula() {
  const std::vector<double> sizes{9741, 40398, 10176, 3510};
  const std::vector<double> expected{0.1526, 0.6330, 0.1594, 0.0550};
  const auto p = temperature_probs(sizes, 1.0);
  double err = 0.0;
  for (std::size_t i = 0; i < 4; ++i) err = std::max(err, std::abs(p[i] - expected[i]));
  std::string trend;
  double prev = 1.0;
  bool shrinking = true;
  for (double omega : {1.0, 10.0, 100.0, 1e4, 1e8}) {
    const auto q = temperature_probs(sizes, omega);
    double dev = 0.0;
    for (double x : q) dev = std::max(dev, std::abs(x - 0.25));
    shrinking = shrinking && dev <= prev;
    prev = dev;
    trend += fmt("%.0e:%.1e ", omega, dev);
  }
  return {err <= 5e-4 && shrinking && prev < 1e-6,
          fmt("omega=1 max error %.2e; max |P-1/4| by omega %s", err, trend.c_str())};
}

Outcome epsilon_endpoints() {
  const double e0 = epsilon_at(0);
  const double e_end = epsilon_at(8000);
  return {e0 == 0.2 && e_end == 0.0, fmt("eps(0)=%.17g eps(8000)=%.17g", e0, e_end)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const fs::path& root, const fs::path& cli) {
  const auto base = fs::temp_directory_path() / "metartl_acceptance_determinism";
  fs::remove_all(base);
  std::vector<std::string> csv;
  for (const char* run : {"a", "b"}) {
    const auto out = base / run;
    const std::string cmd = "\"" + cli.string() + "\" run --config \"" + (root / "configs" / "toy_jsonl.json").string() +
                            "\" --seed-override 1 --out \"" + out.string() + "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "cli run failed: " + cmd};
    csv.push_back(slurp(out / "metrics.csv"));
  }
  const bool same = !csv[0].empty() && csv[0] == csv[1];
  return {same, fmt("two cli runs, metrics.csv %zu bytes, identical: %s", csv[0].size(), same ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = METARTL_SOURCE_DIR;
  const fs::path cli = METARTL_CLI;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"exact trajectory normalization", exact_normalization},
      {"uniform reduction", uniform_reduction},
      {"zero-adaptation neutrality", zero_adaptation},
      {"bandit convergence", bandit_convergence},
      {"four-source ordering", [&] { return table_ordering(root); }},
      {"low-resource trend", [&] { return low_resource_trend(root); }},
      {"temperature formula", temperature_formula},
      {"epsilon schedule endpoints", epsilon_endpoints},
      {"determinism", [&] { return determinism(root, cli); }},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::strtoul(argv[i], nullptr, 10));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s [%zu] %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
