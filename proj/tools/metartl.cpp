// Command-line front end: experiment runs, transferability matrices and audits.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metartl/diagnostics.hpp"
#include "metartl/errors.hpp"
#include "metartl/harness.hpp"
#include "metartl/rl.hpp"

using namespace metartl;

namespace {

int cmd_run(const std::string& config_path, const std::optional<std::uint64_t>& seed_override,
            const std::string& out_override) {
  auto cfg = load_run_config(config_path);
  if (seed_override) cfg.seeds = {*seed_override};
  if (!out_override.empty()) cfg.output_dir = out_override;
  const auto result = run_experiment(cfg);
  const auto rows = result.rows();
  emit_metrics(rows, cfg, cfg.output_dir);
  emit_run_artifacts(result, cfg.output_dir);
  std::printf("%-18s %5s %10s %10s %10s %10s\n", "method", "runs", "final", "final_sd", "best", "best_sd");
  for (const auto& s : summarize(rows)) {
    std::printf("%-18s %5zu %10.4f %10.4f %10.4f %10.4f\n", s.method.c_str(), s.runs, s.final_mean, s.final_std,
                s.best_mean, s.best_std);
  }
  std::printf("wrote %s\n", (cfg.output_dir / "metrics.csv").string().c_str());
  return 0;
}

int cmd_transferability(const std::string& config_path, const std::string& out_path) {
  const auto cfg = load_transferability_config(config_path);
  const auto matrix = transferability_matrix(cfg);
  std::vector<std::string> names;
  if (!cfg.families.empty()) {
    for (const auto& f : cfg.families) names.push_back(f.name);
  } else {
    for (const auto& p : cfg.jsonl) names.push_back(p.name.empty() ? p.train.stem().string() : p.name);
  }
  std::printf("%-14s", "pretrain\\tune");
  for (const auto& n : names) std::printf(" %12s", n.c_str());
  std::printf("\n");
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    std::printf("%-14s", names[i].c_str());
    for (double v : matrix[i]) std::printf(" %12.4f", v);
    std::printf("\n");
  }
  if (!out_path.empty()) {
    nlohmann::json j{{"datasets", names}, {"delta_accuracy", matrix}};
    std::ofstream out(out_path);
    if (!out) throw IoError("cannot write '" + out_path + "'");
    out << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_checkgrad(std::size_t points, std::uint64_t seed) {
  const auto report = run_gradient_suite(points, seed);
  for (const auto& e : report.entries) {
    std::printf("%-26s points=%zu max_rel_error=%.3e %s\n", e.name.c_str(), e.points, e.max_rel_error,
                e.max_rel_error < report.tolerance ? "ok" : "FAILED");
  }
  std::printf("tolerance %.0e, %.2f s\n", report.tolerance, report.seconds);
  return report.passed() ? 0 : 2;
}

int cmd_enumerate(std::size_t m, std::size_t k, double epsilon, const std::vector<double>& probs_in) {
  std::vector<double> probs = probs_in;
  if (probs.empty()) probs.assign(m, 1.0 / static_cast<double>(m));
  if (probs.size() != m) throw ConfigError("--probs must list exactly M values");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ConfigError("--probs must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("--probs must sum to 1");
  const auto all = enumerate_trajectories(probs, k, epsilon);
  double sum = 0.0;
  for (const auto& t : all) {
    std::ostringstream idx;
    for (std::size_t i = 0; i < t.indices.size(); ++i) idx << (i ? "," : "") << t.indices[i];
    std::printf("(%s) %.12f\n", idx.str().c_str(), t.probability);
    sum += t.probability;
  }
  std::printf("trajectories=%zu total=%.15f\n", all.size(), sum);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reinforcement-weighted multi-source meta-transfer learning"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed_override;
  auto* run = app.add_subcommand("run", "Run the configured methods and write metrics");
  run->add_option("--config", config_path, "JSON run configuration")->required();
  run->add_option("--seed-override", seed_override, "Replace the seed list with a single seed");
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");

  std::string transfer_config;
  std::string transfer_out;
  auto* transfer = app.add_subcommand("transferability", "Pretrain/fine-tune accuracy deltas between datasets");
  transfer->add_option("--config", transfer_config, "JSON transferability configuration")->required();
  transfer->add_option("--out", transfer_out, "Also write the matrix as JSON");

  std::size_t points = 100;
  std::uint64_t grad_seed = 0;
  auto* checkgrad = app.add_subcommand("checkgrad", "Finite-difference check of every differentiable component");
  checkgrad->add_option("--points", points, "Random parameter settings per component");
  checkgrad->add_option("--seed", grad_seed, "Seed for the random points");

  std::size_t m = 3;
  std::size_t k = 2;
  double epsilon = 0.2;
  std::vector<double> probs;
  auto* enumerate = app.add_subcommand("enumerate-trajectories", "Print the exact trajectory distribution");
  enumerate->add_option("--m", m, "Number of tasks")->required();
  enumerate->add_option("--k", k, "Trajectory length")->required();
  enumerate->add_option("--epsilon", epsilon, "Exploration rate")->required();
  enumerate->add_option("--probs", probs, "Policy probabilities (default uniform)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*run) return cmd_run(config_path, seed_override, out_dir);
    if (*transfer) return cmd_transferability(transfer_config, transfer_out);
    if (*checkgrad) return cmd_checkgrad(points, grad_seed);
    if (*enumerate) return cmd_enumerate(m, k, epsilon, probs);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
