#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metartl/meta.hpp"
#include "metartl/models.hpp"
#include "metartl/rl.hpp"
#include "metartl/tasks.hpp"

namespace metartl {

enum class Method {
  target_finetune,
  task_comb,
  reptile,
  temp_reptile,
  fomaml,
  temp_fomaml,
  random,
  greedy,
  meta_rtl_reptile,
  meta_rtl_fomaml,
};

std::string to_string(Method m);
// Throws ConfigError.
Method parse_method(const std::string& name);
const std::vector<Method>& all_methods();

struct SyntheticSourceSpec {
  std::string name;
  double relatedness = 0.0;
  std::size_t instances = 2000;
};

// Families share a per-seed reference concept; the target family uses it directly.
struct SyntheticSetup {
  std::size_t input_dim = 32;
  std::size_t num_candidates = 4;
  double label_noise = 0.0;
  std::vector<SyntheticSourceSpec> sources;
  std::size_t target_train = 200;
  std::size_t target_dev = 1000;
};

struct JsonlSource {
  std::string name;
  std::filesystem::path path;
};

struct JsonlSetup {
  std::size_t feature_dim = 512;
  std::vector<JsonlSource> sources;
  std::filesystem::path target_train;
  std::filesystem::path target_dev;
};

struct FinetuneSettings {
  std::size_t batches = 200;
  std::size_t batch_size = 16;
  // When positive, overrides batches: ceil(epochs * train_size / batch_size).
  double epochs = 0.0;
  OptimizerKind optimizer = OptimizerKind::adamw;

  // Number of update steps for a training set of `train_size` instances.
  std::size_t steps_for(std::size_t train_size) const;
};

struct RunConfig {
  std::vector<Method> methods;
  std::vector<std::uint64_t> seeds{0};
  bool supervised = true;
  EncoderConfig model{.input_dim = 32, .hidden_dim = 32, .layers = 1};
  std::optional<SyntheticSetup> synthetic;
  std::optional<JsonlSetup> jsonl;
  double target_fraction = 1.0;
  MetaHyperparams meta;
  RLHyperparams rl;
  PolicyNetConfig policy;  // num_tasks is taken from the source count
  double omega = 1.0;
  // Meta-RTL runs its policy but applies 1/M weights (equivalence checks).
  bool stub_uniform_weights = false;
  FinetuneSettings finetune;
  std::size_t eval_every = 50;
  bool record_wallclock = false;
  std::size_t jobs = 0;  // 0: one per hardware thread
  std::filesystem::path output_dir = "out";

  // Throws ConfigError.
  void validate() const;
  std::size_t num_sources() const;

  // Throws ConfigError on unknown keys or ill-typed values.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Throws IoError, ParseError or ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

struct DatasetBundle {
  std::vector<TaskDataset> sources;
  TaskDataset target_train;  // after low-resource subsampling
  TaskDataset target_dev;
};

DatasetBundle build_datasets(const RunConfig& cfg, std::uint64_t seed);

struct MetricsRow {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t iteration = 0;
  std::string split;  // "meta", "finetune" or "final"
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> weights;  // empty when not applicable
  std::vector<double> rewards;
  std::optional<double> epsilon;
  double ms = 0.0;
};

struct SeedRun {
  Method method = Method::target_finetune;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
  ParameterVector theta;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::size_t meta_iterations = 0;
  double meta_seconds = 0.0;
  double finetune_seconds = 0.0;
};

// Trains and evaluates one method on one seed.
SeedRun run_method(const RunConfig& cfg, Method method, std::uint64_t seed, const DatasetBundle& data);

struct ExperimentResult {
  std::vector<SeedRun> runs;  // seed-major, methods in config order
  std::vector<MetricsRow> rows() const;
};

// Runs every configured method on every seed; seeds run as concurrent jobs.
ExperimentResult run_experiment(const RunConfig& cfg);

struct MethodSummary {
  std::string method;
  std::size_t runs = 0;
  double final_mean = 0.0;
  double final_std = 0.0;  // sample standard deviation, 0 for one run
  double best_mean = 0.0;
  double best_std = 0.0;
};

// Computed from the "final" rows (final) and all rows (best) of each method.
std::vector<MethodSummary> summarize(const std::vector<MetricsRow>& rows);

// Shortest round-trip decimal form.
std::string format_number(double v);

std::string metrics_csv(const std::vector<MetricsRow>& rows, std::size_t num_tasks);

// Writes metrics.csv, summary.json and config.json. Throws IoError.
void emit_metrics(const std::vector<MetricsRow>& rows, const RunConfig& cfg, const std::filesystem::path& out_dir);
// Final parameters (one file per run) and per-stage wall-clock seconds.
void emit_run_artifacts(const ExperimentResult& result, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Transferability

struct TransferDataset {
  std::string name;
  TaskDataset train;
  TaskDataset dev;
};

struct TransferabilityConfig {
  EncoderConfig model{.input_dim = 32, .hidden_dim = 32, .layers = 1};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t pretrain_steps = 300;
  double pretrain_lr = 1e-2;
  std::size_t pretrain_batch = 32;
  double finetune_lr = 1e-3;
  FinetuneSettings finetune;

  // Synthetic families: relatedness to a shared reference per seed.
  std::size_t input_dim = 32;
  std::size_t num_candidates = 4;
  struct Family {
    std::string name;
    double relatedness = 1.0;
    std::size_t train = 200;
    std::size_t dev = 500;
  };
  std::vector<Family> families;
  // Or fixed jsonl datasets (same for every seed).
  std::size_t feature_dim = 512;
  struct JsonlPair {
    std::string name;
    std::filesystem::path train;
    std::filesystem::path dev;
  };
  std::vector<JsonlPair> jsonl;

  void validate() const;
  static TransferabilityConfig from_json(const nlohmann::json& j);
};

TransferabilityConfig load_transferability_config(const std::filesystem::path& path);

std::vector<TransferDataset> build_transfer_datasets(const TransferabilityConfig& cfg, std::uint64_t seed);

// Cell (i, j): dev accuracy on j after pretraining on i and fine-tuning on j,
// minus the accuracy of fine-tuning on j from scratch. Mean over seeds; the
// diagonal is 0. Throws ConfigError for fewer than two datasets.
std::vector<std::vector<double>> transferability_matrix(const TransferabilityConfig& cfg);
std::vector<std::vector<double>> transferability_matrix(
    const std::vector<std::vector<TransferDataset>>& datasets_per_seed, const TransferabilityConfig& cfg);

}  // namespace metartl
