#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metartl/grad.hpp"
#include "metartl/models.hpp"
#include "metartl/rl.hpp"
#include "metartl/tasks.hpp"

namespace metartl {

struct MetaHyperparams {
  double inner_lr = 1e-2;     // alpha
  double outer_lr = 0.5;      // beta
  double transfer_lr = 1e-3;  // gamma
  std::size_t inner_steps = 4;
  std::size_t support_size = 8;
  std::size_t query_size = 8;
  std::size_t target_batch = 32;  // samples drawn from the target per iteration
  std::size_t max_iterations = 2000;
  bool early_stop = true;
  std::size_t early_stop_window = 50;
  double early_stop_tol = 1e-4;

  // Throws ConfigError. inner_steps = 0 is accepted as a diagnostic mode.
  void validate() const;
};

enum class OuterAlgorithm { reptile, fomaml };

struct IterationRecord {
  std::size_t iteration = 0;
  double general_loss = 0.0;
  std::vector<double> task_losses;
  std::vector<double> rewards;
  std::vector<double> probs;  // distribution the sources were weighted or sampled by
  std::vector<double> weights;
  std::vector<std::size_t> sources;  // dataset index behind each branch
  double epsilon = 0.0;
  double post_update_loss = 0.0;

  bool operator==(const IterationRecord&) const = default;
};

// Forward-only choice NLL. Throws EmptyBatch.
double eval_loss(const MetaModel& model, const ParameterVector& params, std::span<const ChoiceInstance> batch);

// `steps` plain gradient steps of size alpha on `loss` starting from a copy of theta.
ParameterVector inner_adapt(const ParameterVector& theta, const LossFn& loss, double alpha, std::size_t steps);
ParameterVector inner_adapt(const MetaModel& model, const ParameterVector& theta,
                            std::span<const ChoiceInstance> support, double alpha, std::size_t steps);

// theta + beta (1/M) sum_i (branch_i - theta).
ParameterVector reptile_update(const ParameterVector& theta, std::span<const ParameterVector> branches, double beta);
// theta + beta sum_i C_i (branch_i - theta). Throws ConfigError on a negative weight.
ParameterVector weighted_update(const ParameterVector& theta, std::span<const ParameterVector> branches,
                                std::span<const double> weights, double beta);

// theta - beta sum_j c_j grad L_query_j(branch_j), the first-order MAML step.
ParameterVector fomaml_update(const MetaModel& model, const ParameterVector& theta,
                              std::span<const ParameterVector> branches,
                              std::span<const std::vector<ChoiceInstance>> query_sets, std::span<const double> weights,
                              double beta);
// Uniform c_j = 1/M.
ParameterVector fomaml_update(const MetaModel& model, const ParameterVector& theta,
                              std::span<const ParameterVector> branches,
                              std::span<const std::vector<ChoiceInstance>> query_sets, double beta);

struct MetaIterationConfig {
  const std::vector<TaskDataset>* sources = nullptr;
  const TaskDataset* target = nullptr;  // target training split
  MetaHyperparams meta;
  RLHyperparams rl;
  PolicyNetConfig policy;  // num_tasks is overridden by the source count
  WeightStrategy strategy = WeightStrategy::uniform;
  OuterAlgorithm outer = OuterAlgorithm::reptile;
  // Draw each branch's source from temperature_probs instead of one branch
  // per source; the update stays uniform.
  bool temperature_sampling = false;
  double omega = 1.0;
  // Run the policy but apply 1/M weights (for equivalence checks).
  bool stub_uniform_weights = false;

  // Throws ConfigError.
  void validate() const;
};

struct MetaState {
  ParameterVector theta;
  std::optional<PolicyLearner> policy;  // present for the rl strategy
  std::size_t iteration = 0;
};

// Episodes and the target batch that run_meta_iteration draws at `iteration`.
struct IterationSamples {
  std::vector<std::size_t> sources;
  std::vector<Episode> episodes;
  std::vector<ChoiceInstance> target_batch;
};
IterationSamples sample_iteration(const MetaIterationConfig& cfg, std::size_t iteration, std::uint64_t seed);

MetaState make_meta_state(const MetaModel& model, const MetaIterationConfig& cfg, std::uint64_t seed);

// One pass of the meta loop: episodes, general and task-specific losses,
// weights, outer update, rewards and the policy step. Advances `state`.
IterationRecord run_meta_iteration(const MetaModel& model, MetaState& state, const MetaIterationConfig& cfg,
                                   std::uint64_t seed);

// Stops once the moving average of the last `window` losses improves on the
// previous window's average by less than `tol`.
class EarlyStopper {
 public:
  EarlyStopper(std::size_t window, double tol);
  // Returns true when training should stop.
  bool observe(double loss);

 private:
  std::size_t window_;
  double tol_;
  std::deque<double> history_;
};

// Called after each fine-tuning step with the 1-based step count.
using FinetuneObserver = std::function<void(std::size_t step, const ParameterVector& params)>;

// B optimizer steps on mini-batches drawn from `target_train`.
ParameterVector transfer_finetune(const MetaModel& model, const ParameterVector& theta,
                                  const TaskDataset& target_train, double gamma, std::size_t batches,
                                  std::size_t batch_size, std::uint64_t seed,
                                  OptimizerKind kind = OptimizerKind::adamw, const FinetuneObserver& observe = {});

}  // namespace metartl
