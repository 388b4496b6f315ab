#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metartl/grad.hpp"
#include "metartl/models.hpp"

namespace metartl {

// An ordered selection of K distinct source tasks.
struct Trajectory {
  std::vector<std::size_t> indices;
  double log_prob = 0.0;
  double reward = 0.0;  // R(tau): sum of the member rewards
};

// eps(step) = max(0, start * (1 - step / horizon)); horizon <= 0 keeps eps at start.
struct EpsilonSchedule {
  double start = 0.2;
  double horizon = 8000.0;
};

struct RLHyperparams {
  std::size_t trajectories = 4;  // N
  std::size_t length = 2;        // K
  EpsilonSchedule epsilon;
  double entropy_coef = 0.01;  // rho
  OptimizerSettings policy_optimizer{.kind = OptimizerKind::adamw, .lr = 1e-3, .weight_decay = 0.0};
  bool normalize_returns = false;
  bool freeze_policy = false;

  // Throws ConfigError.
  void validate(std::size_t num_tasks) const;
};

// r_j = L_o - L_s[j]. Throws NonFiniteLoss on a non-finite input.
std::vector<double> compute_rewards(double general_loss, std::span<const double> task_losses);

double epsilon_at(std::size_t step, const EpsilonSchedule& schedule = {});

// log prod_k (eps / (M - k + 1) + (1 - eps) * P[i_k] / (1 - sum_{z<k} P[i_z])).
// Throws DegenerateDistribution when a denominator is <= 1e-12, ConfigError
// for repeated or out-of-range indices.
double trajectory_log_prob(std::span<const double> probs, std::span<const std::size_t> indices, double epsilon);

// Same quantity on the tape, differentiable in `probs` (1 x M).
Var trajectory_log_prob(Tape& tape, Var probs, std::span<const std::size_t> indices, double epsilon);

Trajectory sample_trajectory(std::span<const double> probs, double epsilon, std::size_t length, std::uint64_t seed);

// Every ordered K-subset with its probability, in lexicographic order.
struct EnumeratedTrajectory {
  std::vector<std::size_t> indices;
  double probability;
};
std::vector<EnumeratedTrajectory> enumerate_trajectories(std::span<const double> probs, std::size_t length,
                                                         double epsilon);

// Indices of the k largest values, largest first; ties go to the lower index.
std::vector<std::size_t> top_k(std::span<const double> values, std::size_t k);

double trajectory_return(std::span<const std::size_t> indices, std::span<const double> rewards);

// Return of the greedy top-K trajectory under P.
double self_critic_baseline(std::span<const double> probs, std::span<const double> rewards, std::size_t length);

// C_i = (count_i + 1) / (N K), counting occurrences across all trajectories.
std::vector<double> estimate_weights(std::span<const Trajectory> trajectories, std::size_t num_tasks);

enum class WeightStrategy { uniform, random, greedy, temperature, rl };
std::string to_string(WeightStrategy s);
// Throws ConfigError for an unknown name.
WeightStrategy parse_weight_strategy(const std::string& name);

struct WeightContext {
  std::size_t num_tasks = 0;
  std::size_t length = 2;                          // K for greedy
  const std::vector<double>* rewards = nullptr;    // greedy
  const std::vector<double>* sizes = nullptr;      // temperature
  double omega = 1.0;                              // temperature
  const std::vector<Trajectory>* trajectories = nullptr;  // rl
  std::uint64_t seed = 0;                          // random
};

// Throws ConfigError when the mode's context is missing.
std::vector<double> strategy_weights(WeightStrategy mode, const WeightContext& ctx);

struct ReinforceReport {
  double objective = 0.0;  // mean advantage-weighted log-prob plus rho * H(P)
  double entropy = 0.0;
  std::vector<double> advantages;
};

// One ascent step on (1/N) sum_n (R_n - baseline) log f(tau_n) + rho H(P), where
// P is recomputed from `state` on the tape. The trajectory log-probs use `epsilon`.
ParameterVector reinforce_update(const PolicyNet& net, const ParameterVector& phi, const PolicyState& state,
                                 std::span<const Trajectory> trajectories, double baseline, double epsilon,
                                 const RLHyperparams& hp, OptimizerState& optimizer, ReinforceReport* report = nullptr);

// Policy network, its parameters and optimizer, and the recurrent state.
struct PolicyLearner {
  PolicyNet net;
  ParameterVector phi;
  OptimizerState optimizer;
  PolicyState state;
  std::size_t step = 0;

  static PolicyLearner create(const PolicyNetConfig& config, const RLHyperparams& hp, std::uint64_t seed);
};

struct PolicyRound {
  std::vector<double> probs;
  double epsilon = 0.0;
  std::vector<Trajectory> trajectories;
  std::vector<double> weights;
  PolicyState pre_state;
  PolicyState next_state;
};

// Runs the policy forward and samples N trajectories (state is not advanced).
PolicyRound policy_propose(const PolicyLearner& learner, const RLHyperparams& hp, std::uint64_t seed);

// Scores the round's trajectories against `rewards`, applies the REINFORCE
// step (unless frozen) and advances the recurrent state with the rewards.
ReinforceReport policy_feedback(PolicyLearner& learner, PolicyRound& round, std::span<const double> rewards,
                                const RLHyperparams& hp);

}  // namespace metartl
