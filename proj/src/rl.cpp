#include "metartl/rl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metartl/errors.hpp"
#include "metartl/rng.hpp"
#include "metartl/tasks.hpp"

namespace metartl {

namespace {

constexpr double kMassFloor = 1e-12;

void check_indices(std::size_t m, std::span<const std::size_t> indices) {
  if (indices.empty() || indices.size() > m) throw ConfigError("trajectory length must be in [1, M]");
  std::vector<bool> used(m, false);
  for (auto i : indices) {
    if (i >= m) throw ConfigError("trajectory index out of range");
    if (used[i]) throw ConfigError("trajectory indices must be distinct");
    used[i] = true;
  }
}

void check_epsilon(double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must be in [0, 1]");
}

}  // namespace

void RLHyperparams::validate(std::size_t num_tasks) const {
  if (trajectories == 0) throw ConfigError("rl: trajectories (N) must be >= 1");
  if (length == 0 || length > num_tasks) throw ConfigError("rl: trajectory length (K) must be in [1, M]");
  if (!(epsilon.start >= 0.0 && epsilon.start <= 1.0)) throw ConfigError("rl: epsilon start must be in [0, 1]");
  if (!(entropy_coef >= 0.0) || !std::isfinite(entropy_coef)) throw ConfigError("rl: entropy coefficient must be >= 0");
  if (!(policy_optimizer.lr >= 0.0)) throw ConfigError("rl: policy lr must be >= 0");
}

std::vector<double> compute_rewards(double general_loss, std::span<const double> task_losses) {
  if (!std::isfinite(general_loss)) throw NonFiniteLoss(general_loss, "compute_rewards: general loss");
  std::vector<double> r(task_losses.size());
  for (std::size_t j = 0; j < r.size(); ++j) {
    if (!std::isfinite(task_losses[j])) throw NonFiniteLoss(task_losses[j], "compute_rewards: task loss");
    r[j] = general_loss - task_losses[j];
  }
  return r;
}

double epsilon_at(std::size_t step, const EpsilonSchedule& schedule) {
  if (!(schedule.horizon > 0.0)) return schedule.start;
  return std::max(0.0, schedule.start * (1.0 - static_cast<double>(step) / schedule.horizon));
}

// ---------------------------------------------------------------------------
// Trajectory probabilities

double trajectory_log_prob(std::span<const double> probs, std::span<const std::size_t> indices, double epsilon) {
  const std::size_t m = probs.size();
  check_indices(m, indices);
  check_epsilon(epsilon);
  double log_p = 0.0;
  double prefix = 0.0;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const double denom = 1.0 - prefix;
    if (denom <= kMassFloor) throw DegenerateDistribution("trajectory prefix exhausted the probability mass");
    const double term = epsilon / static_cast<double>(m - k) + (1.0 - epsilon) * probs[indices[k]] / denom;
    log_p += std::log(term);
    prefix += probs[indices[k]];
  }
  return log_p;
}

Var trajectory_log_prob(Tape& tape, Var probs, std::span<const std::size_t> indices, double epsilon) {
  const std::size_t m = tape.rows(probs) * tape.cols(probs);
  check_indices(m, indices);
  check_epsilon(epsilon);
  std::vector<Var> terms;
  std::vector<Var> chosen;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Var p = tape.slice(probs, indices[k], 1, 1);
    Var ratio = p;
    if (!chosen.empty()) {
      const Var denom = tape.affine(tape.sum(tape.concat(chosen, 1, chosen.size())), -1.0, 1.0);
      if (tape.scalar_value(denom) <= kMassFloor) {
        throw DegenerateDistribution("trajectory prefix exhausted the probability mass");
      }
      ratio = tape.div(p, denom);
    }
    terms.push_back(tape.log(tape.affine(ratio, 1.0 - epsilon, epsilon / static_cast<double>(m - k))));
    chosen.push_back(p);
  }
  return tape.sum(tape.concat(terms, 1, terms.size()));
}

Trajectory sample_trajectory(std::span<const double> probs, double epsilon, std::size_t length, std::uint64_t seed) {
  const std::size_t m = probs.size();
  if (length == 0 || length > m) throw ConfigError("trajectory length must be in [1, M]");
  check_epsilon(epsilon);
  Rng rng(seed);
  std::vector<std::size_t> remaining(m);
  std::iota(remaining.begin(), remaining.end(), 0);
  Trajectory traj;
  for (std::size_t k = 0; k < length; ++k) {
    std::size_t pick = 0;
    const double explore = rng.uniform();
    if (explore < epsilon) {
      pick = rng.index(remaining.size());
    } else {
      double mass = 0.0;
      for (auto i : remaining) mass += probs[i];
      if (mass <= kMassFloor) throw DegenerateDistribution("no probability mass left to sample from");
      const double u = rng.uniform() * mass;
      double acc = 0.0;
      pick = remaining.size() - 1;
      for (std::size_t r = 0; r < remaining.size(); ++r) {
        acc += probs[remaining[r]];
        if (u < acc) {
          pick = r;
          break;
        }
      }
      // Never land on a zero-probability task through rounding at the tail.
      while (probs[remaining[pick]] <= 0.0 && pick > 0) --pick;
    }
    traj.indices.push_back(remaining[pick]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  traj.log_prob = trajectory_log_prob(probs, traj.indices, epsilon);
  return traj;
}

std::vector<EnumeratedTrajectory> enumerate_trajectories(std::span<const double> probs, std::size_t length,
                                                         double epsilon) {
  const std::size_t m = probs.size();
  if (length == 0 || length > m) throw ConfigError("trajectory length must be in [1, M]");
  std::vector<EnumeratedTrajectory> out;
  std::vector<std::size_t> current;
  std::vector<bool> used(m, false);
  auto recurse = [&](auto&& self) -> void {
    if (current.size() == length) {
      out.push_back({current, std::exp(trajectory_log_prob(probs, current, epsilon))});
      return;
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (used[i]) continue;
      used[i] = true;
      current.push_back(i);
      self(self);
      current.pop_back();
      used[i] = false;
    }
  };
  recurse(recurse);
  return out;
}

std::vector<std::size_t> top_k(std::span<const double> values, std::size_t k) {
  if (k > values.size()) throw ConfigError("top_k: k exceeds the number of values");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  order.resize(k);
  return order;
}

double trajectory_return(std::span<const std::size_t> indices, std::span<const double> rewards) {
  double r = 0.0;
  for (auto i : indices) r += rewards[i];
  return r;
}

double self_critic_baseline(std::span<const double> probs, std::span<const double> rewards, std::size_t length) {
  if (probs.size() != rewards.size()) throw ShapeMismatch("self_critic_baseline: probs and rewards differ in length");
  return trajectory_return(top_k(probs, length), rewards);
}

std::vector<double> estimate_weights(std::span<const Trajectory> trajectories, std::size_t num_tasks) {
  if (trajectories.empty()) throw ConfigError("estimate_weights: no trajectories");
  const std::size_t k = trajectories.front().indices.size();
  std::vector<double> counts(num_tasks, 0.0);
  for (const auto& t : trajectories) {
    if (t.indices.size() != k) throw ShapeMismatch("estimate_weights: trajectories differ in length");
    for (auto i : t.indices) {
      if (i >= num_tasks) throw ConfigError("estimate_weights: index out of range");
      counts[i] += 1.0;
    }
  }
  const double nk = static_cast<double>(trajectories.size() * k);
  for (auto& c : counts) c = (c + 1.0) / nk;
  return counts;
}

// ---------------------------------------------------------------------------
// Weighting strategies

std::string to_string(WeightStrategy s) {
  switch (s) {
    case WeightStrategy::uniform: return "uniform";
    case WeightStrategy::random: return "random";
    case WeightStrategy::greedy: return "greedy";
    case WeightStrategy::temperature: return "temperature";
    case WeightStrategy::rl: return "rl";
  }
  return "unknown";
}

WeightStrategy parse_weight_strategy(const std::string& name) {
  for (auto s : {WeightStrategy::uniform, WeightStrategy::random, WeightStrategy::greedy, WeightStrategy::temperature,
                 WeightStrategy::rl}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown weight strategy '" + name + "'");
}

std::vector<double> strategy_weights(WeightStrategy mode, const WeightContext& ctx) {
  const std::size_t m = ctx.num_tasks;
  if (m == 0) throw ConfigError("strategy_weights: no tasks");
  switch (mode) {
    case WeightStrategy::uniform:
      return std::vector<double>(m, 1.0 / static_cast<double>(m));
    case WeightStrategy::random: {
      Rng rng(ctx.seed);
      std::vector<double> w(m);
      double total = 0.0;
      for (auto& x : w) total += (x = rng.exponential());
      for (auto& x : w) x /= total;
      return w;
    }
    case WeightStrategy::greedy: {
      if (!ctx.rewards || ctx.rewards->size() != m) throw ConfigError("greedy weights need M rewards");
      std::vector<double> w(m, 0.0);
      for (auto i : top_k(*ctx.rewards, ctx.length)) w[i] = 1.0 / static_cast<double>(ctx.length);
      return w;
    }
    case WeightStrategy::temperature:
      if (!ctx.sizes || ctx.sizes->size() != m) throw ConfigError("temperature weights need M dataset sizes");
      return temperature_probs(*ctx.sizes, ctx.omega);
    case WeightStrategy::rl:
      if (!ctx.trajectories) throw ConfigError("rl weights need sampled trajectories");
      return estimate_weights(*ctx.trajectories, m);
  }
  throw ConfigError("strategy_weights: unknown mode");
}

// ---------------------------------------------------------------------------
// Policy gradient

ParameterVector reinforce_update(const PolicyNet& net, const ParameterVector& phi, const PolicyState& state,
                                 std::span<const Trajectory> trajectories, double baseline, double epsilon,
                                 const RLHyperparams& hp, OptimizerState& optimizer, ReinforceReport* report) {
  if (trajectories.empty()) throw EmptyBatch("reinforce_update: no trajectories");
  if (!phi.same_layout(net.layout())) throw ShapeMismatch("reinforce_update: phi layout differs from the network");
  net.validate(state);
  if (!std::isfinite(baseline)) throw NonFiniteLoss(baseline, "reinforce_update: baseline");

  const std::size_t n = trajectories.size();
  std::vector<double> returns(n);
  for (std::size_t i = 0; i < n; ++i) returns[i] = trajectories[i].reward;
  double shift = 0.0;
  double scale = 1.0;
  if (hp.normalize_returns && n > 1) {
    const double mean = std::accumulate(returns.begin(), returns.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double r : returns) var += (r - mean) * (r - mean);
    var /= static_cast<double>(n);
    if (var >= 1e-12) {
      shift = mean;
      scale = 1.0 / std::sqrt(var);
    }
  }
  std::vector<double> advantages(n);
  for (std::size_t i = 0; i < n; ++i) advantages[i] = (returns[i] - shift) * scale - (baseline - shift) * scale;

  double entropy = 0.0;
  const LossFn objective = [&](Tape& tape, Var params) {
    const auto out = net.forward(tape, params, net.constant_state(tape, state));
    std::vector<Var> terms;
    for (std::size_t i = 0; i < n; ++i) {
      const Var lp = trajectory_log_prob(tape, out.probs, trajectories[i].indices, epsilon);
      terms.push_back(tape.affine(lp, advantages[i] / static_cast<double>(n), 0.0));
    }
    const Var h = tape.affine(tape.sum(tape.mul(out.probs, tape.log(out.probs))), -1.0, 0.0);
    entropy = tape.scalar_value(h);
    terms.push_back(tape.affine(h, hp.entropy_coef, 0.0));
    // Minimize the negated objective.
    return tape.affine(tape.sum(tape.concat(terms, 1, terms.size())), -1.0, 0.0);
  };
  auto lg = evaluate_with_gradients(phi, objective);
  if (report) {
    report->objective = -lg.loss;
    report->entropy = entropy;
    report->advantages = advantages;
  }
  return optimizer_step(optimizer, phi, lg.grad);
}

PolicyLearner PolicyLearner::create(const PolicyNetConfig& config, const RLHyperparams& hp, std::uint64_t seed) {
  PolicyNet net(config);
  auto phi = net.init_params(seed);
  auto opt = OptimizerState::create(hp.policy_optimizer, phi.size());
  auto state = net.initial_state();
  return PolicyLearner{std::move(net), std::move(phi), std::move(opt), std::move(state), 0};
}

PolicyRound policy_propose(const PolicyLearner& learner, const RLHyperparams& hp, std::uint64_t seed) {
  PolicyRound round;
  round.pre_state = learner.state;
  auto [probs, next] = learner.net.step(learner.phi, learner.state);
  round.probs = std::move(probs);
  round.next_state = std::move(next);
  round.epsilon = epsilon_at(learner.step, hp.epsilon);
  for (std::size_t i = 0; i < hp.trajectories; ++i) {
    round.trajectories.push_back(sample_trajectory(round.probs, round.epsilon, hp.length, derive_seed(seed, {i})));
  }
  round.weights = estimate_weights(round.trajectories, round.probs.size());
  return round;
}

ReinforceReport policy_feedback(PolicyLearner& learner, PolicyRound& round, std::span<const double> rewards,
                                const RLHyperparams& hp) {
  if (rewards.size() != round.probs.size()) throw ShapeMismatch("policy_feedback: reward count differs from M");
  for (auto& t : round.trajectories) t.reward = trajectory_return(t.indices, rewards);
  const double baseline = self_critic_baseline(round.probs, rewards, hp.length);
  ReinforceReport report;
  if (!hp.freeze_policy) {
    learner.phi = reinforce_update(learner.net, learner.phi, round.pre_state, round.trajectories, baseline,
                                   round.epsilon, hp, learner.optimizer, &report);
  }
  learner.state = round.next_state;
  learner.state.prev_rewards.assign(rewards.begin(), rewards.end());
  ++learner.step;
  return report;
}

}  // namespace metartl
