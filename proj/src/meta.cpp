#include "metartl/meta.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metartl/errors.hpp"
#include "metartl/rng.hpp"

namespace metartl {

namespace {

enum : std::uint64_t { kEpisode = 1, kTargetBatch = 2, kSourcePick = 3, kRandomWeights = 4, kPolicy = 5, kFinetune = 6 };

void check_branches(const ParameterVector& theta, std::span<const ParameterVector> branches) {
  if (branches.empty()) throw ConfigError("meta update needs at least one branch");
  for (const auto& b : branches) {
    if (!b.same_layout(theta)) throw ShapeMismatch("branch layout differs from the meta model");
  }
}

std::size_t pick_index(std::span<const double> probs, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

}  // namespace

void MetaHyperparams::validate() const {
  if (!(inner_lr >= 0.0) || !(outer_lr >= 0.0) || !(transfer_lr >= 0.0)) {
    throw ConfigError("meta: learning rates must be non-negative");
  }
  if (support_size == 0) throw ConfigError("meta: support_size must be >= 1");
  if (target_batch == 0) throw ConfigError("meta: target_batch must be >= 1");
  if (max_iterations == 0) throw ConfigError("meta: max_iterations must be >= 1");
  if (early_stop && early_stop_window == 0) throw ConfigError("meta: early_stop_window must be >= 1");
}

double eval_loss(const MetaModel& model, const ParameterVector& params, std::span<const ChoiceInstance> batch) {
  if (batch.empty()) throw EmptyBatch("eval_loss: empty batch");
  return model.choice_nll_loss(params, batch);
}

ParameterVector inner_adapt(const ParameterVector& theta, const LossFn& loss, double alpha, std::size_t steps) {
  ParameterVector p = theta;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto lg = evaluate_with_gradients(p, loss);
    for (std::size_t i = 0; i < p.size(); ++i) p.values()[i] -= alpha * lg.grad[i];
    p.require_finite("inner_adapt");
  }
  return p;
}

ParameterVector inner_adapt(const MetaModel& model, const ParameterVector& theta,
                            std::span<const ChoiceInstance> support, double alpha, std::size_t steps) {
  if (support.empty()) throw EmptyBatch("inner_adapt: empty support set");
  return inner_adapt(theta, model.loss_fn(support), alpha, steps);
}

ParameterVector reptile_update(const ParameterVector& theta, std::span<const ParameterVector> branches, double beta) {
  check_branches(theta, branches);
  const std::vector<double> uniform(branches.size(), 1.0 / static_cast<double>(branches.size()));
  return blend_parameters(theta, branches, uniform, beta);
}

ParameterVector weighted_update(const ParameterVector& theta, std::span<const ParameterVector> branches,
                                std::span<const double> weights, double beta) {
  check_branches(theta, branches);
  if (weights.size() != branches.size()) throw ShapeMismatch("weighted_update: one weight per branch required");
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("weighted_update: weights must be non-negative");
  }
  return blend_parameters(theta, branches, weights, beta);
}

ParameterVector fomaml_update(const MetaModel& model, const ParameterVector& theta,
                              std::span<const ParameterVector> branches,
                              std::span<const std::vector<ChoiceInstance>> query_sets, std::span<const double> weights,
                              double beta) {
  check_branches(theta, branches);
  if (query_sets.size() != branches.size() || weights.size() != branches.size()) {
    throw ShapeMismatch("fomaml_update: one query set and weight per branch required");
  }
  std::vector<double> acc(theta.size(), 0.0);
  for (std::size_t j = 0; j < branches.size(); ++j) {
    if (query_sets[j].empty()) throw EmptyBatch("fomaml_update: empty query set");
    if (!(weights[j] >= 0.0)) throw ConfigError("fomaml_update: weights must be non-negative");
    const auto lg = evaluate_with_gradients(branches[j], model.loss_fn(query_sets[j]));
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[j] * lg.grad[i];
  }
  ParameterVector out = theta;
  for (std::size_t i = 0; i < acc.size(); ++i) out.values()[i] = theta[i] - beta * acc[i];
  out.require_finite("fomaml_update");
  return out;
}

ParameterVector fomaml_update(const MetaModel& model, const ParameterVector& theta,
                              std::span<const ParameterVector> branches,
                              std::span<const std::vector<ChoiceInstance>> query_sets, double beta) {
  const std::vector<double> uniform(branches.size(), 1.0 / static_cast<double>(std::max<std::size_t>(1, branches.size())));
  return fomaml_update(model, theta, branches, query_sets, uniform, beta);
}

// ---------------------------------------------------------------------------
// Meta iteration

void MetaIterationConfig::validate() const {
  if (!sources || sources->empty()) throw ConfigError("meta: at least one source dataset is required");
  if (!target || target->size() == 0) throw ConfigError("meta: a non-empty target dataset is required");
  meta.validate();
  const std::size_t m = sources->size();
  if (strategy == WeightStrategy::rl || strategy == WeightStrategy::greedy) rl.validate(m);
  if (outer == OuterAlgorithm::fomaml && meta.query_size == 0) throw ConfigError("meta: fomaml needs query_size >= 1");
  for (const auto& s : *sources) {
    if (s.size() < meta.support_size + meta.query_size) {
      throw ConfigError("meta: source '" + s.name + "' is smaller than support + query");
    }
    if (s.dim() != target->dim()) throw ConfigError("meta: source '" + s.name + "' feature dim differs from target");
  }
  if (temperature_sampling && !(omega > 0.0)) throw ConfigError("meta: omega must be positive");
}

IterationSamples sample_iteration(const MetaIterationConfig& cfg, std::size_t iteration, std::uint64_t seed) {
  const auto& sources = *cfg.sources;
  const std::size_t m = sources.size();
  const std::uint64_t it = iteration;
  IterationSamples out;
  out.sources.resize(m);
  std::iota(out.sources.begin(), out.sources.end(), 0);
  if (cfg.temperature_sampling) {
    std::vector<double> sizes(m);
    for (std::size_t j = 0; j < m; ++j) sizes[j] = static_cast<double>(sources[j].size());
    const auto tp = temperature_probs(sizes, cfg.omega);
    Rng rng(derive_seed(seed, {it, kSourcePick}));
    for (auto& s : out.sources) s = pick_index(tp, rng.uniform());
  }
  for (std::size_t j = 0; j < m; ++j) {
    out.episodes.push_back(sample_episode(sources[out.sources[j]], cfg.meta.support_size, cfg.meta.query_size,
                                          derive_seed(seed, {it, kEpisode, j})));
  }
  const std::size_t bs = std::min(cfg.meta.target_batch, cfg.target->size());
  out.target_batch = sample_target_batch(*cfg.target, bs, derive_seed(seed, {it, kTargetBatch}));
  return out;
}

MetaState make_meta_state(const MetaModel& model, const MetaIterationConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  MetaState state;
  state.theta = model.init_params(derive_seed(seed, {0x7E7A}));
  if (cfg.strategy == WeightStrategy::rl) {
    PolicyNetConfig pc = cfg.policy;
    pc.num_tasks = cfg.sources->size();
    state.policy = PolicyLearner::create(pc, cfg.rl, derive_seed(seed, {0x9011C7}));
  }
  return state;
}

IterationRecord run_meta_iteration(const MetaModel& model, MetaState& state, const MetaIterationConfig& cfg,
                                   std::uint64_t seed) {
  const auto& sources = *cfg.sources;
  const std::size_t m = sources.size();
  const std::uint64_t it = state.iteration;
  const auto& hp = cfg.meta;
  if (cfg.strategy == WeightStrategy::rl && !state.policy) throw ConfigError("meta: rl strategy without a policy");

  IterationRecord rec;
  rec.iteration = it;
  auto samples = sample_iteration(cfg, it, seed);
  auto& episodes = samples.episodes;
  const auto& target_batch = samples.target_batch;
  rec.sources = samples.sources;
  std::vector<double> sizes(m);
  for (std::size_t j = 0; j < m; ++j) sizes[j] = static_cast<double>(sources[j].size());
  rec.general_loss = eval_loss(model, state.theta, target_batch);

  std::vector<ParameterVector> branches;
  branches.reserve(m);
  for (std::size_t j = 0; j < m; ++j) {
    branches.push_back(inner_adapt(model, state.theta, episodes[j].support, hp.inner_lr, hp.inner_steps));
    rec.task_losses.push_back(eval_loss(model, branches.back(), target_batch));
  }
  rec.rewards = compute_rewards(rec.general_loss, rec.task_losses);

  std::optional<PolicyRound> round;
  const std::vector<double> uniform(m, 1.0 / static_cast<double>(m));
  switch (cfg.strategy) {
    case WeightStrategy::uniform:
      rec.weights = uniform;
      rec.probs = cfg.temperature_sampling ? temperature_probs(sizes, cfg.omega) : uniform;
      break;
    case WeightStrategy::random:
      rec.weights = strategy_weights(cfg.strategy, {.num_tasks = m, .seed = derive_seed(seed, {it, kRandomWeights})});
      rec.probs = rec.weights;
      break;
    case WeightStrategy::greedy:
      rec.weights = strategy_weights(cfg.strategy, {.num_tasks = m, .length = cfg.rl.length, .rewards = &rec.rewards});
      rec.probs = rec.weights;
      break;
    case WeightStrategy::temperature:
      rec.weights = strategy_weights(cfg.strategy, {.num_tasks = m, .sizes = &sizes, .omega = cfg.omega});
      rec.probs = rec.weights;
      break;
    case WeightStrategy::rl:
      round = policy_propose(*state.policy, cfg.rl, derive_seed(seed, {it, kPolicy}));
      rec.probs = round->probs;
      rec.weights = round->weights;
      rec.epsilon = round->epsilon;
      break;
  }
  if (cfg.stub_uniform_weights) rec.weights = uniform;

  const bool plain_uniform = cfg.strategy == WeightStrategy::uniform || cfg.stub_uniform_weights;
  if (cfg.outer == OuterAlgorithm::reptile) {
    state.theta = plain_uniform ? reptile_update(state.theta, branches, hp.outer_lr)
                                : weighted_update(state.theta, branches, rec.weights, hp.outer_lr);
  } else {
    std::vector<std::vector<ChoiceInstance>> queries;
    for (auto& ep : episodes) queries.push_back(std::move(ep.query));
    state.theta = plain_uniform ? fomaml_update(model, state.theta, branches, queries, hp.outer_lr)
                                : fomaml_update(model, state.theta, branches, queries, rec.weights, hp.outer_lr);
  }

  if (round) policy_feedback(*state.policy, *round, rec.rewards, cfg.rl);
  rec.post_update_loss = eval_loss(model, state.theta, target_batch);
  ++state.iteration;
  return rec;
}

EarlyStopper::EarlyStopper(std::size_t window, double tol) : window_(window), tol_(tol) {
  if (window == 0) throw ConfigError("early stop window must be >= 1");
}

bool EarlyStopper::observe(double loss) {
  history_.push_back(loss);
  if (history_.size() > 2 * window_) history_.pop_front();
  if (history_.size() < 2 * window_) return false;
  double previous = 0.0;
  double recent = 0.0;
  for (std::size_t i = 0; i < window_; ++i) {
    previous += history_[i];
    recent += history_[window_ + i];
  }
  return (previous - recent) / static_cast<double>(window_) < tol_;
}

ParameterVector transfer_finetune(const MetaModel& model, const ParameterVector& theta,
                                  const TaskDataset& target_train, double gamma, std::size_t batches,
                                  std::size_t batch_size, std::uint64_t seed, OptimizerKind kind,
                                  const FinetuneObserver& observe) {
  if (batches == 0) throw ConfigError("transfer_finetune: need at least one batch");
  OptimizerSettings settings;
  settings.kind = kind;
  settings.lr = gamma;
  auto opt = OptimizerState::create(settings, theta.size());
  ParameterVector p = theta;
  for (std::uint64_t b = 0; b < batches; ++b) {
    const auto batch = sample_target_batch(target_train, batch_size, derive_seed(seed, {b, kFinetune}));
    const auto lg = evaluate_with_gradients(p, model.loss_fn(batch));
    p = optimizer_step(opt, std::move(p), lg.grad);
    if (observe) observe(b + 1, p);
  }
  return p;
}

}  // namespace metartl
