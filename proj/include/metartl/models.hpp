#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <utility>
#include <vector>

#include "metartl/grad.hpp"

namespace metartl {

// One multiple-choice question: N candidate feature rows and a gold index.
// Different instances may carry different N.
struct ChoiceInstance {
  std::size_t dim = 0;
  std::vector<double> features;  // N x dim, row-major
  std::size_t label = 0;

  std::size_t num_candidates() const { return dim == 0 ? 0 : features.size() / dim; }
  std::span<const double> candidate(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }

  // Validates N >= 2, equal dims and label < N. Throws ConfigError.
  static ChoiceInstance make(const std::vector<std::vector<double>>& candidates, std::size_t label);
};

// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_lowest(std::span<const double> xs);

// Softmax over candidate scores. Throws NonFiniteLoss on non-finite input.
std::vector<double> answer_distribution(std::span<const double> scores);

struct EncoderConfig {
  std::size_t input_dim = 32;
  std::size_t hidden_dim = 64;
  // Number of tanh layers; 0 means the identity encoder (needs input_dim == hidden_dim).
  std::size_t layers = 2;
};

// Feed-forward encoder followed by the scoring head
//   score(x) = W2 tanh(W1 encode(x) + b1),
// with one scalar per candidate and a softmax across candidates.
class MetaModel {
 public:
  explicit MetaModel(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }
  // Zero-valued vector with this model's segment layout.
  const ParameterVector& layout() const { return layout_; }
  // Glorot-uniform weights, zero biases.
  ParameterVector init_params(std::uint64_t seed) const;

  // Scores for each row of `features` (n x input_dim) as an n x 1 column.
  Var scores(Tape& tape, Var params, Var features) const;
  // Mean gold negative log-likelihood over `batch`. Throws EmptyBatch.
  Var batch_loss(Tape& tape, Var params, std::span<const ChoiceInstance> batch) const;
  // Captures `batch` by reference; the caller keeps it alive.
  LossFn loss_fn(std::span<const ChoiceInstance> batch) const;

  std::vector<double> score_candidates(const ParameterVector& params, const ChoiceInstance& inst) const;
  // Forward-only loss; pure.
  double choice_nll_loss(const ParameterVector& params, std::span<const ChoiceInstance> batch) const;
  double accuracy(const ParameterVector& params, std::span<const ChoiceInstance> batch) const;

 private:
  void check_dims(const ChoiceInstance& inst) const;

  EncoderConfig config_;
  ParameterVector layout_;
};

struct PolicyNetConfig {
  std::size_t num_tasks = 4;
  std::size_t hidden_dim = 32;
  std::size_t window = 8;
  std::size_t ffn_dim = 32;
};

// Recurrent controller memory between meta iterations.
struct PolicyState {
  std::vector<double> cell;
  std::vector<double> hidden;
  std::deque<std::vector<double>> window;  // most recent hidden vectors, oldest first
  std::vector<double> prev_probs;
  std::vector<double> prev_rewards;
};

// LSTM cell -> dot-product attention over the last `window` hidden states
// (including the current one) -> two-layer FFN -> softmax over the M tasks.
// The cell input at each step is concat(P^{t-1}, r^{t-1}).
class PolicyNet {
 public:
  explicit PolicyNet(PolicyNetConfig config);

  const PolicyNetConfig& config() const { return config_; }
  const ParameterVector& layout() const { return layout_; }
  // Uniform in [-0.08, 0.08].
  ParameterVector init_params(std::uint64_t seed) const;

  // Zero cell and hidden, empty window, uniform P^0, zero r^0.
  PolicyState initial_state() const;
  // Throws ShapeMismatch for a state built for a different M or size.
  void validate(const PolicyState& state) const;

  struct TapeState {
    Var cell;
    Var hidden;
    std::vector<Var> window;
    Var prev_probs;
    Var prev_rewards;
  };
  struct TapeStep {
    Var logits;
    Var probs;
    TapeState next;  // next.prev_probs = probs; prev_rewards carried over
  };

  TapeState constant_state(Tape& tape, const PolicyState& state) const;
  TapeStep forward(Tape& tape, Var phi, const TapeState& state) const;

  // Returns P^t and the advanced state (P^{t-1} <- P^t; rewards untouched).
  std::pair<std::vector<double>, PolicyState> step(const ParameterVector& phi, const PolicyState& state) const;

 private:
  PolicyNetConfig config_;
  ParameterVector layout_;
};

}  // namespace metartl
