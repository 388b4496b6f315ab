#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace metartl {

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Segment&) const = default;
};

// Flat parameter store with named row-major segments. Segments always
// partition [0, size()) in insertion order.
class ParameterVector {
 public:
  ParameterVector() = default;

  // Appends a zero-initialized rows x cols segment and returns its offset.
  std::size_t add_segment(std::string name, std::size_t rows, std::size_t cols);

  const Segment& segment(std::string_view name) const;
  const std::vector<Segment>& segments() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> segment_values(std::string_view name);
  std::span<const double> segment_values(std::string_view name) const;

  std::size_t size() const { return values_.size(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool same_layout(const ParameterVector& other) const;
  bool all_finite() const;
  // Throws NonFiniteLoss naming `where` if any entry is NaN or Inf.
  void require_finite(const std::string& where) const;

  bool operator==(const ParameterVector& other) const;

  // Single-segment vector, convenient for small analytic tests.
  static ParameterVector from_values(std::vector<double> values, std::string name = "x");

 private:
  void detach_layout();

  std::vector<double> values_;
  // Shared between copies; cloned before mutation.
  std::shared_ptr<std::vector<Segment>> layout_;
};

// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

// Single-use reverse-mode tape over small dense row-major matrices.
// Not thread-safe; build one tape per evaluation.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(std::vector<double> values, std::size_t rows, std::size_t cols);
  Var constant(std::vector<double> values, std::size_t rows, std::size_t cols);
  Var scalar(double value) { return constant({value}, 1, 1); }

  // b may have the same shape as a, or be a single row broadcast over a's rows.
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  // (n x k) * (k x m)
  Var matmul(Var a, Var b);
  // (n x k) * (m x k)^T
  Var matmul_nt(Var a, Var b);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var log(Var a);
  // scale * a + shift, elementwise.
  Var affine(Var a, double scale, double shift);
  // 1 x 1 sum of all entries.
  Var sum(Var a);
  // Row-wise softmax.
  Var softmax(Var a);
  // Mean negative log-likelihood of grouped softmax choices. `scores` is a
  // flat column of candidate scores; group g owns
  // [group_offsets[g], group_offsets[g+1]) and its gold index is labels[g].
  Var softmax_log_loss(Var scores, std::span<const std::size_t> group_offsets,
                       std::span<const std::size_t> labels);
  // Concatenates the flat contents of `parts` and views them as rows x cols.
  Var concat(std::span<const Var> parts, std::size_t rows, std::size_t cols);
  // Contiguous flat range [offset, offset + rows*cols) viewed as rows x cols.
  Var slice(Var a, std::size_t offset, std::size_t rows, std::size_t cols);

  std::span<const double> value(Var v) const { return nodes_[v.id].value; }
  double scalar_value(Var v) const;
  std::size_t rows(Var v) const { return nodes_[v.id].rows; }
  std::size_t cols(Var v) const { return nodes_[v.id].cols; }

  // Seeds d(out)/d(out) = 1 and propagates. `out` must be 1 x 1.
  void backward(Var out);
  // Gradient of the last backward() output with respect to v; zeros for
  // nodes the output does not depend on.
  std::span<const double> grad(Var v) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool needs_grad = false;
    std::function<void(Tape&, std::size_t)> backprop;
  };

  Var push(std::vector<double> value, std::size_t rows, std::size_t cols, bool needs_grad,
           std::function<void(Tape&, std::size_t)> backprop);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Node& node(Var v) { return nodes_[v.id]; }

  std::vector<Node> nodes_;
};

// Loss built on a tape from the flat parameter leaf (size() x 1).
using LossFn = std::function<Var(Tape&, Var params)>;

// Slice of the flat parameter leaf holding segment `name`.
Var param_segment(Tape& tape, Var params, const ParameterVector& layout, std::string_view name);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// Throws NonFiniteLoss if the loss is not finite.
LossAndGrad evaluate_with_gradients(const ParameterVector& params, const LossFn& loss_fn);
// Forward pass only; the parameters enter the tape as constants.
double evaluate_loss(const ParameterVector& params, const LossFn& loss_fn);

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  std::vector<std::size_t> flagged;
  double max_rel_error = 0.0;
  double tol = 0.0;

  bool passed() const { return flagged.empty(); }
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps
// coordinates whose true gradient is ~0 from dominating on round-off.
inline constexpr double kGradCheckFloor = 1e-4;

// Compares reverse-mode gradients against central differences with step h.
// Throws NondeterministicLoss if two identical evaluations disagree.
GradCheckReport finite_diff_check(const ParameterVector& params, const LossFn& loss_fn,
                                  double h, double tol);
// Same, against a caller-supplied analytic gradient.
GradCheckReport finite_diff_check(const ParameterVector& params, const LossFn& loss_fn,
                                  std::span<const double> analytic, double h, double tol);

enum class OptimizerKind { sgd, adamw };

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  OptimizerSettings settings;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  static OptimizerState create(const OptimizerSettings& settings, std::size_t n);
};

// One descent step. AdamW uses bias-corrected moments and decoupled weight
// decay; SGD is params - lr * grad.
ParameterVector optimizer_step(OptimizerState& state, ParameterVector params,
                               std::span<const double> grad);

// theta + beta * sum_i coeffs[i] * (branches[i] - theta)
ParameterVector blend_parameters(const ParameterVector& theta,
                                 std::span<const ParameterVector> branches,
                                 std::span<const double> coeffs, double beta);

}  // namespace metartl
