#include "metartl/grad.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "metartl/errors.hpp"

namespace metartl {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterVector

std::size_t ParameterVector::add_segment(std::string name, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw ShapeMismatch("segment '" + name + "' has an empty shape");
  detach_layout();
  for (const auto& s : *layout_) {
    if (s.name == name) throw ConfigError("duplicate segment '" + name + "'");
  }
  const std::size_t offset = values_.size();
  layout_->push_back(Segment{std::move(name), offset, rows, cols});
  values_.resize(offset + rows * cols, 0.0);
  return offset;
}

const Segment& ParameterVector::segment(std::string_view name) const {
  if (layout_) {
    for (const auto& s : *layout_) {
      if (s.name == name) return s;
    }
  }
  throw ShapeMismatch("no segment named '" + std::string(name) + "'");
}

const std::vector<Segment>& ParameterVector::segments() const {
  static const std::vector<Segment> kEmpty;
  return layout_ ? *layout_ : kEmpty;
}

std::span<double> ParameterVector::segment_values(std::string_view name) {
  const auto& s = segment(name);
  return std::span<double>(values_).subspan(s.offset, s.size());
}

std::span<const double> ParameterVector::segment_values(std::string_view name) const {
  const auto& s = segment(name);
  return std::span<const double>(values_).subspan(s.offset, s.size());
}

bool ParameterVector::same_layout(const ParameterVector& other) const {
  if (layout_ == other.layout_) return true;
  return segments() == other.segments();
}

bool ParameterVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void ParameterVector::require_finite(const std::string& where) const {
  for (double v : values_) {
    if (!std::isfinite(v)) throw NonFiniteLoss(v, where);
  }
}

bool ParameterVector::operator==(const ParameterVector& other) const {
  if (!same_layout(other)) return false;
  // Bitwise comparison, so -0.0 != 0.0 and NaN payloads count.
  return values_.size() == other.values_.size() &&
         (values_.empty() ||
          std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(double)) == 0);
}

ParameterVector ParameterVector::from_values(std::vector<double> values, std::string name) {
  ParameterVector p;
  const std::size_t n = values.size();
  p.add_segment(std::move(name), n, 1);
  p.values_ = std::move(values);
  return p;
}

void ParameterVector::detach_layout() {
  if (!layout_) {
    layout_ = std::make_shared<std::vector<Segment>>();
  } else if (layout_.use_count() > 1) {
    layout_ = std::make_shared<std::vector<Segment>>(*layout_);
  }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(std::vector<double> value, std::size_t rows, std::size_t cols, bool needs_grad,
               std::function<void(Tape&, std::size_t)> backprop) {
  Node n;
  n.value = std::move(value);
  n.rows = rows;
  n.cols = cols;
  n.needs_grad = needs_grad;
  if (needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(std::vector<double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw ShapeMismatch("leaf value count does not match shape");
  return push(std::move(values), rows, cols, true, nullptr);
}

Var Tape::constant(std::vector<double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw ShapeMismatch("constant value count does not match shape");
  return push(std::move(values), rows, cols, false, nullptr);
}

double Tape::scalar_value(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.value.size() != 1) throw ShapeMismatch("expected scalar, got " + shape_str(n.rows, n.cols));
  return n.value[0];
}

Var Tape::add(Var a, Var b) {
  const auto& na = nodes_[a.id];
  const auto& nb = nodes_[b.id];
  const bool broadcast = nb.rows == 1 && na.rows != 1 && nb.cols == na.cols;
  if (!broadcast && (na.rows != nb.rows || na.cols != nb.cols)) {
    throw ShapeMismatch("add: " + shape_str(na.rows, na.cols) + " + " + shape_str(nb.rows, nb.cols));
  }
  std::vector<double> out = na.value;
  const std::size_t cols = na.cols;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += nb.value[broadcast ? i % cols : i];
  return push(std::move(out), na.rows, na.cols, needs(a) || needs(b),
              [a, b, broadcast, cols](Tape& t, std::size_t self) {
                const auto& g = t.nodes_[self].grad;
                if (t.needs(a)) {
                  auto& ga = t.nodes_[a.id].grad;
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (t.needs(b)) {
                  auto& gb = t.nodes_[b.id].grad;
                  for (std::size_t i = 0; i < g.size(); ++i) gb[broadcast ? i % cols : i] += g[i];
                }
              });
}

Var Tape::mul(Var a, Var b) {
  const auto& na = nodes_[a.id];
  const auto& nb = nodes_[b.id];
  if (na.rows != nb.rows || na.cols != nb.cols) {
    throw ShapeMismatch("mul: " + shape_str(na.rows, na.cols) + " * " + shape_str(nb.rows, nb.cols));
  }
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * nb.value[i];
  return push(std::move(out), na.rows, na.cols, needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    const auto& va = t.nodes_[a.id].value;
    const auto& vb = t.nodes_[b.id].value;
    if (t.needs(a)) {
      auto& ga = t.nodes_[a.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.needs(b)) {
      auto& gb = t.nodes_[b.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

Var Tape::div(Var a, Var b) {
  const auto& na = nodes_[a.id];
  const auto& nb = nodes_[b.id];
  if (na.rows != nb.rows || na.cols != nb.cols) {
    throw ShapeMismatch("div: " + shape_str(na.rows, na.cols) + " / " + shape_str(nb.rows, nb.cols));
  }
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] / nb.value[i];
  return push(std::move(out), na.rows, na.cols, needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    const auto& va = t.nodes_[a.id].value;
    const auto& vb = t.nodes_[b.id].value;
    if (t.needs(a)) {
      auto& ga = t.nodes_[a.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / vb[i];
    }
    if (t.needs(b)) {
      auto& gb = t.nodes_[b.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
    }
  });
}

Var Tape::matmul(Var a, Var b) {
  const auto& na = nodes_[a.id];
  const auto& nb = nodes_[b.id];
  if (na.cols != nb.rows) {
    throw ShapeMismatch("matmul: " + shape_str(na.rows, na.cols) + " * " + shape_str(nb.rows, nb.cols));
  }
  const std::size_t n = na.rows, k = na.cols, m = nb.cols;
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = na.value[i * k + p];
      const double* brow = &nb.value[p * m];
      double* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return push(std::move(out), n, m, needs(a) || needs(b), [a, b, n, k, m](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    const auto& va = t.nodes_[a.id].value;
    const auto& vb = t.nodes_[b.id].value;
    if (t.needs(a)) {
      // dA = dC * B^T
      auto& ga = t.nodes_[a.id].grad;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * vb[p * m + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (t.needs(b)) {
      // dB = A^T * dC
      auto& gb = t.nodes_[b.id].grad;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = va[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
        }
      }
    }
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  const auto& na = nodes_[a.id];
  const auto& nb = nodes_[b.id];
  if (na.cols != nb.cols) {
    throw ShapeMismatch("matmul_nt: " + shape_str(na.rows, na.cols) + " * (" +
                        shape_str(nb.rows, nb.cols) + ")^T");
  }
  const std::size_t n = na.rows, k = na.cols, m = nb.rows;
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += na.value[i * k + p] * nb.value[j * k + p];
      out[i * m + j] = acc;
    }
  }
  return push(std::move(out), n, m, needs(a) || needs(b), [a, b, n, k, m](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    const auto& va = t.nodes_[a.id].value;
    const auto& vb = t.nodes_[b.id].value;
    if (t.needs(a)) {
      // dA = dC * B
      auto& ga = t.nodes_[a.id].grad;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g[i * m + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * vb[j * k + p];
        }
    }
    if (t.needs(b)) {
      // dB = dC^T * A
      auto& gb = t.nodes_[b.id].grad;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double gij = g[i * m + j];
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gij * va[i * k + p];
        }
    }
  });
}

Var Tape::tanh(Var a) {
  const auto& na = nodes_[a.id];
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(na.value[i]);
  return push(std::move(out), na.rows, na.cols, needs(a), [a](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    const auto& y = t.nodes_[self].value;
    auto& ga = t.nodes_[a.id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var Tape::sigmoid(Var a) {
  const auto& na = nodes_[a.id];
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = na.value[i];
    // Branches keep exp() from overflowing for large |x|.
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return push(std::move(out), na.rows, na.cols, needs(a), [a](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    const auto& y = t.nodes_[self].value;
    auto& ga = t.nodes_[a.id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var Tape::log(Var a) {
  const auto& na = nodes_[a.id];
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(na.value[i]);
  return push(std::move(out), na.rows, na.cols, needs(a), [a](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    const auto& x = t.nodes_[a.id].value;
    auto& ga = t.nodes_[a.id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

Var Tape::affine(Var a, double scale, double shift) {
  const auto& na = nodes_[a.id];
  std::vector<double> out(na.value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * na.value[i] + shift;
  return push(std::move(out), na.rows, na.cols, needs(a), [a, scale](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    auto& ga = t.nodes_[a.id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += scale * g[i];
  });
}

Var Tape::sum(Var a) {
  const auto& na = nodes_[a.id];
  double acc = 0.0;
  for (double v : na.value) acc += v;
  return push({acc}, 1, 1, needs(a), [a](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad[0];
    for (auto& x : t.nodes_[a.id].grad) x += g;
  });
}

Var Tape::softmax(Var a) {
  const auto& na = nodes_[a.id];
  const std::size_t rows = na.rows, cols = na.cols;
  std::vector<double> out(na.value.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &na.value[r * cols];
    double* y = &out[r * cols];
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  return push(std::move(out), rows, cols, needs(a), [a, rows, cols](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    const auto& y = t.nodes_[self].value;
    auto& ga = t.nodes_[a.id].grad;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

Var Tape::softmax_log_loss(Var scores, std::span<const std::size_t> group_offsets,
                           std::span<const std::size_t> labels) {
  const auto& ns = nodes_[scores.id];
  if (group_offsets.size() < 2 || group_offsets.size() != labels.size() + 1) {
    throw ShapeMismatch("softmax_log_loss: need one label per group");
  }
  if (group_offsets.front() != 0 || group_offsets.back() != ns.value.size()) {
    throw ShapeMismatch("softmax_log_loss: group offsets do not cover the scores");
  }
  const std::size_t groups = labels.size();
  std::vector<std::size_t> offsets(group_offsets.begin(), group_offsets.end());
  std::vector<std::size_t> gold(labels.begin(), labels.end());
  auto probs = std::make_shared<std::vector<double>>(ns.value.size());
  double total = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t lo = offsets[g], hi = offsets[g + 1];
    if (hi <= lo || gold[g] >= hi - lo) throw ShapeMismatch("softmax_log_loss: bad group or label");
    double mx = ns.value[lo];
    for (std::size_t i = lo; i < hi; ++i) mx = std::max(mx, ns.value[i]);
    double z = 0.0;
    for (std::size_t i = lo; i < hi; ++i) z += ((*probs)[i] = std::exp(ns.value[i] - mx));
    for (std::size_t i = lo; i < hi; ++i) (*probs)[i] /= z;
    total += std::log(z) + mx - ns.value[lo + gold[g]];
  }
  return push({total / static_cast<double>(groups)}, 1, 1, needs(scores),
              [scores, offsets = std::move(offsets), gold = std::move(gold), probs](Tape& t, std::size_t self) {
                const double g = t.nodes_[self].grad[0] / static_cast<double>(gold.size());
                auto& gs = t.nodes_[scores.id].grad;
                for (std::size_t grp = 0; grp < gold.size(); ++grp) {
                  for (std::size_t i = offsets[grp]; i < offsets[grp + 1]; ++i) {
                    const double onehot = (i == offsets[grp] + gold[grp]) ? 1.0 : 0.0;
                    gs[i] += g * ((*probs)[i] - onehot);
                  }
                }
              });
}

Var Tape::concat(std::span<const Var> parts, std::size_t rows, std::size_t cols) {
  std::vector<double> out;
  out.reserve(rows * cols);
  bool any = false;
  std::vector<Var> ids(parts.begin(), parts.end());
  for (Var p : ids) {
    const auto& v = nodes_[p.id].value;
    out.insert(out.end(), v.begin(), v.end());
    any = any || needs(p);
  }
  if (out.size() != rows * cols) throw ShapeMismatch("concat: parts do not fill " + shape_str(rows, cols));
  return push(std::move(out), rows, cols, any, [ids = std::move(ids)](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    std::size_t pos = 0;
    for (Var p : ids) {
      const std::size_t n = t.nodes_[p.id].value.size();
      if (t.needs(p)) {
        auto& gp = t.nodes_[p.id].grad;
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[pos + i];
      }
      pos += n;
    }
  });
}

Var Tape::slice(Var a, std::size_t offset, std::size_t rows, std::size_t cols) {
  const auto& na = nodes_[a.id];
  if (offset + rows * cols > na.value.size()) throw ShapeMismatch("slice out of range");
  std::vector<double> out(na.value.begin() + static_cast<std::ptrdiff_t>(offset),
                          na.value.begin() + static_cast<std::ptrdiff_t>(offset + rows * cols));
  return push(std::move(out), rows, cols, needs(a), [a, offset](Tape& t, std::size_t self) {
    const auto& g = t.nodes_[self].grad;
    auto& ga = t.nodes_[a.id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
  });
}

void Tape::backward(Var out) {
  if (nodes_[out.id].value.size() != 1) throw ShapeMismatch("backward() needs a scalar output");
  for (auto& n : nodes_) {
    if (n.needs_grad) n.grad.assign(n.value.size(), 0.0);
  }
  if (!nodes_[out.id].needs_grad) return;
  nodes_[out.id].grad[0] = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.needs_grad && n.backprop) n.backprop(*this, i);
  }
}

std::span<const double> Tape::grad(Var v) const {
  const auto& n = nodes_[v.id];
  if (n.grad.size() != n.value.size()) throw ShapeMismatch("no gradient recorded for this node");
  return n.grad;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

Var param_segment(Tape& tape, Var params, const ParameterVector& layout, std::string_view name) {
  const auto& s = layout.segment(name);
  return tape.slice(params, s.offset, s.rows, s.cols);
}

LossAndGrad evaluate_with_gradients(const ParameterVector& params, const LossFn& loss_fn) {
  Tape tape;
  const auto values = params.values();
  Var leaf = tape.leaf(std::vector<double>(values.begin(), values.end()), params.size(), 1);
  Var out = loss_fn(tape, leaf);
  LossAndGrad r;
  r.loss = tape.scalar_value(out);
  if (!std::isfinite(r.loss)) throw NonFiniteLoss(r.loss, "loss evaluation");
  tape.backward(out);
  const auto g = tape.grad(leaf);
  r.grad.assign(g.begin(), g.end());
  return r;
}

double evaluate_loss(const ParameterVector& params, const LossFn& loss_fn) {
  Tape tape;
  const auto values = params.values();
  Var leaf = tape.constant(std::vector<double>(values.begin(), values.end()), params.size(), 1);
  const double loss = tape.scalar_value(loss_fn(tape, leaf));
  if (!std::isfinite(loss)) throw NonFiniteLoss(loss, "loss evaluation");
  return loss;
}

GradCheckReport finite_diff_check(const ParameterVector& params, const LossFn& loss_fn, double h,
                                  double tol) {
  const auto lg = evaluate_with_gradients(params, loss_fn);
  return finite_diff_check(params, loss_fn, lg.grad, h, tol);
}

GradCheckReport finite_diff_check(const ParameterVector& params, const LossFn& loss_fn,
                                  std::span<const double> analytic, double h, double tol) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_check: step h must be positive");
  if (analytic.size() != params.size()) throw ShapeMismatch("finite_diff_check: gradient length");
  const double first = evaluate_loss(params, loss_fn);
  const double second = evaluate_loss(params, loss_fn);
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw NondeterministicLoss("loss changed between identical evaluations: " + std::to_string(first) +
                               " vs " + std::to_string(second));
  }

  GradCheckReport rep;
  rep.tol = tol;
  rep.analytic.assign(analytic.begin(), analytic.end());
  rep.numeric.resize(params.size());
  rep.rel_error.resize(params.size());
  ParameterVector probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double x0 = params[i];
    probe[i] = x0 + h;
    const double up = evaluate_loss(probe, loss_fn);
    probe[i] = x0 - h;
    const double down = evaluate_loss(probe, loss_fn);
    probe[i] = x0;
    const double num = (up - down) / (2.0 * h);
    const double a = rep.analytic[i];
    const double denom = std::max({std::abs(a), std::abs(num), kGradCheckFloor});
    const double err = std::abs(a - num) / denom;
    rep.numeric[i] = num;
    rep.rel_error[i] = err;
    rep.max_rel_error = std::max(rep.max_rel_error, err);
    if (!(err <= tol)) rep.flagged.push_back(i);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Optimizers and blending

OptimizerState OptimizerState::create(const OptimizerSettings& settings, std::size_t n) {
  OptimizerState s;
  s.settings = settings;
  if (settings.kind == OptimizerKind::adamw) {
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
  }
  return s;
}

ParameterVector optimizer_step(OptimizerState& state, ParameterVector params,
                               std::span<const double> grad) {
  if (grad.size() != params.size()) {
    throw ShapeMismatch("optimizer_step: gradient has " + std::to_string(grad.size()) +
                        " entries, parameters " + std::to_string(params.size()));
  }
  const auto& cfg = state.settings;
  auto p = params.values();
  if (cfg.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.lr * grad[i];
  } else {
    if (state.m.empty() && state.v.empty()) {
      state.m.assign(p.size(), 0.0);
      state.v.assign(p.size(), 0.0);
    }
    if (state.m.size() != p.size() || state.v.size() != p.size()) {
      throw ShapeMismatch("optimizer_step: moment arrays do not match parameters");
    }
    const double t = static_cast<double>(state.step + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = grad[i];
      state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
      state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = state.m[i] / bc1;
      const double vhat = state.v[i] / bc2;
      p[i] = p[i] * decay - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  ++state.step;
  params.require_finite("optimizer_step");
  return params;
}

ParameterVector blend_parameters(const ParameterVector& theta, std::span<const ParameterVector> branches,
                                 std::span<const double> coeffs, double beta) {
  if (coeffs.size() != branches.size()) {
    throw ShapeMismatch("blend_parameters: " + std::to_string(coeffs.size()) + " coefficients for " +
                        std::to_string(branches.size()) + " branches");
  }
  for (const auto& b : branches) {
    if (!b.same_layout(theta) || b.size() != theta.size()) {
      throw ShapeMismatch("blend_parameters: branch layout differs from theta");
    }
  }
  ParameterVector out = theta;
  auto o = out.values();
  const auto t = theta.values();
  for (std::size_t j = 0; j < o.size(); ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < branches.size(); ++i) acc += coeffs[i] * (branches[i][j] - t[j]);
    o[j] = t[j] + beta * acc;
  }
  out.require_finite("blend_parameters");
  return out;
}

}  // namespace metartl
