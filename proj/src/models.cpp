#include "metartl/models.hpp"

#include <cmath>
#include <string>

#include "metartl/errors.hpp"
#include "metartl/rng.hpp"

namespace metartl {

ChoiceInstance ChoiceInstance::make(const std::vector<std::vector<double>>& candidates, std::size_t label) {
  if (candidates.size() < 2) throw ConfigError("a choice instance needs at least 2 candidates");
  if (label >= candidates.size()) throw ConfigError("label out of range");
  ChoiceInstance inst;
  inst.dim = candidates.front().size();
  if (inst.dim == 0) throw ConfigError("candidate features are empty");
  inst.label = label;
  inst.features.reserve(inst.dim * candidates.size());
  for (const auto& c : candidates) {
    if (c.size() != inst.dim) throw ConfigError("candidate feature dims differ");
    inst.features.insert(inst.features.end(), c.begin(), c.end());
  }
  return inst;
}

std::size_t argmax_lowest(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[best]) best = i;
  }
  return best;
}

std::vector<double> answer_distribution(std::span<const double> scores) {
  if (scores.size() < 2) throw ShapeMismatch("answer_distribution needs at least 2 scores");
  for (double s : scores) {
    if (!std::isfinite(s)) throw NonFiniteLoss(s, "answer_distribution");
  }
  const double mx = scores[argmax_lowest(scores)];
  std::vector<double> p(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(scores[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

// ---------------------------------------------------------------------------
// MetaModel

MetaModel::MetaModel(EncoderConfig config) : config_(config) {
  if (config_.input_dim == 0 || config_.hidden_dim == 0) throw ConfigError("encoder dims must be >= 1");
  if (config_.layers == 0 && config_.input_dim != config_.hidden_dim) {
    throw ConfigError("identity encoder requires input_dim == hidden_dim");
  }
  const std::size_t h = config_.hidden_dim;
  std::size_t in = config_.input_dim;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    layout_.add_segment("encoder.w" + std::to_string(l), in, h);
    layout_.add_segment("encoder.b" + std::to_string(l), 1, h);
    in = h;
  }
  layout_.add_segment("head.W1", h, h);
  layout_.add_segment("head.b1", 1, h);
  layout_.add_segment("head.W2", h, 1);
}

ParameterVector MetaModel::init_params(std::uint64_t seed) const {
  ParameterVector p = layout_;
  Rng rng(seed);
  for (const auto& s : p.segments()) {
    if (s.rows == 1 && s.name.find(".b") != std::string::npos) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
    for (auto& v : p.segment_values(s.name)) v = rng.uniform(-limit, limit);
  }
  return p;
}

Var MetaModel::scores(Tape& tape, Var params, Var features) const {
  Var h = features;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    Var w = param_segment(tape, params, layout_, "encoder.w" + std::to_string(l));
    Var b = param_segment(tape, params, layout_, "encoder.b" + std::to_string(l));
    h = tape.tanh(tape.add(tape.matmul(h, w), b));
  }
  Var w1 = param_segment(tape, params, layout_, "head.W1");
  Var b1 = param_segment(tape, params, layout_, "head.b1");
  Var w2 = param_segment(tape, params, layout_, "head.W2");
  Var z = tape.tanh(tape.add(tape.matmul(h, w1), b1));
  return tape.matmul(z, w2);
}

void MetaModel::check_dims(const ChoiceInstance& inst) const {
  if (inst.dim != config_.input_dim) {
    throw ShapeMismatch("candidate dim " + std::to_string(inst.dim) + " != encoder input dim " +
                        std::to_string(config_.input_dim));
  }
  if (inst.num_candidates() < 2 || inst.label >= inst.num_candidates()) {
    throw ShapeMismatch("malformed choice instance");
  }
}

Var MetaModel::batch_loss(Tape& tape, Var params, std::span<const ChoiceInstance> batch) const {
  if (batch.empty()) throw EmptyBatch("choice loss over an empty batch");
  std::vector<double> stacked;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> labels;
  labels.reserve(batch.size());
  for (const auto& inst : batch) {
    check_dims(inst);
    stacked.insert(stacked.end(), inst.features.begin(), inst.features.end());
    offsets.push_back(offsets.back() + inst.num_candidates());
    labels.push_back(inst.label);
  }
  const std::size_t rows = offsets.back();
  Var x = tape.constant(std::move(stacked), rows, config_.input_dim);
  return tape.softmax_log_loss(scores(tape, params, x), offsets, labels);
}

LossFn MetaModel::loss_fn(std::span<const ChoiceInstance> batch) const {
  return [this, batch](Tape& tape, Var params) { return batch_loss(tape, params, batch); };
}

std::vector<double> MetaModel::score_candidates(const ParameterVector& params, const ChoiceInstance& inst) const {
  check_dims(inst);
  if (!params.same_layout(layout_)) throw ShapeMismatch("parameters do not match the meta model layout");
  Tape tape;
  const auto v = params.values();
  Var p = tape.constant(std::vector<double>(v.begin(), v.end()), params.size(), 1);
  Var x = tape.constant(inst.features, inst.num_candidates(), inst.dim);
  const auto s = tape.value(scores(tape, p, x));
  return {s.begin(), s.end()};
}

double MetaModel::choice_nll_loss(const ParameterVector& params, std::span<const ChoiceInstance> batch) const {
  if (!params.same_layout(layout_)) throw ShapeMismatch("parameters do not match the meta model layout");
  return evaluate_loss(params, loss_fn(batch));
}

double MetaModel::accuracy(const ParameterVector& params, std::span<const ChoiceInstance> batch) const {
  if (batch.empty()) throw EmptyBatch("accuracy over an empty batch");
  if (!params.same_layout(layout_)) throw ShapeMismatch("parameters do not match the meta model layout");
  Tape tape;
  const auto v = params.values();
  Var p = tape.constant(std::vector<double>(v.begin(), v.end()), params.size(), 1);
  std::vector<double> stacked;
  for (const auto& inst : batch) {
    check_dims(inst);
    stacked.insert(stacked.end(), inst.features.begin(), inst.features.end());
  }
  const std::size_t rows = stacked.size() / config_.input_dim;
  const auto s = tape.value(scores(tape, p, tape.constant(std::move(stacked), rows, config_.input_dim)));
  std::size_t correct = 0;
  std::size_t pos = 0;
  for (const auto& inst : batch) {
    const std::size_t n = inst.num_candidates();
    if (argmax_lowest(s.subspan(pos, n)) == inst.label) ++correct;
    pos += n;
  }
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// PolicyNet

PolicyNet::PolicyNet(PolicyNetConfig config) : config_(config) {
  if (config_.num_tasks < 2) throw ConfigError("policy needs M >= 2 tasks");
  if (config_.window < 1) throw ConfigError("attention window must be >= 1");
  if (config_.hidden_dim == 0 || config_.ffn_dim == 0) throw ConfigError("policy dims must be >= 1");
  const std::size_t m = config_.num_tasks, h = config_.hidden_dim, f = config_.ffn_dim;
  layout_.add_segment("lstm.Wx", 2 * m, 4 * h);
  layout_.add_segment("lstm.Wh", h, 4 * h);
  layout_.add_segment("lstm.b", 1, 4 * h);
  layout_.add_segment("ffn.W0", 2 * h, f);
  layout_.add_segment("ffn.b0", 1, f);
  layout_.add_segment("ffn.W1", f, m);
  layout_.add_segment("ffn.b1", 1, m);
}

ParameterVector PolicyNet::init_params(std::uint64_t seed) const {
  ParameterVector p = layout_;
  Rng rng(seed);
  for (auto& v : p.values()) v = rng.uniform(-0.08, 0.08);
  return p;
}

PolicyState PolicyNet::initial_state() const {
  PolicyState s;
  s.cell.assign(config_.hidden_dim, 0.0);
  s.hidden.assign(config_.hidden_dim, 0.0);
  s.prev_probs.assign(config_.num_tasks, 1.0 / static_cast<double>(config_.num_tasks));
  s.prev_rewards.assign(config_.num_tasks, 0.0);
  return s;
}

void PolicyNet::validate(const PolicyState& s) const {
  const std::size_t m = config_.num_tasks, h = config_.hidden_dim;
  if (s.prev_probs.size() != m || s.prev_rewards.size() != m) {
    throw ShapeMismatch("policy state built for M=" + std::to_string(s.prev_probs.size()) +
                        ", network has M=" + std::to_string(m));
  }
  if (s.cell.size() != h || s.hidden.size() != h) throw ShapeMismatch("policy state hidden size");
  if (s.window.size() > config_.window) throw ShapeMismatch("policy window overflow");
  for (const auto& w : s.window) {
    if (w.size() != h) throw ShapeMismatch("policy window entry size");
  }
  double total = 0.0;
  for (double p : s.prev_probs) {
    if (!(p >= 0.0)) throw ShapeMismatch("previous probabilities must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ShapeMismatch("previous probabilities do not sum to 1");
}

PolicyNet::TapeState PolicyNet::constant_state(Tape& tape, const PolicyState& s) const {
  validate(s);
  const std::size_t h = config_.hidden_dim, m = config_.num_tasks;
  TapeState ts;
  ts.cell = tape.constant(s.cell, 1, h);
  ts.hidden = tape.constant(s.hidden, 1, h);
  for (const auto& w : s.window) ts.window.push_back(tape.constant(w, 1, h));
  ts.prev_probs = tape.constant(s.prev_probs, 1, m);
  ts.prev_rewards = tape.constant(s.prev_rewards, 1, m);
  return ts;
}

PolicyNet::TapeStep PolicyNet::forward(Tape& tape, Var phi, const TapeState& s) const {
  const std::size_t m = config_.num_tasks, h = config_.hidden_dim;
  if (tape.cols(s.prev_probs) * tape.rows(s.prev_probs) != m) throw ShapeMismatch("policy input size");

  const Var inputs[] = {s.prev_probs, s.prev_rewards};
  Var x = tape.concat(inputs, 1, 2 * m);
  Var gates = tape.add(tape.add(tape.matmul(x, param_segment(tape, phi, layout_, "lstm.Wx")),
                                tape.matmul(s.hidden, param_segment(tape, phi, layout_, "lstm.Wh"))),
                       param_segment(tape, phi, layout_, "lstm.b"));
  Var in_gate = tape.sigmoid(tape.slice(gates, 0, 1, h));
  Var forget_gate = tape.sigmoid(tape.slice(gates, h, 1, h));
  Var candidate = tape.tanh(tape.slice(gates, 2 * h, 1, h));
  Var out_gate = tape.sigmoid(tape.slice(gates, 3 * h, 1, h));
  Var cell = tape.add(tape.mul(forget_gate, s.cell), tape.mul(in_gate, candidate));
  Var hidden = tape.mul(out_gate, tape.tanh(cell));

  TapeStep out;
  out.next.cell = cell;
  out.next.hidden = hidden;
  out.next.window = s.window;
  out.next.window.push_back(hidden);
  while (out.next.window.size() > config_.window) out.next.window.erase(out.next.window.begin());

  const std::size_t w = out.next.window.size();
  Var keys = tape.concat(out.next.window, w, h);
  Var att = tape.softmax(tape.affine(tape.matmul_nt(hidden, keys), 1.0 / std::sqrt(static_cast<double>(h)), 0.0));
  Var context = tape.matmul(att, keys);

  const Var joined_parts[] = {hidden, context};
  Var joined = tape.concat(joined_parts, 1, 2 * h);
  Var ffn = tape.tanh(tape.add(tape.matmul(joined, param_segment(tape, phi, layout_, "ffn.W0")),
                               param_segment(tape, phi, layout_, "ffn.b0")));
  out.logits = tape.add(tape.matmul(ffn, param_segment(tape, phi, layout_, "ffn.W1")),
                        param_segment(tape, phi, layout_, "ffn.b1"));
  out.probs = tape.softmax(out.logits);
  out.next.prev_probs = out.probs;
  out.next.prev_rewards = s.prev_rewards;
  return out;
}

std::pair<std::vector<double>, PolicyState> PolicyNet::step(const ParameterVector& phi,
                                                            const PolicyState& state) const {
  if (!phi.same_layout(layout_)) throw ShapeMismatch("policy parameters do not match the network layout");
  Tape tape;
  const auto v = phi.values();
  Var p = tape.constant(std::vector<double>(v.begin(), v.end()), phi.size(), 1);
  const auto st = forward(tape, p, constant_state(tape, state));

  auto to_vec = [&](Var x) {
    const auto s = tape.value(x);
    return std::vector<double>(s.begin(), s.end());
  };
  std::vector<double> probs = to_vec(st.probs);
  for (double q : probs) {
    if (!std::isfinite(q)) throw NonFiniteLoss(q, "policy_step");
  }
  PolicyState next;
  next.cell = to_vec(st.next.cell);
  next.hidden = to_vec(st.next.hidden);
  for (Var w : st.next.window) next.window.push_back(to_vec(w));
  next.prev_probs = probs;
  next.prev_rewards = state.prev_rewards;
  return {std::move(probs), std::move(next)};
}

}  // namespace metartl
