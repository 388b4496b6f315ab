#include "metartl/diagnostics.hpp"

#include <algorithm>
#include <chrono>

#include "metartl/grad.hpp"
#include "metartl/models.hpp"
#include "metartl/rng.hpp"

namespace metartl {

namespace {

ChoiceInstance random_instance(Rng& rng, std::size_t n, std::size_t dim) {
  std::vector<std::vector<double>> c(n, std::vector<double>(dim));
  for (auto& row : c)
    for (auto& x : row) x = rng.normal();
  return ChoiceInstance::make(c, rng.index(n));
}

// Loss restricted to one set of segments: the others are frozen constants.
LossFn restricted(const MetaModel& model, const ParameterVector& full, const std::vector<std::string>& free,
                  std::span<const ChoiceInstance> batch) {
  return [&model, full, free, batch](Tape& t, Var sub) {
    std::vector<Var> parts;
    std::size_t offset = 0;
    for (const auto& seg : full.segments()) {
      const std::size_t n = seg.rows * seg.cols;
      if (std::find(free.begin(), free.end(), seg.name) != free.end()) {
        parts.push_back(t.slice(sub, offset, 1, n));
        offset += n;
      } else {
        const auto v = full.segment_values(seg.name);
        parts.push_back(t.constant({v.begin(), v.end()}, 1, n));
      }
    }
    return model.batch_loss(t, t.concat(parts, 1, full.size()), batch);
  };
}

ParameterVector select(const ParameterVector& full, const std::vector<std::string>& free) {
  std::vector<double> values;
  for (const auto& seg : full.segments()) {
    if (std::find(free.begin(), free.end(), seg.name) == free.end()) continue;
    const auto v = full.segment_values(seg.name);
    values.insert(values.end(), v.begin(), v.end());
  }
  return ParameterVector::from_values(std::move(values));
}

}  // namespace

bool GradSuiteReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [&](const auto& e) { return e.max_rel_error < tolerance; });
}

GradSuiteReport run_gradient_suite(std::size_t points, std::uint64_t seed, double tolerance) {
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteReport report;
  report.tolerance = tolerance;
  const double h = 1e-5;

  const MetaModel model({.input_dim = 5, .hidden_dim = 4, .layers = 2});
  std::vector<std::string> encoder, head;
  for (const auto& seg : model.layout().segments()) {
    (seg.name.rfind("encoder.", 0) == 0 ? encoder : head).push_back(seg.name);
  }
  GradSuiteEntry enc{"encoder", points, 0.0};
  GradSuiteEntry hd{"scoring head", points, 0.0};
  Rng rng(derive_seed(seed, {1}));
  for (std::size_t i = 0; i < points; ++i) {
    const auto full = model.init_params(derive_seed(seed, {2, i}));
    std::vector<ChoiceInstance> batch{random_instance(rng, 4, 5), random_instance(rng, 3, 5)};
    enc.max_rel_error = std::max(
        enc.max_rel_error,
        finite_diff_check(select(full, encoder), restricted(model, full, encoder, batch), h, tolerance).max_rel_error);
    hd.max_rel_error = std::max(
        hd.max_rel_error,
        finite_diff_check(select(full, head), restricted(model, full, head, batch), h, tolerance).max_rel_error);
  }
  report.entries.push_back(enc);
  report.entries.push_back(hd);

  const PolicyNet net({.num_tasks = 3, .hidden_dim = 4, .window = 2, .ffn_dim = 3});
  GradSuiteEntry pol{"policy (3 chained steps)", points, 0.0};
  for (std::size_t i = 0; i < points; ++i) {
    auto phi = net.init_params(derive_seed(seed, {3, i}));
    for (auto& v : phi.values()) v *= 10.0;
    auto start = net.initial_state();
    for (auto& r : start.prev_rewards) r = rng.uniform(-1.0, 1.0);
    std::vector<std::vector<double>> rewards(3, std::vector<double>(3));
    for (auto& row : rewards)
      for (auto& r : row) r = rng.uniform(-1.0, 1.0);
    const LossFn objective = [&net, start, rewards](Tape& t, Var p) {
      auto state = net.constant_state(t, start);
      std::vector<Var> terms;
      for (std::size_t s = 0; s < 3; ++s) {
        const auto out = net.forward(t, p, state);
        terms.push_back(t.sum(t.log(out.probs)));
        state = out.next;
        state.prev_rewards = t.constant(rewards[s], 1, 3);
      }
      return t.sum(t.concat(terms, 1, terms.size()));
    };
    pol.max_rel_error = std::max(pol.max_rel_error, finite_diff_check(phi, objective, h, tolerance).max_rel_error);
  }
  report.entries.push_back(pol);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace metartl
