#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "metartl/errors.hpp"
#include "metartl/meta.hpp"
#include "metartl/rng.hpp"

using namespace metartl;

namespace {

ParameterVector random_like(const ParameterVector& layout, Rng& rng) {
  ParameterVector p = layout;
  for (auto& v : p.values()) v = rng.normal();
  return p;
}

ChoiceInstance random_instance(Rng& rng, std::size_t n, std::size_t dim) {
  std::vector<std::vector<double>> c(n, std::vector<double>(dim));
  for (auto& row : c)
    for (auto& x : row) x = rng.normal();
  return ChoiceInstance::make(c, rng.index(n));
}

SyntheticFamilySpec spec(double rho, std::uint64_t id, std::size_t dim, std::size_t count) {
  SyntheticFamilySpec s;
  s.family_id = id;
  s.input_dim = dim;
  s.reference_concept = random_unit_vector(dim, 4242);
  s.relatedness = rho;
  s.instances = count;
  return s;
}

struct Fixture {
  std::vector<TaskDataset> sources;
  TaskDataset target;
  MetaModel model{{.input_dim = 6, .hidden_dim = 6, .layers = 1}};
  MetaIterationConfig cfg;

  explicit Fixture(WeightStrategy strategy, std::size_t m = 3) {
    for (std::size_t j = 0; j < m; ++j) {
      sources.push_back(make_synthetic_family(spec(0.9 - 0.4 * static_cast<double>(j), j + 1, 6, 60), 10 + j));
    }
    target = make_synthetic_family(spec(1.0, 0, 6, 40), 99);
    cfg.sources = &sources;
    cfg.target = &target;
    cfg.strategy = strategy;
    cfg.meta.support_size = 6;
    cfg.meta.query_size = 4;
    cfg.meta.target_batch = 8;
    cfg.meta.inner_steps = 2;
    cfg.meta.inner_lr = 0.1;
  }
};

}  // namespace

TEST_CASE("eval_loss") {
  MetaModel model({.input_dim = 3, .hidden_dim = 5, .layers = 2});
  Rng rng(1);
  std::vector<ChoiceInstance> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(random_instance(rng, 4, 3));
  CHECK(eval_loss(model, model.layout(), batch) == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  const auto params = model.init_params(2);
  CHECK(eval_loss(model, params, batch) == eval_loss(model, params, batch));

  const auto one = std::span(batch).first(1);
  const auto s = model.score_candidates(params, batch[0]);
  double z = 0.0;
  for (double v : s) z += std::exp(v);
  CHECK(eval_loss(model, params, one) == doctest::Approx(std::log(z) - s[batch[0].label]).epsilon(1e-12));
  CHECK_THROWS_AS(eval_loss(model, params, {}), EmptyBatch);
}

TEST_CASE("inner_adapt") {
  const LossFn half_square = [](Tape& t, Var x) { return t.affine(t.sum(t.mul(x, x)), 0.5, 0.0); };
  const auto theta = ParameterVector::from_values({1.0});
  CHECK(inner_adapt(theta, half_square, 0.1, 1)[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(inner_adapt(theta, half_square, 0.0, 3) == theta);
  CHECK(inner_adapt(theta, half_square, 0.1, 0) == theta);

  MetaModel model({.input_dim = 4, .hidden_dim = 4, .layers = 1});
  Rng rng(3);
  std::vector<ChoiceInstance> support;
  for (int i = 0; i < 5; ++i) support.push_back(random_instance(rng, 3, 4));
  const auto p = model.init_params(5);
  const auto p_copy = p;
  const auto two = inner_adapt(model, p, support, 0.3, 2);
  const auto composed = inner_adapt(model, inner_adapt(model, p, support, 0.3, 1), support, 0.3, 1);
  CHECK(two == composed);
  CHECK(p == p_copy);
  CHECK_THROWS_AS(inner_adapt(model, p, {}, 0.1, 1), EmptyBatch);
}

TEST_CASE("reptile_update and weighted_update") {
  const auto theta = ParameterVector::from_values({1.0, 1.0});
  const std::vector<ParameterVector> branches{ParameterVector::from_values({2.0, 0.0}),
                                              ParameterVector::from_values({0.0, 2.0})};
  SUBCASE("hand arithmetic") {
    const std::vector<double> c{0.75, 0.25};
    const auto out = weighted_update(theta, branches, c, 1.0);
    CHECK(out[0] == 1.5);
    CHECK(out[1] == 0.5);
  }
  SUBCASE("single source") {
    const auto out = reptile_update(theta, std::span(branches).first(1), 0.25);
    CHECK(out[0] == 1.25);
    CHECK(out[1] == 0.75);
  }
  SUBCASE("fixed point and zero weights") {
    const std::vector<ParameterVector> same{theta, theta, theta};
    CHECK(reptile_update(theta, same, 0.7) == theta);
    const std::vector<double> zeros{0.0, 0.0};
    CHECK(weighted_update(theta, branches, zeros, 0.7) == theta);
  }
  SUBCASE("one-hot weights interpolate toward one branch") {
    const std::vector<double> onehot{0.0, 1.0};
    const auto out = weighted_update(theta, branches, onehot, 0.5);
    CHECK(out[0] == 0.5);
    CHECK(out[1] == 1.5);
  }
  SUBCASE("uniform weights reduce to reptile bitwise") {
    Rng rng(17);
    MetaModel model({.input_dim = 3, .hidden_dim = 4, .layers = 1});
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t m = 1 + rng.index(7);
      const auto th = random_like(model.layout(), rng);
      std::vector<ParameterVector> bs;
      for (std::size_t j = 0; j < m; ++j) bs.push_back(random_like(model.layout(), rng));
      const std::vector<double> c(m, 1.0 / static_cast<double>(m));
      const double beta = rng.uniform();
      CHECK(weighted_update(th, bs, c, beta) == reptile_update(th, bs, beta));
    }
  }
  SUBCASE("errors") {
    const std::vector<double> neg{1.0, -0.1};
    CHECK_THROWS_AS(weighted_update(theta, branches, neg, 1.0), ConfigError);
    const std::vector<ParameterVector> wrong{ParameterVector::from_values({1.0})};
    CHECK_THROWS_AS(reptile_update(theta, wrong, 1.0), ShapeMismatch);
  }
}

TEST_CASE("fomaml_update") {
  MetaModel model({.input_dim = 3, .hidden_dim = 4, .layers = 1});
  Rng rng(23);
  std::vector<std::vector<ChoiceInstance>> queries(3);
  for (auto& q : queries)
    for (int i = 0; i < 4; ++i) q.push_back(random_instance(rng, 3, 3));
  const auto theta = model.init_params(1);

  SUBCASE("zero query gradients leave theta unchanged") {
    // All-zero parameters: every score and every gradient vanishes.
    const std::vector<ParameterVector> zeros(3, model.layout());
    CHECK(fomaml_update(model, theta, zeros, queries, 0.5) == theta);
  }
  SUBCASE("single source is one gradient step taken at the adapted point") {
    const std::vector<ParameterVector> b{model.init_params(2)};
    const auto out = fomaml_update(model, theta, b, std::span(queries).first(1), 0.3);
    const auto lg = evaluate_with_gradients(b[0], model.loss_fn(queries[0]));
    for (std::size_t i = 0; i < theta.size(); ++i) CHECK(out[i] == theta[i] - 0.3 * lg.grad[i]);
  }
  SUBCASE("uniform equals weighted with 1/M, bitwise") {
    for (int trial = 0; trial < 100; ++trial) {
      const auto th = random_like(model.layout(), rng);
      std::vector<ParameterVector> bs;
      for (int j = 0; j < 3; ++j) bs.push_back(th);
      for (auto& b : bs)
        for (auto& v : b.values()) v += 0.1 * rng.normal();
      const std::vector<double> c(3, 1.0 / 3.0);
      CHECK(fomaml_update(model, th, bs, queries, c, 0.2) == fomaml_update(model, th, bs, queries, 0.2));
    }
  }
  SUBCASE("errors") {
    const std::vector<ParameterVector> bs(3, theta);
    std::vector<std::vector<ChoiceInstance>> empty(3);
    CHECK_THROWS_AS(fomaml_update(model, theta, bs, empty, 0.1), EmptyBatch);
    CHECK_THROWS_AS(fomaml_update(model, theta, bs, std::span(queries).first(2), 0.1), ShapeMismatch);
  }
}

TEST_CASE("run_meta_iteration") {
  SUBCASE("uniform strategy reduces to reptile") {
    Fixture fx(WeightStrategy::uniform);
    auto state = make_meta_state(fx.model, fx.cfg, 5);
    const auto theta0 = state.theta;
    const auto rec = run_meta_iteration(fx.model, state, fx.cfg, 5);
    CHECK(rec.weights == std::vector<double>(3, 1.0 / 3.0));
    const auto samples = sample_iteration(fx.cfg, 0, 5);
    std::vector<ParameterVector> branches;
    for (const auto& ep : samples.episodes) {
      branches.push_back(inner_adapt(fx.model, theta0, ep.support, fx.cfg.meta.inner_lr, fx.cfg.meta.inner_steps));
    }
    CHECK(state.theta == reptile_update(theta0, branches, fx.cfg.meta.outer_lr));
    CHECK(rec.general_loss == eval_loss(fx.model, theta0, samples.target_batch));
    CHECK(rec.post_update_loss == eval_loss(fx.model, state.theta, samples.target_batch));
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(rec.task_losses[j] == eval_loss(fx.model, branches[j], samples.target_batch));
      CHECK(rec.rewards[j] == rec.general_loss - rec.task_losses[j]);
    }
  }
  SUBCASE("zero adaptation is neutral for every strategy") {
    for (auto strategy : {WeightStrategy::uniform, WeightStrategy::random, WeightStrategy::greedy,
                          WeightStrategy::temperature, WeightStrategy::rl}) {
      for (auto outer : {OuterAlgorithm::reptile}) {
        Fixture fx(strategy);
        fx.cfg.meta.inner_steps = 0;
        fx.cfg.outer = outer;
        auto state = make_meta_state(fx.model, fx.cfg, 9);
        const auto theta0 = state.theta;
        for (int it = 0; it < 3; ++it) {
          const auto rec = run_meta_iteration(fx.model, state, fx.cfg, 9);
          for (double r : rec.rewards) CHECK(r == 0.0);
        }
        CHECK(state.theta == theta0);
      }
    }
  }
  SUBCASE("fixed seed, identical records") {
    for (auto outer : {OuterAlgorithm::reptile, OuterAlgorithm::fomaml}) {
      Fixture fx(WeightStrategy::rl);
      fx.cfg.outer = outer;
      auto a = make_meta_state(fx.model, fx.cfg, 13);
      auto b = make_meta_state(fx.model, fx.cfg, 13);
      for (int it = 0; it < 5; ++it) {
        const auto ra = run_meta_iteration(fx.model, a, fx.cfg, 13);
        const auto rb = run_meta_iteration(fx.model, b, fx.cfg, 13);
        CHECK(ra == rb);
        CHECK(ra.probs.size() == 3);
        CHECK(ra.weights.size() == 3);
      }
      CHECK(a.theta == b.theta);
      CHECK(a.policy->phi == b.policy->phi);
    }
  }
  SUBCASE("stubbed uniform weights follow the reptile trajectory") {
    Fixture rl(WeightStrategy::rl);
    rl.cfg.stub_uniform_weights = true;
    Fixture rep(WeightStrategy::uniform);
    auto a = make_meta_state(rl.model, rl.cfg, 21);
    auto b = make_meta_state(rep.model, rep.cfg, 21);
    for (int it = 0; it < 10; ++it) {
      run_meta_iteration(rl.model, a, rl.cfg, 21);
      run_meta_iteration(rep.model, b, rep.cfg, 21);
      CHECK(a.theta == b.theta);
    }
  }
  SUBCASE("temperature sampling draws sources by size") {
    Fixture fx(WeightStrategy::uniform);
    fx.sources[0].instances.resize(20);
    fx.cfg.temperature_sampling = true;
    fx.cfg.omega = 1.0;
    std::vector<double> hits(3, 0.0);
    for (std::size_t it = 0; it < 400; ++it)
      for (auto s : sample_iteration(fx.cfg, it, 3).sources) hits[s] += 1.0;
    CHECK(hits[0] / 1200.0 == doctest::Approx(20.0 / 140.0).epsilon(0.2));
  }
  SUBCASE("pure exploration gives equal mean weights") {
    Fixture fx(WeightStrategy::rl, 4);
    fx.cfg.meta.inner_steps = 1;
    fx.cfg.rl.epsilon = {.start = 1.0, .horizon = 0.0};
    fx.cfg.rl.freeze_policy = true;
    auto state = make_meta_state(fx.model, fx.cfg, 31);
    const int iters = 2000;
    std::vector<double> sum(4, 0.0), sum_sq(4, 0.0);
    for (int it = 0; it < iters; ++it) {
      const auto rec = run_meta_iteration(fx.model, state, fx.cfg, 31);
      for (std::size_t j = 0; j < 4; ++j) {
        sum[j] += rec.weights[j];
        sum_sq[j] += rec.weights[j] * rec.weights[j];
      }
    }
    std::vector<double> mean(4), se(4);
    for (std::size_t j = 0; j < 4; ++j) {
      mean[j] = sum[j] / iters;
      se[j] = std::sqrt((sum_sq[j] / iters - mean[j] * mean[j]) / iters);
    }
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) {
        CHECK(std::abs(mean[i] - mean[j]) <= 3.0 * std::sqrt(se[i] * se[i] + se[j] * se[j]));
      }
  }
  SUBCASE("reptile on a source identical to the target lowers held-out loss") {
    MetaModel model({.input_dim = 8, .hidden_dim = 8, .layers = 1});
    double before = 0.0;
    double after = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::vector<TaskDataset> sources{make_synthetic_family(spec(1.0, 7, 8, 400), 100 + seed)};
      const auto target = make_synthetic_family(spec(1.0, 0, 8, 100), 200 + seed);
      const auto held_out = make_synthetic_family(spec(1.0, 0, 8, 300), 300 + seed);
      MetaIterationConfig cfg;
      cfg.sources = &sources;
      cfg.target = &target;
      cfg.meta.support_size = 16;
      cfg.meta.query_size = 0;
      cfg.meta.inner_steps = 4;
      cfg.meta.inner_lr = 0.05;
      auto state = make_meta_state(model, cfg, seed);
      before += eval_loss(model, state.theta, held_out.instances);
      for (int it = 0; it < 500; ++it) run_meta_iteration(model, state, cfg, seed);
      after += eval_loss(model, state.theta, held_out.instances);
    }
    INFO("held-out loss before " << before / 5 << ", after " << after / 5);
    CHECK(after < before);
  }
  SUBCASE("invalid configurations") {
    Fixture fx(WeightStrategy::rl);
    fx.cfg.rl.length = 5;
    CHECK_THROWS_AS(make_meta_state(fx.model, fx.cfg, 1), ConfigError);
    Fixture small(WeightStrategy::uniform);
    small.cfg.meta.support_size = 100;
    CHECK_THROWS_AS(make_meta_state(small.model, small.cfg, 1), ConfigError);
  }
}

TEST_CASE("EarlyStopper") {
  EarlyStopper flat(5, 1e-4);
  int stop_at = -1;
  for (int i = 0; i < 30 && stop_at < 0; ++i)
    if (flat.observe(1.0)) stop_at = i;
  CHECK(stop_at == 9);

  EarlyStopper falling(5, 1e-4);
  bool stopped = false;
  for (int i = 0; i < 100; ++i) stopped = stopped || falling.observe(10.0 - 0.01 * i);
  CHECK_FALSE(stopped);
}

TEST_CASE("transfer_finetune") {
  MetaModel model({.input_dim = 6, .hidden_dim = 6, .layers = 1});
  const auto target = make_synthetic_family(spec(1.0, 0, 6, 64), 5);
  const auto theta = model.init_params(3);
  CHECK(transfer_finetune(model, theta, target, 0.0, 5, 8, 1) == theta);

  SUBCASE("one full-batch sgd step") {
    const auto out = transfer_finetune(model, theta, target, 0.1, 1, target.size(), 1, OptimizerKind::sgd);
    const auto lg = evaluate_with_gradients(theta, model.loss_fn(target.instances));
    for (std::size_t i = 0; i < theta.size(); ++i) CHECK(out[i] == doctest::Approx(theta[i] - 0.1 * lg.grad[i]).epsilon(1e-12));
  }
  SUBCASE("training loss falls over 200 steps") {
    double before = 0.0;
    double after = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto p = model.init_params(seed);
      before += eval_loss(model, p, target.instances);
      after += eval_loss(model, transfer_finetune(model, p, target, 1e-2, 200, 16, seed), target.instances);
    }
    CHECK(after <= before);
  }
  CHECK_THROWS_AS(transfer_finetune(model, theta, target, 0.1, 1, 0, 1), EmptyBatch);
  CHECK_THROWS_AS(transfer_finetune(model, theta, target, 0.1, 0, 4, 1), ConfigError);
}
