#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <vector>

#include "metartl/errors.hpp"
#include "metartl/grad.hpp"
#include "metartl/rng.hpp"
#include "metartl/tasks.hpp"

using namespace metartl;
namespace fs = std::filesystem;

namespace {

SyntheticFamilySpec family(double rho, std::uint64_t id, std::size_t dim = 16, std::size_t count = 400,
                           double noise = 0.0) {
  SyntheticFamilySpec s;
  s.family_id = id;
  s.input_dim = dim;
  s.num_candidates = 4;
  s.reference_concept = random_unit_vector(dim, 99);
  s.relatedness = rho;
  s.label_noise = noise;
  s.instances = count;
  return s;
}

TaskDataset indexed_dataset(std::size_t n) {
  TaskDataset ds;
  ds.name = "indexed";
  for (std::size_t i = 0; i < n; ++i) {
    ds.instances.push_back(ChoiceInstance::make({{static_cast<double>(i)}, {-1.0}}, 0));
  }
  return ds;
}

std::size_t id_of(const ChoiceInstance& inst) { return static_cast<std::size_t>(inst.features[0]); }

fs::path write_file(const std::string& name, const std::string& body) {
  const auto p = fs::temp_directory_path() / ("metartl_test_" + name);
  std::ofstream(p) << body;
  return p;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("synthetic family construction") {
  SUBCASE("relatedness 1 reproduces the reference concept") {
    const auto s = family(1.0, 3);
    CHECK(family_concept(s) == s.reference_concept);
    // Same generator seed, different family id -> identical instances.
    auto other = s;
    other.family_id = 8;
    const auto a = make_synthetic_family(s, 5);
    const auto b = make_synthetic_family(other, 5);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.instances[i].label == b.instances[i].label);
  }
  SUBCASE("relatedness 0 is orthogonal to the reference") {
    for (std::uint64_t id = 0; id < 10; ++id) {
      const auto s = family(0.0, id);
      const auto c = family_concept(s);
      CHECK(std::abs(dot(c, s.reference_concept)) < 1e-9);
      CHECK(dot(c, c) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("concept correlation equals relatedness") {
    for (double rho : {-0.4, 0.3, 0.6, 0.9}) {
      const auto s = family(rho, 2);
      CHECK(dot(family_concept(s), s.reference_concept) == doctest::Approx(rho).epsilon(1e-12));
    }
  }
  SUBCASE("noise-free labels are recovered by the true concept") {
    for (double rho : {0.0, 0.5, 1.0}) {
      const auto s = family(rho, 4, 8, 500);
      const auto c = family_concept(s);
      const auto ds = make_synthetic_family(s, 11);
      std::size_t correct = 0;
      for (const auto& inst : ds.instances) {
        std::vector<double> proj;
        for (std::size_t k = 0; k < inst.num_candidates(); ++k) proj.push_back(dot(c, inst.candidate(k)));
        correct += argmax_lowest(proj) == inst.label;
      }
      CHECK(correct == ds.size());
    }
  }
  SUBCASE("label noise flips roughly the requested share") {
    const auto s = family(1.0, 1, 8, 4000, 0.2);
    const auto c = family_concept(s);
    const auto ds = make_synthetic_family(s, 3);
    std::size_t flipped = 0;
    for (const auto& inst : ds.instances) {
      std::vector<double> proj;
      for (std::size_t k = 0; k < inst.num_candidates(); ++k) proj.push_back(dot(c, inst.candidate(k)));
      flipped += argmax_lowest(proj) != inst.label;
    }
    CHECK(static_cast<double>(flipped) / 4000.0 == doctest::Approx(0.2).epsilon(0.15));
  }
  SUBCASE("invalid specs") {
    auto s = family(0.5, 1);
    s.label_noise = 0.5;
    CHECK_THROWS_AS(make_synthetic_family(s, 1), ConfigError);
    s = family(1.5, 1);
    CHECK_THROWS_AS(make_synthetic_family(s, 1), ConfigError);
    s = family(0.5, 1);
    s.reference_concept[0] += 0.1;
    CHECK_THROWS_AS(make_synthetic_family(s, 1), ConfigError);
    s = family(0.5, 1);
    s.num_candidates = 1;
    CHECK_THROWS_AS(make_synthetic_family(s, 1), ConfigError);
  }
}

TEST_CASE("sample_episode") {
  const auto ds = indexed_dataset(16);
  SUBCASE("support and query partition a 16-instance dataset") {
    const auto ep = sample_episode(ds, 8, 8, 3);
    std::set<std::size_t> seen;
    for (const auto& i : ep.support) seen.insert(id_of(i));
    for (const auto& i : ep.query) seen.insert(id_of(i));
    CHECK(seen.size() == 16);
    CHECK(ep.support.size() == 8);
  }
  SUBCASE("support and query are disjoint for every sampled episode") {
    const auto big = indexed_dataset(40);
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
      const auto ep = sample_episode(big, 1 + seed % 12, seed % 20, seed);
      std::set<std::size_t> sup(ep.support_indices.begin(), ep.support_indices.end());
      CHECK(sup.size() == ep.support.size());
      for (auto q : ep.query_indices) CHECK(sup.count(q) == 0);
    }
  }
  SUBCASE("same seed, same episode") {
    const auto a = sample_episode(ds, 4, 4, 42);
    const auto b = sample_episode(ds, 4, 4, 42);
    CHECK(a.support_indices == b.support_indices);
    CHECK(a.query_indices == b.query_indices);
  }
  SUBCASE("uniform selection frequency") {
    const auto hundred = indexed_dataset(100);
    std::vector<int> hits(100, 0);
    for (std::uint64_t s = 0; s < 10000; ++s) ++hits[sample_episode(hundred, 1, 0, s).support_indices[0]];
    for (int h : hits) CHECK(std::abs(h / 10000.0 - 0.01) <= 0.005);
  }
  SUBCASE("insufficient instances") {
    CHECK_THROWS_AS(sample_episode(ds, 10, 7, 1), EmptyBatch);
    CHECK_THROWS_AS(sample_episode(ds, 0, 3, 1), EmptyBatch);
  }
}

TEST_CASE("sample_target_batch") {
  const auto ds = indexed_dataset(20);
  SUBCASE("whole dataset, shuffled") {
    const auto b = sample_target_batch(ds, 20, 7);
    std::set<std::size_t> ids;
    bool reordered = false;
    for (std::size_t i = 0; i < b.size(); ++i) {
      ids.insert(id_of(b[i]));
      reordered = reordered || id_of(b[i]) != i;
    }
    CHECK(ids.size() == 20);
    CHECK(reordered);
  }
  SUBCASE("zero batch") { CHECK_THROWS_AS(sample_target_batch(ds, 0, 1), EmptyBatch); }
  SUBCASE("disjoint seeds give different batches") {
    int differ = 0;
    for (std::uint64_t t = 0; t < 100; ++t) {
      const auto a = sample_target_batch(ds, 3, 2 * t);
      const auto b = sample_target_batch(ds, 3, 2 * t + 1);
      bool same = true;
      for (std::size_t i = 0; i < 3; ++i) same = same && id_of(a[i]) == id_of(b[i]);
      differ += !same;
    }
    CHECK(differ / 100.0 >= 1.0 - 1.0 / 20.0);
  }
}

TEST_CASE("temperature_probs") {
  const std::vector<double> sizes{9741, 40398, 10176, 3510};
  SUBCASE("training-set sizes at omega 1") {
    const auto p = temperature_probs(sizes, 1.0);
    const double expected[] = {0.1526, 0.6330, 0.1594, 0.0550};
    for (int i = 0; i < 4; ++i) CHECK(std::abs(p[i] - expected[i]) <= 5e-4);
  }
  SUBCASE("large omega tends to uniform") {
    for (double v : temperature_probs(sizes, 1e6)) CHECK(std::abs(v - 0.25) <= 1e-5);
  }
  SUBCASE("equal sizes give uniform for any omega") {
    const std::vector<double> eq{7, 7, 7};
    for (double w : {0.1, 1.0, 5.0})
      for (double v : temperature_probs(eq, w)) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("normalization and permutation equivariance") {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> s(2 + rng.index(6));
      for (auto& x : s) x = rng.uniform(1.0, 1e5);
      const double w = rng.uniform(0.2, 6.0);
      const auto p = temperature_probs(s, w);
      CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) <= 1e-12);
      std::vector<double> rev(s.rbegin(), s.rend());
      const auto q = temperature_probs(rev, w);
      for (std::size_t i = 0; i < p.size(); ++i) CHECK(q[p.size() - 1 - i] == doctest::Approx(p[i]).epsilon(1e-13));
    }
  }
  SUBCASE("invalid inputs") {
    const std::vector<double> bad{1.0, 0.0};
    CHECK_THROWS_AS(temperature_probs(bad, 1.0), ConfigError);
    CHECK_THROWS_AS(temperature_probs(sizes, 0.0), ConfigError);
    CHECK_THROWS_AS(temperature_probs(sizes, -2.0), ConfigError);
  }
}

TEST_CASE("subsample_fraction") {
  SUBCASE("fraction 1 keeps every instance") {
    const auto ds = indexed_dataset(50);
    const auto s = subsample_fraction(ds, 1.0, 4);
    REQUIRE(s.size() == 50);
    for (std::size_t i = 0; i < 50; ++i) CHECK(id_of(s.instances[i]) == i);
  }
  SUBCASE("one percent of 3510") {
    CHECK(subsample_fraction(indexed_dataset(3510), 0.01, 2).size() == 35);
  }
  SUBCASE("low-resource grid on 1000 instances") {
    const std::size_t expected[] = {10, 50, 100, 200, 300, 400};
    const double fractions[] = {0.01, 0.05, 0.10, 0.20, 0.30, 0.40};
    for (int i = 0; i < 6; ++i) CHECK(subsample_count(1000, fractions[i]) == expected[i]);
    CHECK(subsample_count(100, 0.29) == 29);
    CHECK(subsample_count(10, 0.01) == 1);
  }
  SUBCASE("different seeds give different subsets") {
    const auto ds = indexed_dataset(100);
    const auto a = subsample_fraction(ds, 0.5, 1);
    const auto b = subsample_fraction(ds, 0.5, 2);
    bool differ = false;
    for (std::size_t i = 0; i < a.size(); ++i) differ = differ || id_of(a.instances[i]) != id_of(b.instances[i]);
    CHECK(differ);
  }
  SUBCASE("out of range") {
    const auto ds = indexed_dataset(10);
    CHECK_THROWS_AS(subsample_fraction(ds, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(subsample_fraction(ds, 1.5, 1), ConfigError);
  }
}

TEST_CASE("hash_features") {
  const auto a = hash_features("A man walks", "what does he do?", "He walks", 64);
  const auto b = hash_features("A man walks", "what does he do?", "He walks", 64);
  CHECK(a == b);
  CHECK(hash_features("", "Q", "ANSWER", 32) == hash_features("", "q", "answer", 32));
  for (const auto& f : {a, hash_features("", "x", "", 7), hash_features("ctx", "q q q", "a b", 512)}) {
    CHECK(std::sqrt(dot(f, f)) == doctest::Approx(1.0).epsilon(1e-9));
  }
  const auto empty = hash_features("", "  ", "\t", 16);
  for (double v : empty) CHECK(v == 0.0);
  CHECK(a != hash_features("A man walks", "what does he do?", "He sleeps", 64));
}

TEST_CASE("load_jsonl") {
  SUBCASE("well-formed records") {
    const auto p = write_file("ok.jsonl",
                              R"({"context": "It rains.", "question": "What to take?", "candidates": ["umbrella", "sunscreen"], "label": 0})"
                              "\n\n"
                              R"({"question": "Pick one", "candidates": ["a", "b", "c", "a"], "label": 2})"
                              "\n");
    const auto ds = load_jsonl(p, 128);
    REQUIRE(ds.size() == 2);
    CHECK(ds.dim() == 128);
    CHECK(ds.candidate_counts() == std::vector<std::size_t>{2, 4});
    const auto& second = ds.instances[1];
    CHECK(std::equal(second.candidate(0).begin(), second.candidate(0).end(), second.candidate(3).begin()));
    CHECK(second.label == 2);
  }
  SUBCASE("empty file") {
    CHECK_THROWS_AS(load_jsonl(write_file("empty.jsonl", ""), 16), EmptyBatch);
  }
  SUBCASE("malformed line reports its line number") {
    const auto p = write_file("bad.jsonl",
                              R"({"question": "q", "candidates": ["a", "b"], "label": 0})"
                              "\n{not json\n");
    try {
      load_jsonl(p, 16);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
    }
  }
  SUBCASE("label out of range") {
    const auto p = write_file("label.jsonl", R"({"question": "q", "candidates": ["a", "b"], "label": 2})");
    CHECK_THROWS_AS(load_jsonl(p, 16), ParseError);
  }
  SUBCASE("too few candidates and missing fields") {
    CHECK_THROWS_AS(load_jsonl(write_file("one.jsonl", R"({"question": "q", "candidates": ["a"], "label": 0})"), 16),
                    ParseError);
    CHECK_THROWS_AS(load_jsonl(write_file("nolabel.jsonl", R"({"question": "q", "candidates": ["a", "b"]})"), 16),
                    ParseError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_jsonl("/nonexistent/x.jsonl", 16), IoError); }
}

TEST_CASE("zero-shot transfer accuracy grows with relatedness") {
  // Train on a source family, evaluate on the reference family, five seeds.
  const std::size_t dim = 12;
  MetaModel model({.input_dim = dim, .hidden_dim = 12, .layers = 1});
  auto target_spec = family(1.0, 100, dim, 600);
  const auto target = make_synthetic_family(target_spec, 777);
  std::vector<double> mean_acc;
  for (double rho : {0.0, 0.5, 1.0}) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto src_spec = family(rho, 10 + seed, dim, 600);
      const auto src = make_synthetic_family(src_spec, 1000 + seed);
      auto params = model.init_params(seed);
      auto opt = OptimizerState::create({.kind = OptimizerKind::adamw, .lr = 0.01, .weight_decay = 0.0}, params.size());
      for (std::uint64_t step = 0; step < 150; ++step) {
        const auto batch = sample_target_batch(src, 32, derive_seed(seed, {step}));
        const auto lg = evaluate_with_gradients(params, model.loss_fn(batch));
        params = optimizer_step(opt, std::move(params), lg.grad);
      }
      total += model.accuracy(params, target.instances);
    }
    mean_acc.push_back(total / 5.0);
  }
  INFO("accuracy by relatedness 0/0.5/1: " << mean_acc[0] << " " << mean_acc[1] << " " << mean_acc[2]);
  CHECK(mean_acc[0] <= mean_acc[1]);
  CHECK(mean_acc[1] <= mean_acc[2]);
}
