#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metartl/models.hpp"

namespace metartl {

struct TaskDataset {
  std::string name;
  std::vector<ChoiceInstance> instances;

  std::size_t size() const { return instances.size(); }
  std::size_t dim() const { return instances.empty() ? 0 : instances.front().dim; }
  // Distinct candidate counts present, ascending.
  std::vector<std::size_t> candidate_counts() const;
  // Throws EmptyBatch when empty, ConfigError on a malformed instance.
  void validate() const;
};

// One sampled source task. Index vectors refer to the parent dataset.
struct Episode {
  std::vector<ChoiceInstance> support;
  std::vector<ChoiceInstance> query;
  std::vector<std::size_t> support_indices;
  std::vector<std::size_t> query_indices;
};

// Linear-concept multiple-choice family: candidates are standard normal
// vectors and the gold candidate maximizes <concept, x>. The family concept
// is relatedness * reference + sqrt(1 - relatedness^2) * u, where u is a unit
// vector orthogonal to the reference drawn from `family_id`.
struct SyntheticFamilySpec {
  std::uint64_t family_id = 0;
  std::size_t input_dim = 32;
  std::size_t num_candidates = 4;
  std::vector<double> reference_concept;  // unit norm
  double relatedness = 1.0;               // in [-1, 1]
  double label_noise = 0.0;               // in [0, 0.5)
  std::size_t instances = 2000;

  // Throws ConfigError.
  void validate() const;
};

// Random unit vector; the shared reference for a family of related tasks.
std::vector<double> random_unit_vector(std::size_t dim, std::uint64_t seed);
std::vector<double> family_concept(const SyntheticFamilySpec& spec);
TaskDataset make_synthetic_family(const SyntheticFamilySpec& spec, std::uint64_t seed, std::string name = {});

// Disjoint support/query sets drawn uniformly without replacement.
// Throws EmptyBatch if support_size is 0 or the dataset is too small.
Episode sample_episode(const TaskDataset& ds, std::size_t support_size, std::size_t query_size,
                       std::uint64_t seed);
std::vector<ChoiceInstance> sample_target_batch(const TaskDataset& target, std::size_t batch_size,
                                                std::uint64_t seed);

// P_m = d_m^{1/omega} / sum_k d_k^{1/omega}. Throws ConfigError.
std::vector<double> temperature_probs(std::span<const double> sizes, double omega);

// floor(fraction * |ds|) instances (at least 1), without replacement, in
// original order. Throws ConfigError unless 0 < fraction <= 1.
TaskDataset subsample_fraction(const TaskDataset& ds, double fraction, std::uint64_t seed);
std::size_t subsample_count(std::size_t n, double fraction);

// Signed feature hashing of lowercased whitespace unigrams and bigrams over
// "context question answer", L2-normalized. Empty text yields zeros.
std::vector<double> hash_features(std::string_view context, std::string_view question,
                                  std::string_view answer, std::size_t dim);

// One JSON object per line: {"context", "question", "candidates", "label"}.
// Blank lines are skipped. Throws ParseError (with line number), IoError,
// or EmptyBatch for a file with no records.
TaskDataset load_jsonl(const std::filesystem::path& path, std::size_t dim);

}  // namespace metartl
