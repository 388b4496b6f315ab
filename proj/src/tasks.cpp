#include "metartl/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "metartl/errors.hpp"
#include "metartl/rng.hpp"

namespace metartl {

std::vector<std::size_t> TaskDataset::candidate_counts() const {
  std::set<std::size_t> counts;
  for (const auto& inst : instances) counts.insert(inst.num_candidates());
  return {counts.begin(), counts.end()};
}

void TaskDataset::validate() const {
  if (instances.empty()) throw EmptyBatch("dataset '" + name + "' is empty");
  const std::size_t d = dim();
  for (const auto& inst : instances) {
    if (inst.dim != d) throw ConfigError("dataset '" + name + "' mixes feature dims");
    if (inst.num_candidates() < 2 || inst.label >= inst.num_candidates()) {
      throw ConfigError("dataset '" + name + "' holds a malformed instance");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic families

void SyntheticFamilySpec::validate() const {
  if (input_dim == 0) throw ConfigError("synthetic family: input_dim must be >= 1");
  if (num_candidates < 2) throw ConfigError("synthetic family: need >= 2 candidates");
  if (instances == 0) throw ConfigError("synthetic family: need >= 1 instance");
  if (reference_concept.size() != input_dim) throw ConfigError("synthetic family: reference concept dim");
  double norm2 = 0.0;
  for (double v : reference_concept) norm2 += v * v;
  if (std::abs(std::sqrt(norm2) - 1.0) > 1e-9) throw ConfigError("synthetic family: reference concept not unit norm");
  if (!(relatedness >= -1.0 && relatedness <= 1.0)) throw ConfigError("synthetic family: relatedness outside [-1, 1]");
  if (!(label_noise >= 0.0 && label_noise < 0.5)) throw ConfigError("synthetic family: label noise outside [0, 0.5)");
  if (relatedness * relatedness < 1.0 && input_dim < 2) {
    throw ConfigError("synthetic family: need input_dim >= 2 for an orthogonal component");
  }
}

std::vector<double> random_unit_vector(std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(dim);
  double norm2 = 0.0;
  while (norm2 == 0.0) {
    for (auto& x : v) x = rng.normal();
    norm2 = 0.0;
    for (double x : v) norm2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

std::vector<double> family_concept(const SyntheticFamilySpec& spec) {
  spec.validate();
  const auto& ref = spec.reference_concept;
  const double rho = spec.relatedness;
  const std::size_t d = spec.input_dim;
  if (rho == 1.0 || rho == -1.0) {
    std::vector<double> c(ref);
    for (auto& x : c) x *= rho;
    return c;
  }
  // Orthogonal direction depends only on the family id, so every split of a
  // family shares one concept. Two Gram-Schmidt passes for accuracy.
  std::vector<double> u = random_unit_vector(d, derive_seed(spec.family_id, {0xFA11u, d}));
  for (int pass = 0; pass < 2; ++pass) {
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += u[i] * ref[i];
    double norm2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      u[i] -= dot * ref[i];
      norm2 += u[i] * u[i];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : u) x *= inv;
  }
  const double ortho = std::sqrt(1.0 - rho * rho);
  std::vector<double> c(d);
  for (std::size_t i = 0; i < d; ++i) c[i] = rho * ref[i] + ortho * u[i];
  return c;
}

TaskDataset make_synthetic_family(const SyntheticFamilySpec& spec, std::uint64_t seed, std::string name) {
  const auto concept_vec = family_concept(spec);
  Rng rng(seed);
  TaskDataset ds;
  ds.name = name.empty() ? "family" + std::to_string(spec.family_id) : std::move(name);
  ds.instances.reserve(spec.instances);
  const std::size_t n = spec.num_candidates, d = spec.input_dim;
  for (std::size_t k = 0; k < spec.instances; ++k) {
    ChoiceInstance inst;
    inst.dim = d;
    inst.features.resize(n * d);
    for (auto& x : inst.features) x = rng.normal();
    std::vector<double> proj(n, 0.0);
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t i = 0; i < d; ++i) proj[c] += concept_vec[i] * inst.features[c * d + i];
    inst.label = argmax_lowest(proj);
    if (spec.label_noise > 0.0 && rng.uniform() < spec.label_noise) {
      const std::size_t other = rng.index(n - 1);
      inst.label = other >= inst.label ? other + 1 : other;
    }
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Sampling

Episode sample_episode(const TaskDataset& ds, std::size_t support_size, std::size_t query_size,
                       std::uint64_t seed) {
  if (support_size == 0) throw EmptyBatch("episode support size is 0");
  if (support_size + query_size > ds.size()) {
    throw EmptyBatch("dataset '" + ds.name + "' has " + std::to_string(ds.size()) + " instances, episode needs " +
                     std::to_string(support_size + query_size));
  }
  Rng rng(seed);
  const auto idx = rng.sample_without_replacement(ds.size(), support_size + query_size);
  Episode ep;
  ep.support_indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(support_size));
  ep.query_indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(support_size), idx.end());
  for (auto i : ep.support_indices) ep.support.push_back(ds.instances[i]);
  for (auto i : ep.query_indices) ep.query.push_back(ds.instances[i]);
  return ep;
}

std::vector<ChoiceInstance> sample_target_batch(const TaskDataset& target, std::size_t batch_size,
                                                std::uint64_t seed) {
  if (batch_size == 0) throw EmptyBatch("target batch size is 0");
  if (batch_size > target.size()) {
    throw EmptyBatch("target '" + target.name + "' has " + std::to_string(target.size()) +
                     " instances, batch needs " + std::to_string(batch_size));
  }
  Rng rng(seed);
  std::vector<ChoiceInstance> batch;
  batch.reserve(batch_size);
  for (auto i : rng.sample_without_replacement(target.size(), batch_size)) batch.push_back(target.instances[i]);
  return batch;
}

std::vector<double> temperature_probs(std::span<const double> sizes, double omega) {
  if (sizes.empty()) throw ConfigError("temperature_probs: no sizes");
  if (!(omega > 0.0) || !std::isfinite(omega)) throw ConfigError("temperature_probs: omega must be positive");
  std::vector<double> logw(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (!(sizes[i] > 0.0) || !std::isfinite(sizes[i])) throw ConfigError("temperature_probs: sizes must be positive");
    logw[i] = std::log(sizes[i]) / omega;
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  std::vector<double> p(sizes.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logw[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

std::size_t subsample_count(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample fraction must be in (0, 1]");
  // Slack absorbs decimal fractions that land just below an integer (0.29 * 100).
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

TaskDataset subsample_fraction(const TaskDataset& ds, double fraction, std::uint64_t seed) {
  const std::size_t k = subsample_count(ds.size(), fraction);
  if (ds.size() == 0) throw EmptyBatch("cannot subsample an empty dataset");
  Rng rng(seed);
  auto idx = rng.sample_without_replacement(ds.size(), k);
  std::sort(idx.begin(), idx.end());
  TaskDataset out;
  out.name = ds.name;
  out.instances.reserve(k);
  for (auto i : idx) out.instances.push_back(ds.instances[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Text ingestion

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

void append_tokens(std::string_view text, std::vector<std::string>& out) {
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
}

}  // namespace

std::vector<double> hash_features(std::string_view context, std::string_view question, std::string_view answer,
                                  std::size_t dim) {
  if (dim == 0) throw ConfigError("hash_features: dim must be >= 1");
  std::vector<std::string> tokens;
  append_tokens(context, tokens);
  append_tokens(question, tokens);
  append_tokens(answer, tokens);

  std::vector<double> f(dim, 0.0);
  auto add = [&](std::string_view feature) {
    const std::uint64_t h = mix64(fnv1a(feature));
    f[h % dim] += (h >> 63) ? -1.0 : 1.0;
  };
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    add(tokens[i]);
    if (i + 1 < tokens.size()) add(tokens[i] + ' ' + tokens[i + 1]);
  }
  double norm2 = 0.0;
  for (double v : f) norm2 += v * v;
  if (norm2 > 0.0) {
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : f) v *= inv;
  }
  return f;
}

TaskDataset load_jsonl(const std::filesystem::path& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  TaskDataset ds;
  ds.name = path.stem().string();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) throw ParseError(line_no, "record is not an object");
    auto text_field = [&](const char* key, bool required) -> std::string {
      if (!rec.contains(key)) {
        if (required) throw ParseError(line_no, std::string("missing field '") + key + "'");
        return {};
      }
      if (!rec[key].is_string()) throw ParseError(line_no, std::string("field '") + key + "' is not a string");
      return rec[key].get<std::string>();
    };
    const std::string context = text_field("context", false);
    const std::string question = text_field("question", true);
    if (!rec.contains("candidates") || !rec["candidates"].is_array()) {
      throw ParseError(line_no, "field 'candidates' must be a list");
    }
    const auto& cands = rec["candidates"];
    if (cands.size() < 2) throw ParseError(line_no, "need at least 2 candidates");
    if (!rec.contains("label") || !rec["label"].is_number_integer()) {
      throw ParseError(line_no, "field 'label' must be an integer");
    }
    const auto label = rec["label"].get<long long>();
    if (label < 0 || static_cast<std::size_t>(label) >= cands.size()) {
      throw ParseError(line_no, "label " + std::to_string(label) + " out of range");
    }
    ChoiceInstance inst;
    inst.dim = dim;
    inst.label = static_cast<std::size_t>(label);
    for (const auto& c : cands) {
      if (!c.is_string()) throw ParseError(line_no, "candidate is not a string");
      const auto f = hash_features(context, question, c.get<std::string>(), dim);
      inst.features.insert(inst.features.end(), f.begin(), f.end());
    }
    ds.instances.push_back(std::move(inst));
  }
  if (ds.instances.empty()) throw EmptyBatch("no records in " + path.string());
  return ds;
}

}  // namespace metartl
