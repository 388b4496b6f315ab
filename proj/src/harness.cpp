#include "metartl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "metartl/errors.hpp"
#include "metartl/rng.hpp"

namespace metartl {

using nlohmann::json;

namespace {

enum : std::uint64_t {
  kReference = 0x11,
  kFamily = 0x12,
  kSourceData = 0x13,
  kTargetTrain = 0x14,
  kTargetDev = 0x15,
  kSubsample = 0x16,
  kInit = 0x7E7A,
  kMetaLoop = 0x17,
  kFinetuneSeed = 0x18,
  kCombined = 0x19,
  kPretrain = 0x1A,
};

// Strict object reader: every key must be consumed.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  const json& child(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

EncoderConfig parse_model(const json& j, EncoderConfig m) {
  Fields f(j, "model");
  f.get("input_dim", m.input_dim);
  f.get("hidden_dim", m.hidden_dim);
  f.get("layers", m.layers);
  f.finish();
  return m;
}

json model_json(const EncoderConfig& m) {
  return {{"input_dim", m.input_dim}, {"hidden_dim", m.hidden_dim}, {"layers", m.layers}};
}

FinetuneSettings parse_finetune(Fields& f, FinetuneSettings s) {
  f.get("batches", s.batches);
  f.get("batch_size", s.batch_size);
  f.get("epochs", s.epochs);
  std::string opt = optimizer_name(s.optimizer);
  f.get("optimizer", opt);
  s.optimizer = parse_optimizer(opt);
  return s;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n'));
    throw ParseError(line, "invalid JSON in '" + path.string() + "'");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  return p.is_absolute() || p.empty() ? p : base / p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Re-raises the in-flight error with `context` prepended, keeping its category.
[[noreturn]] void rethrow_with_context(const std::string& context) {
  try {
    throw;
  } catch (const NumericalError& e) {
    throw NumericalError(context + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(context + ": " + e.what());
  } catch (const EmptyBatch& e) {
    throw EmptyBatch(context + ": " + e.what());
  } catch (const ShapeMismatch& e) {
    throw ShapeMismatch(context + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(context + ": " + e.what());
  } catch (const Error& e) {
    throw Error(context + ": " + e.what());
  }
}

std::size_t worker_count(std::size_t requested, std::size_t tasks) {
  std::size_t n = requested ? requested : std::max<unsigned>(1, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, tasks));
}

}  // namespace

// ---------------------------------------------------------------------------
// Methods and configuration

std::string to_string(Method m) {
  switch (m) {
    case Method::target_finetune: return "target_finetune";
    case Method::task_comb: return "task_comb";
    case Method::reptile: return "reptile";
    case Method::temp_reptile: return "temp_reptile";
    case Method::fomaml: return "fomaml";
    case Method::temp_fomaml: return "temp_fomaml";
    case Method::random: return "random";
    case Method::greedy: return "greedy";
    case Method::meta_rtl_reptile: return "meta_rtl_reptile";
    case Method::meta_rtl_fomaml: return "meta_rtl_fomaml";
  }
  return "unknown";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods{Method::target_finetune, Method::task_comb,   Method::reptile,
                                           Method::temp_reptile,    Method::fomaml,      Method::temp_fomaml,
                                           Method::random,          Method::greedy,      Method::meta_rtl_reptile,
                                           Method::meta_rtl_fomaml};
  return methods;
}

Method parse_method(const std::string& name) {
  for (auto m : all_methods()) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "'");
}

std::size_t RunConfig::num_sources() const {
  if (synthetic) return synthetic->sources.size();
  if (jsonl) return jsonl->sources.size();
  return 0;
}

std::size_t FinetuneSettings::steps_for(std::size_t train_size) const {
  if (epochs <= 0.0) return batches;
  const std::size_t bs = std::max<std::size_t>(1, std::min(batch_size, train_size));
  const double steps = std::ceil(epochs * static_cast<double>(train_size) / static_cast<double>(bs));
  return std::max<std::size_t>(1, static_cast<std::size_t>(steps));
}

void RunConfig::validate() const {
  if (methods.empty()) throw ConfigError("config: no methods");
  if (seeds.empty()) throw ConfigError("config: at least one seed is required");
  if (synthetic.has_value() == jsonl.has_value()) throw ConfigError("config: give exactly one of synthetic or jsonl");
  const std::size_t m = num_sources();
  if (m == 0) throw ConfigError("config: at least one source dataset is required");
  if (synthetic) {
    if (synthetic->input_dim != model.input_dim) throw ConfigError("config: model.input_dim must match synthetic.input_dim");
    if (synthetic->num_candidates < 2) throw ConfigError("config: synthetic.num_candidates must be >= 2");
    if (!(synthetic->label_noise >= 0.0 && synthetic->label_noise < 0.5)) {
      throw ConfigError("config: synthetic.label_noise must be in [0, 0.5)");
    }
    if (synthetic->target_train == 0 || synthetic->target_dev == 0) throw ConfigError("config: empty target split");
    for (const auto& s : synthetic->sources) {
      if (!(s.relatedness >= -1.0 && s.relatedness <= 1.0)) throw ConfigError("config: relatedness must be in [-1, 1]");
      if (s.instances < meta.support_size + meta.query_size) {
        throw ConfigError("config: source '" + s.name + "' is smaller than support + query");
      }
    }
  }
  if (jsonl && jsonl->feature_dim != model.input_dim) throw ConfigError("config: model.input_dim must match jsonl.feature_dim");
  if (model.layers == 0 && model.input_dim != model.hidden_dim) {
    throw ConfigError("config: layers = 0 needs input_dim == hidden_dim");
  }
  if (model.input_dim == 0 || model.hidden_dim == 0) throw ConfigError("config: model dims must be >= 1");
  if (!(target_fraction > 0.0 && target_fraction <= 1.0)) throw ConfigError("config: target_fraction must be in (0, 1]");
  meta.validate();
  for (auto method : methods) {
    if (method == Method::meta_rtl_reptile || method == Method::meta_rtl_fomaml || method == Method::greedy) {
      rl.validate(m);
    }
    if ((method == Method::fomaml || method == Method::temp_fomaml || method == Method::meta_rtl_fomaml) &&
        meta.query_size == 0) {
      throw ConfigError("config: fomaml methods need meta.query_size >= 1");
    }
  }
  if (policy.hidden_dim == 0 || policy.window == 0 || policy.ffn_dim == 0) throw ConfigError("config: policy dims");
  if (!(omega > 0.0)) throw ConfigError("config: omega must be positive");
  if (finetune.batches == 0 || finetune.batch_size == 0) throw ConfigError("config: finetune batches and batch_size >= 1");
  if (!(finetune.epochs >= 0.0) || !std::isfinite(finetune.epochs)) throw ConfigError("config: finetune epochs >= 0");
  if (eval_every == 0) throw ConfigError("config: eval_every must be >= 1");
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Fields f(j, "config");
  if (f.has("method") && f.has("methods")) throw ConfigError("config: give method or methods, not both");
  if (f.has("method")) {
    std::string m;
    f.get("method", m);
    c.methods = {parse_method(m)};
  }
  if (f.has("methods")) {
    std::vector<std::string> names;
    f.get("methods", names);
    for (const auto& n : names) c.methods.push_back(parse_method(n));
  }
  f.get("seeds", c.seeds);
  f.get("supervised", c.supervised);
  bool model_dim_given = false;
  if (f.has("model")) {
    const auto& mj = f.child("model");
    model_dim_given = mj.is_object() && mj.contains("input_dim");
    c.model = parse_model(mj, c.model);
  }
  if (f.has("synthetic")) {
    SyntheticSetup s;
    Fields g(f.child("synthetic"), "synthetic");
    g.get("input_dim", s.input_dim);
    g.get("num_candidates", s.num_candidates);
    g.get("label_noise", s.label_noise);
    g.get("target_train", s.target_train);
    g.get("target_dev", s.target_dev);
    if (g.has("sources")) {
      const auto& arr = g.child("sources");
      if (!arr.is_array()) throw ConfigError("synthetic.sources: expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        SyntheticSourceSpec src;
        src.name = "source" + std::to_string(i);
        Fields h(arr[i], "synthetic.sources[" + std::to_string(i) + "]");
        h.get("name", src.name);
        h.get("relatedness", src.relatedness);
        h.get("instances", src.instances);
        h.finish();
        s.sources.push_back(src);
      }
    }
    g.finish();
    if (!model_dim_given) c.model.input_dim = s.input_dim;
    c.synthetic = s;
  }
  if (f.has("jsonl")) {
    JsonlSetup s;
    Fields g(f.child("jsonl"), "jsonl");
    g.get("feature_dim", s.feature_dim);
    std::string train, dev;
    g.get("target_train", train);
    g.get("target_dev", dev);
    s.target_train = train;
    s.target_dev = dev;
    if (g.has("sources")) {
      const auto& arr = g.child("sources");
      if (!arr.is_array()) throw ConfigError("jsonl.sources: expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        JsonlSource src;
        std::string path;
        Fields h(arr[i], "jsonl.sources[" + std::to_string(i) + "]");
        h.get("name", src.name);
        h.get("path", path);
        h.finish();
        src.path = path;
        if (src.name.empty()) src.name = src.path.stem().string();
        s.sources.push_back(src);
      }
    }
    g.finish();
    if (!model_dim_given) c.model.input_dim = s.feature_dim;
    c.jsonl = s;
  }
  f.get("target_fraction", c.target_fraction);
  if (f.has("meta")) {
    Fields g(f.child("meta"), "meta");
    auto& m = c.meta;
    g.get("inner_lr", m.inner_lr);
    g.get("outer_lr", m.outer_lr);
    g.get("transfer_lr", m.transfer_lr);
    g.get("inner_steps", m.inner_steps);
    g.get("support_size", m.support_size);
    g.get("query_size", m.query_size);
    g.get("target_batch", m.target_batch);
    g.get("max_iterations", m.max_iterations);
    g.get("early_stop", m.early_stop);
    g.get("early_stop_window", m.early_stop_window);
    g.get("early_stop_tol", m.early_stop_tol);
    g.finish();
  }
  if (f.has("rl")) {
    Fields g(f.child("rl"), "rl");
    auto& r = c.rl;
    g.get("trajectories", r.trajectories);
    g.get("length", r.length);
    g.get("epsilon_start", r.epsilon.start);
    g.get("epsilon_horizon", r.epsilon.horizon);
    g.get("entropy_coef", r.entropy_coef);
    g.get("policy_lr", r.policy_optimizer.lr);
    g.get("policy_weight_decay", r.policy_optimizer.weight_decay);
    g.get("normalize_returns", r.normalize_returns);
    g.get("freeze_policy", r.freeze_policy);
    g.get("stub_uniform_weights", c.stub_uniform_weights);
    g.finish();
  }
  if (f.has("policy")) {
    Fields g(f.child("policy"), "policy");
    g.get("hidden_dim", c.policy.hidden_dim);
    g.get("window", c.policy.window);
    g.get("ffn_dim", c.policy.ffn_dim);
    g.finish();
  }
  f.get("omega", c.omega);
  if (f.has("finetune")) {
    Fields g(f.child("finetune"), "finetune");
    c.finetune = parse_finetune(g, c.finetune);
    g.finish();
  }
  f.get("eval_every", c.eval_every);
  f.get("record_wallclock", c.record_wallclock);
  f.get("jobs", c.jobs);
  std::string out = c.output_dir.string();
  f.get("output_dir", out);
  c.output_dir = out;
  f.finish();
  c.policy.num_tasks = c.num_sources();
  return c;
}

json RunConfig::to_json() const {
  json j;
  std::vector<std::string> names;
  for (auto m : methods) names.push_back(to_string(m));
  j["methods"] = names;
  j["seeds"] = seeds;
  j["supervised"] = supervised;
  j["model"] = model_json(model);
  if (synthetic) {
    json src = json::array();
    for (const auto& s : synthetic->sources) {
      src.push_back({{"name", s.name}, {"relatedness", s.relatedness}, {"instances", s.instances}});
    }
    j["synthetic"] = {{"input_dim", synthetic->input_dim},   {"num_candidates", synthetic->num_candidates},
                      {"label_noise", synthetic->label_noise}, {"sources", src},
                      {"target_train", synthetic->target_train}, {"target_dev", synthetic->target_dev}};
  }
  if (jsonl) {
    json src = json::array();
    for (const auto& s : jsonl->sources) src.push_back({{"name", s.name}, {"path", s.path.string()}});
    j["jsonl"] = {{"feature_dim", jsonl->feature_dim},
                  {"sources", src},
                  {"target_train", jsonl->target_train.string()},
                  {"target_dev", jsonl->target_dev.string()}};
  }
  j["target_fraction"] = target_fraction;
  j["meta"] = {{"inner_lr", meta.inner_lr},
               {"outer_lr", meta.outer_lr},
               {"transfer_lr", meta.transfer_lr},
               {"inner_steps", meta.inner_steps},
               {"support_size", meta.support_size},
               {"query_size", meta.query_size},
               {"target_batch", meta.target_batch},
               {"max_iterations", meta.max_iterations},
               {"early_stop", meta.early_stop},
               {"early_stop_window", meta.early_stop_window},
               {"early_stop_tol", meta.early_stop_tol}};
  j["rl"] = {{"trajectories", rl.trajectories},
             {"length", rl.length},
             {"epsilon_start", rl.epsilon.start},
             {"epsilon_horizon", rl.epsilon.horizon},
             {"entropy_coef", rl.entropy_coef},
             {"policy_lr", rl.policy_optimizer.lr},
             {"policy_weight_decay", rl.policy_optimizer.weight_decay},
             {"normalize_returns", rl.normalize_returns},
             {"freeze_policy", rl.freeze_policy},
             {"stub_uniform_weights", stub_uniform_weights}};
  j["policy"] = {{"hidden_dim", policy.hidden_dim}, {"window", policy.window}, {"ffn_dim", policy.ffn_dim}};
  j["omega"] = omega;
  j["finetune"] = {{"batches", finetune.batches},
                   {"batch_size", finetune.batch_size},
                   {"epochs", finetune.epochs},
                   {"optimizer", optimizer_name(finetune.optimizer)}};
  j["eval_every"] = eval_every;
  j["record_wallclock"] = record_wallclock;
  j["jobs"] = jobs;
  j["output_dir"] = output_dir.string();
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  auto cfg = RunConfig::from_json(read_json_file(path));
  const auto base = path.parent_path();
  if (cfg.jsonl) {
    for (auto& s : cfg.jsonl->sources) s.path = resolve(base, s.path);
    cfg.jsonl->target_train = resolve(base, cfg.jsonl->target_train);
    cfg.jsonl->target_dev = resolve(base, cfg.jsonl->target_dev);
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Datasets

DatasetBundle build_datasets(const RunConfig& cfg, std::uint64_t seed) {
  DatasetBundle out;
  if (cfg.synthetic) {
    const auto& s = *cfg.synthetic;
    SyntheticFamilySpec fam;
    fam.input_dim = s.input_dim;
    fam.num_candidates = s.num_candidates;
    fam.label_noise = s.label_noise;
    fam.reference_concept = random_unit_vector(s.input_dim, derive_seed(seed, {kReference}));
    for (std::size_t j = 0; j < s.sources.size(); ++j) {
      fam.family_id = derive_seed(seed, {kFamily, j});
      fam.relatedness = s.sources[j].relatedness;
      fam.instances = s.sources[j].instances;
      out.sources.push_back(make_synthetic_family(fam, derive_seed(seed, {kSourceData, j}), s.sources[j].name));
    }
    fam.family_id = derive_seed(seed, {kFamily, 0xFFFF});
    fam.relatedness = 1.0;
    fam.instances = s.target_train;
    out.target_train = make_synthetic_family(fam, derive_seed(seed, {kTargetTrain}), "target");
    fam.instances = s.target_dev;
    out.target_dev = make_synthetic_family(fam, derive_seed(seed, {kTargetDev}), "target_dev");
  } else {
    const auto& s = *cfg.jsonl;
    for (const auto& src : s.sources) {
      auto ds = load_jsonl(src.path, s.feature_dim);
      ds.name = src.name;
      out.sources.push_back(std::move(ds));
    }
    out.target_train = load_jsonl(s.target_train, s.feature_dim);
    out.target_train.name = "target";
    out.target_dev = load_jsonl(s.target_dev, s.feature_dim);
    out.target_dev.name = "target_dev";
  }
  if (cfg.target_fraction < 1.0) {
    out.target_train = subsample_fraction(out.target_train, cfg.target_fraction, derive_seed(seed, {kSubsample}));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running methods

namespace {

MetaIterationConfig meta_config_for(const RunConfig& cfg, Method method, const DatasetBundle& data) {
  MetaIterationConfig mc;
  mc.sources = &data.sources;
  mc.target = &data.target_train;
  mc.meta = cfg.meta;
  mc.rl = cfg.rl;
  mc.policy = cfg.policy;
  mc.omega = cfg.omega;
  mc.stub_uniform_weights = cfg.stub_uniform_weights;
  switch (method) {
    case Method::reptile: break;
    case Method::temp_reptile: mc.temperature_sampling = true; break;
    case Method::fomaml: mc.outer = OuterAlgorithm::fomaml; break;
    case Method::temp_fomaml:
      mc.outer = OuterAlgorithm::fomaml;
      mc.temperature_sampling = true;
      break;
    case Method::random: mc.strategy = WeightStrategy::random; break;
    case Method::greedy: mc.strategy = WeightStrategy::greedy; break;
    case Method::meta_rtl_reptile: mc.strategy = WeightStrategy::rl; break;
    case Method::meta_rtl_fomaml:
      mc.strategy = WeightStrategy::rl;
      mc.outer = OuterAlgorithm::fomaml;
      break;
    default: throw ConfigError("method " + to_string(method) + " has no meta loop");
  }
  return mc;
}

}  // namespace

SeedRun run_method(const RunConfig& cfg, Method method, std::uint64_t seed, const DatasetBundle& data) {
  const MetaModel model(cfg.model);
  SeedRun run;
  run.method = method;
  run.seed = seed;
  const std::string name = to_string(method);
  const auto t0 = std::chrono::steady_clock::now();
  auto ms = [&] { return cfg.record_wallclock ? 1000.0 * seconds_since(t0) : 0.0; };
  const auto& dev = data.target_dev.instances;
  auto dev_row = [&](std::size_t it, const std::string& split, const ParameterVector& theta) {
    MetricsRow row;
    row.method = name;
    row.seed = seed;
    row.iteration = it;
    row.split = split;
    row.loss = eval_loss(model, theta, dev);
    row.accuracy = model.accuracy(theta, dev);
    return row;
  };

  ParameterVector theta = model.init_params(derive_seed(seed, {kInit}));
  std::size_t last_iteration = 0;

  try {
    if (method == Method::task_comb) {
      TaskDataset merged;
      merged.name = "combined";
      for (const auto& s : data.sources) merged.instances.insert(merged.instances.end(), s.instances.begin(), s.instances.end());
      OptimizerSettings settings;
      settings.lr = cfg.meta.transfer_lr;
      auto opt = OptimizerState::create(settings, theta.size());
      const std::size_t bs = std::min(merged.size(), cfg.meta.support_size * data.sources.size());
      for (std::uint64_t it = 0; it < cfg.meta.max_iterations; ++it) {
        last_iteration = it;
        const auto batch = sample_target_batch(merged, bs, derive_seed(seed, {kCombined, it}));
        const auto lg = evaluate_with_gradients(theta, model.loss_fn(batch));
        theta = optimizer_step(opt, std::move(theta), lg.grad);
        if (it % cfg.eval_every == 0 || it + 1 == cfg.meta.max_iterations) {
          auto row = dev_row(it, "meta", theta);
          row.ms = ms();
          run.rows.push_back(std::move(row));
        }
      }
      run.meta_iterations = cfg.meta.max_iterations;
    } else if (method != Method::target_finetune) {
      const auto mc = meta_config_for(cfg, method, data);
      auto state = make_meta_state(model, mc, seed);
      state.theta = theta;
      const std::uint64_t loop_seed = derive_seed(seed, {kMetaLoop});
      std::optional<EarlyStopper> stopper;
      if (cfg.meta.early_stop) stopper.emplace(cfg.meta.early_stop_window, cfg.meta.early_stop_tol);
      for (std::size_t it = 0; it < cfg.meta.max_iterations; ++it) {
        last_iteration = it;
        const auto rec = run_meta_iteration(model, state, mc, loop_seed);
        const bool stop = stopper && stopper->observe(rec.post_update_loss);
        if (it % cfg.eval_every == 0 || stop || it + 1 == cfg.meta.max_iterations) {
          MetricsRow row;
          row.method = name;
          row.seed = seed;
          row.iteration = it;
          row.split = "meta";
          row.loss = rec.post_update_loss;
          row.accuracy = model.accuracy(state.theta, dev);
          row.weights = rec.weights;
          row.rewards = rec.rewards;
          if (mc.strategy == WeightStrategy::rl) row.epsilon = rec.epsilon;
          row.ms = ms();
          run.rows.push_back(std::move(row));
        }
        if (stop) break;
      }
      run.meta_iterations = state.iteration;
      theta = std::move(state.theta);
    }
  } catch (const Error&) {
    rethrow_with_context(name + " seed " + std::to_string(seed) + " iteration " + std::to_string(last_iteration));
  }
  run.meta_seconds = seconds_since(t0);

  const auto t1 = std::chrono::steady_clock::now();
  std::size_t final_iteration = run.meta_iterations;
  if (cfg.supervised || method == Method::target_finetune) {
    const std::size_t bs = std::min(cfg.finetune.batch_size, data.target_train.size());
    const std::size_t steps = cfg.finetune.steps_for(data.target_train.size());
    theta = transfer_finetune(model, theta, data.target_train, cfg.meta.transfer_lr, steps, bs,
                              derive_seed(seed, {kFinetuneSeed}), cfg.finetune.optimizer,
                              [&](std::size_t step, const ParameterVector& p) {
                                if (step % cfg.eval_every == 0 && step != steps) {
                                  auto row = dev_row(step, "finetune", p);
                                  row.ms = ms();
                                  run.rows.push_back(std::move(row));
                                }
                              });
    final_iteration = steps;
  }
  run.finetune_seconds = seconds_since(t1);

  auto final_row = dev_row(final_iteration, "final", theta);
  final_row.ms = ms();
  run.rows.push_back(final_row);
  run.final_accuracy = final_row.accuracy;
  run.best_accuracy = 0.0;
  for (const auto& r : run.rows) run.best_accuracy = std::max(run.best_accuracy, r.accuracy);
  run.theta = std::move(theta);
  return run;
}

std::vector<MetricsRow> ExperimentResult::rows() const {
  std::vector<MetricsRow> out;
  for (const auto& r : runs) out.insert(out.end(), r.rows.begin(), r.rows.end());
  return out;
}

ExperimentResult run_experiment(const RunConfig& cfg) {
  cfg.validate();
  auto job = [&cfg](std::uint64_t seed) {
    const auto data = build_datasets(cfg, seed);
    std::vector<SeedRun> runs;
    for (auto method : cfg.methods) runs.push_back(run_method(cfg, method, seed, data));
    return runs;
  };
  ExperimentResult result;
  const std::size_t workers = worker_count(cfg.jobs, cfg.seeds.size());
  for (std::size_t start = 0; start < cfg.seeds.size(); start += workers) {
    const std::size_t end = std::min(cfg.seeds.size(), start + workers);
    std::vector<std::future<std::vector<SeedRun>>> futures;
    for (std::size_t i = start; i < end; ++i) {
      futures.push_back(std::async(workers == 1 ? std::launch::deferred : std::launch::async, job, cfg.seeds[i]));
    }
    for (auto& f : futures) {
      auto runs = f.get();
      for (auto& r : runs) result.runs.push_back(std::move(r));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Metrics output

std::vector<MethodSummary> summarize(const std::vector<MetricsRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::map<std::uint64_t, std::pair<std::optional<double>, double>>> by_method;
  for (const auto& r : rows) {
    if (!by_method.count(r.method)) order.push_back(r.method);
    auto& entry = by_method[r.method][r.seed];
    entry.second = std::max(entry.second, r.accuracy);
    if (r.split == "final") entry.first = r.accuracy;
  }
  auto mean_std = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    return std::pair{mean, sd};
  };
  std::vector<MethodSummary> out;
  for (const auto& name : order) {
    std::vector<double> finals, bests;
    for (const auto& [seed, entry] : by_method[name]) {
      if (!entry.first) continue;
      finals.push_back(*entry.first);
      bests.push_back(entry.second);
    }
    if (finals.empty()) continue;
    MethodSummary s;
    s.method = name;
    s.runs = finals.size();
    std::tie(s.final_mean, s.final_std) = mean_std(finals);
    std::tie(s.best_mean, s.best_std) = mean_std(bests);
    out.push_back(s);
  }
  return out;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string metrics_csv(const std::vector<MetricsRow>& rows, std::size_t num_tasks) {
  std::string out = "method,seed,iteration,split,loss,accuracy";
  for (std::size_t i = 0; i < num_tasks; ++i) out += ",C_" + std::to_string(i);
  for (std::size_t i = 0; i < num_tasks; ++i) out += ",r_" + std::to_string(i);
  out += ",epsilon,ms\n";
  auto columns = [&](const std::vector<double>& v) {
    for (std::size_t i = 0; i < num_tasks; ++i) {
      out += ',';
      if (i < v.size()) out += format_number(v[i]);
    }
  };
  for (const auto& r : rows) {
    out += r.method + ',' + std::to_string(r.seed) + ',' + std::to_string(r.iteration) + ',' + r.split + ',' +
           format_number(r.loss) + ',' + format_number(r.accuracy);
    columns(r.weights);
    columns(r.rewards);
    out += ',';
    if (r.epsilon) out += format_number(*r.epsilon);
    out += ',' + format_number(r.ms) + '\n';
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void make_dirs(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

}  // namespace

void emit_metrics(const std::vector<MetricsRow>& rows, const RunConfig& cfg, const std::filesystem::path& out_dir) {
  if (rows.empty()) throw EmptyBatch("emit_metrics: no rows");
  make_dirs(out_dir);
  write_text(out_dir / "metrics.csv", metrics_csv(rows, cfg.num_sources()));
  json methods = json::array();
  for (const auto& s : summarize(rows)) {
    methods.push_back({{"method", s.method},
                       {"runs", s.runs},
                       {"final_accuracy", {{"mean", s.final_mean}, {"std", s.final_std}}},
                       {"best_accuracy", {{"mean", s.best_mean}, {"std", s.best_std}}}});
  }
  write_text(out_dir / "summary.json", json{{"methods", methods}}.dump(2) + "\n");
  write_text(out_dir / "config.json", cfg.to_json().dump(2) + "\n");
}

void emit_run_artifacts(const ExperimentResult& result, const std::filesystem::path& out_dir) {
  make_dirs(out_dir / "params");
  json timing = json::array();
  for (const auto& r : result.runs) {
    std::string text;
    for (double v : r.theta.values()) text += format_number(v) + '\n';
    write_text(out_dir / "params" / (to_string(r.method) + "_seed" + std::to_string(r.seed) + ".txt"), text);
    timing.push_back({{"method", to_string(r.method)},
                      {"seed", r.seed},
                      {"meta_iterations", r.meta_iterations},
                      {"meta_seconds", r.meta_seconds},
                      {"finetune_seconds", r.finetune_seconds}});
  }
  write_text(out_dir / "timing.json", timing.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Transferability

void TransferabilityConfig::validate() const {
  const std::size_t n = families.empty() ? jsonl.size() : families.size();
  if (!families.empty() && !jsonl.empty()) throw ConfigError("transferability: give synthetic families or jsonl, not both");
  if (n < 2) throw ConfigError("transferability: need at least two datasets");
  if (seeds.empty()) throw ConfigError("transferability: need at least one seed");
  if (pretrain_steps == 0 || pretrain_batch == 0) throw ConfigError("transferability: pretrain steps and batch >= 1");
  if (finetune.batches == 0 || finetune.batch_size == 0) throw ConfigError("transferability: finetune settings");
  const std::size_t dim = families.empty() ? feature_dim : input_dim;
  if (dim != model.input_dim) throw ConfigError("transferability: model.input_dim must match the data");
  for (const auto& f : families) {
    if (!(f.relatedness >= -1.0 && f.relatedness <= 1.0)) throw ConfigError("transferability: relatedness in [-1, 1]");
    if (f.train == 0 || f.dev == 0) throw ConfigError("transferability: empty split");
  }
}

TransferabilityConfig TransferabilityConfig::from_json(const json& j) {
  TransferabilityConfig c;
  Fields f(j, "config");
  bool model_dim_given = false;
  if (f.has("model")) {
    const auto& mj = f.child("model");
    model_dim_given = mj.is_object() && mj.contains("input_dim");
    c.model = parse_model(mj, c.model);
  }
  f.get("seeds", c.seeds);
  if (f.has("pretrain")) {
    Fields g(f.child("pretrain"), "pretrain");
    g.get("steps", c.pretrain_steps);
    g.get("lr", c.pretrain_lr);
    g.get("batch_size", c.pretrain_batch);
    g.finish();
  }
  if (f.has("finetune")) {
    Fields g(f.child("finetune"), "finetune");
    g.get("lr", c.finetune_lr);
    c.finetune = parse_finetune(g, c.finetune);
    g.finish();
  }
  if (f.has("synthetic")) {
    Fields g(f.child("synthetic"), "synthetic");
    g.get("input_dim", c.input_dim);
    g.get("num_candidates", c.num_candidates);
    if (g.has("families")) {
      const auto& arr = g.child("families");
      if (!arr.is_array()) throw ConfigError("synthetic.families: expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        Family fam;
        fam.name = "family" + std::to_string(i);
        Fields h(arr[i], "synthetic.families[" + std::to_string(i) + "]");
        h.get("name", fam.name);
        h.get("relatedness", fam.relatedness);
        h.get("train", fam.train);
        h.get("dev", fam.dev);
        h.finish();
        c.families.push_back(fam);
      }
    }
    g.finish();
    if (!model_dim_given) c.model.input_dim = c.input_dim;
  }
  if (f.has("jsonl")) {
    Fields g(f.child("jsonl"), "jsonl");
    g.get("feature_dim", c.feature_dim);
    if (g.has("datasets")) {
      const auto& arr = g.child("datasets");
      if (!arr.is_array()) throw ConfigError("jsonl.datasets: expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        JsonlPair p;
        std::string train, dev;
        Fields h(arr[i], "jsonl.datasets[" + std::to_string(i) + "]");
        h.get("name", p.name);
        h.get("train", train);
        h.get("dev", dev);
        h.finish();
        p.train = train;
        p.dev = dev;
        c.jsonl.push_back(p);
      }
    }
    g.finish();
    if (!model_dim_given) c.model.input_dim = c.feature_dim;
  }
  f.finish();
  return c;
}

TransferabilityConfig load_transferability_config(const std::filesystem::path& path) {
  auto cfg = TransferabilityConfig::from_json(read_json_file(path));
  for (auto& p : cfg.jsonl) {
    p.train = resolve(path.parent_path(), p.train);
    p.dev = resolve(path.parent_path(), p.dev);
  }
  cfg.validate();
  return cfg;
}

std::vector<TransferDataset> build_transfer_datasets(const TransferabilityConfig& cfg, std::uint64_t seed) {
  std::vector<TransferDataset> out;
  if (!cfg.families.empty()) {
    SyntheticFamilySpec fam;
    fam.input_dim = cfg.input_dim;
    fam.num_candidates = cfg.num_candidates;
    fam.reference_concept = random_unit_vector(cfg.input_dim, derive_seed(seed, {kReference}));
    for (std::size_t i = 0; i < cfg.families.size(); ++i) {
      const auto& f = cfg.families[i];
      fam.family_id = derive_seed(seed, {kFamily, i});
      fam.relatedness = f.relatedness;
      fam.instances = f.train;
      TransferDataset d;
      d.name = f.name;
      d.train = make_synthetic_family(fam, derive_seed(seed, {kTargetTrain, i}), f.name);
      fam.instances = f.dev;
      d.dev = make_synthetic_family(fam, derive_seed(seed, {kTargetDev, i}), f.name + "_dev");
      out.push_back(std::move(d));
    }
  } else {
    for (const auto& p : cfg.jsonl) {
      TransferDataset d;
      d.name = p.name.empty() ? p.train.stem().string() : p.name;
      d.train = load_jsonl(p.train, cfg.feature_dim);
      d.dev = load_jsonl(p.dev, cfg.feature_dim);
      out.push_back(std::move(d));
    }
  }
  return out;
}

std::vector<std::vector<double>> transferability_matrix(
    const std::vector<std::vector<TransferDataset>>& datasets_per_seed, const TransferabilityConfig& cfg) {
  if (datasets_per_seed.empty()) throw ConfigError("transferability: no seeds");
  const std::size_t n = datasets_per_seed.front().size();
  if (n < 2) throw ConfigError("transferability: need at least two datasets");
  const MetaModel model(cfg.model);
  std::vector<std::vector<double>> delta(n, std::vector<double>(n, 0.0));
  for (std::size_t s = 0; s < datasets_per_seed.size(); ++s) {
    const auto& ds = datasets_per_seed[s];
    if (ds.size() != n) throw ConfigError("transferability: dataset count differs across seeds");
    const std::uint64_t seed = s < cfg.seeds.size() ? cfg.seeds[s] : s;
    const auto init = model.init_params(derive_seed(seed, {kInit}));
    auto finetune_on = [&](const ParameterVector& start, std::size_t j) {
      const std::size_t bs = std::min(cfg.finetune.batch_size, ds[j].train.size());
      const auto p = transfer_finetune(model, start, ds[j].train, cfg.finetune_lr,
                                       cfg.finetune.steps_for(ds[j].train.size()), bs,
                                       derive_seed(seed, {kFinetuneSeed, j}), cfg.finetune.optimizer);
      return model.accuracy(p, ds[j].dev.instances);
    };
    std::vector<double> direct(n);
    for (std::size_t j = 0; j < n; ++j) direct[j] = finetune_on(init, j);
    for (std::size_t i = 0; i < n; ++i) {
      OptimizerSettings settings;
      settings.lr = cfg.pretrain_lr;
      auto opt = OptimizerState::create(settings, init.size());
      ParameterVector pre = init;
      const std::size_t bs = std::min(cfg.pretrain_batch, ds[i].train.size());
      for (std::uint64_t step = 0; step < cfg.pretrain_steps; ++step) {
        const auto batch = sample_target_batch(ds[i].train, bs, derive_seed(seed, {kPretrain, i, step}));
        const auto lg = evaluate_with_gradients(pre, model.loss_fn(batch));
        pre = optimizer_step(opt, std::move(pre), lg.grad);
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        delta[i][j] += finetune_on(pre, j) - direct[j];
      }
    }
  }
  for (auto& row : delta)
    for (auto& v : row) v /= static_cast<double>(datasets_per_seed.size());
  return delta;
}

std::vector<std::vector<double>> transferability_matrix(const TransferabilityConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<TransferDataset>> per_seed;
  for (auto seed : cfg.seeds) per_seed.push_back(build_transfer_datasets(cfg, seed));
  return transferability_matrix(per_seed, cfg);
}

}  // namespace metartl
