#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmfuse/train.hpp"

namespace mmfuse {

struct ExperimentConfig {
  std::string label = "experiment";
  SyntheticTaskConfig task;
  ModelConfig model;
  TrainConfig train;

  // Model shapes follow the task.
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.seq_text = task.seq_text;
    m.seq_image = task.seq_image;
    m.dim = task.dim;
    return m;
  }

  void validate() const {
    task.validate();
    model_config().validate();
    train.validate();
  }
};

// ---------------------------------------------------------------------------
// Flat "key = value" configuration.

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace detail {
inline std::string fmt_real(Real v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, static_cast<double>(v));
  return std::string(buf, r.ptr);
}

inline std::string fmt_bool(bool b) { return b ? "true" : "false"; }

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ParameterError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ParameterError("config: " + key + " expects a nonnegative integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ParameterError("config: " + key + " expects true or false, got '" + v + "'");
}
}  // namespace detail

/// Every configurable field in a fixed order.
inline KeyValues to_key_values(const ExperimentConfig& c) {
  using detail::fmt_real;
  auto u = [](std::uint64_t v) { return std::to_string(v); };
  std::string seeds;
  for (std::size_t i = 0; i < c.train.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(c.train.seeds[i]);
  return {
      {"experiment.label", c.label},
      {"task.n", u(c.task.seq_text)},
      {"task.T", u(c.task.seq_image)},
      {"task.D", u(c.task.dim)},
      {"task.class_separation", fmt_real(c.task.class_separation)},
      {"task.correlation", fmt_real(c.task.correlation)},
      {"task.noise_std", fmt_real(c.task.noise_std)},
      {"task.train_size", u(c.task.train_size)},
      {"task.val_size", u(c.task.val_size)},
      {"task.test_size", u(c.task.test_size)},
      {"task.seed", u(c.task.seed)},
      {"model.strategy", to_string(c.model.strategy.kind)},
      {"model.layers", u(c.model.strategy.layers)},
      {"model.fusion", to_string(c.model.fusion)},
      {"model.variant", to_string(c.model.variant)},
      {"model.label_smoothing", fmt_real(c.model.label_smoothing)},
      {"model.key_dim", u(c.model.key_dim)},
      {"model.gate_dim", u(c.model.gate_dim)},
      {"model.gate_bias", detail::fmt_bool(c.model.gate_bias)},
      {"model.coattn_k", u(c.model.coattn_k)},
      {"model.coattn_hidden", u(c.model.coattn_hidden)},
      {"model.mlp_hidden", u(c.model.mlp_hidden)},
      {"model.fused_out", u(c.model.fused_out)},
      {"model.dropout_concat", fmt_real(c.model.rates.post_concat)},
      {"model.dropout_dense", fmt_real(c.model.rates.post_dense)},
      {"model.dropout_reduction", fmt_real(c.model.rates.reduction)},
      {"model.otk_eps", fmt_real(c.model.otk_eps)},
      {"model.otk_iters", u(c.model.otk_iters)},
      {"model.otk_tol", fmt_real(c.model.otk_tol)},
      {"train.batch_size", u(c.train.batch_size)},
      {"train.optimizer", to_string(c.train.optimizer)},
      {"train.lr", fmt_real(c.train.lr)},
      {"train.momentum", fmt_real(c.train.momentum)},
      {"train.adam_beta1", fmt_real(c.train.adam_beta1)},
      {"train.adam_beta2", fmt_real(c.train.adam_beta2)},
      {"train.adam_eps", fmt_real(c.train.adam_eps)},
      {"train.step_size", u(c.train.step_size)},
      {"train.gamma", fmt_real(c.train.gamma)},
      {"train.patience", u(c.train.patience)},
      {"train.runs", u(c.train.runs)},
      {"train.val_split", fmt_real(c.train.val_split)},
      {"train.max_epochs", u(c.train.max_epochs)},
      {"train.seed", u(c.train.seed)},
      {"train.seeds", seeds},
      {"train.threads", u(c.train.threads)},
  };
}

/// Applies one key to `c`; unknown keys raise ParameterError.
inline void apply_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_real;
  using detail::parse_uint;
  const std::unordered_map<std::string, std::function<void()>> setters = {
      {"experiment.label", [&] { c.label = v; }},
      {"task.n", [&] { c.task.seq_text = parse_uint(key, v); }},
      {"task.T", [&] { c.task.seq_image = parse_uint(key, v); }},
      {"task.D", [&] { c.task.dim = parse_uint(key, v); }},
      {"task.class_separation", [&] { c.task.class_separation = parse_real(key, v); }},
      {"task.correlation", [&] { c.task.correlation = parse_real(key, v); }},
      {"task.noise_std", [&] { c.task.noise_std = parse_real(key, v); }},
      {"task.train_size", [&] { c.task.train_size = parse_uint(key, v); }},
      {"task.val_size", [&] { c.task.val_size = parse_uint(key, v); }},
      {"task.test_size", [&] { c.task.test_size = parse_uint(key, v); }},
      {"task.seed", [&] { c.task.seed = parse_uint(key, v); }},
      {"model.strategy", [&] { c.model.strategy = ContextStrategy::defaults(parse_context_kind(v)); }},
      {"model.layers", [&] { c.model.strategy.layers = parse_uint(key, v); }},
      {"model.fusion", [&] { c.model.fusion = parse_fusion_kind(v); }},
      {"model.variant", [&] { c.model.variant = parse_variant(v); }},
      {"model.label_smoothing", [&] { c.model.label_smoothing = parse_real(key, v); }},
      {"model.key_dim", [&] { c.model.key_dim = parse_uint(key, v); }},
      {"model.gate_dim", [&] { c.model.gate_dim = parse_uint(key, v); }},
      {"model.gate_bias", [&] { c.model.gate_bias = detail::parse_bool(key, v); }},
      {"model.coattn_k", [&] { c.model.coattn_k = parse_uint(key, v); }},
      {"model.coattn_hidden", [&] { c.model.coattn_hidden = parse_uint(key, v); }},
      {"model.mlp_hidden", [&] { c.model.mlp_hidden = parse_uint(key, v); }},
      {"model.fused_out", [&] { c.model.fused_out = parse_uint(key, v); }},
      {"model.dropout_concat", [&] { c.model.rates.post_concat = parse_real(key, v); }},
      {"model.dropout_dense", [&] { c.model.rates.post_dense = parse_real(key, v); }},
      {"model.dropout_reduction", [&] { c.model.rates.reduction = parse_real(key, v); }},
      {"model.otk_eps", [&] { c.model.otk_eps = parse_real(key, v); }},
      {"model.otk_iters", [&] { c.model.otk_iters = parse_uint(key, v); }},
      {"model.otk_tol", [&] { c.model.otk_tol = parse_real(key, v); }},
      {"train.batch_size", [&] { c.train.batch_size = parse_uint(key, v); }},
      {"train.optimizer", [&] { c.train.optimizer = parse_optimizer(v); }},
      {"train.lr", [&] { c.train.lr = parse_real(key, v); }},
      {"train.momentum", [&] { c.train.momentum = parse_real(key, v); }},
      {"train.adam_beta1", [&] { c.train.adam_beta1 = parse_real(key, v); }},
      {"train.adam_beta2", [&] { c.train.adam_beta2 = parse_real(key, v); }},
      {"train.adam_eps", [&] { c.train.adam_eps = parse_real(key, v); }},
      {"train.step_size", [&] { c.train.step_size = parse_uint(key, v); }},
      {"train.gamma", [&] { c.train.gamma = parse_real(key, v); }},
      {"train.patience", [&] { c.train.patience = parse_uint(key, v); }},
      {"train.runs", [&] { c.train.runs = parse_uint(key, v); }},
      {"train.val_split", [&] { c.train.val_split = parse_real(key, v); }},
      {"train.max_epochs", [&] { c.train.max_epochs = parse_uint(key, v); }},
      {"train.seed", [&] { c.train.seed = parse_uint(key, v); }},
      {"train.seeds",
       [&] {
         c.train.seeds.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) {
           item = detail::trim(item);
           if (!item.empty()) c.train.seeds.push_back(parse_uint(key, item));
         }
       }},
      {"train.threads", [&] { c.train.threads = parse_uint(key, v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw ParameterError("config: unknown key '" + key + "'");
  it->second();
}

// "model.strategy" resets the layer count to the strategy's default unless
// "model.layers" is also given, in which case that wins regardless of order.
inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::optional<std::string> layers;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParameterError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key == "model.layers") {
      layers = value;
    } else {
      apply_key(c, key, value);
    }
  }
  if (layers) apply_key(c, "model.layers", *layers);
  return c;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("write failed for " + path);
}

inline ExperimentConfig load_config(const std::string& path) { return parse_config_text(read_text_file(path)); }

inline std::string config_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [k, v] : to_key_values(c)) out += k + " = " + v + "\n";
  return out;
}

// FNV-1a over the canonical key = value text, as 16 hex digits.
inline std::string fingerprint(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : config_text(c)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Reports.

inline constexpr std::array<const char*, 7> kScoreColumns = {"Prec", "Rec", "F1", "Acc", "Spec", "ECE", "ACE"};
using Scores = std::array<Real, 7>;

inline Scores scores_of(const RunResult& r) {
  return {r.metrics.precision, r.metrics.recall, r.metrics.f1, r.metrics.accuracy, r.metrics.specificity, r.ece, r.ace};
}

struct RunRecord {
  std::uint64_t seed = 0;
  Scores scores{};
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  Real best_val_loss = 0;
  std::vector<std::string> undefined;
};

struct RunReport {
  std::string label;
  std::string fingerprint;
  KeyValues config;
  std::vector<std::uint64_t> seeds;
  std::vector<RunRecord> runs;  // completed runs, ordered by seed
  Scores mean{};
  Scores stddev{};  // population
  std::vector<std::string> warnings;

  std::vector<Real> column(std::size_t k) const {
    std::vector<Real> out;
    for (const auto& r : runs) out.push_back(r.scores.at(k));
    return out;
  }
};

inline void aggregate(RunReport& rep) {
  rep.mean.fill(0);
  rep.stddev.fill(0);
  if (rep.runs.empty()) return;
  const auto n = static_cast<Real>(rep.runs.size());
  for (std::size_t k = 0; k < rep.mean.size(); ++k) {
    for (const auto& r : rep.runs) rep.mean[k] += r.scores[k];
    rep.mean[k] /= n;
    for (const auto& r : rep.runs) rep.stddev[k] += (r.scores[k] - rep.mean[k]) * (r.scores[k] - rep.mean[k]);
    rep.stddev[k] = std::sqrt(rep.stddev[k] / n);
  }
}

inline std::pair<Split, Split> train_val_splits(const ExperimentConfig& c, const Dataset& ds) {
  if (c.task.val_size > 0) return {ds.train, ds.val};
  return stratified_split(ds.train, c.train.val_split, c.task.seed);
}

/// One independent training run per seed on a shared dataset. Runs that fail
/// numerically are dropped with a warning; the aggregate covers the rest.
/// `on_model`, if set, receives each trained model with its seed.
inline RunReport run_experiment(const ExperimentConfig& c,
                                const std::function<void(std::uint64_t, Model&)>& on_model = {}) {
  c.validate();
  const Dataset ds = generate_task(c.task);
  const auto [train_split, val_split] = train_val_splits(c, ds);
  const ModelConfig mc = c.model_config();
  std::vector<std::uint64_t> seeds = c.train.seed_list();
  std::sort(seeds.begin(), seeds.end());

  struct Slot {
    std::optional<RunResult> result;
    std::optional<Model> model;
    std::string error;
  };
  std::vector<Slot> slots(seeds.size());
  auto work = [&](std::size_t i) {
    try {
      std::mt19937_64 init = detail::stream(seeds[i], 0);
      Model m(mc, init);
      slots[i].result = train(m, train_split, val_split, ds.test, c.train, seeds[i]);
      if (on_model) slots[i].model = std::move(m);
    } catch (const NumericalError& e) {
      slots[i].error = e.what();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(c.train.threads, seeds.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < seeds.size(); i += workers) work(i);
      });
    for (auto& th : pool) th.join();
  }

  RunReport rep;
  rep.label = c.label;
  rep.fingerprint = fingerprint(c);
  rep.config = to_key_values(c);
  rep.seeds = seeds;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!slots[i].result) {
      rep.warnings.push_back("run with seed " + std::to_string(seeds[i]) + " aborted: " + slots[i].error);
      continue;
    }
    const RunResult& r = *slots[i].result;
    rep.runs.push_back({r.seed, scores_of(r), r.epochs_run, r.best_epoch, r.best_val_loss, r.metrics.undefined});
    if (on_model && slots[i].model) on_model(seeds[i], *slots[i].model);
  }
  if (rep.runs.empty()) throw NumericalError("run_experiment: every run aborted (" + rep.warnings.front() + ")");
  aggregate(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Ablations.

enum class AblationAxis { NoContext, NoGate, NoOt, RepeatVector, NoFusion, Layers };

inline const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::NoContext: return "no_context";
    case AblationAxis::NoGate: return "no_gate";
    case AblationAxis::NoOt: return "no_ot";
    case AblationAxis::RepeatVector: return "repeat_vector";
    case AblationAxis::NoFusion: return "no_fusion";
    case AblationAxis::Layers: return "layers";
  }
  return "?";
}

inline constexpr std::array<AblationAxis, 6> kAblationAxes = {AblationAxis::NoContext, AblationAxis::NoGate,
                                                             AblationAxis::NoOt,      AblationAxis::RepeatVector,
                                                             AblationAxis::NoFusion,  AblationAxis::Layers};

inline AblationAxis parse_ablation_axis(const std::string& s) {
  for (AblationAxis a : kAblationAxes)
    if (s == to_string(a)) return a;
  throw ParameterError("unknown ablation axis '" + s + "'");
}

inline constexpr std::size_t kMaxSweepLayers = 5;

/// The configurations an axis expands to: one variant, or layer counts 1..5.
inline std::vector<ExperimentConfig> ablation_configs(const ExperimentConfig& base, AblationAxis axis) {
  std::vector<ExperimentConfig> out;
  if (axis == AblationAxis::Layers) {
    for (std::size_t l = 1; l <= kMaxSweepLayers; ++l) {
      ExperimentConfig c = base;
      c.model.strategy.layers = l;
      c.label = base.label + "/layers=" + std::to_string(l);
      out.push_back(c);
    }
    return out;
  }
  ExperimentConfig c = base;
  c.model.variant = parse_variant(to_string(axis));
  c.label = base.label + "/" + to_string(axis);
  out.push_back(c);
  return out;
}

inline std::vector<RunReport> ablation_harness(const ExperimentConfig& base, AblationAxis axis) {
  std::vector<RunReport> out;
  for (const ExperimentConfig& c : ablation_configs(base, axis)) out.push_back(run_experiment(c));
  return out;
}

}  // namespace mmfuse
