#pragma once

// Benchmark runner, hyperparameter grids, Pareto filtering and report I/O.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <istream>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "demask/decoding.hpp"
#include "demask/kv_document.hpp"
#include "demask/model.hpp"
#include "demask/predictor.hpp"
#include "demask/verification.hpp"

namespace demask {

struct ExperimentConfig {
  ModelDescription task;
  int prompts = 1;        ///< distinct joint tables, prompt ids 0..prompts-1
  int reveal_prefix = 0;  ///< leading positions revealed from the joint before decoding
  SelectorSpec selector = DemaskSelector{};
  std::string checkpoint; ///< predictor checkpoint when dep_source = predicted
  SamplerConfig sampler;
  bool eos_fill = false;
  int repetitions = 100;
  std::uint64_t seed = 0;
  bool verify_bound = false;
  std::string out;
  std::string summary;

  void validate() const {
    task.vocab.validate();
    if (task.length < 1) throw ConfigError("length: must be positive");
    if (prompts < 1) throw ConfigError("prompts: must be positive");
    if (reveal_prefix < 0 || reveal_prefix >= task.length) throw ConfigError("reveal_prefix: must lie in [0, length)");
    if (repetitions < 1) throw ConfigError("repetitions: must be positive");
    try {
      sampler.validate();
    } catch (const Error& e) {
      throw ConfigError(std::string("sampler: ") + e.what());
    }
    try {
      if (const auto* d = std::get_if<DemaskSelector>(&selector)) {
        d->selection.validate();
        if (d->source == DependencySource::predicted && !d->predictor) {
          throw ConfigError("dep_source: predicted requires a loaded checkpoint");
        }
      } else if (const auto* k = std::get_if<KlassSelector>(&selector)) {
        k->cfg.validate();
      } else {
        int kk = 1;
        if (const auto* e = std::get_if<EntropySelector>(&selector)) kk = e->k;
        if (const auto* t = std::get_if<Top1Selector>(&selector)) kk = t->k;
        if (const auto* o = std::get_if<TokenOrderSelector>(&selector)) kk = o->k;
        if (kk < 1) throw ConfigError("tokens_per_step: must be >= 1");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string("selector: ") + e.what());
    }
  }
};

inline const std::set<std::string>& experiment_config_keys() {
  static const std::set<std::string> keys{
      "kind",       "vocab_size", "eos_id",         "length",          "model_seed", "concentration",
      "prompts",    "reveal_prefix", "selector",    "tau",             "gamma",      "tokens_per_step",
      "kl_threshold", "conf_threshold", "history", "dep_source",      "checkpoint", "temperature",
      "top_p",      "eos_fill",   "repetitions",    "seed",            "verify",     "out",
      "summary"};
  return keys;
}

/// Builds a selector from its name and parameters.
inline SelectorSpec make_selector(const std::string& name, double tau, double gamma, int k, const KlassConfig& klass,
                                  DependencySource source = DependencySource::exact,
                                  std::shared_ptr<const DependencyPredictor> predictor = nullptr) {
  if (name == "demask") return DemaskSelector{SelectionConfig{tau, gamma}, source, std::move(predictor)};
  if (name == "entropy") return EntropySelector{k};
  if (name == "top1") return Top1Selector{k};
  if (name == "token-order") return TokenOrderSelector{k};
  if (name == "klass") return KlassSelector{klass};
  throw ConfigError("selector: unknown selector '" + name + "'");
}

inline ExperimentConfig experiment_config_from_document(const KeyValueDocument& doc) {
  doc.require_known(experiment_config_keys());
  ExperimentConfig cfg;
  cfg.task.kind = parse_task_kind(doc.get_string("kind", "arithmetic-mod"));
  cfg.task.vocab.size = static_cast<int>(doc.get_int("vocab_size", 3));
  cfg.task.vocab.eos_id = static_cast<Token>(doc.get_int("eos_id", cfg.task.vocab.size - 1));
  cfg.task.length = static_cast<int>(doc.get_int("length", 3));
  cfg.task.seed = doc.get_uint("model_seed", 0);
  cfg.task.concentration = doc.get_double("concentration", 1.0);
  cfg.prompts = static_cast<int>(doc.get_int("prompts", 1));
  cfg.reveal_prefix = static_cast<int>(doc.get_int("reveal_prefix", 0));
  KlassConfig klass;
  klass.kl_threshold = doc.get_double("kl_threshold", klass.kl_threshold);
  klass.conf_threshold = doc.get_double("conf_threshold", klass.conf_threshold);
  klass.history_len = static_cast<int>(doc.get_int("history", klass.history_len));
  const std::string source = doc.get_string("dep_source", "exact");
  if (source != "exact" && source != "predicted") throw ConfigError("dep_source: expected 'exact' or 'predicted'");
  cfg.checkpoint = doc.get_string("checkpoint", "");
  std::shared_ptr<const DependencyPredictor> predictor;
  if (source == "predicted") {
    if (cfg.checkpoint.empty()) throw ConfigError("checkpoint: required when dep_source = predicted");
    predictor = std::make_shared<DependencyPredictor>(load_checkpoint(cfg.checkpoint));
  }
  cfg.selector = make_selector(doc.get_string("selector", "demask"), doc.get_double("tau", 0.04),
                               doc.get_double("gamma", 0.9), static_cast<int>(doc.get_int("tokens_per_step", 1)),
                               klass, source == "exact" ? DependencySource::exact : DependencySource::predicted,
                               predictor);
  cfg.sampler.temperature = doc.get_double("temperature", cfg.sampler.temperature);
  cfg.sampler.top_p = doc.get_double("top_p", cfg.sampler.top_p);
  cfg.eos_fill = doc.get_bool("eos_fill", false);
  cfg.repetitions = static_cast<int>(doc.get_int("repetitions", 100));
  cfg.seed = doc.get_uint("seed", 0);
  cfg.verify_bound = doc.get_bool("verify", false);
  cfg.out = doc.get_string("out", "");
  cfg.summary = doc.get_string("summary", "");
  cfg.validate();
  return cfg;
}

struct BenchRecord {
  int config_id = 0;
  std::string selector;
  double tau = std::numeric_limits<double>::quiet_NaN();
  double gamma = std::numeric_limits<double>::quiet_NaN();
  int k = 0;
  double kl_threshold = std::numeric_limits<double>::quiet_NaN();
  double conf_threshold = std::numeric_limits<double>::quiet_NaN();
  int history = 0;
  double temperature = 1.0;
  double top_p = 1.0;
  bool eos_fill = false;
  int repetitions = 0;
  double accuracy = 0.0;
  double mean_steps = 0.0;
  double mean_parallel = 0.0;
  /// Fraction of demask steps whose measured error exceeded tau; NaN when not measured.
  double bound_violation_rate = std::numeric_limits<double>::quiet_NaN();
  double off_support_rate = 0.0;

  friend bool operator==(const BenchRecord& a, const BenchRecord& b) {
    auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
    return a.config_id == b.config_id && a.selector == b.selector && same(a.tau, b.tau) && same(a.gamma, b.gamma) &&
           a.k == b.k && same(a.kl_threshold, b.kl_threshold) && same(a.conf_threshold, b.conf_threshold) &&
           a.history == b.history && same(a.temperature, b.temperature) && same(a.top_p, b.top_p) &&
           a.eos_fill == b.eos_fill && a.repetitions == b.repetitions && same(a.accuracy, b.accuracy) &&
           same(a.mean_steps, b.mean_steps) && same(a.mean_parallel, b.mean_parallel) &&
           same(a.bound_violation_rate, b.bound_violation_rate) && same(a.off_support_rate, b.off_support_rate);
  }
};

/// Samples the leading `count` positions from the exact sequential conditionals.
inline MaskState reveal_prompt_prefix(const TabularModel& model, int count, Rng& rng) {
  MaskState state = MaskState::all_masked(model.length());
  for (Position p = 0; p < count; ++p) state.reveal(p, sample_categorical(conditional_marginal(model, state, p), rng));
  return state;
}

/// Decodes `repetitions` times and aggregates accuracy (the output lies in
/// the model's support), step counts and parallelism. Deterministic in
/// (seed, config_id, repetition).
inline BenchRecord run_benchmark(const ExperimentConfig& cfg, int config_id = 0) {
  cfg.validate();
  std::vector<TabularModel> models;
  for (int p = 0; p < cfg.prompts; ++p) {
    ModelDescription d = cfg.task;
    d.prompt_id = p;
    models.push_back(TabularModel::make(d));
  }
  BenchRecord rec;
  rec.config_id = config_id;
  rec.selector = selector_name(cfg.selector);
  if (const auto* d = std::get_if<DemaskSelector>(&cfg.selector)) {
    rec.tau = d->selection.tau;
    rec.gamma = d->selection.gamma;
  } else if (const auto* e = std::get_if<EntropySelector>(&cfg.selector)) {
    rec.k = e->k;
  } else if (const auto* t = std::get_if<Top1Selector>(&cfg.selector)) {
    rec.k = t->k;
  } else if (const auto* o = std::get_if<TokenOrderSelector>(&cfg.selector)) {
    rec.k = o->k;
  } else if (const auto* kl = std::get_if<KlassSelector>(&cfg.selector)) {
    rec.kl_threshold = kl->cfg.kl_threshold;
    rec.conf_threshold = kl->cfg.conf_threshold;
    rec.history = kl->cfg.history_len;
  }
  rec.temperature = cfg.sampler.temperature;
  rec.top_p = cfg.sampler.top_p;
  rec.eos_fill = cfg.eos_fill;
  rec.repetitions = cfg.repetitions;

  const bool measure_bound = cfg.verify_bound && std::holds_alternative<DemaskSelector>(cfg.selector);
  const double tau = measure_bound ? std::get<DemaskSelector>(cfg.selector).selection.tau : 0.0;
  std::size_t correct = 0, off_support = 0, total_steps = 0, total_selected = 0, violations = 0;
  DecodeOptions opts;
  opts.eos_fill = cfg.eos_fill;
  opts.stop_off_support = true;
  for (int r = 0; r < cfg.repetitions; ++r) {
    const auto& model = models[static_cast<std::size_t>(r % cfg.prompts)];
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(config_id), static_cast<std::uint64_t>(r)));
    const MaskState initial = reveal_prompt_prefix(model, cfg.reveal_prefix, rng);
    const DecodeResult res = decode(model, initial, cfg.selector, cfg.sampler, opts, rng);
    total_steps += static_cast<std::size_t>(res.trace.step_count);
    if (res.trace.off_support) {
      ++off_support;
    } else if (model.mass(res.sequence) > 0.0) {
      ++correct;
    }
    for (const auto& s : res.trace.steps) total_selected += s.selected.size();
    if (measure_bound) {
      MaskState state = initial;
      if (cfg.eos_fill) eos_fill(state, model.vocab().eos_id);
      for (const auto& s : res.trace.steps) {
        if (tv_joint_vs_factorized(model, state, s.selected) > tau + kBoundTolerance) ++violations;
        for (std::size_t k = 0; k < s.selected.size(); ++k) state.reveal(s.selected[k], s.sampled[k]);
        for (Position p : s.eos_filled) state.reveal(p, model.vocab().eos_id);
      }
    }
  }
  const double reps = static_cast<double>(cfg.repetitions);
  rec.accuracy = static_cast<double>(correct) / reps;
  rec.mean_steps = static_cast<double>(total_steps) / reps;
  rec.mean_parallel = total_steps ? static_cast<double>(total_selected) / static_cast<double>(total_steps) : 0.0;
  rec.off_support_rate = static_cast<double>(off_support) / reps;
  if (measure_bound) {
    rec.bound_violation_rate = total_steps ? static_cast<double>(violations) / static_cast<double>(total_steps) : 0.0;
  }
  return rec;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn&& fn) {
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(n)));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (unsigned w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (failure) std::rethrow_exception(failure);
}

/// Two-parameter sweep. For demask the axes are (tau, gamma); for klass
/// (kl_threshold, conf_threshold). Records follow row-major grid order.
struct GridSpec {
  std::string selector = "demask";
  std::vector<double> first;
  std::vector<double> second;

  std::size_t size() const { return first.size() * second.size(); }

  static GridSpec demask_default() {
    return GridSpec{"demask",
                    {0.5, 0.4, 0.3, 0.2, 0.1, 0.08, 0.06, 0.04, 0.02, 0.01, 0.003, 0.001},
                    {0.9, 0.7, 0.5, 0.3, 0.1}};
  }

  static GridSpec klass_default() {
    return GridSpec{"klass",
                    {0.02, 0.015, 0.01, 0.005, 0.001, 0.0003, 0.0001, 0.00003, 0.00001},
                    {0.5, 0.6, 0.7, 0.8, 0.9}};
  }
};

/// Records not dominated in (lower mean_steps, higher accuracy), input order kept.
inline std::vector<BenchRecord> pareto_frontier(const std::vector<BenchRecord>& records) {
  std::vector<BenchRecord> out;
  for (const auto& a : records) {
    const bool dominated = std::any_of(records.begin(), records.end(), [&](const BenchRecord& b) {
      return b.mean_steps <= a.mean_steps && b.accuracy >= a.accuracy &&
             (b.mean_steps < a.mean_steps || b.accuracy > a.accuracy);
    });
    if (!dominated) out.push_back(a);
  }
  return out;
}

struct GridResult {
  std::vector<BenchRecord> records;
  std::vector<BenchRecord> frontier;
};

inline GridResult grid_search(const GridSpec& grid, const ExperimentConfig& base, unsigned jobs = 1) {
  if (grid.first.empty() || grid.second.empty()) throw ConfigError("grid: both axes must be nonempty");
  if (grid.selector != "demask" && grid.selector != "klass") {
    throw ConfigError("grid: selector must be 'demask' or 'klass'");
  }
  std::vector<ExperimentConfig> configs;
  for (double a : grid.first) {
    for (double b : grid.second) {
      ExperimentConfig cfg = base;
      if (grid.selector == "demask") {
        DemaskSelector sel;
        if (const auto* prev = std::get_if<DemaskSelector>(&base.selector)) sel = *prev;
        sel.selection = SelectionConfig{a, b};
        cfg.selector = sel;
      } else {
        KlassConfig k;
        if (const auto* prev = std::get_if<KlassSelector>(&base.selector)) k = prev->cfg;
        k.kl_threshold = a;
        k.conf_threshold = b;
        cfg.selector = KlassSelector{k};
      }
      configs.push_back(std::move(cfg));
    }
  }
  GridResult out;
  out.records.resize(configs.size());
  parallel_for(configs.size(), jobs,
               [&](std::size_t i) { out.records[i] = run_benchmark(configs[i], static_cast<int>(i)); });
  out.frontier = pareto_frontier(out.records);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr const char* kCsvVersionLine = "# demask-bench-csv v1";

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{
      "config_id",   "selector", "tau",          "gamma",       "k",          "kl_threshold",
      "conf_threshold", "history", "temperature", "top_p",      "eos_fill",   "repetitions",
      "accuracy",    "mean_steps", "mean_parallel", "bound_violation_rate", "off_support_rate"};
  return cols;
}

namespace detail {

inline std::string csv_real(double v) { return std::isnan(v) ? "" : format_double(v); }

inline double csv_parse_real(const std::string& cell) {
  if (cell.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (cell == "inf") return std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end != cell.c_str() + cell.size()) throw ConfigError("csv: malformed number '" + cell + "'");
  return v;
}

}  // namespace detail

/// Versioned CSV; identical records produce identical bytes.
inline void write_csv(const std::vector<BenchRecord>& records, std::ostream& out) {
  out << kCsvVersionLine << '\n';
  const auto& cols = csv_columns();
  for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c];
  out << '\n';
  using detail::csv_real;
  for (const auto& r : records) {
    out << r.config_id << ',' << r.selector << ',' << csv_real(r.tau) << ',' << csv_real(r.gamma) << ',' << r.k << ','
        << csv_real(r.kl_threshold) << ',' << csv_real(r.conf_threshold) << ',' << r.history << ','
        << csv_real(r.temperature) << ',' << csv_real(r.top_p) << ',' << (r.eos_fill ? 1 : 0) << ','
        << r.repetitions << ',' << csv_real(r.accuracy) << ',' << csv_real(r.mean_steps) << ','
        << csv_real(r.mean_parallel) << ',' << csv_real(r.bound_violation_rate) << ','
        << csv_real(r.off_support_rate) << '\n';
  }
}

inline std::vector<BenchRecord> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCsvVersionLine) {
    throw FormatVersionMismatch("csv: missing or unsupported version line");
  }
  if (!std::getline(in, line)) throw ConfigError("csv: missing header");
  std::vector<BenchRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto end = line.find(',', start);
      cells.push_back(line.substr(start, end == std::string::npos ? std::string::npos : end - start));
      if (end == std::string::npos) break;
      start = end + 1;
    }
    if (cells.size() != csv_columns().size()) throw ConfigError("csv: row has the wrong number of cells");
    using detail::csv_parse_real;
    BenchRecord r;
    r.config_id = std::stoi(cells[0]);
    r.selector = cells[1];
    r.tau = csv_parse_real(cells[2]);
    r.gamma = csv_parse_real(cells[3]);
    r.k = std::stoi(cells[4]);
    r.kl_threshold = csv_parse_real(cells[5]);
    r.conf_threshold = csv_parse_real(cells[6]);
    r.history = std::stoi(cells[7]);
    r.temperature = csv_parse_real(cells[8]);
    r.top_p = csv_parse_real(cells[9]);
    r.eos_fill = cells[10] == "1";
    r.repetitions = std::stoi(cells[11]);
    r.accuracy = csv_parse_real(cells[12]);
    r.mean_steps = csv_parse_real(cells[13]);
    r.mean_parallel = csv_parse_real(cells[14]);
    r.bound_violation_rate = csv_parse_real(cells[15]);
    r.off_support_rate = csv_parse_real(cells[16]);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string csv_string(const std::vector<BenchRecord>& records) {
  std::ostringstream out;
  write_csv(records, out);
  return out.str();
}

/// Summary document: Pareto points, optional step-ratio speedups against a
/// one-token entropy baseline, and optional slack CDF tables.
inline nlohmann::json summary_document(const std::vector<BenchRecord>& records,
                                       std::optional<double> baseline_steps = std::nullopt,
                                       const std::vector<SlackReport>* slack = nullptr) {
  nlohmann::json doc;
  doc["format"] = "demask-summary";
  doc["format_version"] = 1;
  doc["record_count"] = records.size();
  nlohmann::json pareto = nlohmann::json::array();
  for (const auto& r : pareto_frontier(records)) {
    pareto.push_back({{"config_id", r.config_id}, {"selector", r.selector}, {"mean_steps", r.mean_steps},
                      {"accuracy", r.accuracy}});
  }
  doc["pareto"] = pareto;
  if (baseline_steps) {
    doc["baseline_mean_steps"] = *baseline_steps;
    nlohmann::json speed = nlohmann::json::array();
    for (const auto& r : records) {
      speed.push_back({{"config_id", r.config_id}, {"speedup", r.mean_steps > 0 ? *baseline_steps / r.mean_steps : 0.0}});
    }
    doc["speedup"] = speed;
  }
  if (slack) doc["slack"] = slack_summary_to_json(*slack);
  return doc;
}

}  // namespace demask
