// Command-line front end for the demask library.
//
// Every failure prints one JSON object {"error": <category>, "message": ...}
// to stderr and exits with the code assigned to that category.

#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "demask/demask.hpp"

namespace {

using demask::ErrorCode;
using nlohmann::json;

constexpr int kExitUsage = 2;
constexpr int kExitBoundViolation = 9;
constexpr int kExitInternal = 10;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::config_error:
    case ErrorCode::invalid_argument: return 3;
    case ErrorCode::io_error: return 4;
    case ErrorCode::format_version_mismatch: return 5;
    case ErrorCode::dimension_mismatch: return 6;
    case ErrorCode::zero_probability_context:
    case ErrorCode::enumeration_cap_exceeded:
    case ErrorCode::empty_mask_set:
    case ErrorCode::no_progress: return 7;
    case ErrorCode::empty_cache:
    case ErrorCode::non_finite_loss: return 8;
  }
  return kExitInternal;
}

void report_error(std::string_view category, const std::string& message) {
  std::cerr << json{{"error", category}, {"message", message}}.dump() << '\n';
}

/// Writes to `path`, or to stdout when the path is empty or "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path);
    if (!*file_) throw demask::IoError("cannot open '" + path + "' for writing");
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }
  void close() {
    if (!file_) return;
    file_->close();
    if (!*file_) throw demask::IoError("failed writing output");
  }

 private:
  std::unique_ptr<std::ofstream> file_;
};

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw demask::IoError("cannot open '" + path + "' for reading");
  return in;
}

/// Flags that map one-to-one onto experiment-config keys. Values given on
/// the command line override the config file.
class Overrides {
 public:
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto& slot = values_[key];
    options_.emplace_back(app->add_option(flag, slot, help), key);
  }
  void add_flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto& slot = flags_[key];
    flag_options_.emplace_back(app->add_flag(flag, slot, help), key);
  }
  void apply(demask::KeyValueDocument& doc) const {
    for (const auto& [opt, key] : options_) {
      if (opt->count() > 0) doc.set(key, values_.at(key));
    }
    for (const auto& [opt, key] : flag_options_) {
      if (opt->count() > 0) doc.set(key, flags_.at(key) ? "1" : "0");
    }
  }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> flags_;
  std::vector<std::pair<CLI::Option*, std::string>> options_;
  std::vector<std::pair<CLI::Option*, std::string>> flag_options_;
};

void add_selector_flags(CLI::App* app, Overrides& o) {
  o.add(app, "--selector", "selector", "demask | entropy | top1 | token-order | klass");
  o.add(app, "--tau", "tau", "dependency budget (demask); 'inf' disables it");
  o.add(app, "--gamma", "gamma", "top-1 confidence filter (demask)");
  o.add(app, "--tokens-per-step", "tokens_per_step", "k for entropy, top1 and token-order");
  o.add(app, "--kl-threshold", "kl_threshold", "KLASS stability threshold");
  o.add(app, "--conf-threshold", "conf_threshold", "KLASS confidence threshold");
  o.add(app, "--history", "history", "KLASS history length");
  o.add(app, "--dep-source", "dep_source", "exact | predicted");
  o.add(app, "--checkpoint", "checkpoint", "predictor checkpoint for dep-source predicted");
  o.add(app, "--temperature", "temperature", "sampling temperature");
  o.add(app, "--top-p", "top_p", "nucleus mass");
  o.add_flag(app, "--eos-fill,!--no-eos-fill", "eos_fill", "fill masked positions right of the first EOS");
}

void add_task_flags(CLI::App* app, Overrides& o) {
  o.add(app, "--kind", "kind", "independent | markov | copy | arithmetic-mod | dense-random");
  o.add(app, "--vocab-size", "vocab_size", "vocabulary size");
  o.add(app, "--eos-id", "eos_id", "EOS token id");
  o.add(app, "--length", "length", "sequence length");
  o.add(app, "--model-seed", "model_seed", "seed for the model tables");
  o.add(app, "--concentration", "concentration", "Dirichlet concentration");
  o.add(app, "--prompts", "prompts", "number of prompt variants");
  o.add(app, "--reveal-prefix", "reveal_prefix", "leading positions revealed as the prompt");
  o.add(app, "--repetitions", "repetitions", "decodes per configuration");
  o.add(app, "--seed", "seed", "run seed");
  o.add_flag(app, "--verify", "verify", "measure the per-step bound violation rate");
}

demask::ExperimentConfig load_experiment(const std::string& config_path, const Overrides& o) {
  demask::KeyValueDocument doc;
  if (!config_path.empty()) doc = demask::KeyValueDocument::load(config_path);
  o.apply(doc);
  return demask::experiment_config_from_document(doc);
}

/// The model description keys rewritten to experiment-config names.
void merge_model_document(demask::KeyValueDocument& doc, const demask::ModelDescription& d) {
  doc.set("kind", demask::to_string(d.kind));
  doc.set("vocab_size", std::to_string(d.vocab.size));
  doc.set("eos_id", std::to_string(d.vocab.eos_id));
  doc.set("length", std::to_string(d.length));
  doc.set("model_seed", std::to_string(d.seed));
  doc.set("concentration", demask::format_double(d.concentration));
}

std::map<demask::Position, demask::Token> parse_reveal(const std::string& text) {
  std::map<demask::Position, demask::Token> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find(',', start);
    if (end == std::string::npos) end = text.size();
    const std::string item(demask::KeyValueDocument::trim(std::string_view(text).substr(start, end - start)));
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw demask::InvalidArgument("--reveal expects pos=token pairs, got '" + item + "'");
    try {
      out[std::stoi(item.substr(0, eq))] = std::stoi(item.substr(eq + 1));
    } catch (const std::logic_error&) {
      throw demask::InvalidArgument("--reveal: malformed pair '" + item + "'");
    }
    start = end + 1;
  }
  return out;
}

std::vector<demask::TabularModel> load_models(const std::vector<std::string>& paths) {
  std::vector<demask::TabularModel> models;
  for (const auto& p : paths) models.push_back(demask::load_model(p));
  return models;
}

json training_report_to_json(const demask::TrainingReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"validation_loss", e.validation_loss},
                      {"validation_mae", e.validation_mae}});
  }
  return json{{"initial_train_loss", r.initial_train_loss},
              {"initial_validation_loss", r.initial_validation_loss},
              {"best_epoch", r.best_epoch},
              {"best_validation_loss", r.best_validation_loss},
              {"train_examples", r.train_examples},
              {"validation_examples", r.validation_examples},
              {"epochs", epochs}};
}

void write_summary(const std::string& path, const json& doc) {
  Output out(path);
  out.stream() << doc.dump(2) << '\n';
  out.close();
}

int run(int argc, char** argv) {
  CLI::App app{"Dependency-guided parallel unmasking over exact tabular models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "demask 1.0.0");

  // model-gen
  auto* model_gen = app.add_subcommand("model-gen", "Write a model description document");
  demask::ModelDescription desc;
  std::string kind_text;
  std::string model_out;
  model_gen->add_option("--kind", kind_text, "task family")->required();
  model_gen->add_option("--vocab-size", desc.vocab.size, "vocabulary size")->default_val(3);
  int eos_id = -1;
  model_gen->add_option("--eos-id", eos_id, "EOS token id (default: vocab_size - 1)");
  model_gen->add_option("--length", desc.length, "sequence length")->default_val(3);
  model_gen->add_option("--seed", desc.seed, "table seed")->default_val(0);
  model_gen->add_option("--prompt-id", desc.prompt_id, "prompt variant")->default_val(0);
  model_gen->add_option("--concentration", desc.concentration, "Dirichlet concentration")->default_val(1.0);
  model_gen->add_option("--out", model_out, "output path (default stdout)");

  // cache-gen
  auto* cache_gen = app.add_subcommand("cache-gen", "Generate the single-realization TV cache");
  std::vector<std::string> cache_models;
  demask::CacheOptions cache_opts;
  std::optional<double> cache_ratio;
  std::uint64_t cache_seed = 0;
  std::string cache_out;
  cache_gen->add_option("--model", cache_models, "model description files (model_id = position)")->required();
  cache_gen->add_option("--samples-per-response", cache_opts.samples_per_response, "masks per response")
      ->default_val(5);
  cache_gen->add_option("--responses", cache_opts.responses_per_model, "responses per model")->default_val(1);
  cache_gen->add_option("--ratio", cache_ratio, "fixed mask ratio instead of t ~ U(0,1)");
  cache_gen->add_option("--seed", cache_seed, "cache seed")->default_val(0);
  cache_gen->add_option("--out", cache_out, "JSONL output (default stdout)");

  // train
  auto* train = app.add_subcommand("train", "Fit the dependency predictor on a TV cache");
  std::string train_cache;
  std::vector<std::string> train_models;
  demask::TrainingHyper hyper = demask::TrainingHyper::desk_scale();
  std::uint64_t train_seed = 0;
  std::string train_out;
  std::string train_report;
  train->add_option("--cache", train_cache, "TV cache JSONL")->required();
  train->add_option("--model", train_models, "model files in cache model_id order")->required();
  train->add_option("--epochs", hyper.epochs, "epochs")->capture_default_str();
  train->add_option("--lr", hyper.learning_rate, "peak learning rate")->capture_default_str();
  train->add_option("--weight-decay", hyper.weight_decay, "decoupled weight decay")->capture_default_str();
  train->add_option("--batch-size", hyper.batch_size, "mini-batch size")->capture_default_str();
  train->add_option("--warmup", hyper.warmup_fraction, "warmup fraction of steps")->capture_default_str();
  train->add_option("--validation", hyper.validation_fraction, "held-out fraction")->capture_default_str();
  train->add_option("--seed", train_seed, "initialization and shuffling seed")->default_val(0);
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_option("--report", train_report, "training report JSON (default stdout)");

  // decode
  auto* decode_cmd = app.add_subcommand("decode", "Decode one sequence and optionally export its trace");
  Overrides decode_flags;
  std::string decode_model;
  std::string decode_reveal;
  std::string decode_trace;
  std::string decode_out;
  std::uint64_t decode_seed = 0;
  decode_cmd->add_option("--model", decode_model, "model description file")->required();
  add_selector_flags(decode_cmd, decode_flags);
  decode_cmd->add_option("--reveal", decode_reveal, "prompt as pos=token pairs, e.g. 0=1,2=0");
  decode_cmd->add_option("--seed", decode_seed, "sampling seed")->default_val(0);
  decode_cmd->add_option("--trace", decode_trace, "per-step JSONL trace output");
  decode_cmd->add_option("--out", decode_out, "result JSON (default stdout)");

  // bench
  auto* bench = app.add_subcommand("bench", "Run one benchmark configuration");
  Overrides bench_flags;
  std::string bench_config;
  std::string bench_out;
  std::string bench_summary;
  bench->add_option("--config", bench_config, "experiment config document");
  add_task_flags(bench, bench_flags);
  add_selector_flags(bench, bench_flags);
  bench->add_option("--out", bench_out, "CSV output (default: config 'out', else stdout)");
  bench->add_option("--summary", bench_summary, "summary JSON output");

  // grid
  auto* grid = app.add_subcommand("grid", "Sweep the demask or KLASS hyperparameter grid");
  Overrides grid_flags;
  std::string grid_config;
  std::string grid_kind = "demask";
  std::vector<double> grid_first;
  std::vector<double> grid_second;
  unsigned grid_jobs = 1;
  std::string grid_out;
  std::string grid_summary;
  grid->add_option("--config", grid_config, "experiment config document");
  grid->add_option("--grid", grid_kind, "demask | klass")->check(CLI::IsMember({"demask", "klass"}));
  grid->add_option("--first", grid_first, "override first axis (tau or kl threshold)")->delimiter(',');
  grid->add_option("--second", grid_second, "override second axis (gamma or conf threshold)")->delimiter(',');
  grid->add_option("--jobs", grid_jobs, "worker threads")->default_val(1);
  add_task_flags(grid, grid_flags);
  add_selector_flags(grid, grid_flags);
  grid->add_option("--out", grid_out, "CSV output (default: config 'out', else stdout)");
  grid->add_option("--summary", grid_summary, "summary JSON with Pareto points and speedups");

  // verify-bound
  auto* verify = app.add_subcommand("verify-bound", "Check the TV bound on random instances by enumeration");
  int verify_instances = 1000;
  std::uint64_t verify_seed = 0;
  int verify_vocab = 4;
  int verify_length = 6;
  std::optional<double> verify_tau;
  std::optional<double> verify_gamma;
  std::string verify_source = "exact";
  std::string verify_checkpoint;
  std::string verify_out;
  verify->add_option("--instances", verify_instances, "number of random instances")->capture_default_str();
  verify->add_option("--seed", verify_seed, "instance seed")->default_val(0);
  verify->add_option("--max-vocab", verify_vocab, "largest vocabulary")->capture_default_str();
  verify->add_option("--max-length", verify_length, "largest sequence length")->capture_default_str();
  verify->add_option("--tau", verify_tau, "fixed tau (default: cycle the demask grid)");
  verify->add_option("--gamma", verify_gamma, "fixed gamma (default: cycle 0, 0.5, 0.9)");
  verify->add_option("--dep-source", verify_source, "exact | predicted")
      ->check(CLI::IsMember({"exact", "predicted"}));
  verify->add_option("--checkpoint", verify_checkpoint, "predictor checkpoint for dep-source predicted");
  verify->add_option("--out", verify_out, "per-instance JSONL reports");

  // validate-subadd
  auto* subadd = app.add_subcommand("validate-subadd", "Measure sub-additivity slack");
  std::string subadd_family = "mixed";
  int subadd_models = 8;
  int subadd_vocab = 3;
  int subadd_length = 6;
  int subadd_instances = 500;
  demask::SlackExperimentOptions subadd_opts;
  std::uint64_t subadd_seed = 0;
  std::string subadd_out;
  std::string subadd_summary;
  subadd->add_option("--family", subadd_family, "mixed or a task kind")->capture_default_str();
  subadd->add_option("--models", subadd_models, "models in the family")->capture_default_str();
  subadd->add_option("--vocab-size", subadd_vocab, "vocabulary size")->capture_default_str();
  subadd->add_option("--length", subadd_length, "sequence length")->capture_default_str();
  subadd->add_option("--instances", subadd_instances, "masked contexts")->capture_default_str();
  subadd->add_option("--max-subset", subadd_opts.max_subset, "largest |S|")->capture_default_str();
  subadd->add_option("--seed", subadd_seed, "experiment seed")->default_val(0);
  subadd->add_option("--out", subadd_out, "per-target JSONL slack records");
  subadd->add_option("--summary", subadd_summary, "per-|S| summary JSON (default stdout)");

  // report
  auto* report = app.add_subcommand("report", "Build a summary document from CSV and slack records");
  std::vector<std::string> report_csv;
  std::string report_slack;
  std::optional<double> report_baseline;
  std::string report_out;
  report->add_option("--csv", report_csv, "benchmark CSV files");
  report->add_option("--slack", report_slack, "slack JSONL from validate-subadd");
  report->add_option("--baseline-steps", report_baseline, "mean steps of the one-token baseline");
  report->add_option("--out", report_out, "summary JSON (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("UsageError", e.what());
    return kExitUsage;
  }

  if (model_gen->parsed()) {
    desc.kind = demask::parse_task_kind(kind_text);
    desc.vocab.eos_id = eos_id >= 0 ? eos_id : desc.vocab.size - 1;
    desc.vocab.validate();
    demask::TabularModel::make(desc);
    Output out(model_out);
    out.stream() << desc.to_document().to_string();
    out.close();
    return 0;
  }

  if (cache_gen->parsed()) {
    cache_opts.fixed_ratio = cache_ratio;
    if (cache_ratio && !(*cache_ratio >= 0.0 && *cache_ratio <= 1.0)) {
      throw demask::InvalidArgument("--ratio must lie in [0, 1]");
    }
    const auto models = load_models(cache_models);
    const auto records = demask::generate_tv_cache(models, cache_opts, cache_seed);
    Output out(cache_out);
    demask::write_tv_cache(records, out.stream());
    out.close();
    if (!cache_out.empty()) std::cout << json{{"records", records.size()}, {"out", cache_out}}.dump() << '\n';
    return 0;
  }

  if (train->parsed()) {
    const auto models = load_models(train_models);
    for (const auto& m : models) {
      if (m.vocab_size() != models.front().vocab_size() || m.length() != models.front().length()) {
        throw demask::DimensionMismatch("train: all models must share vocabulary size and length");
      }
    }
    auto in = open_input(train_cache);
    const auto records = demask::read_tv_cache(in);
    const auto cfg = demask::FeatureConfig::for_model(models.front());
    const auto examples = demask::examples_from_cache(records, models, cfg);
    const auto result = demask::train_predictor(examples, cfg, hyper, train_seed);
    demask::save_checkpoint(demask::DependencyPredictor{cfg, result.weights}, train_out);
    write_summary(train_report, training_report_to_json(result.report));
    return 0;
  }

  if (decode_cmd->parsed()) {
    const auto model_desc = demask::ModelDescription::from_document(demask::KeyValueDocument::load(decode_model));
    const auto model = demask::TabularModel::make(model_desc);
    demask::KeyValueDocument doc;
    merge_model_document(doc, model_desc);
    decode_flags.apply(doc);
    const auto cfg = demask::experiment_config_from_document(doc);
    auto initial = demask::MaskState::from_revealed(model.length(), parse_reveal(decode_reveal));
    demask::Rng rng(decode_seed);
    demask::DecodeOptions opts;
    opts.eos_fill = cfg.eos_fill;
    const auto result = demask::decode(model, initial, cfg.selector, cfg.sampler, opts, rng);
    if (!decode_trace.empty()) {
      Output trace(decode_trace);
      demask::write_trace(result.trace, trace.stream());
      trace.close();
    }
    write_summary(decode_out, json{{"sequence", result.sequence},
                                   {"steps", result.trace.step_count},
                                   {"eos_filled", result.trace.eos_filled},
                                   {"in_support", model.mass(result.sequence) > 0.0},
                                   {"selector", demask::selector_name(cfg.selector)}});
    return 0;
  }

  if (bench->parsed()) {
    const auto cfg = load_experiment(bench_config, bench_flags);
    const auto rec = demask::run_benchmark(cfg);
    Output out(bench_out.empty() ? cfg.out : bench_out);
    demask::write_csv({rec}, out.stream());
    out.close();
    const std::string summary = bench_summary.empty() ? cfg.summary : bench_summary;
    if (!summary.empty()) write_summary(summary, demask::summary_document({rec}));
    return 0;
  }

  if (grid->parsed()) {
    const auto base = load_experiment(grid_config, grid_flags);
    demask::GridSpec spec = grid_kind == "klass" ? demask::GridSpec::klass_default() : demask::GridSpec::demask_default();
    if (!grid_first.empty()) spec.first = grid_first;
    if (!grid_second.empty()) spec.second = grid_second;
    const auto result = demask::grid_search(spec, base, grid_jobs);
    Output out(grid_out.empty() ? base.out : grid_out);
    demask::write_csv(result.records, out.stream());
    out.close();
    const std::string summary = grid_summary.empty() ? base.summary : grid_summary;
    if (!summary.empty()) {
      auto baseline_cfg = base;
      baseline_cfg.selector = demask::EntropySelector{1};
      baseline_cfg.verify_bound = false;
      const double baseline_steps = demask::run_benchmark(baseline_cfg, -1).mean_steps;
      write_summary(summary, demask::summary_document(result.records, baseline_steps));
    }
    return 0;
  }

  if (verify->parsed()) {
    if (verify_instances < 1) throw demask::InvalidArgument("--instances must be positive");
    if (verify_vocab < 2 || verify_length < 2) throw demask::InvalidArgument("--max-vocab and --max-length must be >= 2");
    const auto source = verify_source == "exact" ? demask::DependencySource::exact : demask::DependencySource::predicted;
    std::unique_ptr<demask::DependencyPredictor> predictor;
    if (source == demask::DependencySource::predicted) {
      if (verify_checkpoint.empty()) throw demask::ConfigError("--checkpoint is required for dep-source predicted");
      predictor = std::make_unique<demask::DependencyPredictor>(demask::load_checkpoint(verify_checkpoint));
    }
    const auto taus = demask::GridSpec::demask_default().first;
    const std::vector<double> gammas{0.0, 0.5, 0.9};
    std::unique_ptr<Output> out;
    if (!verify_out.empty()) out = std::make_unique<Output>(verify_out);
    std::size_t holds = 0, violations = 0, unchecked_violations = 0, skipped = 0;
    double max_gap = -1.0;
    for (int i = 0; i < verify_instances; ++i) {
      const auto seed = demask::derive_seed(verify_seed, static_cast<std::uint64_t>(i));
      auto inst = demask::random_instance(seed, verify_vocab, verify_length);
      if (predictor && (predictor->features.vocab_size != inst.model.vocab_size() ||
                        predictor->features.length != inst.model.length())) {
        ++skipped;
        continue;
      }
      const demask::SelectionConfig cfg{verify_tau.value_or(taus[static_cast<std::size_t>(i) % taus.size()]),
                                        verify_gamma.value_or(gammas[static_cast<std::size_t>(i / taus.size()) % 3])};
      const auto rep = demask::verify_budget_bound(inst.model, inst.state, cfg, source, predictor.get(),
                                               static_cast<std::uint64_t>(i));
      max_gap = std::max(max_gap, rep.gap());
      if (rep.assumption_holds()) {
        ++holds;
        if (!rep.bound_satisfied) ++violations;
      } else if (!rep.bound_satisfied) {
        ++unchecked_violations;
      }
      if (out) out->stream() << demask::bound_report_to_json(rep).dump() << '\n';
    }
    if (out) out->close();
    const bool asserted = source == demask::DependencySource::exact;
    std::cout << json{{"instances", verify_instances},
                      {"skipped", skipped},
                      {"dep_source", verify_source},
                      {"assumption_holds", holds},
                      {"violations_where_assumption_holds", violations},
                      {"violations_where_assumption_fails", unchecked_violations},
                      {"max_gap", max_gap},
                      {"asserted", asserted}}
                     .dump()
              << '\n';
    if (asserted && violations > 0) {
      report_error("BoundViolation", std::to_string(violations) + " instance(s) exceed tau while the assumption holds");
      return kExitBoundViolation;
    }
    return 0;
  }

  if (subadd->parsed()) {
    if (subadd_models < 1 || subadd_instances < 0) throw demask::InvalidArgument("--models and --instances must be positive");
    static constexpr demask::TaskKind kMixed[] = {demask::TaskKind::independent, demask::TaskKind::markov,
                                                  demask::TaskKind::copy, demask::TaskKind::arithmetic_mod,
                                                  demask::TaskKind::dense_random};
    std::vector<demask::TabularModel> models;
    for (int m = 0; m < subadd_models; ++m) {
      const auto kind = subadd_family == "mixed" ? kMixed[m % 5] : demask::parse_task_kind(subadd_family);
      models.push_back(demask::make_task_model(kind, demask::VocabSpec{subadd_vocab, subadd_vocab - 1}, subadd_length,
                                               demask::derive_seed(subadd_seed, static_cast<std::uint64_t>(m))));
    }
    const auto records = demask::run_slack_experiment(models, subadd_instances, subadd_seed, subadd_opts);
    if (!subadd_out.empty()) {
      Output out(subadd_out);
      for (const auto& r : records) out.stream() << demask::slack_record_to_json(r).dump() << '\n';
      out.close();
    }
    write_summary(subadd_summary, json{{"records", records.size()},
                                       {"slack", demask::slack_summary_to_json(demask::summarize_slack(records))}});
    return 0;
  }

  if (report->parsed()) {
    std::vector<demask::BenchRecord> records;
    for (const auto& path : report_csv) {
      auto in = open_input(path);
      const auto part = demask::read_csv(in);
      records.insert(records.end(), part.begin(), part.end());
    }
    std::vector<demask::SlackReport> slack;
    if (!report_slack.empty()) {
      auto in = open_input(report_slack);
      std::vector<demask::SlackRecord> slack_records;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
          slack_records.push_back(demask::slack_record_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
          throw demask::ConfigError(std::string("malformed slack line: ") + e.what());
        }
      }
      slack = demask::summarize_slack(slack_records);
    }
    write_summary(report_out, demask::summary_document(records, report_baseline,
                                                       report_slack.empty() ? nullptr : &slack));
    return 0;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const demask::Error& e) {
    report_error(e.category(), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    report_error("Internal", e.what());
    return kExitInternal;
  }
}
