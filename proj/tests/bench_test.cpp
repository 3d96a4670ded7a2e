#include <gtest/gtest.h>

#include <limits>
#include <sstream>

#include "demask/bench.hpp"

namespace demask {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ExperimentConfig arithmetic_config(SelectorSpec selector, int reps = 200) {
  ExperimentConfig cfg;
  cfg.task.kind = TaskKind::arithmetic_mod;
  cfg.task.vocab = VocabSpec{3, 2};
  cfg.task.length = 3;
  cfg.reveal_prefix = 1;
  cfg.selector = std::move(selector);
  cfg.sampler = SamplerConfig::identity();
  cfg.repetitions = reps;
  cfg.seed = 7;
  return cfg;
}

SelectorSpec demask_exact(double tau, double gamma) {
  return DemaskSelector{SelectionConfig{tau, gamma}, DependencySource::exact, nullptr};
}

TEST(RunBenchmark, UnboundedDemaskOnIndependentTask) {
  ExperimentConfig cfg;
  cfg.task.kind = TaskKind::independent;
  cfg.task.vocab = VocabSpec{3, 2};
  cfg.task.length = 5;
  cfg.selector = demask_exact(kInf, 0.0);
  cfg.repetitions = 50;
  const auto rec = run_benchmark(cfg);
  EXPECT_EQ(rec.mean_steps, 1.0);
  EXPECT_EQ(rec.mean_parallel, 5.0);
  // Every sequence has positive mass under a factorized model with full-support factors.
  EXPECT_EQ(rec.accuracy, 1.0);
  EXPECT_EQ(rec.selector, "demask");
}

TEST(RunBenchmark, TokenOrderOneTakesLengthSteps) {
  ExperimentConfig cfg;
  cfg.task.kind = TaskKind::markov;
  cfg.task.vocab = VocabSpec{3, 2};
  cfg.task.length = 6;
  cfg.selector = TokenOrderSelector{1};
  cfg.repetitions = 40;
  EXPECT_EQ(run_benchmark(cfg).mean_steps, 6.0);
  cfg.eos_fill = true;
  const auto filled = run_benchmark(cfg);
  EXPECT_LE(filled.mean_steps, 6.0);
  EXPECT_GE(filled.mean_steps, 1.0);
}

TEST(RunBenchmark, DemaskBeatsTwoParallelTokenOrderOnArithmetic) {
  const auto demask = run_benchmark(arithmetic_config(demask_exact(0.04, 0.9)));
  const auto naive = run_benchmark(arithmetic_config(TokenOrderSelector{2}));
  EXPECT_EQ(demask.accuracy, 1.0);
  EXPECT_LT(naive.accuracy, demask.accuracy);
  EXPECT_NEAR(naive.accuracy, 1.0 / 3.0, 0.1);
  EXPECT_EQ(naive.mean_steps, 1.0);
  EXPECT_EQ(demask.mean_steps, 2.0);
}

TEST(RunBenchmark, BoundViolationRateWithExactDependencies) {
  auto cfg = arithmetic_config(demask_exact(0.04, 0.0), 50);
  cfg.verify_bound = true;
  const auto rec = run_benchmark(cfg);
  EXPECT_EQ(rec.bound_violation_rate, 0.0);
  EXPECT_TRUE(std::isnan(run_benchmark(arithmetic_config(demask_exact(0.04, 0.0), 10)).bound_violation_rate));
}

TEST(RunBenchmark, DeterministicPerSeed) {
  auto cfg = arithmetic_config(KlassSelector{KlassConfig{}}, 60);
  cfg.task.kind = TaskKind::dense_random;
  cfg.task.length = 4;
  cfg.sampler = SamplerConfig{};
  EXPECT_EQ(run_benchmark(cfg, 3), run_benchmark(cfg, 3));
}

TEST(RunBenchmark, RejectsInvalidConfig) {
  auto cfg = arithmetic_config(demask_exact(0.04, 0.9));
  cfg.repetitions = 0;
  EXPECT_THROW(run_benchmark(cfg), ConfigError);
  cfg = arithmetic_config(demask_exact(-1.0, 0.9));
  EXPECT_THROW(run_benchmark(cfg), ConfigError);
  cfg = arithmetic_config(TokenOrderSelector{0});
  EXPECT_THROW(run_benchmark(cfg), ConfigError);
  cfg = arithmetic_config(demask_exact(0.04, 0.9));
  cfg.reveal_prefix = 3;
  EXPECT_THROW(run_benchmark(cfg), ConfigError);
}

BenchRecord point(int id, double steps, double acc) {
  BenchRecord r;
  r.config_id = id;
  r.selector = "demask";
  r.mean_steps = steps;
  r.accuracy = acc;
  return r;
}

TEST(ParetoFrontier, Examples) {
  EXPECT_EQ(pareto_frontier({point(0, 2.0, 0.5)}).size(), 1u);
  const auto f = pareto_frontier({point(0, 2.0, 0.5), point(1, 1.5, 0.9)});
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].config_id, 1);
  EXPECT_TRUE(pareto_frontier({}).empty());
}

TEST(ParetoFrontier, NoFrontierPointIsDominated) {
  Rng rng(19);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<BenchRecord> records;
    const int n = 1 + static_cast<int>(uniform_index(rng, 30));
    for (int k = 0; k < n; ++k) {
      records.push_back(point(k, 1.0 + static_cast<double>(uniform_index(rng, 5)), static_cast<double>(uniform_index(rng, 5)) / 4));
    }
    const auto frontier = pareto_frontier(records);
    ASSERT_FALSE(frontier.empty());
    for (const auto& f : frontier) {
      for (const auto& r : records) {
        EXPECT_FALSE(r.mean_steps <= f.mean_steps && r.accuracy >= f.accuracy &&
                     (r.mean_steps < f.mean_steps || r.accuracy > f.accuracy));
      }
    }
    // Every record outside the frontier is dominated by some frontier point.
    for (const auto& r : records) {
      const bool on = std::any_of(frontier.begin(), frontier.end(), [&](const BenchRecord& f) { return f.config_id == r.config_id; });
      if (on) continue;
      EXPECT_TRUE(std::any_of(frontier.begin(), frontier.end(), [&](const BenchRecord& f) {
        return f.mean_steps <= r.mean_steps && f.accuracy >= r.accuracy;
      }));
    }
  }
}

TEST(GridSearch, DefaultGridSizes) {
  EXPECT_EQ(GridSpec::demask_default().size(), 60u);
  EXPECT_EQ(GridSpec::klass_default().size(), 45u);
  const auto base = arithmetic_config(demask_exact(0.04, 0.9), 4);
  const auto demask = grid_search(GridSpec::demask_default(), base, 2);
  ASSERT_EQ(demask.records.size(), 60u);
  for (std::size_t i = 0; i < demask.records.size(); ++i) EXPECT_EQ(demask.records[i].config_id, static_cast<int>(i));
  EXPECT_EQ(demask.records[7].tau, 0.4);
  EXPECT_EQ(demask.records[7].gamma, 0.5);
  EXPECT_FALSE(demask.frontier.empty());
  const auto klass = grid_search(GridSpec::klass_default(), base, 1);
  ASSERT_EQ(klass.records.size(), 45u);
  EXPECT_EQ(klass.records.back().selector, "klass");
  EXPECT_EQ(klass.records.back().kl_threshold, 0.00001);
  EXPECT_EQ(klass.records.back().conf_threshold, 0.9);
}

TEST(GridSearch, ByteIdenticalAcrossRunsAndJobCounts) {
  const auto base = arithmetic_config(demask_exact(0.04, 0.9), 10);
  const auto a = csv_string(grid_search(GridSpec::demask_default(), base, 1).records);
  const auto b = csv_string(grid_search(GridSpec::demask_default(), base, 3).records);
  EXPECT_EQ(a, b);
}

TEST(GridSearch, RejectsEmptyAxes) {
  EXPECT_THROW(grid_search(GridSpec{"demask", {}, {0.1}}, arithmetic_config(demask_exact(0.1, 0.1))), ConfigError);
  EXPECT_THROW(grid_search(GridSpec{"entropy", {1}, {1}}, arithmetic_config(demask_exact(0.1, 0.1))), ConfigError);
}

TEST(Csv, EmptyStreamIsHeaderOnly) {
  const auto text = csv_string({});
  EXPECT_EQ(text, std::string(kCsvVersionLine) +
                      "\nconfig_id,selector,tau,gamma,k,kl_threshold,conf_threshold,history,temperature,top_p,"
                      "eos_fill,repetitions,accuracy,mean_steps,mean_parallel,bound_violation_rate,off_support_rate\n");
  std::istringstream in(text);
  EXPECT_TRUE(read_csv(in).empty());
}

TEST(Csv, RoundTripEqualsRecords) {
  std::vector<BenchRecord> records;
  records.push_back(run_benchmark(arithmetic_config(demask_exact(kInf, 0.0), 30), 0));
  auto verified = arithmetic_config(demask_exact(0.1, 0.3), 30);
  verified.verify_bound = true;
  records.push_back(run_benchmark(verified, 1));
  records.push_back(run_benchmark(arithmetic_config(KlassSelector{KlassConfig{0.001, 0.7, 2}}, 30), 2));
  records.push_back(run_benchmark(arithmetic_config(EntropySelector{2}, 30), 3));
  std::istringstream in(csv_string(records));
  const auto back = read_csv(in);
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t k = 0; k < back.size(); ++k) EXPECT_EQ(back[k], records[k]) << k;
}

TEST(Csv, RejectsWrongVersion) {
  std::istringstream in("# demask-bench-csv v0\n");
  EXPECT_THROW(read_csv(in), FormatVersionMismatch);
}

TEST(ExperimentConfigDocument, ParsesAndRejectsUnknownKeys) {
  const auto doc = KeyValueDocument::parse(
      "# arithmetic run\nkind = arithmetic-mod\nvocab_size = 3\nlength = 3\nreveal_prefix = 1\n"
      "selector = token-order\ntokens_per_step = 2\ntemperature = 1\ntop_p = 1\nrepetitions = 12\nseed = 5\n",
      "test");
  const auto cfg = experiment_config_from_document(doc);
  EXPECT_EQ(cfg.task.kind, TaskKind::arithmetic_mod);
  EXPECT_EQ(std::get<TokenOrderSelector>(cfg.selector).k, 2);
  EXPECT_EQ(cfg.repetitions, 12);
  EXPECT_EQ(cfg.seed, 5u);
  EXPECT_TRUE(cfg.sampler.is_identity());

  EXPECT_THROW(experiment_config_from_document(KeyValueDocument::parse("kind = copy\ntua = 0.1\n", "test")),
               ConfigError);
  EXPECT_THROW(experiment_config_from_document(KeyValueDocument::parse("selector = greedy\n", "test")), ConfigError);
  EXPECT_THROW(experiment_config_from_document(KeyValueDocument::parse("dep_source = predicted\n", "test")),
               ConfigError);
  EXPECT_THROW(experiment_config_from_document(KeyValueDocument::parse("top_p = 2\n", "test")), ConfigError);
}

TEST(SummaryDocument, ContainsParetoSpeedupAndSlackTables) {
  const std::vector<BenchRecord> records{point(0, 2.0, 1.0), point(1, 1.0, 0.4), point(2, 2.0, 0.5)};
  std::vector<TabularModel> models;
  for (std::uint64_t s = 0; s < 3; ++s) models.push_back(make_task_model(TaskKind::dense_random, VocabSpec{3, 2}, 5, s));
  const auto slack = summarize_slack(run_slack_experiment(models, 200, 1));
  const auto doc = summary_document(records, 3.0, &slack);
  EXPECT_EQ(doc.at("pareto").size(), 2u);
  EXPECT_DOUBLE_EQ(doc.at("speedup").at(1).at("speedup").get<double>(), 3.0);
  const auto& first = doc.at("slack").at(0);
  EXPECT_EQ(first.at("subset_size"), 1);
  for (const auto& q : first.at("quantiles")) EXPECT_EQ(q.get<double>(), 0.0);
  EXPECT_EQ(first.at("violation_rate").get<double>(), 0.0);
  EXPECT_EQ(summary_document(records).dump(), summary_document(records).dump());
}

}  // namespace
}  // namespace demask
