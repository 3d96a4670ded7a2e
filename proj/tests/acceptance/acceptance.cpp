// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "demask/demask.hpp"
#include "oracles.hpp"

namespace {

using namespace demask;

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

SelectorSpec demask_exact(double tau, double gamma) {
  return DemaskSelector{SelectionConfig{tau, gamma}, DependencySource::exact, nullptr};
}

// 1. Bound suite over random instances with exact D.
Outcome bound_suite() {
  const auto start = std::chrono::steady_clock::now();
  const auto taus = GridSpec::demask_default().first;
  const double gammas[] = {0.0, 0.5, 0.9};
  constexpr int kInstances = 1200;
  int holds = 0, violations = 0;
  double worst = -kInf;
  for (int i = 0; i < kInstances; ++i) {
    const auto inst = random_instance(derive_seed(2024, static_cast<std::uint64_t>(i)), 4, 6);
    const SelectionConfig cfg{taus[static_cast<std::size_t>(i) % taus.size()], gammas[(i / taus.size()) % 3]};
    const auto rep = verify_budget_bound(inst.model, inst.state, cfg, DependencySource::exact, nullptr,
                                     static_cast<std::uint64_t>(i));
    if (!rep.assumption_holds()) continue;
    ++holds;
    worst = std::max(worst, rep.measured_tv - rep.tau);
    if (!(rep.measured_tv <= rep.tau + 1e-9)) ++violations;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ostringstream d;
  d << kInstances << " instances, assumption holds on " << holds << ", violations " << violations
    << ", max(E - tau) " << worst << ", " << fmt("%.1f", secs) << " s";
  return {violations == 0 && holds > 0 && secs <= 300.0, d.str()};
}

// 2. Tightness on arithmetic mod 3 with a revealed.
Outcome tightness() {
  const auto model = make_task_model(TaskKind::arithmetic_mod, VocabSpec{3, 2}, 3, 0);
  const auto state = MaskState::from_revealed(3, {{0, 1}});
  const auto rep = verify_budget_bound(model, state, SelectionConfig{1.0, 0.0});
  std::vector<Position> sel = rep.selected;
  std::sort(sel.begin(), sel.end());

  // Enumeration oracle: joint of (b, c) is uniform on the 3 consistent pairs,
  // the product of the two uniform marginals puts 1/9 on each of 9 pairs.
  const auto table = oracle::table_of(model);
  const auto joint = oracle::joint(table, {{0, 1}}, {1, 2});
  const auto pb = oracle::conditional(table, {{0, 1}}, 1);
  const auto pc = oracle::conditional(table, {{0, 1}}, 2);
  std::vector<double> product;
  for (double x : pb) {
    for (double y : pc) product.push_back(x * y);
  }
  const double oracle_tv = oracle::tv(joint, product);

  std::ostringstream d;
  d << "S = {" << (sel.size() > 0 ? sel[0] : -1) << "," << (sel.size() > 1 ? sel[1] : -1) << "}, accumulated "
    << rep.accumulated << ", E " << rep.measured_tv << ", oracle " << oracle_tv;
  const bool ok = sel == std::vector<Position>{1, 2} && std::abs(rep.accumulated - 2.0 / 3.0) <= 1e-9 &&
                  std::abs(rep.measured_tv - 2.0 / 3.0) <= 1e-9 && std::abs(oracle_tv - 2.0 / 3.0) <= 1e-12;
  return {ok, d.str()};
}

// 3. One position per step reproduces the joint exactly.
Outcome sequential_exactness() {
  const std::vector<std::pair<std::string, SelectorSpec>> policies{
      {"entropy-1", EntropySelector{1}}, {"top1-1", Top1Selector{1}}, {"token-order-1", TokenOrderSelector{1}}};
  double worst = 0.0;
  int checked = 0;
  for (int i = 0; i < 100; ++i) {
    Rng rng(derive_seed(303, static_cast<std::uint64_t>(i)));
    static constexpr TaskKind kinds[] = {TaskKind::independent, TaskKind::markov, TaskKind::copy,
                                         TaskKind::arithmetic_mod, TaskKind::dense_random};
    ModelDescription desc;
    desc.kind = kinds[i % 5];
    desc.vocab.size = 2 + static_cast<int>(uniform_index(rng, 2));
    desc.vocab.eos_id = desc.vocab.size - 1;
    desc.length = 2 + static_cast<int>(uniform_index(rng, 3));
    desc.seed = rng();
    desc.concentration = 0.3 + uniform01(rng);
    const auto model = TabularModel::make(desc);
    const auto table = oracle::table_of(model);
    double total = 0.0;
    for (double p : table.mass) total += p;
    std::vector<double> joint;
    for (double p : table.mass) joint.push_back(p / total);
    for (const auto& [name, policy] : policies) {
      const auto induced = induced_output_distribution(model, MaskState::all_masked(model.length()), policy);
      worst = std::max(worst, oracle::tv(induced, joint));
      ++checked;
    }
  }
  return {worst <= 1e-10, std::to_string(checked) + " model/policy pairs, max TV " + fmt("%.3g", worst)};
}

// 4. Sub-additivity slack structure.
Outcome subadditivity() {
  static constexpr TaskKind kinds[] = {TaskKind::independent, TaskKind::markov, TaskKind::copy,
                                       TaskKind::arithmetic_mod, TaskKind::dense_random};
  std::vector<TabularModel> mixed;
  for (int m = 0; m < 10; ++m) mixed.push_back(make_task_model(kinds[m % 5], VocabSpec{3, 2}, 6, derive_seed(44, m)));
  const auto records = run_slack_experiment(mixed, 600, 7, SlackExperimentOptions{4});

  std::vector<TabularModel> independent;
  for (int m = 0; m < 5; ++m) {
    independent.push_back(make_task_model(TaskKind::independent, VocabSpec{3, 2}, 6, derive_seed(45, m)));
  }
  const auto ind_records = run_slack_experiment(independent, 300, 8, SlackExperimentOptions{4});

  double size1_max = 0.0;
  std::size_t size1_count = 0;
  for (const auto& r : records) {
    if (r.subset_size != 1) continue;
    ++size1_count;
    size1_max = std::max(size1_max, std::abs(r.rhs - r.lhs));
  }
  std::size_t ind_violations = 0;
  for (const auto& r : ind_records) {
    if (r.rhs - r.lhs < -kSlackTolerance) ++ind_violations;
  }
  std::ostringstream d;
  d << "size-1 records " << size1_count << " max |slack| " << size1_max << "; independent violations "
    << ind_violations << "/" << ind_records.size() << "; mixed";
  for (const auto& s : summarize_slack(records)) {
    d << " |S|=" << s.subset_size << ": n=" << s.count << " rate=" << fmt("%.4f", s.violation_rate)
      << " mean=" << fmt("%.4f", s.mean_slack);
  }
  return {size1_count > 0 && size1_max == 0.0 && ind_violations == 0 && !ind_records.empty(), d.str()};
}

// 5. Analytic predictor gradients against central differences.
Outcome gradient_check() {
  std::vector<TabularModel> models;
  for (int m = 0; m < 5; ++m) {
    models.push_back(make_task_model(m % 2 ? TaskKind::copy : TaskKind::dense_random, VocabSpec{3, 2}, 5,
                                     derive_seed(55, m)));
  }
  const auto cfg = FeatureConfig::for_model(models[0]);
  const auto examples = examples_from_cache(generate_tv_cache(models, CacheOptions{4, 4}, 9), models, cfg);
  Rng rng(501);
  double worst = 0.0;
  int entries = 0;
  for (int inst = 0; inst < 50; ++inst) {
    std::vector<TrainingExample> batch;
    for (int b = 0; b < 4; ++b) batch.push_back(examples[uniform_index(rng, examples.size())]);
    const auto w = PredictorWeights::random(cfg.dim(), 0.3 + uniform01(rng), rng);
    const auto lg = batch_loss_and_gradient(batch, w);
    constexpr double h = 1e-6;
    for (int which = 0; which < 2; ++which) {
      for (int r = 0; r < cfg.dim(); ++r) {
        for (int c = 0; c < cfg.dim(); ++c) {
          auto plus = w;
          auto minus = w;
          (which == 0 ? plus.w_q : plus.w_k)(r, c) += h;
          (which == 0 ? minus.w_q : minus.w_k)(r, c) -= h;
          const double numeric =
              (batch_loss_and_gradient(batch, plus, false).loss - batch_loss_and_gradient(batch, minus, false).loss) /
              (2.0 * h);
          const double analytic = (which == 0 ? lg.grad_q : lg.grad_k)(r, c);
          const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
          worst = std::max(worst, rel);
          ++entries;
        }
      }
    }
  }
  return {worst <= 1e-4, "50 instances, " + std::to_string(entries) + " entries, max relative error " +
                             fmt("%.3g", worst)};
}

// 6. MSE training converges to the conditional mean of the targets.
Outcome conditional_mean() {
  // A real context from a copy model supplies the feature rows.
  const auto model = make_task_model(TaskKind::copy, VocabSpec{3, 2}, 3, 1);
  const auto state = MaskState::all_masked(3);
  const auto cfg = FeatureConfig::for_model(model);
  const Eigen::MatrixXd h = featurize(model, state, cfg);
  std::vector<TrainingExample> examples;
  for (int k = 0; k < 64; ++k) examples.push_back(TrainingExample{h, 1, {k % 2 ? 0.4 : 0.2, 0.0, 0.1}});
  double oracle_mean = 0.0;
  for (const auto& ex : examples) oracle_mean += ex.targets[0];
  oracle_mean /= static_cast<double>(examples.size());
  auto hyper = TrainingHyper::desk_scale();
  hyper.validation_fraction = 0.0;
  hyper.epochs = 80;
  const auto result = train_predictor(examples, cfg, hyper, 11);
  const double pred = predict_dependency(h, result.weights, state.masked())(0, 1);
  return {std::abs(pred - oracle_mean) <= 0.02 && std::abs(oracle_mean - 0.3) < 1e-12,
          "prediction " + fmt("%.4f", pred) + ", empirical mean " + fmt("%.4f", oracle_mean)};
}

// 7. Degenerate budgets.
Outcome degenerate_parallelism() {
  int one_step = 0, runs = 0;
  for (int i = 0; i < 200; ++i) {
    const auto inst = random_instance(derive_seed(707, static_cast<std::uint64_t>(i)), 4, 6);
    Rng rng(static_cast<std::uint64_t>(i));
    const auto res = decode(inst.model, inst.state, demask_exact(kInf, 0.0), SamplerConfig{1.0, 1.0}, {}, rng);
    ++runs;
    if (res.trace.step_count == 1) ++one_step;
  }

  // tau = 0: replay each decode and confirm the precondition at every step.
  int n_step = 0, qualifying = 0, excluded = 0;
  for (int i = 0; i < 100; ++i) {
    const int length = 3 + i % 4;
    const auto model = make_task_model(TaskKind::dense_random, VocabSpec{3, 2}, length, derive_seed(708, i));
    Rng rng(static_cast<std::uint64_t>(i));
    const auto res = decode(model, MaskState::all_masked(length), demask_exact(0.0, 0.0), SamplerConfig{1.0, 1.0},
                            {}, rng);
    MaskState state = MaskState::all_masked(length);
    bool positive = true;
    for (const auto& step : res.trace.steps) {
      const auto dep = dependency_matrix_exact(model, state, forward_pass(model, state));
      for (std::size_t a = 0; a < dep.size(); ++a) {
        for (std::size_t b = 0; b < dep.size(); ++b) {
          if (a != b && !(dep(a, b) > 0.0)) positive = false;
        }
      }
      for (std::size_t k = 0; k < step.selected.size(); ++k) state.reveal(step.selected[k], step.sampled[k]);
    }
    if (!positive) {
      ++excluded;
      continue;
    }
    ++qualifying;
    if (res.trace.step_count == length) ++n_step;
  }
  std::ostringstream d;
  d << "tau=inf: " << one_step << "/" << runs << " in 1 step; tau=0: " << n_step << "/" << qualifying
    << " in N steps (" << excluded << " runs without strictly positive D excluded)";
  return {one_step == runs && qualifying > 0 && n_step == qualifying, d.str()};
}

// 8. Parallel baseline degrades on the arithmetic family.
Outcome baseline_degradation() {
  ExperimentConfig base;
  base.task.kind = TaskKind::arithmetic_mod;
  base.task.vocab = VocabSpec{3, 2};
  base.task.length = 3;
  base.reveal_prefix = 1;
  base.sampler = SamplerConfig{1.0, 1.0};
  base.repetitions = 500;
  base.seed = 88;
  auto demask_cfg = base;
  demask_cfg.selector = demask_exact(0.04, 0.9);
  auto token_cfg = base;
  token_cfg.selector = TokenOrderSelector{2};
  const auto a = run_benchmark(demask_cfg, 0);
  const auto b = run_benchmark(token_cfg, 1);
  return {b.accuracy < a.accuracy && a.accuracy >= 0.99,
          "demask " + fmt("%.3f", a.accuracy) + " (" + fmt("%.2f", a.mean_steps) + " steps), token-order k=2 " +
              fmt("%.3f", b.accuracy) + " (" + fmt("%.2f", b.mean_steps) + " steps)"};
}

// 9. Grid sizes and byte-identical reruns.
Outcome grid_reproducibility() {
  ExperimentConfig base;
  base.task.kind = TaskKind::arithmetic_mod;
  base.task.vocab = VocabSpec{3, 2};
  base.task.length = 4;
  base.reveal_prefix = 1;
  base.repetitions = 20;
  base.seed = 9;
  const auto d1 = grid_search(GridSpec::demask_default(), base, 1);
  const auto d2 = grid_search(GridSpec::demask_default(), base, 4);
  const auto k1 = grid_search(GridSpec::klass_default(), base, 1);
  const auto k2 = grid_search(GridSpec::klass_default(), base, 3);
  const bool same = csv_string(d1.records) == csv_string(d2.records) && csv_string(k1.records) == csv_string(k2.records);
  std::ostringstream d;
  d << "demask " << d1.records.size() << " records, klass " << k1.records.size() << " records, reruns "
    << (same ? "byte-identical" : "differ");
  return {d1.records.size() == 60 && k1.records.size() == 45 && same, d.str()};
}

// 10. EOS fast-fill never costs steps and keeps the prefix before EOS.
Outcome eos_fast_fill() {
  const std::vector<std::pair<std::string, SelectorSpec>> selectors{
      {"token-order-1", TokenOrderSelector{1}}, {"token-order-2", TokenOrderSelector{2}},
      {"entropy-1", EntropySelector{1}},        {"top1-2", Top1Selector{2}},
      {"demask", demask_exact(0.04, 0.5)}};
  const int length = 6;
  std::vector<TabularModel> family;
  for (int m = 0; m < 4; ++m) family.push_back(make_task_model(TaskKind::markov, VocabSpec{3, 2}, length, derive_seed(10, m)));

  std::map<std::string, int> more_steps;
  int prefix_changes = 0, runs = 0, early_eos = 0, off_support = 0;
  for (const auto& model : family) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      for (const auto& [name, sel] : selectors) {
        Rng r1(seed), r2(seed);
        const SamplerConfig sampler{1.0, 1.0};
        const auto with = decode(model, MaskState::all_masked(length), sel, sampler, DecodeOptions{true, true}, r1);
        const auto without =
            decode(model, MaskState::all_masked(length), sel, sampler, DecodeOptions{false, true}, r2);
        // A co-sampled zero-mass tuple ends decoding early; such pairs are reported, not compared.
        if (with.trace.off_support || without.trace.off_support) {
          ++off_support;
          continue;
        }
        ++runs;
        if (with.trace.step_count > without.trace.step_count) ++more_steps[name];
        if (name == "token-order-1") {
          auto cut = [](const std::vector<Token>& s) {
            auto it = std::find(s.begin(), s.end(), Token{2});
            return std::vector<Token>(s.begin(), it == s.end() ? s.end() : it + 1);
          };
          if (cut(with.sequence) != cut(without.sequence)) ++prefix_changes;
          if (cut(without.sequence).size() < static_cast<std::size_t>(length)) ++early_eos;
        }
      }
    }
  }
  int total_more = 0;
  std::ostringstream d;
  d << runs << " paired decodes (" << off_support << " off-support pairs excluded); early EOS in " << early_eos << "/400 token-order runs; prefix changes "
    << prefix_changes << "; runs where fill took more steps:";
  for (const auto& [name, sel] : selectors) {
    d << " " << name << "=" << more_steps[name];
    total_more += more_steps[name];
  }
  return {total_more == 0 && prefix_changes == 0 && early_eos > 0, d.str()};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"C1 bound holds under the assumption", bound_suite},
      {"C2 arithmetic tightness", tightness},
      {"C3 sequential exactness", sequential_exactness},
      {"C4 sub-additivity slack", subadditivity},
      {"C5 predictor gradient check", gradient_check},
      {"C6 conditional mean", conditional_mean},
      {"C7 degenerate parallelism", degenerate_parallelism},
      {"C8 baseline degradation", baseline_degradation},
      {"C9 grid reproducibility", grid_reproducibility},
      {"C10 EOS fast-fill", eos_fast_fill},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
