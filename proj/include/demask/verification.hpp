#pragma once

// Brute-force checks of the parallel-sampling error bound by exhaustive
// enumeration over small tabular models.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "demask/decoding.hpp"
#include "demask/model.hpp"
#include "demask/predictor.hpp"
#include "demask/selection.hpp"
#include "demask/tv.hpp"

namespace demask {

inline constexpr double kBoundTolerance = 1e-9;
/// Per-prefix tolerance for the sub-additivity predicate and slack violations.
inline constexpr double kSlackTolerance = 1e-12;

/// Product of the per-position conditionals over the subset, as a
/// distribution over V^|S| tuples (lexicographic in subset order).
inline Distribution factorized_conditional(const TabularModel& model, const MaskState& state,
                                           std::span<const Position> subset, const ForwardPass& pass) {
  const int v = model.vocab_size();
  detail::check_enumerable(model, subset.size());
  Distribution out;
  out.reserve(bounded_power(static_cast<std::uint64_t>(v), subset.size(), model.enumeration_cap()));
  std::vector<std::size_t> ranks;
  for (Position p : subset) ranks.push_back(state.rank(p));
  for_each_assignment(v, subset.size(), [&](std::span<const Token> values) {
    double p = 1.0;
    for (std::size_t k = 0; k < values.size(); ++k) p *= pass.marginals[ranks[k]][static_cast<std::size_t>(values[k])];
    out.push_back(p);
  });
  return out;
}

/// TV between the exact joint of the subset and its fully factorized approximation.
inline double tv_joint_vs_factorized(const TabularModel& model, const MaskState& state,
                                     std::span<const Position> subset) {
  const ForwardPass pass = forward_pass(model, state);
  return tv_distance(joint_conditional(model, state, subset), factorized_conditional(model, state, subset, pass));
}

/// Sub-additivity check for the t-th pick of an ordered selection.
struct PrefixCheck {
  double expected_tv = 0.0;    ///< E over the history of TV(P(Y_t | ctx), P(Y_t | ctx, history))
  double pairwise_sum = 0.0;   ///< sum of exact D(t, j) over earlier picks
  bool holds = true;
};

/// Evaluates the assumption for every prefix of `order` by exact expectation
/// over histories. Entry 0 (no history) holds trivially.
inline std::vector<PrefixCheck> check_assumption_prefixes(const TabularModel& model, const MaskState& state,
                                                          std::span<const Position> order,
                                                          const DependencyMatrix& exact_dep) {
  std::vector<PrefixCheck> out(order.size());
  if (order.empty()) return out;
  const int v = model.vocab_size();
  for (std::size_t t = 1; t < order.size(); ++t) {
    const Position target = order[t];
    const std::span<const Position> history(order.data(), t);
    const Distribution base = conditional_marginal(model, state, target);
    const Distribution hist_joint = joint_conditional(model, state, history);
    PrefixCheck check;
    for (std::size_t idx = 0; idx < hist_joint.size(); ++idx) {
      if (hist_joint[idx] == 0.0) continue;
      const auto values = tuple_from_index(idx, v, t);
      MaskState cond = state;
      for (std::size_t k = 0; k < t; ++k) cond.reveal(history[k], values[k]);
      check.expected_tv += hist_joint[idx] * tv_distance(base, conditional_marginal(model, cond, target));
    }
    const std::size_t rt = state.rank(target);
    for (Position s : history) check.pairwise_sum += exact_dep(rt, state.rank(s));
    check.holds = check.expected_tv <= check.pairwise_sum + kSlackTolerance;
    out[t] = check;
  }
  return out;
}

struct BoundReport {
  std::uint64_t instance_id = 0;
  double tau = 0.0;
  double gamma = 0.0;
  DependencySource source = DependencySource::exact;
  std::vector<Position> selected;
  double accumulated = 0.0;
  double measured_tv = 0.0;
  bool bound_satisfied = false;
  std::vector<PrefixCheck> prefixes;

  bool assumption_holds() const {
    return std::all_of(prefixes.begin(), prefixes.end(), [](const PrefixCheck& c) { return c.holds; });
  }
  /// measured TV minus tau; reported for predicted D where nothing is asserted.
  double gap() const { return measured_tv - tau; }
};

/// Runs the greedy selection on one instance, measures the exact error of the
/// factorized draw of the selected set and checks it against tau.
inline BoundReport verify_budget_bound(const TabularModel& model, const MaskState& state, const SelectionConfig& cfg,
                                   DependencySource source = DependencySource::exact,
                                   const DependencyPredictor* predictor = nullptr, std::uint64_t instance_id = 0) {
  const ForwardPass pass = forward_pass(model, state);
  const DependencyMatrix exact = dependency_matrix_exact(model, state, pass);
  DependencyMatrix dep = exact;
  if (source == DependencySource::predicted) {
    if (!predictor) throw InvalidArgument("verify_budget_bound: predicted source requires a predictor");
    dep = predictor->predict(state, pass);
  }
  std::vector<double> top1;
  for (const auto& m : pass.marginals) top1.push_back(top1_probability(m));
  const SelectionResult sel = greedy_subset_select(dep, state.masked(), top1, cfg);

  BoundReport rep;
  rep.instance_id = instance_id;
  rep.tau = cfg.tau;
  rep.gamma = cfg.gamma;
  rep.source = source;
  rep.selected = sel.chosen;
  rep.accumulated = sel.accumulated;
  rep.measured_tv = tv_distance(joint_conditional(model, state, sel.chosen),
                                factorized_conditional(model, state, sel.chosen, pass));
  rep.bound_satisfied = rep.measured_tv <= cfg.tau + kBoundTolerance;
  rep.prefixes = check_assumption_prefixes(model, state, sel.chosen, exact);
  return rep;
}

inline nlohmann::json bound_report_to_json(const BoundReport& r) {
  nlohmann::json prefixes = nlohmann::json::array();
  for (const auto& p : r.prefixes) {
    prefixes.push_back({{"expected_tv", p.expected_tv}, {"pairwise_sum", p.pairwise_sum}, {"holds", p.holds}});
  }
  return nlohmann::json{{"instance", r.instance_id},
                        {"tau", std::isinf(r.tau) ? nlohmann::json("inf") : nlohmann::json(r.tau)},
                        {"gamma", r.gamma},
                        {"source", r.source == DependencySource::exact ? "exact" : "predicted"},
                        {"selected", r.selected},
                        {"accumulated", r.accumulated},
                        {"measured_tv", r.measured_tv},
                        {"bound_satisfied", r.bound_satisfied},
                        {"assumption_holds", r.assumption_holds()},
                        {"prefixes", prefixes}};
}

// ---------------------------------------------------------------------------
// End-to-end induced distribution

/// Exact distribution over final sequences produced by `decode`, obtained by
/// expanding every sampling branch with its probability.
inline Distribution induced_output_distribution(const TabularModel& model, const MaskState& initial,
                                                const SelectorSpec& selector,
                                                const SamplerConfig& sampler = SamplerConfig::identity(),
                                                bool eos_fill_enabled = false) {
  const int v = model.vocab_size();
  detail::check_enumerable(model, static_cast<std::size_t>(model.length()));
  Distribution out(bounded_power(static_cast<std::uint64_t>(v), static_cast<std::size_t>(model.length()),
                                 model.enumeration_cap()),
                   0.0);
  const std::size_t hist_len = history_length(selector);

  struct Frame {
    MaskState state;
    MarginalHistory history;
    double prob;
  };
  std::vector<Frame> stack;
  MaskState start = initial;
  if (eos_fill_enabled) eos_fill(start, model.vocab().eos_id);
  stack.push_back(Frame{start, {}, 1.0});
  while (!stack.empty()) {
    Frame frame = std::move(stack.back());
    stack.pop_back();
    if (frame.state.complete()) {
      out[tuple_index(frame.state.sequence(), v)] += frame.prob;
      continue;
    }
    const ForwardPass pass = forward_pass(model, frame.state);
    const StepSelection sel = select_step(selector, model, frame.state, pass, frame.history);
    MarginalHistory next_history = frame.history;
    if (hist_len > 0) push_history(next_history, frame.state, pass, hist_len);
    std::vector<Distribution> probs;
    for (Position p : sel.positions) {
      const auto& m = pass.marginals[frame.state.rank(p)];
      probs.push_back(sampler.is_identity() ? m : transform_distribution(m, sampler));
    }
    for_each_assignment(v, sel.positions.size(), [&](std::span<const Token> values) {
      double p = frame.prob;
      for (std::size_t k = 0; k < values.size() && p > 0.0; ++k) p *= probs[k][static_cast<std::size_t>(values[k])];
      if (p == 0.0) return;
      MaskState next = frame.state;
      for (std::size_t k = 0; k < values.size(); ++k) next.reveal(sel.positions[k], values[k]);
      if (eos_fill_enabled) eos_fill(next, model.vocab().eos_id);
      stack.push_back(Frame{std::move(next), next_history, p});
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sub-additivity experiment

struct SlackRecord {
  std::uint64_t instance = 0;
  int model_id = 0;
  int subset_size = 0;
  Position target = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  double slack() const { return rhs - lhs; }
};

struct SlackExperimentOptions {
  int max_subset = 6;
};

/// Random mask (t ~ U(0,1), ceil(tN) positions), subset size ~ U{1..max},
/// subset drawn uniformly from the masked set, then for every remaining
/// masked target a fresh y_S from the exact joint conditional. Instances
/// whose masked set cannot hold the subset plus one target are skipped.
inline std::vector<SlackRecord> run_slack_experiment(std::span<const TabularModel> models, int n_instances,
                                                     std::uint64_t seed, const SlackExperimentOptions& opts = {}) {
  if (models.empty()) throw InvalidArgument("run_slack_experiment: no models");
  if (opts.max_subset < 1) throw InvalidArgument("run_slack_experiment: max_subset must be >= 1");
  std::vector<SlackRecord> out;
  for (int inst = 0; inst < n_instances; ++inst) {
    const std::size_t mi = static_cast<std::size_t>(inst) % models.size();
    const auto& model = models[mi];
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(inst)));
    const auto response = sample_joint(model, rng);
    const double t = uniform01(rng);
    const MaskState state = mask_response(response, masked_count(t, model.length()), rng);
    const int size = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(opts.max_subset)));
    const auto& masked = state.masked();
    if (static_cast<int>(masked.size()) < size + 1) continue;
    std::vector<Position> subset;
    for (auto r : random_subset(static_cast<int>(masked.size()), size, rng)) subset.push_back(masked[static_cast<std::size_t>(r)]);
    const Distribution joint = joint_conditional(model, state, subset);
    for (Position target : masked) {
      if (std::find(subset.begin(), subset.end(), target) != subset.end()) continue;
      const auto idx = static_cast<std::size_t>(sample_categorical(joint, rng));
      const auto values = tuple_from_index(idx, model.vocab_size(), subset.size());
      const SlackSample s = subadditivity_slack(model, state, target, subset, values);
      out.push_back(SlackRecord{static_cast<std::uint64_t>(inst), static_cast<int>(mi), size, target, s.lhs, s.rhs});
    }
  }
  return out;
}

/// Linear-interpolation quantile of a sorted sample.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline const std::vector<double>& slack_quantile_levels() {
  static const std::vector<double> levels{0.0, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0};
  return levels;
}

/// Per-|S| summary of slack values.
struct SlackReport {
  int subset_size = 0;
  std::size_t count = 0;
  double mean_slack = 0.0;
  double violation_rate = 0.0;
  std::vector<double> quantiles;  ///< at slack_quantile_levels()
  std::vector<double> slacks;     ///< sorted
};

inline std::vector<SlackReport> summarize_slack(const std::vector<SlackRecord>& records) {
  std::map<int, std::vector<double>> by_size;
  for (const auto& r : records) by_size[r.subset_size].push_back(r.slack());
  std::vector<SlackReport> out;
  for (auto& [size, values] : by_size) {
    std::sort(values.begin(), values.end());
    SlackReport rep;
    rep.subset_size = size;
    rep.count = values.size();
    std::size_t violations = 0;
    for (double s : values) {
      rep.mean_slack += s;
      if (s < -kSlackTolerance) ++violations;
    }
    rep.mean_slack /= static_cast<double>(values.size());
    rep.violation_rate = static_cast<double>(violations) / static_cast<double>(values.size());
    for (double q : slack_quantile_levels()) rep.quantiles.push_back(quantile_sorted(values, q));
    rep.slacks = std::move(values);
    out.push_back(std::move(rep));
  }
  return out;
}

inline nlohmann::json slack_record_to_json(const SlackRecord& r) {
  return nlohmann::json{{"instance", r.instance}, {"model_id", r.model_id}, {"subset_size", r.subset_size},
                        {"target", r.target},     {"lhs", r.lhs},           {"rhs", r.rhs},
                        {"slack", r.slack()}};
}

inline SlackRecord slack_record_from_json(const nlohmann::json& j) {
  try {
    return SlackRecord{j.at("instance").get<std::uint64_t>(), j.at("model_id").get<int>(),
                       j.at("subset_size").get<int>(),       j.at("target").get<Position>(),
                       j.at("lhs").get<double>(),            j.at("rhs").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed slack record: ") + e.what());
  }
}

inline nlohmann::json slack_summary_to_json(const std::vector<SlackReport>& reports) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : reports) {
    rows.push_back({{"subset_size", r.subset_size},
                    {"count", r.count},
                    {"mean_slack", r.mean_slack},
                    {"violation_rate", r.violation_rate},
                    {"quantile_levels", slack_quantile_levels()},
                    {"quantiles", r.quantiles}});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Random instances

struct Instance {
  TabularModel model;
  MaskState state;
};

/// A random small model of a random kind plus a random masking context whose
/// revealed values come from a joint sample (so the context has positive mass).
inline Instance random_instance(std::uint64_t seed, int max_vocab = 4, int max_length = 6) {
  Rng rng(derive_seed(seed, 0x1A57ULL));
  static constexpr TaskKind kinds[] = {TaskKind::independent, TaskKind::markov, TaskKind::copy,
                                       TaskKind::arithmetic_mod, TaskKind::dense_random};
  ModelDescription desc;
  desc.kind = kinds[uniform_index(rng, 5)];
  desc.vocab.size = 2 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(max_vocab - 1)));
  desc.vocab.eos_id = desc.vocab.size - 1;
  desc.length = 2 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(max_length - 1)));
  desc.seed = rng();
  desc.concentration = 0.2 + 1.8 * uniform01(rng);
  TabularModel model = TabularModel::make(desc);
  const auto response = sample_joint(model, rng);
  const int count = std::max(1, masked_count(uniform01(rng), model.length()));
  MaskState state = mask_response(response, count, rng);
  return Instance{std::move(model), std::move(state)};
}

}  // namespace demask
