#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "demask/error.hpp"
#include "demask/model.hpp"
#include "demask/predictor.hpp"
#include "demask/sampling.hpp"
#include "demask/selection.hpp"
#include "demask/tv.hpp"

namespace demask {

struct KlassConfig {
  double kl_threshold = 0.0003;
  double conf_threshold = 0.9;
  int history_len = 2;

  void validate() const {
    if (!(kl_threshold >= 0.0)) throw InvalidArgument("kl_threshold must be >= 0");
    if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) throw InvalidArgument("conf_threshold must lie in [0, 1]");
    if (history_len < 1) throw InvalidArgument("history_len must be positive");
  }
};

/// Dependency-guided selection with exact or learned D.
struct DemaskSelector {
  SelectionConfig selection;
  DependencySource source = DependencySource::exact;
  std::shared_ptr<const DependencyPredictor> predictor;
};
struct EntropySelector { int k = 1; };
struct Top1Selector { int k = 1; };
struct TokenOrderSelector { int k = 1; };
struct KlassSelector { KlassConfig cfg; };

using SelectorSpec = std::variant<DemaskSelector, EntropySelector, Top1Selector, TokenOrderSelector, KlassSelector>;

inline std::string selector_name(const SelectorSpec& spec) {
  struct Visitor {
    std::string operator()(const DemaskSelector&) const { return "demask"; }
    std::string operator()(const EntropySelector&) const { return "entropy"; }
    std::string operator()(const Top1Selector&) const { return "top1"; }
    std::string operator()(const TokenOrderSelector&) const { return "token-order"; }
    std::string operator()(const KlassSelector&) const { return "klass"; }
  };
  return std::visit(Visitor{}, spec);
}

/// Prior-step marginals per masked position, most recent first.
using MarginalHistory = std::map<Position, std::deque<Distribution>>;

namespace detail {

inline void require_k(int k) {
  if (k < 1) throw InvalidArgument("tokens per step must be >= 1");
}

/// The k best ranks under `better` (strict weak order), ties to lower rank.
template <typename Better>
std::vector<Position> best_k(std::span<const Position> masked, int k, Better better) {
  if (masked.empty()) throw EmptyMaskSet("selector: no masked positions");
  require_k(k);
  std::vector<std::size_t> ranks(masked.size());
  std::iota(ranks.begin(), ranks.end(), 0);
  std::stable_sort(ranks.begin(), ranks.end(), better);
  ranks.resize(std::min<std::size_t>(ranks.size(), static_cast<std::size_t>(k)));
  std::vector<Position> out;
  for (std::size_t r : ranks) out.push_back(masked[r]);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Lowest-entropy k positions. `marginals` is indexed by rank in `masked`.
inline std::vector<Position> select_entropy_k(std::span<const Distribution> marginals, std::span<const Position> masked,
                                              int k) {
  std::vector<double> h;
  for (const auto& d : marginals) h.push_back(entropy(d));
  return detail::best_k(masked, k, [&](std::size_t a, std::size_t b) { return h[a] < h[b]; });
}

inline std::vector<Position> select_top1_k(std::span<const Distribution> marginals, std::span<const Position> masked,
                                           int k) {
  std::vector<double> c;
  for (const auto& d : marginals) c.push_back(top1_probability(d));
  return detail::best_k(masked, k, [&](std::size_t a, std::size_t b) { return c[a] > c[b]; });
}

inline std::vector<Position> select_token_order_k(std::span<const Position> masked, int k) {
  return detail::best_k(masked, k, [](std::size_t a, std::size_t b) { return a < b; });
}

/// KL(p || q) with a guard inside the logarithm.
inline double kl_divergence(const Distribution& p, const Distribution& q) {
  constexpr double kGuard = 1e-12;
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) kl += p[k] * std::log((p[k] + kGuard) / (q[k] + kGuard));
  }
  return std::max(kl, 0.0);
}

/// Stability-based selection: positions whose last `history_len` consecutive
/// marginal changes all have KL(newer || older) below the threshold and whose
/// current top-1 exceeds the confidence threshold. Falls back to the single
/// most confident position when nothing qualifies.
inline std::vector<Position> select_klass(const MarginalHistory& history, std::span<const Distribution> marginals,
                                          std::span<const Position> masked, const KlassConfig& cfg) {
  cfg.validate();
  if (masked.empty()) throw EmptyMaskSet("select_klass: no masked positions");
  std::vector<Position> out;
  for (std::size_t r = 0; r < masked.size(); ++r) {
    const double conf = top1_probability(marginals[r]);
    if (!(conf > cfg.conf_threshold)) continue;
    const auto it = history.find(masked[r]);
    if (it == history.end() || it->second.size() < static_cast<std::size_t>(cfg.history_len)) continue;
    const auto& past = it->second;
    double max_kl = kl_divergence(marginals[r], past[0]);
    for (int h = 1; h < cfg.history_len; ++h) {
      max_kl = std::max(max_kl, kl_divergence(past[static_cast<std::size_t>(h - 1)], past[static_cast<std::size_t>(h)]));
    }
    if (max_kl < cfg.kl_threshold) out.push_back(masked[r]);
  }
  if (out.empty()) return select_top1_k(marginals, masked, 1);
  return out;
}

/// Records this step's marginals as the newest history entry.
inline void push_history(MarginalHistory& history, const MaskState& state, const ForwardPass& pass,
                         std::size_t history_len) {
  for (auto it = history.begin(); it != history.end();) {
    it = state.is_masked(it->first) ? std::next(it) : history.erase(it);
  }
  for (std::size_t r = 0; r < state.masked().size(); ++r) {
    auto& q = history[state.masked()[r]];
    q.push_front(pass.marginals[r]);
    while (q.size() > history_len) q.pop_back();
  }
}

struct StepSelection {
  std::vector<Position> positions;         ///< in pick order for demask, ascending otherwise
  std::optional<SelectionResult> greedy;
};

/// Runs one selector on a forward pass. The dependency matrix and confidence
/// use the untransformed marginals.
inline StepSelection select_step(const SelectorSpec& spec, const TabularModel& model, const MaskState& state,
                                 const ForwardPass& pass, const MarginalHistory& history) {
  const auto& masked = state.masked();
  if (masked.empty()) throw EmptyMaskSet("select_step: no masked positions");
  std::span<const Distribution> marginals(pass.marginals);
  StepSelection out;
  if (const auto* d = std::get_if<DemaskSelector>(&spec)) {
    DependencyMatrix dep;
    if (d->source == DependencySource::exact) {
      dep = dependency_matrix_exact(model, state, pass);
    } else {
      if (!d->predictor) throw InvalidArgument("demask: predicted dependency source requires a predictor");
      dep = d->predictor->predict(state, pass);
    }
    std::vector<double> top1;
    for (const auto& m : pass.marginals) top1.push_back(top1_probability(m));
    out.greedy = greedy_subset_select(dep, masked, top1, d->selection);
    out.positions = out.greedy->chosen;
  } else if (const auto* e = std::get_if<EntropySelector>(&spec)) {
    out.positions = select_entropy_k(marginals, masked, e->k);
  } else if (const auto* t = std::get_if<Top1Selector>(&spec)) {
    out.positions = select_top1_k(marginals, masked, t->k);
  } else if (const auto* o = std::get_if<TokenOrderSelector>(&spec)) {
    out.positions = select_token_order_k(masked, o->k);
  } else if (const auto* k = std::get_if<KlassSelector>(&spec)) {
    out.positions = select_klass(history, marginals, masked, k->cfg);
  }
  if (out.positions.empty()) throw NoProgress("selector returned an empty set");
  return out;
}

inline std::size_t history_length(const SelectorSpec& spec) {
  if (const auto* k = std::get_if<KlassSelector>(&spec)) return static_cast<std::size_t>(k->cfg.history_len);
  return 0;
}

/// Reveals every masked position to the right of the left-most EOS as EOS.
/// Returns the filled positions.
inline std::vector<Position> eos_fill(MaskState& state, Token eos_id) {
  std::optional<Position> first_eos;
  for (const auto& [pos, tok] : state.revealed()) {
    if (tok == eos_id) {
      first_eos = pos;
      break;
    }
  }
  std::vector<Position> filled;
  if (!first_eos) return filled;
  for (Position p : state.masked()) {
    if (p > *first_eos) filled.push_back(p);
  }
  for (Position p : filled) state.reveal(p, eos_id);
  return filled;
}

inline MaskState eos_filled(MaskState state, Token eos_id) {
  eos_fill(state, eos_id);
  return state;
}

struct DecodeStep {
  int index = 0;
  std::vector<Position> masked_before;
  std::vector<Position> selected;          ///< pick order
  std::vector<double> per_pick_delta;      ///< demask only
  std::optional<double> accumulated;       ///< demask only
  std::vector<Token> sampled;              ///< aligned with `selected`
  std::vector<Position> eos_filled;
};

struct DecodeTrace {
  std::vector<DecodeStep> steps;
  int step_count = 0;
  std::vector<Position> eos_filled;
  /// Set when a co-sampled assignment left the context with zero model mass
  /// and `stop_off_support` was requested; remaining positions hold -1.
  bool off_support = false;
};

struct DecodeOptions {
  bool eos_fill = false;
  /// Stop instead of throwing ZeroProbabilityContext when parallel sampling
  /// produced an assignment outside the model's support.
  bool stop_off_support = false;
};

struct DecodeResult {
  std::vector<Token> sequence;
  DecodeTrace trace;
};

/// Iterative parallel unmasking: each step runs one forward pass, asks the
/// selector for positions, samples them independently from their transformed
/// marginals, and reveals them.
inline DecodeResult decode(const TabularModel& model, MaskState state, const SelectorSpec& selector,
                           const SamplerConfig& sampler, const DecodeOptions& opts, Rng& rng) {
  sampler.validate();
  if (state.length() != model.length()) throw DimensionMismatch("decode: state length differs from model length");
  DecodeResult out;
  MarginalHistory history;
  const std::size_t hist_len = history_length(selector);
  if (opts.eos_fill) {
    auto filled = eos_fill(state, model.vocab().eos_id);
    out.trace.eos_filled.insert(out.trace.eos_filled.end(), filled.begin(), filled.end());
  }
  while (!state.complete()) {
    ForwardPass pass;
    try {
      pass = forward_pass(model, state);
    } catch (const ZeroProbabilityContext&) {
      if (!opts.stop_off_support) throw;
      out.trace.off_support = true;
      break;
    }
    ++out.trace.step_count;
    const StepSelection sel = select_step(selector, model, state, pass, history);

    DecodeStep step;
    step.index = out.trace.step_count - 1;
    step.masked_before = state.masked();
    step.selected = sel.positions;
    if (sel.greedy) {
      step.per_pick_delta = sel.greedy->per_pick_delta;
      step.accumulated = sel.greedy->accumulated;
    }
    for (Position p : sel.positions) {
      step.sampled.push_back(transform_sample(pass.marginals[state.rank(p)], sampler, rng));
    }
    if (hist_len > 0) push_history(history, state, pass, hist_len);
    for (std::size_t k = 0; k < sel.positions.size(); ++k) state.reveal(sel.positions[k], step.sampled[k]);
    if (opts.eos_fill) {
      step.eos_filled = eos_fill(state, model.vocab().eos_id);
      out.trace.eos_filled.insert(out.trace.eos_filled.end(), step.eos_filled.begin(), step.eos_filled.end());
    }
    out.trace.steps.push_back(std::move(step));
  }
  out.sequence = state.sequence();
  return out;
}

/// Decodes from the fully masked state.
inline DecodeResult decode(const TabularModel& model, const SelectorSpec& selector, const SamplerConfig& sampler,
                           const DecodeOptions& opts, Rng& rng) {
  return decode(model, MaskState::all_masked(model.length()), selector, sampler, opts, rng);
}

inline nlohmann::json step_to_json(const DecodeStep& s) {
  nlohmann::json j{{"step", s.index}, {"selected", s.selected}, {"sampled", s.sampled},
                   {"per_pick_delta", s.per_pick_delta}, {"eos_filled", s.eos_filled},
                   {"masked_before", s.masked_before}};
  if (s.accumulated) j["accumulated"] = *s.accumulated;
  return j;
}

/// One JSON object per line: step index, selected positions, per-pick
/// deltas and sampled tokens.
inline void write_trace(const DecodeTrace& trace, std::ostream& out) {
  for (const auto& s : trace.steps) out << step_to_json(s).dump() << '\n';
}

}  // namespace demask
