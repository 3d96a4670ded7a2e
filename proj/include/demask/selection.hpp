#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "demask/error.hpp"
#include "demask/tv.hpp"

namespace demask {

struct SelectionConfig {
  double tau = 0.04;    ///< cumulative dependency budget
  double gamma = 0.9;   ///< top-1 confidence threshold for candidates

  void validate() const {
    if (!(tau >= 0.0)) throw InvalidArgument("tau must be >= 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidArgument("gamma must lie in [0, 1]");
  }
};

struct SelectionResult {
  std::vector<Position> chosen;       ///< in pick order; chosen[0] = min(M)
  double accumulated = 0.0;
  std::vector<double> per_pick_delta; ///< cost paid by each pick (0 for the first)
};

/// Greedy dependency-bounded subset selection.
///
/// Starts from the left-most masked position, then repeatedly adds the
/// confident candidate (top-1 > gamma) with the smallest summed dependency on
/// the positions already chosen, stopping when no candidate remains or the
/// next pick would push the accumulated dependency past tau. `top1` is
/// indexed by rank in `masked`. Ties go to the lowest position.
inline SelectionResult greedy_subset_select(const DependencyMatrix& dep, std::span<const Position> masked,
                                            std::span<const double> top1, const SelectionConfig& cfg) {
  cfg.validate();
  if (masked.empty()) throw EmptyMaskSet("greedy_subset_select: no masked positions");
  if (dep.size() != masked.size() || top1.size() != masked.size()) {
    throw DimensionMismatch("greedy_subset_select: dependency matrix, masked set and top-1 sizes differ");
  }
  for (std::size_t r = 0; r < masked.size(); ++r) {
    if (dep.order()[r] != masked[r]) throw DimensionMismatch("dependency matrix order differs from masked set");
  }

  const std::size_t m = masked.size();
  SelectionResult result;
  std::vector<bool> in_set(m, false);
  // cost[c] = sum over chosen s of dep(c, s), maintained incrementally.
  std::vector<double> cost(m, 0.0);

  auto add = [&](std::size_t r, double delta) {
    in_set[r] = true;
    result.chosen.push_back(masked[r]);
    result.per_pick_delta.push_back(delta);
    result.accumulated += delta;
    for (std::size_t c = 0; c < m; ++c) {
      if (!in_set[c]) cost[c] += dep(c, r);
    }
  };

  // masked is ascending, so rank 0 is the left-most position.
  add(0, 0.0);
  while (true) {
    std::size_t best = m;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < m; ++c) {
      if (in_set[c] || !(top1[c] > cfg.gamma)) continue;
      if (best == m || cost[c] < best_cost) {
        best = c;
        best_cost = cost[c];
      }
    }
    if (best == m) break;
    if (result.accumulated + best_cost > cfg.tau) break;
    add(best, best_cost);
  }
  return result;
}

}  // namespace demask
