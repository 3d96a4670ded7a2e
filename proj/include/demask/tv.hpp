#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "demask/error.hpp"
#include "demask/model.hpp"

namespace demask {

/// Half the L1 distance between two distributions on the same support.
inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionMismatch("tv_distance: supports differ in size");
  double sum = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) sum += std::abs(p[k] - q[k]);
  return std::clamp(0.5 * sum, 0.0, 1.0);
}

enum class DependencySource { exact, predicted };

/// Pairwise dependency values indexed by rank in the masked ordering:
/// value(i, j) is the expected TV change of position order()[i] when
/// order()[j] is revealed. Not necessarily symmetric; diagonal is zero.
class DependencyMatrix {
 public:
  DependencyMatrix() = default;

  DependencyMatrix(std::vector<Position> order, DependencySource source)
      : order_(std::move(order)), values_(order_.size() * order_.size(), 0.0), source_(source) {}

  std::size_t size() const { return order_.size(); }
  const std::vector<Position>& order() const { return order_; }
  DependencySource source() const { return source_; }

  double operator()(std::size_t i, std::size_t j) const { return values_[i * order_.size() + j]; }

  /// Sets an off-diagonal entry; clamps into [0, 1].
  void set(std::size_t i, std::size_t j, double value) {
    if (i == j) return;
    values_[i * order_.size() + j] = std::clamp(value, 0.0, 1.0);
  }

  std::span<const double> row_major() const { return values_; }

 private:
  std::vector<Position> order_;
  std::vector<double> values_;
  DependencySource source_ = DependencySource::exact;
};

/// D_{i,j}(y): TV between P(Y_i | ctx) and P(Y_i | ctx, Y_j = y).
inline double dependency_sample(const TabularModel& model, const MaskState& state, Position i, Position j, Token y) {
  if (i == j) throw InvalidArgument("dependency_sample requires distinct positions");
  if (!state.is_masked(i) || !state.is_masked(j)) throw InvalidArgument("dependency_sample positions must be masked");
  const Distribution base = conditional_marginal(model, state, i);
  const Distribution cond = conditional_marginal(model, state.with_revealed(j, y), i);
  return tv_distance(base, cond);
}

/// Column D_{., j}(y) for every masked position (entry at rank(j) is 0),
/// computed with one conditioned forward pass.
inline std::vector<double> dependency_column(const TabularModel& model, const MaskState& state,
                                             const ForwardPass& base, Position j, Token y) {
  const std::size_t rj = state.rank(j);
  const MaskState revealed = state.with_revealed(j, y);
  const ForwardPass cond = forward_pass(model, revealed);
  std::vector<double> column(state.masked().size(), 0.0);
  for (std::size_t ri = 0, rc = 0; ri < column.size(); ++ri) {
    if (ri == rj) continue;
    column[ri] = tv_distance(base.marginals[ri], cond.marginals[rc]);
    ++rc;
  }
  return column;
}

/// Entries of an exact matrix below this are enumeration roundoff and read as 0.
inline constexpr double kDependencyRoundoff = 1e-12;

/// Exact expected dependencies: D_{i,j} = sum_y P(Y_j = y | ctx) D_{i,j}(y).
inline DependencyMatrix dependency_matrix_exact(const TabularModel& model, const MaskState& state,
                                                const ForwardPass& base) {
  const auto& masked = state.masked();
  DependencyMatrix dep(masked, DependencySource::exact);
  const std::size_t m = masked.size();
  std::vector<double> acc(m * m, 0.0);
  for (std::size_t rj = 0; rj < m; ++rj) {
    const Distribution& pj = base.marginals[rj];
    for (std::size_t y = 0; y < pj.size(); ++y) {
      if (pj[y] == 0.0) continue;
      const auto column = dependency_column(model, state, base, masked[rj], static_cast<Token>(y));
      for (std::size_t ri = 0; ri < m; ++ri) acc[ri * m + rj] += pj[y] * column[ri];
    }
  }
  for (std::size_t ri = 0; ri < m; ++ri) {
    for (std::size_t rj = 0; rj < m; ++rj) {
      const double v = acc[ri * m + rj];
      dep.set(ri, rj, v < kDependencyRoundoff ? 0.0 : v);
    }
  }
  return dep;
}

inline DependencyMatrix dependency_matrix_exact(const TabularModel& model, const MaskState& state) {
  return dependency_matrix_exact(model, state, forward_pass(model, state));
}

/// Both sides of the sub-additivity comparison for one target.
struct SlackSample {
  double lhs = 0.0;  ///< TV against the joint reveal of the subset
  double rhs = 0.0;  ///< sum of single-reveal TVs
  double slack() const { return rhs - lhs; }
};

inline SlackSample subadditivity_slack(const TabularModel& model, const MaskState& state, Position target,
                                       std::span<const Position> subset, std::span<const Token> values) {
  if (subset.size() != values.size()) throw DimensionMismatch("subset and realization differ in length");
  if (!state.is_masked(target)) throw InvalidArgument("target must be masked");
  for (Position s : subset) {
    if (s == target) throw InvalidArgument("target must not belong to the subset");
  }
  const Distribution base = conditional_marginal(model, state, target);
  SlackSample out;
  MaskState joint = state;
  for (std::size_t k = 0; k < subset.size(); ++k) {
    joint.reveal(subset[k], values[k]);
    out.rhs += tv_distance(base, conditional_marginal(model, state.with_revealed(subset[k], values[k]), target));
  }
  out.lhs = tv_distance(base, conditional_marginal(model, joint, target));
  return out;
}

}  // namespace demask
