#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "demask/error.hpp"
#include "demask/rng.hpp"

namespace demask {

using Token = int;
using Position = int;
using Distribution = std::vector<double>;

/// Temperature and nucleus settings applied when committing a token.
/// Defaults follow the evaluation setup used for every selector.
struct SamplerConfig {
  double temperature = 0.1;
  double top_p = 0.9;

  static constexpr SamplerConfig identity() { return SamplerConfig{1.0, 1.0}; }

  void validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw InvalidArgument("temperature must be a positive real");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidArgument("top_p must lie in (0, 1]");
  }

  bool is_identity() const { return temperature == 1.0 && top_p == 1.0; }
};

/// Applies temperature to log-probabilities, renormalizes, then keeps the
/// smallest descending-probability prefix whose mass reaches top_p.
/// Ties in probability keep the lower token index first.
inline Distribution transform_distribution(const Distribution& dist, const SamplerConfig& cfg) {
  cfg.validate();
  const std::size_t n = dist.size();
  Distribution out(n, 0.0);
  if (cfg.temperature == 1.0) {
    out = dist;
  } else {
    double max_log = -std::numeric_limits<double>::infinity();
    for (double p : dist) {
      if (p > 0.0) max_log = std::max(max_log, std::log(p));
    }
    for (std::size_t k = 0; k < n; ++k) {
      if (dist[k] > 0.0) out[k] = std::exp((std::log(dist[k]) - max_log) / cfg.temperature);
    }
  }
  double total = std::accumulate(out.begin(), out.end(), 0.0);
  if (!(total > 0.0)) throw InvalidArgument("cannot sample from an all-zero distribution");
  for (double& p : out) p /= total;

  if (cfg.top_p < 1.0) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return out[a] > out[b]; });
    // Absorbs rounding such as 0.6 + 0.3 < 0.9.
    constexpr double kSlack = 1e-12;
    double cumulative = 0.0;
    std::size_t keep = 0;
    while (keep < n) {
      cumulative += out[order[keep]];
      ++keep;
      if (cumulative >= cfg.top_p - kSlack) break;
    }
    Distribution trimmed(n, 0.0);
    for (std::size_t r = 0; r < keep; ++r) trimmed[order[r]] = out[order[r]];
    total = std::accumulate(trimmed.begin(), trimmed.end(), 0.0);
    for (double& p : trimmed) p /= total;
    out = std::move(trimmed);
  }
  return out;
}

inline Token transform_sample(const Distribution& dist, const SamplerConfig& cfg, Rng& rng) {
  if (cfg.is_identity()) return sample_categorical(dist, rng);
  return sample_categorical(transform_distribution(dist, cfg), rng);
}

inline double top1_probability(const Distribution& dist) {
  return dist.empty() ? 0.0 : *std::max_element(dist.begin(), dist.end());
}

inline double entropy(const Distribution& dist) {
  double h = 0.0;
  for (double p : dist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace demask
