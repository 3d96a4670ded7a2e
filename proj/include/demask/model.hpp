#pragma once

// Tabular sequence models with exactly computable conditionals. These stand
// in for the diffusion backbone: one "forward pass" returns the exact
// conditional marginal of every masked position given the revealed ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "demask/error.hpp"
#include "demask/kv_document.hpp"
#include "demask/rng.hpp"
#include "demask/sampling.hpp"

namespace demask {

inline constexpr std::uint64_t kDefaultEnumerationCap = 10'000'000;

struct VocabSpec {
  int size = 2;
  Token eos_id = 1;

  void validate() const {
    if (size < 2) throw InvalidArgument("vocab size must be at least 2");
    if (eos_id < 0 || eos_id >= size) throw InvalidArgument("eos_id must lie in [0, size)");
  }
};

/// Saturating size^count; returns cap + 1 when it would exceed `cap`.
inline std::uint64_t bounded_power(std::uint64_t base, std::size_t count, std::uint64_t cap) {
  std::uint64_t out = 1;
  for (std::size_t k = 0; k < count; ++k) {
    if (out > cap / base) return cap + 1;
    out *= base;
  }
  return out;
}

/// Calls fn(assignment) for every tuple in {0..vocab-1}^count in lexicographic
/// order (first element most significant).
template <typename Fn>
void for_each_assignment(int vocab, std::size_t count, Fn&& fn) {
  std::vector<Token> values(count, 0);
  while (true) {
    fn(std::span<const Token>(values));
    std::size_t k = count;
    while (k > 0) {
      --k;
      if (++values[k] < vocab) break;
      values[k] = 0;
      if (k == 0) return;
    }
    if (count == 0) return;
  }
}

/// Lexicographic index of a tuple.
inline std::size_t tuple_index(std::span<const Token> tuple, int vocab) {
  std::size_t idx = 0;
  for (Token t : tuple) idx = idx * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(t);
  return idx;
}

inline std::vector<Token> tuple_from_index(std::size_t idx, int vocab, std::size_t count) {
  std::vector<Token> out(count, 0);
  for (std::size_t k = count; k > 0; --k) {
    out[k - 1] = static_cast<Token>(idx % static_cast<std::size_t>(vocab));
    idx /= static_cast<std::size_t>(vocab);
  }
  return out;
}

/// Decoding context: revealed positions with their values and the ascending
/// list of masked positions. The two partition [0, N).
class MaskState {
 public:
  MaskState() = default;

  /// Fully masked state of length n.
  static MaskState all_masked(int length) {
    MaskState s;
    s.length_ = length;
    s.masked_.resize(static_cast<std::size_t>(length));
    std::iota(s.masked_.begin(), s.masked_.end(), 0);
    return s;
  }

  static MaskState fully_revealed(std::span<const Token> sequence) {
    MaskState s;
    s.length_ = static_cast<int>(sequence.size());
    for (std::size_t k = 0; k < sequence.size(); ++k) s.revealed_[static_cast<Position>(k)] = sequence[k];
    return s;
  }

  /// Builds a state from revealed values; every other position is masked.
  static MaskState from_revealed(int length, const std::map<Position, Token>& revealed) {
    MaskState s;
    s.length_ = length;
    for (const auto& [pos, tok] : revealed) {
      if (pos < 0 || pos >= length) throw InvalidArgument("revealed position out of range");
      s.revealed_[pos] = tok;
    }
    for (Position p = 0; p < length; ++p) {
      if (s.revealed_.count(p) == 0) s.masked_.push_back(p);
    }
    return s;
  }

  int length() const { return length_; }
  const std::vector<Position>& masked() const { return masked_; }
  const std::map<Position, Token>& revealed() const { return revealed_; }
  bool is_masked(Position p) const { return std::binary_search(masked_.begin(), masked_.end(), p); }
  bool complete() const { return masked_.empty(); }

  /// Rank of a masked position in the ascending ordering (the index into D).
  std::size_t rank(Position p) const {
    const auto it = std::lower_bound(masked_.begin(), masked_.end(), p);
    if (it == masked_.end() || *it != p) throw InvalidArgument("position is not masked");
    return static_cast<std::size_t>(it - masked_.begin());
  }

  void reveal(Position p, Token value) {
    const auto it = std::lower_bound(masked_.begin(), masked_.end(), p);
    if (it == masked_.end() || *it != p) throw InvalidArgument("cannot reveal a position that is not masked");
    masked_.erase(it);
    revealed_[p] = value;
  }

  MaskState with_revealed(Position p, Token value) const {
    MaskState s = *this;
    s.reveal(p, value);
    return s;
  }

  /// Revealed values as a full-length sequence; masked positions hold -1.
  std::vector<Token> sequence() const {
    std::vector<Token> out(static_cast<std::size_t>(length_), -1);
    for (const auto& [pos, tok] : revealed_) out[static_cast<std::size_t>(pos)] = tok;
    return out;
  }

  friend bool operator==(const MaskState&, const MaskState&) = default;

 private:
  int length_ = 0;
  std::map<Position, Token> revealed_;
  std::vector<Position> masked_;
};

enum class TaskKind { independent, markov, copy, arithmetic_mod, dense_random, custom };

inline std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::independent: return "independent";
    case TaskKind::markov: return "markov";
    case TaskKind::copy: return "copy";
    case TaskKind::arithmetic_mod: return "arithmetic-mod";
    case TaskKind::dense_random: return "dense-random";
    case TaskKind::custom: return "custom";
  }
  return "custom";
}

inline TaskKind parse_task_kind(const std::string& text) {
  if (text == "independent") return TaskKind::independent;
  if (text == "markov") return TaskKind::markov;
  if (text == "copy") return TaskKind::copy;
  if (text == "arithmetic-mod") return TaskKind::arithmetic_mod;
  if (text == "dense-random") return TaskKind::dense_random;
  throw ConfigError("unknown task kind '" + text + "'");
}

/// Everything needed to regenerate a model bit-exactly.
struct ModelDescription {
  TaskKind kind = TaskKind::independent;
  VocabSpec vocab;
  int length = 3;
  std::uint64_t seed = 0;
  int prompt_id = 0;
  /// Dirichlet concentration for randomly drawn tables and factors.
  double concentration = 1.0;
  std::uint64_t enumeration_cap = kDefaultEnumerationCap;

  KeyValueDocument to_document() const {
    KeyValueDocument doc;
    doc.set("kind", to_string(kind));
    doc.set("vocab_size", std::to_string(vocab.size));
    doc.set("eos_id", std::to_string(vocab.eos_id));
    doc.set("length", std::to_string(length));
    doc.set("seed", std::to_string(seed));
    doc.set("prompt_id", std::to_string(prompt_id));
    doc.set("concentration", format_double(concentration));
    return doc;
  }

  static ModelDescription from_document(const KeyValueDocument& doc) {
    doc.require_known({"kind", "vocab_size", "eos_id", "length", "seed", "prompt_id", "concentration",
                       "enumeration_cap"});
    ModelDescription d;
    d.kind = parse_task_kind(doc.get_string("kind"));
    d.vocab.size = static_cast<int>(doc.get_int("vocab_size"));
    d.vocab.eos_id = static_cast<Token>(doc.get_int("eos_id", d.vocab.size - 1));
    d.length = static_cast<int>(doc.get_int("length"));
    d.seed = doc.get_uint("seed", 0);
    d.prompt_id = static_cast<int>(doc.get_int("prompt_id", 0));
    d.concentration = doc.get_double("concentration", 1.0);
    d.enumeration_cap = doc.get_uint("enumeration_cap", kDefaultEnumerationCap);
    return d;
  }
};

/// Exact joint distribution over length-N sequences. Immutable once built.
///
/// Structured kinds (independent, markov, copy, arithmetic-mod) evaluate any
/// sequence's mass from compact parameters. Dense tables are materialized in
/// lexicographic order and require size^N <= enumeration cap.
///
/// arithmetic-mod groups positions into consecutive triples (a, b, c) with a, b
/// uniform and c = (a + b) mod V; leftover positions are uniform. In markov
/// models the EOS token is absorbing, which gives the family early-EOS mass.
class TabularModel {
 public:
  static TabularModel make(const ModelDescription& desc) {
    desc.vocab.validate();
    if (desc.length < 1) throw InvalidArgument("length must be positive");
    if (!(desc.concentration > 0.0)) throw InvalidArgument("concentration must be positive");
    TabularModel m;
    m.desc_ = desc;
    const int v = desc.vocab.size;
    const int n = desc.length;
    Rng rng(derive_seed(desc.seed, static_cast<std::uint64_t>(desc.prompt_id)));
    switch (desc.kind) {
      case TaskKind::independent:
        for (int p = 0; p < n; ++p) m.factors_.push_back(dirichlet(v, desc.concentration, rng));
        break;
      case TaskKind::markov: {
        m.factors_.push_back(dirichlet(v, desc.concentration, rng));
        for (int a = 0; a < v; ++a) {
          if (a == desc.vocab.eos_id) {
            Distribution row(static_cast<std::size_t>(v), 0.0);
            row[static_cast<std::size_t>(a)] = 1.0;
            m.transition_.push_back(std::move(row));
          } else {
            m.transition_.push_back(dirichlet(v, desc.concentration, rng));
          }
        }
        break;
      }
      case TaskKind::copy:
      case TaskKind::arithmetic_mod:
        break;
      case TaskKind::dense_random: {
        const auto count = bounded_power(static_cast<std::uint64_t>(v), static_cast<std::size_t>(n),
                                         desc.enumeration_cap);
        if (count > desc.enumeration_cap) {
          throw EnumerationCapExceeded("dense-random model with " + std::to_string(v) + "^" +
                                       std::to_string(n) + " entries exceeds the enumeration cap");
        }
        m.dense_ = dirichlet(static_cast<int>(count), desc.concentration, rng);
        break;
      }
      case TaskKind::custom:
        throw InvalidArgument("custom models are built with from_dense");
    }
    return m;
  }

  static TabularModel make(TaskKind kind, VocabSpec vocab, int length, std::uint64_t seed,
                           double concentration = 1.0) {
    ModelDescription d;
    d.kind = kind;
    d.vocab = vocab;
    d.length = length;
    d.seed = seed;
    d.concentration = concentration;
    return make(d);
  }

  /// Wraps an explicit mass table (lexicographic order). Normalizes it.
  static TabularModel from_dense(VocabSpec vocab, int length, std::vector<double> mass, int prompt_id = 0,
                                 std::uint64_t cap = kDefaultEnumerationCap) {
    vocab.validate();
    const auto count = bounded_power(static_cast<std::uint64_t>(vocab.size), static_cast<std::size_t>(length), cap);
    if (count > cap) throw EnumerationCapExceeded("dense table exceeds the enumeration cap");
    if (mass.size() != count) throw DimensionMismatch("dense table has the wrong number of entries");
    double total = 0.0;
    for (double w : mass) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("mass entries must be finite and nonnegative");
      total += w;
    }
    if (!(total > 0.0)) throw InvalidArgument("mass table sums to zero");
    for (double& w : mass) w /= total;
    TabularModel m;
    m.desc_.kind = TaskKind::custom;
    m.desc_.vocab = vocab;
    m.desc_.length = length;
    m.desc_.prompt_id = prompt_id;
    m.desc_.enumeration_cap = cap;
    m.dense_ = std::move(mass);
    return m;
  }

  const ModelDescription& description() const { return desc_; }
  const VocabSpec& vocab() const { return desc_.vocab; }
  int vocab_size() const { return desc_.vocab.size; }
  int length() const { return desc_.length; }
  int prompt_id() const { return desc_.prompt_id; }
  TaskKind kind() const { return desc_.kind; }
  std::uint64_t enumeration_cap() const { return desc_.enumeration_cap; }
  bool is_dense() const { return !dense_.empty(); }

  /// Joint mass of a complete sequence.
  double mass(std::span<const Token> seq) const {
    const int v = desc_.vocab.size;
    if (!dense_.empty()) return dense_[tuple_index(seq, v)];
    switch (desc_.kind) {
      case TaskKind::independent: {
        double p = 1.0;
        for (std::size_t k = 0; k < seq.size(); ++k) p *= factors_[k][static_cast<std::size_t>(seq[k])];
        return p;
      }
      case TaskKind::markov: {
        double p = factors_[0][static_cast<std::size_t>(seq[0])];
        for (std::size_t k = 1; k < seq.size() && p > 0.0; ++k) {
          p *= transition_[static_cast<std::size_t>(seq[k - 1])][static_cast<std::size_t>(seq[k])];
        }
        return p;
      }
      case TaskKind::copy: {
        for (std::size_t k = 1; k < seq.size(); ++k) {
          if (seq[k] != seq[0]) return 0.0;
        }
        return 1.0 / v;
      }
      case TaskKind::arithmetic_mod: {
        const std::size_t triples = seq.size() / 3;
        for (std::size_t t = 0; t < triples; ++t) {
          if ((seq[3 * t] + seq[3 * t + 1]) % v != seq[3 * t + 2]) return 0.0;
        }
        const double free_positions = static_cast<double>(seq.size() - triples);
        return std::pow(static_cast<double>(v), -free_positions);
      }
      case TaskKind::dense_random:
      case TaskKind::custom:
        break;
    }
    return 0.0;
  }

  /// Dense mass table over all V^N sequences.
  std::vector<double> materialize() const {
    const auto count = bounded_power(static_cast<std::uint64_t>(vocab_size()),
                                     static_cast<std::size_t>(length()), enumeration_cap());
    if (count > enumeration_cap()) throw EnumerationCapExceeded("model too large to materialize");
    if (!dense_.empty()) return dense_;
    std::vector<double> out;
    out.reserve(count);
    for_each_assignment(vocab_size(), static_cast<std::size_t>(length()),
                        [&](std::span<const Token> seq) { out.push_back(mass(seq)); });
    return out;
  }

  /// Per-position factors of an independent model.
  const std::vector<Distribution>& factors() const { return factors_; }

 private:
  static Distribution dirichlet(int n, double concentration, Rng& rng) {
    Distribution out(static_cast<std::size_t>(n));
    double total = 0.0;
    for (double& w : out) {
      w = sample_gamma(concentration, rng);
      total += w;
    }
    if (!(total > 0.0)) {
      std::fill(out.begin(), out.end(), 1.0 / n);
      return out;
    }
    for (double& w : out) w /= total;
    return out;
  }

  ModelDescription desc_;
  std::vector<Distribution> factors_;
  std::vector<Distribution> transition_;
  std::vector<double> dense_;
};

inline TabularModel make_task_model(TaskKind kind, VocabSpec vocab, int length, std::uint64_t seed) {
  return TabularModel::make(kind, vocab, length, seed);
}

inline TabularModel load_model(const std::string& path) {
  return TabularModel::make(ModelDescription::from_document(KeyValueDocument::load(path)));
}

inline void save_model_description(const ModelDescription& desc, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << desc.to_document().to_string();
}

/// Result of one oracle forward pass: the exact conditional marginal of every
/// masked position (in ascending position order) and the context mass.
struct ForwardPass {
  std::vector<Distribution> marginals;
  double context_mass = 0.0;
};

namespace detail {

inline void check_enumerable(const TabularModel& model, std::size_t free_count) {
  const auto count = bounded_power(static_cast<std::uint64_t>(model.vocab_size()), free_count,
                                   model.enumeration_cap());
  if (count > model.enumeration_cap()) {
    throw EnumerationCapExceeded("enumerating " + std::to_string(model.vocab_size()) + "^" +
                                 std::to_string(free_count) + " assignments exceeds the cap");
  }
}

/// Visits fn(sequence, masked_values, mass) for every completion of the state.
template <typename Fn>
void for_each_completion(const TabularModel& model, const MaskState& state, Fn&& fn) {
  check_enumerable(model, state.masked().size());
  std::vector<Token> seq = state.sequence();
  const auto& masked = state.masked();
  for_each_assignment(model.vocab_size(), masked.size(), [&](std::span<const Token> values) {
    for (std::size_t k = 0; k < masked.size(); ++k) seq[static_cast<std::size_t>(masked[k])] = values[k];
    fn(std::span<const Token>(seq), values, model.mass(seq));
  });
}

[[noreturn]] inline void throw_zero_context() {
  throw ZeroProbabilityContext("the revealed assignment has zero probability under the model");
}

}  // namespace detail

/// Mass of the revealed assignment, summed over all completions.
inline double context_mass(const TabularModel& model, const MaskState& state) {
  double total = 0.0;
  detail::for_each_completion(model, state,
                              [&](std::span<const Token>, std::span<const Token>, double w) { total += w; });
  return total;
}

inline ForwardPass forward_pass(const TabularModel& model, const MaskState& state) {
  const int v = model.vocab_size();
  const auto& masked = state.masked();
  ForwardPass out;
  out.marginals.assign(masked.size(), Distribution(static_cast<std::size_t>(v), 0.0));
  detail::for_each_completion(model, state, [&](std::span<const Token>, std::span<const Token> values, double w) {
    if (w == 0.0) return;
    out.context_mass += w;
    for (std::size_t k = 0; k < values.size(); ++k) out.marginals[k][static_cast<std::size_t>(values[k])] += w;
  });
  if (!(out.context_mass > 0.0)) detail::throw_zero_context();
  for (auto& dist : out.marginals) {
    for (double& p : dist) p /= out.context_mass;
  }
  return out;
}

/// P(Y_target | revealed).
inline Distribution conditional_marginal(const TabularModel& model, const MaskState& state, Position target) {
  const std::size_t r = state.rank(target);
  const int v = model.vocab_size();
  Distribution dist(static_cast<std::size_t>(v), 0.0);
  double total = 0.0;
  detail::for_each_completion(model, state, [&](std::span<const Token>, std::span<const Token> values, double w) {
    if (w == 0.0) return;
    total += w;
    dist[static_cast<std::size_t>(values[r])] += w;
  });
  if (!(total > 0.0)) detail::throw_zero_context();
  for (double& p : dist) p /= total;
  return dist;
}

/// Exact joint of the subset (in the given order) given the revealed context,
/// over V^|S| tuples in lexicographic order.
inline Distribution joint_conditional(const TabularModel& model, const MaskState& state,
                                      std::span<const Position> subset) {
  const int v = model.vocab_size();
  detail::check_enumerable(model, subset.size());
  std::vector<std::size_t> ranks;
  ranks.reserve(subset.size());
  for (Position p : subset) ranks.push_back(state.rank(p));
  Distribution dist(bounded_power(static_cast<std::uint64_t>(v), subset.size(), model.enumeration_cap()), 0.0);
  double total = 0.0;
  detail::for_each_completion(model, state, [&](std::span<const Token>, std::span<const Token> values, double w) {
    if (w == 0.0) return;
    total += w;
    std::size_t idx = 0;
    for (std::size_t r : ranks) idx = idx * static_cast<std::size_t>(v) + static_cast<std::size_t>(values[r]);
    dist[idx] += w;
  });
  if (!(total > 0.0)) detail::throw_zero_context();
  for (double& p : dist) p /= total;
  return dist;
}

/// Distribution over complete sequences (V^N, lexicographic) given the context.
inline Distribution context_joint(const TabularModel& model, const MaskState& state) {
  detail::check_enumerable(model, static_cast<std::size_t>(model.length()));
  Distribution dist(bounded_power(static_cast<std::uint64_t>(model.vocab_size()),
                                  static_cast<std::size_t>(model.length()), model.enumeration_cap()),
                    0.0);
  double total = 0.0;
  detail::for_each_completion(model, state, [&](std::span<const Token> seq, std::span<const Token>, double w) {
    if (w == 0.0) return;
    total += w;
    dist[tuple_index(seq, model.vocab_size())] += w;
  });
  if (!(total > 0.0)) detail::throw_zero_context();
  for (double& p : dist) p /= total;
  return dist;
}

/// Draws a complete sequence from the model joint, position by position.
inline std::vector<Token> sample_joint(const TabularModel& model, Rng& rng) {
  MaskState state = MaskState::all_masked(model.length());
  for (Position p = 0; p < model.length(); ++p) {
    state.reveal(p, sample_categorical(conditional_marginal(model, state, p), rng));
  }
  return state.sequence();
}

/// Picks the next position to fill from the current state.
using OrderPolicy = std::function<Position(const MaskState&)>;

inline OrderPolicy left_to_right_order() {
  return [](const MaskState& s) { return s.masked().front(); };
}

inline OrderPolicy right_to_left_order() {
  return [](const MaskState& s) { return s.masked().back(); };
}

/// Reference sequential sampler: one position per step from its exact
/// conditional, transformed by the sampler settings.
inline std::vector<Token> sample_sequential(const TabularModel& model, MaskState state, const OrderPolicy& order,
                                            const SamplerConfig& sampler, Rng& rng) {
  while (!state.complete()) {
    const Position p = order(state);
    state.reveal(p, transform_sample(conditional_marginal(model, state, p), sampler, rng));
  }
  return state.sequence();
}

}  // namespace demask
