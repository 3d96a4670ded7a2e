#pragma once

// Learned pairwise dependency predictor: a bilinear sigmoid scorer over
// per-position features, trained by mean squared error on cached
// single-realization TV targets.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "demask/error.hpp"
#include "demask/kv_document.hpp"
#include "demask/model.hpp"
#include "demask/rng.hpp"
#include "demask/tv.hpp"

namespace demask {

/// Feature layout for each masked position: [marginal | position one-hot | revealed bitmap].
struct FeatureConfig {
  int vocab_size = 2;
  int length = 2;
  bool marginal = true;
  bool position = true;
  bool revealed = true;

  int dim() const {
    return (marginal ? vocab_size : 0) + (position ? length : 0) + (revealed ? length : 0);
  }

  static FeatureConfig for_model(const TabularModel& model) {
    FeatureConfig cfg;
    cfg.vocab_size = model.vocab_size();
    cfg.length = model.length();
    return cfg;
  }

  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

/// |M| x d feature matrix; row r describes masked position state.masked()[r].
inline Eigen::MatrixXd featurize(const MaskState& state, const ForwardPass& pass, const FeatureConfig& cfg) {
  if (state.length() != cfg.length) throw DimensionMismatch("featurize: state length differs from feature config");
  const auto& masked = state.masked();
  const int d = cfg.dim();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(masked.size()), d);
  for (std::size_t r = 0; r < masked.size(); ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    int col = 0;
    if (cfg.marginal) {
      const auto& dist = pass.marginals[r];
      if (static_cast<int>(dist.size()) != cfg.vocab_size) {
        throw DimensionMismatch("featurize: vocabulary differs from feature config");
      }
      for (int k = 0; k < cfg.vocab_size; ++k) h(row, col + k) = dist[static_cast<std::size_t>(k)];
      col += cfg.vocab_size;
    }
    if (cfg.position) {
      h(row, col + masked[r]) = 1.0;
      col += cfg.length;
    }
    if (cfg.revealed) {
      for (const auto& entry : state.revealed()) h(row, col + entry.first) = 1.0;
    }
  }
  return h;
}

inline Eigen::MatrixXd featurize(const TabularModel& model, const MaskState& state, const FeatureConfig& cfg) {
  if (model.vocab_size() != cfg.vocab_size || model.length() != cfg.length) {
    throw DimensionMismatch("featurize: model shape differs from feature config");
  }
  return featurize(state, forward_pass(model, state), cfg);
}

struct PredictorWeights {
  Eigen::MatrixXd w_q;
  Eigen::MatrixXd w_k;
  std::optional<Eigen::MatrixXd> merged;

  int dim() const { return static_cast<int>(w_q.rows()); }

  static PredictorWeights zeros(int d) {
    return PredictorWeights{Eigen::MatrixXd::Zero(d, d), Eigen::MatrixXd::Zero(d, d), std::nullopt};
  }

  static PredictorWeights random(int d, double scale, Rng& rng) {
    PredictorWeights w{Eigen::MatrixXd(d, d), Eigen::MatrixXd(d, d), std::nullopt};
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) w.w_q(r, c) = scale * sample_normal(rng);
    }
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < d; ++c) w.w_k(r, c) = scale * sample_normal(rng);
    }
    return w;
  }

  /// W = W_Q W_K^T, used for single-multiplication inference.
  void merge() { merged = w_q * w_k.transpose(); }
};

enum class PredictPath { automatic, two_projection, merged };

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Raw |M| x |M| scores q_i . k_j / sqrt(d).
inline Eigen::MatrixXd predictor_scores(const Eigen::MatrixXd& h, const PredictorWeights& w,
                                        PredictPath path = PredictPath::automatic) {
  if (h.cols() != w.w_q.rows() || w.w_q.rows() != w.w_q.cols() || w.w_k.rows() != w.w_q.rows() ||
      w.w_k.cols() != w.w_q.cols()) {
    throw DimensionMismatch("predictor: feature width differs from weight dimension");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(h.cols()));
  const bool use_merged = path == PredictPath::merged || (path == PredictPath::automatic && w.merged.has_value());
  if (use_merged) {
    if (!w.merged) throw InvalidArgument("predictor: merged weights requested but absent");
    if (w.merged->rows() != h.cols() || w.merged->cols() != h.cols()) {
      throw DimensionMismatch("predictor: merged weight dimension differs");
    }
    return (h * (*w.merged) * h.transpose()) * scale;
  }
  const Eigen::MatrixXd q = h * w.w_q;
  const Eigen::MatrixXd k = h * w.w_k;
  return (q * k.transpose()) * scale;
}

/// Predicted D: sigmoid of the bilinear score, diagonal zeroed.
inline DependencyMatrix predict_dependency(const Eigen::MatrixXd& h, const PredictorWeights& w,
                                           std::vector<Position> order,
                                           PredictPath path = PredictPath::automatic) {
  if (static_cast<Eigen::Index>(order.size()) != h.rows()) {
    throw DimensionMismatch("predict_dependency: order length differs from feature rows");
  }
  const Eigen::MatrixXd s = predictor_scores(h, w, path);
  DependencyMatrix dep(std::move(order), DependencySource::predicted);
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (i != j) dep.set(static_cast<std::size_t>(i), static_cast<std::size_t>(j), sigmoid(s(i, j)));
    }
  }
  return dep;
}

/// Feature layout plus trained weights; everything inference needs.
struct DependencyPredictor {
  FeatureConfig features;
  PredictorWeights weights;

  DependencyMatrix predict(const MaskState& state, const ForwardPass& pass) const {
    return predict_dependency(featurize(state, pass, features), weights, state.masked());
  }
};

// ---------------------------------------------------------------------------
// Phase 1: TV cache

/// One cached regression target: the dependency column for a single revealed
/// position j with its sampled value y, in a given masking context.
struct TVCacheRecord {
  int model_id = 0;
  double t = 0.0;               ///< mask ratio drawn for this sample
  MaskState state;              ///< context before revealing j
  Position j = 0;
  Token y = 0;
  std::vector<double> d_column; ///< D_{i,j}(y) for every masked i, by rank; 0 at rank(j)
  std::uint64_t feature_seed = 0;
};

struct CacheOptions {
  int samples_per_response = 5;
  int responses_per_model = 1;
  /// Forces the mask ratio instead of drawing t ~ Uniform(0, 1).
  std::optional<double> fixed_ratio;
};

/// Number of masked positions for ratio t over length n.
inline int masked_count(double t, int n) {
  return std::clamp(static_cast<int>(std::ceil(t * n - 1e-12)), 0, n);
}

/// Uniformly random subset of [0, n) of the given size, ascending.
inline std::vector<Position> random_subset(int n, int count, Rng& rng) {
  std::vector<Position> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  for (int k = 0; k < count; ++k) {
    const auto pick = k + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(n - k)));
    std::swap(all[static_cast<std::size_t>(k)], all[static_cast<std::size_t>(pick)]);
  }
  all.resize(static_cast<std::size_t>(count));
  std::sort(all.begin(), all.end());
  return all;
}

/// Masks `count` uniformly chosen positions of a complete response.
inline MaskState mask_response(std::span<const Token> response, int count, Rng& rng) {
  const auto masked = random_subset(static_cast<int>(response.size()), count, rng);
  std::map<Position, Token> revealed;
  for (std::size_t p = 0; p < response.size(); ++p) {
    if (!std::binary_search(masked.begin(), masked.end(), static_cast<Position>(p))) {
      revealed[static_cast<Position>(p)] = response[p];
    }
  }
  return MaskState::from_revealed(static_cast<int>(response.size()), revealed);
}

/// Regenerates the masking context of one cache sample from its seed.
inline std::pair<double, MaskState> cache_sample_context(const TabularModel& model, std::uint64_t sample_seed,
                                                         const CacheOptions& opts) {
  Rng rng(sample_seed);
  const auto response = sample_joint(model, rng);
  const double t = opts.fixed_ratio ? *opts.fixed_ratio : uniform01(rng);
  return {t, mask_response(response, masked_count(t, model.length()), rng)};
}

/// Phase-1 cache: for each response a model emits, several random masks; for
/// each masked j one realization y ~ P(Y_j | ctx) and its full D column.
inline std::vector<TVCacheRecord> generate_tv_cache(std::span<const TabularModel> models, const CacheOptions& opts,
                                                    std::uint64_t seed) {
  std::vector<TVCacheRecord> out;
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    const auto& model = models[mi];
    for (int resp = 0; resp < opts.responses_per_model; ++resp) {
      for (int sample = 0; sample < opts.samples_per_response; ++sample) {
        const std::uint64_t sample_seed = derive_seed(seed, mi, static_cast<std::uint64_t>(resp),
                                                      static_cast<std::uint64_t>(sample));
        auto [t, state] = cache_sample_context(model, sample_seed, opts);
        if (state.masked().empty()) continue;
        const ForwardPass base = forward_pass(model, state);
        Rng value_rng(derive_seed(sample_seed, 0xD1ULL));
        for (std::size_t rj = 0; rj < state.masked().size(); ++rj) {
          TVCacheRecord rec;
          rec.model_id = static_cast<int>(mi);
          rec.t = t;
          rec.state = state;
          rec.j = state.masked()[rj];
          rec.y = sample_categorical(base.marginals[rj], value_rng);
          rec.d_column = dependency_column(model, state, base, rec.j, rec.y);
          rec.feature_seed = sample_seed;
          out.push_back(std::move(rec));
        }
      }
    }
  }
  return out;
}

inline nlohmann::json cache_record_to_json(const TVCacheRecord& rec) {
  nlohmann::json revealed = nlohmann::json::array();
  for (const auto& [pos, tok] : rec.state.revealed()) revealed.push_back({pos, tok});
  return nlohmann::json{{"model_id", rec.model_id}, {"t", rec.t},
                        {"length", rec.state.length()}, {"masked", rec.state.masked()},
                        {"revealed", revealed}, {"j", rec.j},
                        {"y", rec.y}, {"d_column", rec.d_column},
                        {"feature_seed", rec.feature_seed}};
}

inline TVCacheRecord cache_record_from_json(const nlohmann::json& j) {
  try {
    TVCacheRecord rec;
    rec.model_id = j.at("model_id").get<int>();
    rec.t = j.at("t").get<double>();
    std::map<Position, Token> revealed;
    for (const auto& pair : j.at("revealed")) revealed[pair.at(0).get<Position>()] = pair.at(1).get<Token>();
    rec.state = MaskState::from_revealed(j.at("length").get<int>(), revealed);
    if (rec.state.masked() != j.at("masked").get<std::vector<Position>>()) {
      throw InvalidArgument("cache record: masked and revealed do not partition the sequence");
    }
    rec.j = j.at("j").get<Position>();
    rec.y = j.at("y").get<Token>();
    rec.d_column = j.at("d_column").get<std::vector<double>>();
    rec.feature_seed = j.at("feature_seed").get<std::uint64_t>();
    if (rec.d_column.size() != rec.state.masked().size()) {
      throw DimensionMismatch("cache record: d_column length differs from masked count");
    }
    return rec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed cache record: ") + e.what());
  }
}

inline void write_tv_cache(const std::vector<TVCacheRecord>& records, std::ostream& out) {
  for (const auto& rec : records) out << cache_record_to_json(rec).dump() << '\n';
}

inline std::vector<TVCacheRecord> read_tv_cache(std::istream& in) {
  std::vector<TVCacheRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(cache_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(std::string("malformed cache line: ") + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phase 2: training

/// A featurized cache record. `targets[column]` is ignored.
struct TrainingExample {
  Eigen::MatrixXd features;
  std::size_t column = 0;
  std::vector<double> targets;
};

inline std::vector<TrainingExample> examples_from_cache(const std::vector<TVCacheRecord>& records,
                                                        std::span<const TabularModel> models,
                                                        const FeatureConfig& cfg) {
  std::vector<TrainingExample> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    if (rec.model_id < 0 || static_cast<std::size_t>(rec.model_id) >= models.size()) {
      throw InvalidArgument("cache record references an unknown model");
    }
    TrainingExample ex;
    ex.features = featurize(models[static_cast<std::size_t>(rec.model_id)], rec.state, cfg);
    ex.column = rec.state.rank(rec.j);
    ex.targets = rec.d_column;
    out.push_back(std::move(ex));
  }
  return out;
}

struct LossAndGradient {
  double loss = 0.0;
  std::size_t terms = 0;
  Eigen::MatrixXd grad_q;
  Eigen::MatrixXd grad_k;
};

/// Mean squared error over every off-diagonal (i, column) term in the batch,
/// with analytic gradients through the two-projection path.
inline LossAndGradient batch_loss_and_gradient(std::span<const TrainingExample> batch, const PredictorWeights& w,
                                               bool with_gradient = true) {
  const Eigen::Index d = w.w_q.rows();
  LossAndGradient out;
  if (with_gradient) {
    out.grad_q = Eigen::MatrixXd::Zero(d, d);
    out.grad_k = Eigen::MatrixXd::Zero(d, d);
  }
  for (const auto& ex : batch) out.terms += ex.targets.size() > 0 ? ex.targets.size() - 1 : 0;
  if (out.terms == 0) return out;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_terms = 1.0 / static_cast<double>(out.terms);
  for (const auto& ex : batch) {
    if (ex.features.cols() != d) throw DimensionMismatch("training example feature width differs from weights");
    if (static_cast<Eigen::Index>(ex.targets.size()) != ex.features.rows()) {
      throw DimensionMismatch("training example target length differs from feature rows");
    }
    const Eigen::MatrixXd q = ex.features * w.w_q;
    const Eigen::MatrixXd k = ex.features * w.w_k;
    const auto jc = static_cast<Eigen::Index>(ex.column);
    const Eigen::VectorXd kj = k.row(jc).transpose();
    // dL/dq_i accumulates per row; dL/dk_j is a single row.
    Eigen::MatrixXd grad_q_rows = Eigen::MatrixXd::Zero(q.rows(), d);
    Eigen::VectorXd grad_kj = Eigen::VectorXd::Zero(d);
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      if (i == jc) continue;
      const double pred = sigmoid(q.row(i).dot(kj) * scale);
      const double err = pred - ex.targets[static_cast<std::size_t>(i)];
      out.loss += err * err * inv_terms;
      if (!with_gradient) continue;
      const double g = 2.0 * err * pred * (1.0 - pred) * scale * inv_terms;
      grad_q_rows.row(i) += g * kj.transpose();
      grad_kj += g * q.row(i).transpose();
    }
    if (with_gradient) {
      out.grad_q += ex.features.transpose() * grad_q_rows;
      out.grad_k += ex.features.row(jc).transpose() * grad_kj.transpose();
    }
  }
  return out;
}

/// Optimizer and schedule settings. Defaults are the large-scale recipe
/// (AdamW, lr 1e-5, weight decay 0.01, cosine with 5% warmup, 5 epochs);
/// `desk_scale()` raises the learning rate for small tabular caches.
struct TrainingHyper {
  double learning_rate = 1e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 5;
  int batch_size = 16;
  double warmup_fraction = 0.05;
  double validation_fraction = 0.1;
  double init_scale = 0.1;

  static TrainingHyper desk_scale() {
    TrainingHyper h;
    h.learning_rate = 1e-2;
    h.epochs = 40;
    return h;
  }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_mae = 0.0;
};

struct TrainingReport {
  double initial_train_loss = 0.0;
  double initial_validation_loss = 0.0;
  std::vector<EpochStats> epochs;
  int best_epoch = 0;  ///< 0 means the initial weights were never beaten
  double best_validation_loss = 0.0;
  std::size_t train_examples = 0;
  std::size_t validation_examples = 0;
};

struct TrainingResult {
  PredictorWeights weights;
  TrainingReport report;
};

/// Mean absolute error of predictions over off-diagonal terms.
inline double evaluate_mae(std::span<const TrainingExample> examples, const PredictorWeights& w) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(w.w_q.rows()));
  double total = 0.0;
  std::size_t terms = 0;
  for (const auto& ex : examples) {
    const Eigen::MatrixXd q = ex.features * w.w_q;
    const Eigen::VectorXd kj = (ex.features.row(static_cast<Eigen::Index>(ex.column)) * w.w_k).transpose();
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      if (i == static_cast<Eigen::Index>(ex.column)) continue;
      total += std::abs(sigmoid(q.row(i).dot(kj) * scale) - ex.targets[static_cast<std::size_t>(i)]);
      ++terms;
    }
  }
  return terms ? total / static_cast<double>(terms) : 0.0;
}

/// Learning-rate multiplier: linear warmup then cosine decay to zero.
inline double schedule_factor(std::size_t step, std::size_t total_steps, double warmup_fraction) {
  const auto warmup = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total_steps <= warmup) return 1.0;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

/// Trains W_Q and W_K with AdamW (decoupled weight decay) over shuffled
/// mini-batches and returns the checkpoint with the lowest validation loss.
/// When the split leaves no validation examples the training set is used.
inline TrainingResult train_predictor(const std::vector<TrainingExample>& examples, const FeatureConfig& cfg,
                                      const TrainingHyper& hyper, std::uint64_t seed,
                                      std::optional<PredictorWeights> init = std::nullopt) {
  if (examples.empty()) throw EmptyCache("train_predictor: no training examples");
  if (hyper.batch_size < 1 || hyper.epochs < 0) throw InvalidArgument("batch_size must be >= 1 and epochs >= 0");
  const int d = cfg.dim();
  Rng rng(derive_seed(seed, 0x7EA1ULL));

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[uniform_index(rng, k)]);
  const auto n_val = static_cast<std::size_t>(std::floor(hyper.validation_fraction * static_cast<double>(examples.size())));
  std::vector<TrainingExample> train;
  std::vector<TrainingExample> val;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_val ? val : train).push_back(examples[order[k]]);
  if (train.empty()) train = val;
  const std::vector<TrainingExample>& val_set = val.empty() ? train : val;

  PredictorWeights w = init ? *init : PredictorWeights::random(d, hyper.init_scale, rng);
  w.merged.reset();
  if (w.dim() != d) throw DimensionMismatch("initial weights have the wrong dimension");

  auto loss_of = [&](const std::vector<TrainingExample>& set, const PredictorWeights& weights) {
    const double l = batch_loss_and_gradient(set, weights, false).loss;
    if (!std::isfinite(l)) throw NonFiniteLoss("training loss became non-finite");
    return l;
  };

  TrainingResult result;
  auto& rep = result.report;
  rep.train_examples = train.size();
  rep.validation_examples = val.empty() ? 0 : val.size();
  rep.initial_train_loss = loss_of(train, w);
  rep.initial_validation_loss = loss_of(val_set, w);
  rep.best_validation_loss = rep.initial_validation_loss;
  result.weights = w;

  const std::size_t batches_per_epoch = (train.size() + static_cast<std::size_t>(hyper.batch_size) - 1) /
                                        static_cast<std::size_t>(hyper.batch_size);
  const std::size_t total_steps = batches_per_epoch * static_cast<std::size_t>(hyper.epochs);
  Eigen::MatrixXd m_q = Eigen::MatrixXd::Zero(d, d), v_q = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd m_k = Eigen::MatrixXd::Zero(d, d), v_k = Eigen::MatrixXd::Zero(d, d);
  std::size_t step = 0;
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);

  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    for (std::size_t k = idx.size(); k > 1; --k) std::swap(idx[k - 1], idx[uniform_index(rng, k)]);
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      std::vector<TrainingExample> batch;
      const std::size_t end = std::min(idx.size(), (b + 1) * static_cast<std::size_t>(hyper.batch_size));
      for (std::size_t k = b * static_cast<std::size_t>(hyper.batch_size); k < end; ++k) batch.push_back(train[idx[k]]);
      const auto lg = batch_loss_and_gradient(batch, w);
      if (!std::isfinite(lg.loss)) throw NonFiniteLoss("training loss became non-finite");
      const double lr = hyper.learning_rate * schedule_factor(step, total_steps, hyper.warmup_fraction);
      ++step;
      if (lr == 0.0) continue;
      const double t = static_cast<double>(step);
      const double bc1 = 1.0 - std::pow(hyper.beta1, t);
      const double bc2 = 1.0 - std::pow(hyper.beta2, t);
      auto adamw = [&](Eigen::MatrixXd& param, Eigen::MatrixXd& m, Eigen::MatrixXd& v, const Eigen::MatrixXd& g) {
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g.cwiseProduct(g);
        const Eigen::MatrixXd update =
            (m / bc1).array() / ((v / bc2).array().sqrt() + hyper.epsilon);
        param -= lr * (update + hyper.weight_decay * param);
      };
      adamw(w.w_q, m_q, v_q, lg.grad_q);
      adamw(w.w_k, m_k, v_k, lg.grad_k);
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_of(train, w);
    stats.validation_loss = loss_of(val_set, w);
    stats.validation_mae = evaluate_mae(val_set, w);
    rep.epochs.push_back(stats);
    if (stats.validation_loss < rep.best_validation_loss) {
      rep.best_validation_loss = stats.validation_loss;
      rep.best_epoch = epoch;
      result.weights = w;
    }
  }
  result.weights.merge();
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointFormatVersion = 1;

/// Text checkpoint: a key-value header terminated by a `matrices` line, then
/// named row-major matrices with exactly round-tripping decimal values.
inline void save_checkpoint(const DependencyPredictor& predictor, std::ostream& out, bool include_merged = true) {
  const auto& f = predictor.features;
  out << "format = demask-predictor\n";
  out << "format_version = " << kCheckpointFormatVersion << "\n";
  out << "d = " << f.dim() << "\n";
  out << "vocab_size = " << f.vocab_size << "\n";
  out << "length = " << f.length << "\n";
  out << "marginal = " << (f.marginal ? 1 : 0) << "\n";
  out << "position = " << (f.position ? 1 : 0) << "\n";
  out << "revealed = " << (f.revealed ? 1 : 0) << "\n";
  out << "matrices\n";
  auto dump = [&](const char* name, const Eigen::MatrixXd& m) {
    out << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? " " : "") << format_double(m(r, c));
      out << '\n';
    }
  };
  dump("w_q", predictor.weights.w_q);
  dump("w_k", predictor.weights.w_k);
  if (include_merged) {
    PredictorWeights w = predictor.weights;
    if (!w.merged) w.merge();
    dump("merged", *w.merged);
  }
}

inline void save_checkpoint(const DependencyPredictor& predictor, const std::string& path, bool include_merged = true) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  save_checkpoint(predictor, out, include_merged);
}

/// Reads a checkpoint. When `expected` is given, the stored feature layout
/// must match it. A missing merged matrix is recomputed.
inline DependencyPredictor load_checkpoint(std::istream& in, const std::optional<FeatureConfig>& expected = std::nullopt) {
  std::string header;
  std::string line;
  bool found = false;
  while (std::getline(in, line)) {
    if (KeyValueDocument::trim(line) == "matrices") {
      found = true;
      break;
    }
    header += line + "\n";
  }
  if (!found) throw ConfigError("checkpoint: missing matrices section");
  const auto doc = KeyValueDocument::parse(header, "checkpoint");
  doc.require_known({"format", "format_version", "d", "vocab_size", "length", "marginal", "position", "revealed"});
  if (doc.get_string("format") != "demask-predictor") throw ConfigError("checkpoint: unexpected format tag");
  if (doc.get_int("format_version") != kCheckpointFormatVersion) {
    throw FormatVersionMismatch("checkpoint format_version " + doc.get_string("format_version") +
                                " is not supported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
  }
  DependencyPredictor p;
  p.features.vocab_size = static_cast<int>(doc.get_int("vocab_size"));
  p.features.length = static_cast<int>(doc.get_int("length"));
  p.features.marginal = doc.get_bool("marginal", true);
  p.features.position = doc.get_bool("position", true);
  p.features.revealed = doc.get_bool("revealed", true);
  const auto d = doc.get_int("d");
  if (d != p.features.dim()) throw DimensionMismatch("checkpoint: d disagrees with the feature flags");
  if (expected && !(*expected == p.features)) {
    throw DimensionMismatch("checkpoint: feature layout (d = " + std::to_string(d) +
                            ") differs from the requested one (d = " + std::to_string(expected->dim()) + ")");
  }

  std::map<std::string, Eigen::MatrixXd> mats;
  std::string name;
  Eigen::Index rows = 0, cols = 0;
  while (in >> name >> rows >> cols) {
    if (rows != d || cols != d) throw DimensionMismatch("checkpoint: matrix '" + name + "' has the wrong shape");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        std::string cell;
        if (!(in >> cell)) throw ConfigError("checkpoint: truncated matrix '" + name + "'");
        m(r, c) = std::strtod(cell.c_str(), nullptr);
      }
    }
    mats[name] = std::move(m);
  }
  if (!mats.count("w_q") || !mats.count("w_k")) throw ConfigError("checkpoint: w_q and w_k are required");
  p.weights.w_q = mats["w_q"];
  p.weights.w_k = mats["w_k"];
  if (mats.count("merged")) {
    p.weights.merged = mats["merged"];
  } else {
    p.weights.merge();
  }
  return p;
}

inline DependencyPredictor load_checkpoint(const std::string& path, const std::optional<FeatureConfig>& expected = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return load_checkpoint(in, expected);
}

}  // namespace demask
