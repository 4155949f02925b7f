#pragma once

// Dynamic subspace learner training loop: periodic re-clustering, per-cluster
// learner updates, plateau detection, neuron scoring, learner splitting,
// remainder reset and the final full-embedding fine-tune.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsl/clustering.hpp"
#include "dsl/core_model.hpp"
#include "dsl/evaluation.hpp"
#include "dsl/log.hpp"
#include "dsl/metric_objectives.hpp"
#include "dsl/nn/adam.hpp"

namespace dsl {

enum class TrainMode { dynamic, static_k };
enum class ClusterSampling { round_robin, uniform };

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "dynamic") return TrainMode::dynamic;
  if (s == "static-K" || s == "static-k") return TrainMode::static_k;
  throw ConfigError("unknown mode '" + s + "' (expected dynamic or static-K)");
}
inline std::string to_string(TrainMode m) { return m == TrainMode::dynamic ? "dynamic" : "static-K"; }

inline ClusterSampling parse_cluster_sampling(const std::string& s) {
  if (s == "round-robin") return ClusterSampling::round_robin;
  if (s == "uniform") return ClusterSampling::uniform;
  throw ConfigError("unknown cluster sampling '" + s + "'");
}
inline std::string to_string(ClusterSampling c) { return c == ClusterSampling::round_robin ? "round-robin" : "uniform"; }

struct TrainerConfig {
  int recluster_period = 2;    // T_c, epochs
  int plateau_patience = 10;   // T_p, epochs
  int total_epochs = 300;
  int finetune_epochs = 50;
  int embedding_dim = 128;
  int batch_size = 32;
  int per_class = 8;
  double score_threshold = 0.5;
  int min_remainder = 1;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::dynamic;
  int static_k = 1;
  MarginLossParams margin;
  PairPolicy pair_policy = PairPolicy::anchor_random_negative;
  ClusterSampling cluster_sampling = ClusterSampling::round_robin;
  std::size_t scoring_samples = 2048;  // 0 = all training data
  int iterations_per_epoch = 0;        // 0 = ceil(N / batch_size)
  bool augment = true;                 // random flips/transposes of training batches

  void validate() const {
    if (recluster_period < 1) throw ConfigError("T_c must be >= 1");
    if (plateau_patience < 1) throw ConfigError("T_p must be >= 1");
    if (total_epochs < 1) throw ConfigError("total_epochs must be >= 1");
    if (finetune_epochs < 0 || finetune_epochs >= total_epochs) {
      throw ConfigError("finetune_epochs must be in [0, total_epochs)");
    }
    if (!(score_threshold > 0.0 && score_threshold < 1.0)) throw ConfigError("score_threshold must be in (0,1)");
    if (min_remainder < 1) throw ConfigError("min_remainder must be >= 1");
    if (embedding_dim < 1) throw ConfigError("embedding dimension must be >= 1");
    if (batch_size < 2 || per_class < 1 || batch_size % per_class != 0) {
      throw ConfigError("batch_size must be a multiple of per_class and >= 2");
    }
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (mode == TrainMode::static_k && (static_k < 1 || static_k > embedding_dim)) {
      throw ConfigError("static_K must be in [1, d]");
    }
    margin.validate();
  }
};

struct EpochRecord {
  int epoch = 0;
  int k = 1;
  std::vector<int> slice_sizes;
  double train_loss = 0.0;
  double val_nmi = 0.0;
  double val_r1 = 0.0;
  std::string event;  // comma-separated: recluster, best, split, split-refused, finetune
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},       {"K", r.k},           {"slice_sizes", r.slice_sizes}, {"train_loss", r.train_loss},
          {"val_nmi", r.val_nmi}, {"val_r1", r.val_r1}, {"event", r.event}};
}

inline EpochRecord epoch_record_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch");
  r.k = j.at("K");
  r.slice_sizes = j.at("slice_sizes").get<std::vector<int>>();
  r.train_loss = j.at("train_loss");
  r.val_nmi = j.at("val_nmi");
  r.val_r1 = j.at("val_r1");
  r.event = j.at("event");
  return r;
}

struct TrainingState {
  int epoch = 0;
  int k = 1;
  double best_score = -1.0;
  int best_epoch = 0;
  int last_split_epoch = 0;  // patience restarts after each split
  bool recluster_flag = true;
  std::vector<EpochRecord> history;

  /// Epoch from which plateau patience is counted.
  int patience_origin() const { return std::max(best_epoch, last_split_epoch); }
};

inline nlohmann::json to_json(const TrainingState& s) {
  nlohmann::json h = nlohmann::json::array();
  for (const auto& r : s.history) h.push_back(to_json(r));
  return {{"epoch", s.epoch},
          {"K", s.k},
          {"best_score", s.best_score},
          {"best_epoch", s.best_epoch},
          {"last_split_epoch", s.last_split_epoch},
          {"recluster_flag", s.recluster_flag},
          {"history", h}};
}

inline TrainingState training_state_from_json(const nlohmann::json& j) {
  TrainingState s;
  s.epoch = j.at("epoch");
  s.k = j.at("K");
  s.best_score = j.at("best_score");
  s.best_epoch = j.at("best_epoch");
  s.last_split_epoch = j.value("last_split_epoch", 0);
  s.recluster_flag = j.at("recluster_flag");
  for (const auto& r : j.at("history")) s.history.push_back(epoch_record_from_json(r));
  return s;
}

/// Per-coordinate |activation x gradient| scores.
struct NeuronScoreVector {
  std::vector<double> raw;
  std::vector<double> normalized;

  static NeuronScoreVector from_raw(std::vector<double> raw) {
    NeuronScoreVector s;
    const double mx = raw.empty() ? 0.0 : *std::max_element(raw.begin(), raw.end());
    s.normalized.assign(raw.size(), 0.0);
    if (mx > 0.0) {
      for (std::size_t i = 0; i < raw.size(); ++i) s.normalized[i] = raw[i] / mx;
    }
    s.raw = std::move(raw);
    return s;
  }

  bool any_positive() const {
    return std::any_of(raw.begin(), raw.end(), [](double v) { return v > 0.0; });
  }
};

/// Deterministic 64-bit mixing (splitmix64) for deriving sub-seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0x2545f4914f6cdd1dULL));
}

template <typename T>
using EmbeddingLossFn = std::function<LearnerLoss<T>(const Mat<T>& embeddings, std::span<const int> labels)>;

/// The remainder learner's loss over all pairs of a batch (mean over active pairs).
template <typename T>
EmbeddingLossFn<T> remainder_loss_fn(const SubspaceLayout& layout, const MarginLossParams& params) {
  return [layout, params](const Mat<T>& emb, std::span<const int> labels) {
    std::mt19937_64 unused(0);
    const auto pairs = mine_pairs(labels, PairPolicy::all, unused);
    auto loss = learner_loss_batch(emb, layout, layout.learner_count() - 1, pairs, params, true);
    loss.grad = loss.mean_grad();
    loss.sum = loss.mean();
    return loss;
  };
}

/// raw_i = mean over samples of |a_i * dL/da_i| at the embedding layer, for remainder
/// coordinates; committed coordinates score 0. Samples are processed in consecutive
/// chunks of `batch_size`, each chunk being one loss evaluation.
template <typename T>
NeuronScoreVector score_neurons(const EmbeddingModel<T>& model, const SubspaceLayout& layout, const Dataset& scoring_data,
                                const EmbeddingLossFn<T>& loss_fn, int batch_size) {
  if (layout.remainder().empty()) throw std::invalid_argument("score_neurons: remainder is empty");
  if (scoring_data.empty()) throw std::invalid_argument("score_neurons: no scoring data");
  std::vector<double> raw(static_cast<std::size_t>(layout.dim()), 0.0);
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t start = 0; start < scoring_data.size(); start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    labels.clear();
    for (std::size_t i = start; i < std::min(scoring_data.size(), start + batch_size); ++i) {
      idx.push_back(i);
      labels.push_back(scoring_data.samples[i].label);
    }
    const auto pass = model.infer(make_batch<T>(scoring_data, idx));
    const auto loss = loss_fn(pass.embedding, labels);
    if (loss.grad.size() == 0) continue;
    for (int i : layout.remainder()) {
      for (Eigen::Index s = 0; s < pass.embedding.rows(); ++s) {
        raw[i] += std::abs(static_cast<double>(pass.embedding(s, i)) * static_cast<double>(loss.grad(s, i)));
      }
    }
  }
  for (auto& v : raw) v /= static_cast<double>(scoring_data.size());
  return NeuronScoreVector::from_raw(std::move(raw));
}

/// Commits remainder coordinates whose normalized score exceeds `threshold` as a new
/// learner slice. Empty qualifying set -> the single top coordinate; a set that would
/// shrink the remainder below `min_remainder` keeps only the top-scored ones that fit.
/// Returns nullopt (split refused) when the remainder is already at min_remainder.
inline std::optional<SubspaceLayout> split_learner(const NeuronScoreVector& scores, const SubspaceLayout& layout,
                                                   int min_remainder, double threshold = 0.5) {
  const auto& rem = layout.remainder();
  if (static_cast<int>(rem.size()) <= min_remainder) return std::nullopt;
  if (scores.normalized.size() != static_cast<std::size_t>(layout.dim())) {
    throw std::invalid_argument("split_learner: score vector does not match layout dim");
  }
  std::vector<int> ranked = rem;
  std::stable_sort(ranked.begin(), ranked.end(),
                   [&](int a, int b) { return scores.normalized[a] > scores.normalized[b]; });
  std::vector<int> taken;
  for (int i : ranked) {
    if (scores.normalized[i] > threshold) taken.push_back(i);
  }
  if (taken.empty()) taken.push_back(ranked.front());
  const std::size_t max_take = rem.size() - static_cast<std::size_t>(min_remainder);
  if (taken.size() > max_take) taken.resize(max_take);
  return layout.with_split(std::move(taken));
}

inline bool detect_plateau(const TrainingState& state, int patience) {
  return state.epoch >= state.patience_origin() + patience;
}

inline bool should_recluster(int epoch, int period, bool event_flag) { return event_flag || epoch % period == 0; }

inline SubspaceLayout initial_layout(const TrainerConfig& cfg) {
  return cfg.mode == TrainMode::static_k ? SubspaceLayout::equal_split(cfg.embedding_dim, cfg.static_k)
                                         : SubspaceLayout::single(cfg.embedding_dim);
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called with "best", "split" or "diverged" when a checkpoint should be written.
  std::function<void(const std::string& reason)> on_checkpoint;
};

/// Per-epoch validation summary: recall@1 drives plateau detection, NMI is recorded.
struct ValidationScore {
  double r1 = 0.0;
  double nmi = 0.0;
};

template <typename T>
class DynamicSubspaceTrainer {
 public:
  DynamicSubspaceTrainer(TrainerConfig cfg, EmbeddingModel<T>& model, const Dataset& train, const Dataset& val,
                         TrainHooks hooks = {})
      : cfg_(std::move(cfg)),
        model_(model),
        train_(train),
        val_(val),
        hooks_(std::move(hooks)),
        adam_(model.parameters(), nn::AdamOptions{cfg_.lr}),
        layout_(initial_layout(cfg_)) {
    cfg_.validate();
    if (model.dim() != cfg_.embedding_dim) throw ConfigError("model embedding dim differs from trainer config");
    if (train.size() < 2) throw ConfigError("training data needs at least 2 samples");
    {
      auto labels = train.labels();
      std::sort(labels.begin(), labels.end());
      if (std::unique(labels.begin(), labels.end()) - labels.begin() < 2) {
        throw ConfigError("training data needs at least 2 classes");
      }
    }
    if (val.size() < 2) throw ConfigError("validation data needs at least 2 samples");
    state_.k = layout_.learner_count();
    pick_scoring_subset();
  }

  /// Runs from the current state to total_epochs.
  void run() {
    while (state_.epoch < cfg_.total_epochs) run_epoch();
  }

  void run_epoch() {
    const int ep = state_.epoch + 1;
    const bool finetune = ep > cfg_.total_epochs - cfg_.finetune_epochs;
    std::vector<std::string> events;
    double loss = 0.0;
    if (!finetune) {
      if (state_.recluster_flag) {
        recluster(ep);
        state_.recluster_flag = false;
        events.emplace_back("recluster");
      }
      loss = train_learners(ep);
    } else {
      loss = train_full(ep);
      events.emplace_back("finetune");
    }

    const ValidationScore v = validate(ep);
    state_.epoch = ep;
    bool wrote_best = false;
    if (v.r1 > state_.best_score) {
      state_.best_score = v.r1;
      state_.best_epoch = ep;
      events.emplace_back("best");
      wrote_best = true;
    }
    if (!finetune) {
      state_.recluster_flag = should_recluster(ep, cfg_.recluster_period, false);
      if (!wrote_best && cfg_.mode == TrainMode::dynamic && detect_plateau(state_, cfg_.plateau_patience)) {
        events.emplace_back(try_split(ep) ? "split" : "split-refused");
      }
    }

    EpochRecord rec;
    rec.epoch = ep;
    rec.k = layout_.learner_count();
    rec.slice_sizes = layout_.slice_sizes();
    rec.train_loss = loss;
    rec.val_nmi = v.nmi;
    rec.val_r1 = v.r1;
    for (std::size_t i = 0; i < events.size(); ++i) rec.event += (i ? "," : "") + events[i];
    state_.history.push_back(rec);
    if (hooks_.on_epoch) hooks_.on_epoch(rec);
    if (hooks_.on_checkpoint) {
      if (wrote_best) hooks_.on_checkpoint("best");
      if (!events.empty() && events.back() == "split") hooks_.on_checkpoint("split");
    }
  }

  const TrainerConfig& config() const { return cfg_; }
  const SubspaceLayout& layout() const { return layout_; }
  const TrainingState& state() const { return state_; }
  const ClusterAssignment& clusters() const { return clusters_; }
  const std::vector<std::vector<std::size_t>>& groups() const { return groups_; }
  nn::Adam<T>& optimizer() { return adam_; }
  const nn::Adam<T>& optimizer() const { return adam_; }
  EmbeddingModel<T>& model() { return model_; }

  /// Restores a saved run (layout, state, cluster routing) for exact resumption.
  void restore(SubspaceLayout layout, TrainingState state, std::vector<int> assignment) {
    layout.validate();
    if (layout.dim() != cfg_.embedding_dim) throw ConfigError("restored layout does not match embedding dim");
    layout_ = std::move(layout);
    state_ = std::move(state);
    state_.k = layout_.learner_count();
    if (!assignment.empty()) {
      clusters_ = ClusterAssignment{};
      clusters_.assignment = std::move(assignment);
      clusters_.centroids.resize(layout_.learner_count(), 0);
      groups_ = assign_groups(clusters_, train_.size());
    }
  }

 private:
  std::uint64_t epoch_seed(int ep, std::uint64_t purpose) const {
    return derive_seed(cfg_.seed, static_cast<std::uint64_t>(ep), purpose);
  }

  void pick_scoring_subset() {
    std::vector<std::size_t> all(train_.size());
    std::iota(all.begin(), all.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg_.seed, 0, 101));
    std::shuffle(all.begin(), all.end(), rng);
    const std::size_t n = cfg_.scoring_samples == 0 ? all.size() : std::min(cfg_.scoring_samples, all.size());
    all.resize(n);
    scoring_data_ = train_.subset(all);
  }

  void recluster(int ep) {
    const auto emb = normalized_rows(embed_dataset(model_, train_));
    clusters_ = kmeans(emb, layout_.learner_count(), epoch_seed(ep, 1));
    groups_ = assign_groups(clusters_, train_.size());
    for (std::size_t k = 0; k < groups_.size(); ++k) {
      std::vector<int> labels;
      for (auto i : groups_[k]) labels.push_back(train_.samples[i].label);
      std::sort(labels.begin(), labels.end());
      if (!labels.empty() && labels.front() == labels.back()) {
        log_warning("epoch " + std::to_string(ep) + ": cluster " + std::to_string(k) +
                    " holds a single class; its batches have no negative pairs");
      }
    }
  }

  int iterations() const {
    return cfg_.iterations_per_epoch > 0
               ? cfg_.iterations_per_epoch
               : static_cast<int>((train_.size() + cfg_.batch_size - 1) / static_cast<std::size_t>(cfg_.batch_size));
  }

  double train_learners(int ep) {
    std::mt19937_64 rng(epoch_seed(ep, 2));
    const int k_count = layout_.learner_count();
    std::uniform_int_distribution<int> pick(0, k_count - 1);
    double total = 0.0;
    int steps = 0;
    for (int it = 0; it < iterations(); ++it) {
      const int k = cfg_.cluster_sampling == ClusterSampling::round_robin ? it % k_count : pick(rng);
      const auto& group = groups_.at(k);
      if (group.empty()) continue;
      total += step(group, rng, [&](const Mat<T>& emb, const PairSet& pairs) {
        return learner_loss_batch(emb, layout_, k, pairs, cfg_.margin, true);
      });
      ++steps;
    }
    return steps ? total / steps : 0.0;
  }

  double train_full(int ep) {
    std::mt19937_64 rng(epoch_seed(ep, 3));
    std::vector<std::size_t> all(train_.size());
    std::iota(all.begin(), all.end(), 0);
    double total = 0.0;
    for (int it = 0; it < iterations(); ++it) {
      total += step(all, rng, [&](const Mat<T>& emb, const PairSet& pairs) {
        return full_embedding_loss(emb, pairs, cfg_.margin, true);
      });
    }
    return total / iterations();
  }

  template <typename LossFn>
  double step(std::span<const std::size_t> group, std::mt19937_64& rng, LossFn&& loss_fn) {
    const auto batch = build_batch(train_, group, cfg_.batch_size, cfg_.per_class, rng, false);
    std::vector<int> labels;
    labels.reserve(batch.size());
    for (auto i : batch) labels.push_back(train_.samples[i].label);
    auto images = make_batch<T>(train_, batch);
    if (cfg_.augment) augment_batch(images, rng);
    const auto pass = model_.forward(images);
    const auto pairs = mine_pairs(std::span<const int>(labels), cfg_.pair_policy, rng);
    const LearnerLoss<T> loss = loss_fn(pass.embedding, pairs);
    const double value = static_cast<double>(loss.mean());
    if (!std::isfinite(value) || !pass.embedding.allFinite()) {
      if (hooks_.on_checkpoint) hooks_.on_checkpoint("diverged");
      throw TrainingDiverged("training diverged at epoch " + std::to_string(state_.epoch + 1) +
                             " (non-finite loss or embedding)");
    }
    model_.zero_grad();
    if (loss.active > 0) {
      model_.backward(loss.mean_grad());
      adam_.step();
    }
    return value;
  }

  ValidationScore validate(int ep) const {
    const auto emb = normalized_rows(embed_dataset(model_, val_));
    const auto labels = val_.labels();
    ValidationScore v;
    v.r1 = recall_at_k(emb, labels, 1);
    const int k = std::max(1, std::min<int>(val_.num_classes, static_cast<int>(labels.size())));
    v.nmi = nmi(labels, kmeans_restarts(emb, k, epoch_seed(ep, 4), kEvalRestarts).assignment);
    return v;
  }

  bool try_split(int ep) {
    const int rem = static_cast<int>(layout_.remainder().size());
    if (rem <= cfg_.min_remainder) {
      log_info("plateau at epoch " + std::to_string(ep) + ": remainder at minimum size, no new learner");
      return false;
    }
    const auto scores = score_neurons(model_, layout_, scoring_data_, remainder_loss_fn<T>(layout_, cfg_.margin),
                                      cfg_.batch_size);
    if (!scores.any_positive()) {
      log_info("plateau at epoch " + std::to_string(ep) + ": all neuron scores are zero, no new learner");
      return false;
    }
    auto next = split_learner(scores, layout_, cfg_.min_remainder, cfg_.score_threshold);
    if (!next) return false;
    next->validate();
    layout_ = std::move(*next);
    state_.k = layout_.learner_count();
    reset_remainder(model_, layout_, epoch_seed(ep, 5));
    auto& head = model_.head();
    const auto in = static_cast<std::size_t>(head.in_features());
    for (int r : layout_.remainder()) {
      adam_.reset_moments(head.weight(), static_cast<std::size_t>(r) * in, in);
      adam_.reset_moments(head.bias(), static_cast<std::size_t>(r), 1);
    }
    state_.recluster_flag = true;
    state_.last_split_epoch = ep;
    log_info("epoch " + std::to_string(ep) + ": new learner, K=" + std::to_string(state_.k));
    return true;
  }

  TrainerConfig cfg_;
  EmbeddingModel<T>& model_;
  const Dataset& train_;
  const Dataset& val_;
  TrainHooks hooks_;
  nn::Adam<T> adam_;
  SubspaceLayout layout_;
  TrainingState state_;
  ClusterAssignment clusters_;
  std::vector<std::vector<std::size_t>> groups_;
  Dataset scoring_data_;
};

template <typename T>
struct TrainResult {
  SubspaceLayout layout;
  TrainingState state;
};

/// Full run; the model is trained in place.
template <typename T>
TrainResult<T> train(const TrainerConfig& cfg, const Dataset& train_data, const Dataset& val_data,
                     EmbeddingModel<T>& model, TrainHooks hooks = {}) {
  DynamicSubspaceTrainer<T> trainer(cfg, model, train_data, val_data, std::move(hooks));
  trainer.run();
  return {trainer.layout(), trainer.state()};
}

/// Trains the full L2-normalized embedding on all of `data` (no cluster routing) for
/// `epochs` epochs with a fresh optimizer. The layout is not touched.
template <typename T>
void finetune_full(EmbeddingModel<T>& model, const SubspaceLayout& layout, const Dataset& data, int epochs,
                   const TrainerConfig& cfg) {
  if (layout.dim() != model.dim()) throw ConfigError("finetune_full: layout does not match the model");
  if (epochs <= 0) return;
  nn::Adam<T> adam(model.parameters(), nn::AdamOptions{cfg.lr});
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const int iters = cfg.iterations_per_epoch > 0
                        ? cfg.iterations_per_epoch
                        : static_cast<int>((data.size() + cfg.batch_size - 1) / static_cast<std::size_t>(cfg.batch_size));
  for (int ep = 1; ep <= epochs; ++ep) {
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(ep), 6));
    for (int it = 0; it < iters; ++it) {
      const auto batch = build_batch(data, all, cfg.batch_size, cfg.per_class, rng);
      std::vector<int> labels;
      for (auto i : batch) labels.push_back(data.samples[i].label);
      auto images = make_batch<T>(data, batch);
      if (cfg.augment) augment_batch(images, rng);
      const auto pass = model.forward(images);
      const auto pairs = mine_pairs(std::span<const int>(labels), cfg.pair_policy, rng);
      const auto loss = full_embedding_loss(pass.embedding, pairs, cfg.margin, true);
      if (!std::isfinite(static_cast<double>(loss.mean()))) throw TrainingDiverged("finetune_full: non-finite loss");
      model.zero_grad();
      if (loss.active > 0) {
        model.backward(loss.mean_grad());
        adam.step();
      }
    }
  }
}

}  // namespace dsl
