#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsl/core_model.hpp"
#include "dsl/log.hpp"

namespace dsl {

struct MarginLossParams {
  double alpha = 0.2;  // separation margin
  double beta = 1.2;   // similar/dissimilar boundary

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("margin loss: alpha must be >= 0");
    if (!(beta > 0.0)) throw ConfigError("margin loss: beta must be > 0");
  }
};

struct Pair {
  int anchor = 0;
  int partner = 0;
  int mu = 1;  // +1 same label, -1 different
  bool operator==(const Pair&) const = default;
};

using PairSet = std::vector<Pair>;

enum class PairPolicy { all, anchor_random_negative };

inline PairPolicy parse_pair_policy(const std::string& s) {
  if (s == "all") return PairPolicy::all;
  if (s == "anchor-random-negative") return PairPolicy::anchor_random_negative;
  throw ConfigError("unknown pair policy '" + s + "'");
}

inline std::string to_string(PairPolicy p) { return p == PairPolicy::all ? "all" : "anchor-random-negative"; }

template <typename T>
T pairwise_distance(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pairwise_distance: dimension mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

/// [alpha + mu (dist - beta)]_+
template <typename T>
T margin_loss_pair(T dist, int mu, const MarginLossParams& p) {
  const T v = static_cast<T>(p.alpha) + static_cast<T>(mu) * (dist - static_cast<T>(p.beta));
  return v > T(0) ? v : T(0);
}

/// "all": every unordered pair once. "anchor-random-negative": every positive pair
/// once plus one uniformly drawn negative partner per anchor (if any exists).
template <typename Rng>
PairSet mine_pairs(std::span<const int> labels, PairPolicy policy, Rng& rng) {
  const int n = static_cast<int>(labels.size());
  PairSet pairs;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const bool same = labels[i] == labels[j];
      if (same || policy == PairPolicy::all) pairs.push_back({i, j, same ? 1 : -1});
    }
  }
  if (policy == PairPolicy::anchor_random_negative) {
    std::vector<int> negatives;
    for (int i = 0; i < n; ++i) {
      negatives.clear();
      for (int j = 0; j < n; ++j) {
        if (labels[j] != labels[i]) negatives.push_back(j);
      }
      if (negatives.empty()) continue;
      std::uniform_int_distribution<std::size_t> pick(0, negatives.size() - 1);
      pairs.push_back({i, negatives[pick(rng)], -1});
    }
  }
  return pairs;
}

/// Class-balanced batch of dataset indices drawn from `group`: batch_size / per_class
/// class picks, per_class samples each. Classes short of samples are drawn with
/// replacement. A single-class group fills the whole batch from that class (with a
/// warning unless `warn` is false).
template <typename Rng>
std::vector<std::size_t> build_batch(const Dataset& data, std::span<const std::size_t> group, int batch_size,
                                     int per_class, Rng& rng, bool warn = true) {
  if (group.empty()) throw std::invalid_argument("build_batch: empty group");
  if (batch_size < 1 || per_class < 1 || batch_size % per_class != 0) {
    throw ConfigError("build_batch: batch_size must be a positive multiple of per_class");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (auto i : group) by_class[data.samples.at(i).label].push_back(i);

  std::vector<int> classes;
  for (const auto& [c, members] : by_class) classes.push_back(c);

  // How many per_class-sized draws each class receives.
  std::map<int, int> picks;
  if (classes.size() == 1) {
    if (warn) log_warning("build_batch: group has a single class; batch holds positives only");
    picks[classes[0]] = batch_size / per_class;
  } else {
    const int wanted = batch_size / per_class;
    std::vector<int> order;
    while (static_cast<int>(order.size()) < wanted) {
      std::vector<int> round = classes;
      std::shuffle(round.begin(), round.end(), rng);
      for (int c : round) {
        if (static_cast<int>(order.size()) == wanted) break;
        order.push_back(c);
      }
    }
    for (int c : order) ++picks[c];
  }

  std::vector<std::size_t> batch;
  batch.reserve(batch_size);
  for (const auto& [c, count] : picks) {
    const auto& members = by_class[c];
    const std::size_t need = static_cast<std::size_t>(count) * per_class;
    if (members.size() >= need) {
      std::vector<std::size_t> pool = members;
      for (std::size_t k = 0; k < need; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
        std::swap(pool[k], pool[pick(rng)]);
        batch.push_back(pool[k]);
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      for (std::size_t k = 0; k < need; ++k) batch.push_back(members[pick(rng)]);
    }
  }
  return batch;
}

template <typename T>
struct LearnerLoss {
  T sum = 0;
  std::size_t pairs = 0;   // mined pairs
  std::size_t active = 0;  // pairs with a positive hinge
  Mat<T> grad;             // d(sum)/d(raw embedding), N x d; empty unless requested

  /// Mean over active pairs; 0 when nothing is active.
  T mean() const { return active ? sum / static_cast<T>(active) : T(0); }
  Mat<T> mean_grad() const { return active ? Mat<T>(grad / static_cast<T>(active)) : Mat<T>(grad * T(0)); }
};

/// Margin loss summed over `pairs`, with distances taken between the L2-normalized
/// restrictions of the raw embeddings to `coords`.
template <typename T>
LearnerLoss<T> margin_loss_on_coords(const Mat<T>& embeddings, std::span<const int> coords, const PairSet& pairs,
                                     const MarginLossParams& params, bool with_grad) {
  params.validate();
  const Eigen::Index n = embeddings.rows();
  const Eigen::Index k = static_cast<Eigen::Index>(coords.size());
  Mat<T> raw(n, k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < k; ++j) raw(i, j) = embeddings(i, coords[j]);
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = raw.rowwise().norm();
  Mat<T> unit(n, k);
  for (Eigen::Index i = 0; i < n; ++i) unit.row(i) = raw.row(i) / (norms(i) + static_cast<T>(kNormEpsilon));

  LearnerLoss<T> out;
  out.pairs = pairs.size();
  Mat<T> d_unit;
  if (with_grad) d_unit = Mat<T>::Zero(n, k);
  for (const auto& p : pairs) {
    if (p.anchor == p.partner) throw std::invalid_argument("margin loss: pair with identical indices");
    const auto diff = (unit.row(p.anchor) - unit.row(p.partner)).eval();
    const T dist = diff.norm();
    const T l = margin_loss_pair(dist, p.mu, params);
    if (l <= T(0)) continue;
    out.sum += l;
    ++out.active;
    if (with_grad && dist > T(0)) {
      const auto g = (static_cast<T>(p.mu) / dist * diff).eval();
      d_unit.row(p.anchor) += g;
      d_unit.row(p.partner) -= g;
    }
  }
  if (with_grad) {
    out.grad = Mat<T>::Zero(n, embeddings.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const T nr = norms(i);
      if (nr <= T(0)) continue;
      const T s = nr + static_cast<T>(kNormEpsilon);
      const auto gu = d_unit.row(i);
      const T proj = raw.row(i).dot(gu);
      for (Eigen::Index j = 0; j < k; ++j) {
        out.grad(i, coords[j]) = gu(j) / s - raw(i, j) * proj / (nr * s * s);
      }
    }
  }
  return out;
}

/// Eq.-4 style loss for learner k: sum of pair hinges on learner k's sub-embeddings.
template <typename T>
LearnerLoss<T> learner_loss_batch(const Mat<T>& embeddings, const SubspaceLayout& layout, int k,
                                  const PairSet& pairs, const MarginLossParams& params, bool with_grad = false) {
  if (embeddings.cols() != layout.dim()) throw ConfigError("learner_loss_batch: embedding width != layout dim");
  const auto& coords = layout.slice(k);
  return margin_loss_on_coords(embeddings, std::span<const int>(coords), pairs, params, with_grad);
}

/// Same objective on the full concatenated embedding.
template <typename T>
LearnerLoss<T> full_embedding_loss(const Mat<T>& embeddings, const PairSet& pairs, const MarginLossParams& params,
                                   bool with_grad = false) {
  std::vector<int> all(static_cast<std::size_t>(embeddings.cols()));
  std::iota(all.begin(), all.end(), 0);
  return margin_loss_on_coords(embeddings, std::span<const int>(all), pairs, params, with_grad);
}

}  // namespace dsl
