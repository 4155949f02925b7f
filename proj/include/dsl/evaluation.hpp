#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsl/clustering.hpp"
#include "dsl/core_model.hpp"

namespace dsl {

/// I(labels; clusters) / sqrt(H(labels) H(clusters)), natural logs; 0 if either entropy is 0.
inline double nmi(std::span<const int> labels, std::span<const int> clusters) {
  if (labels.size() != clusters.size()) throw std::invalid_argument("nmi: length mismatch");
  if (labels.empty()) throw std::invalid_argument("nmi: empty input");
  const double n = static_cast<double>(labels.size());
  std::map<int, double> pu, pv;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pu[labels[i]] += 1.0;
    pv[clusters[i]] += 1.0;
    joint[{labels[i], clusters[i]}] += 1.0;
  }
  auto entropy = [n](const std::map<int, double>& counts) {
    double h = 0.0;
    for (const auto& [_, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double hu = entropy(pu), hv = entropy(pv);
  if (hu <= 0.0 || hv <= 0.0) return 0.0;
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    mi += (c / n) * std::log(c * n / (pu[key.first] * pv[key.second]));
  }
  return std::clamp(mi / std::sqrt(hu * hv), 0.0, 1.0);
}

/// Indices of the n rows of `gallery` nearest to `query`, ascending; ties by index.
inline std::vector<std::size_t> nearest(const Mat<double>& gallery, const Eigen::RowVectorXd& query, std::size_t n,
                                        std::optional<std::size_t> exclude = std::nullopt) {
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(static_cast<std::size_t>(gallery.rows()));
  for (Eigen::Index j = 0; j < gallery.rows(); ++j) {
    if (exclude && static_cast<std::size_t>(j) == *exclude) continue;
    d.emplace_back((gallery.row(j) - query).squaredNorm(), static_cast<std::size_t>(j));
  }
  n = std::min(n, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n), d.end());
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = d[i].second;
  return out;
}

/// Fraction of rows whose k nearest other rows (Euclidean) include a same-label row.
/// A row whose class has no other member is always a miss.
inline double recall_at_k(const Mat<double>& embeddings, std::span<const int> labels, int k) {
  const auto n = static_cast<std::size_t>(embeddings.rows());
  if (labels.size() != n) throw std::invalid_argument("recall_at_k: label count mismatch");
  if (k < 1 || n <= static_cast<std::size_t>(k)) throw std::invalid_argument("recall_at_k: need N > k >= 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto nn = nearest(embeddings, embeddings.row(static_cast<Eigen::Index>(i)), static_cast<std::size_t>(k), i);
    hits += std::any_of(nn.begin(), nn.end(), [&](std::size_t j) { return labels[j] == labels[i]; }) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

/// Ranked ids of the n gallery rows nearest to `query`; distance ties resolved by id order.
inline std::vector<std::string> retrieve(const Eigen::RowVectorXd& query, const Mat<double>& gallery,
                                         const std::vector<std::string>& ids, std::size_t n) {
  if (ids.size() != static_cast<std::size_t>(gallery.rows())) throw std::invalid_argument("retrieve: id count mismatch");
  if (n > ids.size()) throw std::invalid_argument("retrieve: n exceeds gallery size");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> d(ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) d[j] = (gallery.row(static_cast<Eigen::Index>(j)) - query).squaredNorm();
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) { return d[a] != d[b] ? d[a] < d[b] : ids[a] < ids[b]; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(ids[order[i]]);
  return out;
}

/// 2|a & b| / (|a| + |b|); 1 when both masks are empty.
inline double dice(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width || a.data.size() != b.data.size()) {
    throw std::invalid_argument("dice: shape mismatch");
  }
  std::size_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    if (a.data[i] > 1 || b.data[i] > 1) throw std::invalid_argument("dice: masks must be binary");
    sa += a.data[i];
    sb += b.data[i];
    inter += a.data[i] & b.data[i];
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

struct MetricReport {
  double nmi = 0.0;
  std::map<int, double> recall;  // k -> recall@k
  std::size_t n_queries = 0;
  std::uint64_t seed = 0;
  std::string timestamp;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json recall = nlohmann::json::object();
  for (const auto& [k, v] : r.recall) recall[std::to_string(k)] = v;
  return {{"nmi", r.nmi}, {"recall", recall}, {"n_queries", r.n_queries}, {"seed", r.seed}, {"timestamp", r.timestamp}};
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.nmi = j.at("nmi").get<double>();
  for (const auto& [k, v] : j.at("recall").items()) r.recall[std::stoi(k)] = v.get<double>();
  r.n_queries = j.at("n_queries").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.timestamp = j.value("timestamp", "");
  return r;
}

inline constexpr int kEvalRestarts = 10;

/// NMI (k-means with K = class count, best of 10 restarts) and recall@{1,4} over
/// already-normalized embeddings.
inline MetricReport evaluate_embeddings(const Mat<double>& embeddings, std::span<const int> labels, int num_classes,
                                        std::uint64_t seed) {
  MetricReport r;
  r.n_queries = labels.size();
  r.seed = seed;
  r.timestamp = utc_timestamp();
  const int k = std::max(1, std::min<int>(num_classes, static_cast<int>(labels.size())));
  const auto clusters = kmeans_restarts(embeddings, k, seed, kEvalRestarts);
  r.nmi = nmi(labels, clusters.assignment);
  for (int kk : {1, 4}) {
    if (labels.size() > static_cast<std::size_t>(kk)) r.recall[kk] = recall_at_k(embeddings, labels, kk);
  }
  return r;
}

template <typename T>
MetricReport evaluate_checkpoint(const EmbeddingModel<T>& model, const Dataset& data, std::uint64_t seed) {
  const auto emb = normalized_rows(embed_dataset(model, data));
  const auto labels = data.labels();
  return evaluate_embeddings(emb, labels, data.num_classes, seed);
}

template <typename T>
MetricReport evaluate_checkpoint(const EmbeddingModel<T>& model, const SubspaceLayout& layout, const Dataset& data,
                                 std::uint64_t seed) {
  if (layout.dim() != model.dim()) throw ConfigError("evaluate_checkpoint: layout does not match the model");
  return evaluate_checkpoint(model, data, seed);
}

}  // namespace dsl
