#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsl/core_model.hpp"

namespace dsl {

struct ClusterAssignment {
  std::vector<int> assignment;  // per row of the clustered matrix
  Mat<double> centroids;        // K x d
  double inertia = 0.0;
  int iterations = 0;
  std::vector<double> inertia_history;  // after each Lloyd update

  int k() const { return static_cast<int>(centroids.rows()); }
};

struct KMeansOptions {
  int max_iter = 100;
  double tolerance = 1e-6;  // relative inertia change
};

inline double squared_distance(const Mat<double>& a, Eigen::Index i, const Mat<double>& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

/// k-means++ seeding: returns the row indices chosen as initial centroids.
inline std::vector<Eigen::Index> kmeanspp_seeds(const Mat<double>& x, int k, std::uint64_t seed) {
  const Eigen::Index n = x.rows();
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Index> chosen;
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  chosen.push_back(first(rng));
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  while (static_cast<int>(chosen.size()) < k) {
    const Eigen::Index last = chosen.back();
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x, i, x, last));
      total += d2[i];
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2[i];
        if (r < 0.0 && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
      while (d2[pick] == 0.0 && pick > 0) --pick;
    } else {
      // Every point coincides with a centre; take the first unused row.
      for (Eigen::Index i = 0; i < n; ++i) {
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) {
          pick = i;
          break;
        }
      }
    }
    chosen.push_back(pick);
  }
  return chosen;
}

inline double compute_inertia(const Mat<double>& x, const std::vector<int>& assignment, const Mat<double>& centroids) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) s += squared_distance(x, i, centroids, assignment[i]);
  return s;
}

namespace detail {

inline void assign_nearest(const Mat<double>& x, const Mat<double>& centroids, std::vector<int>& assignment) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = squared_distance(x, i, centroids, c);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    assignment[i] = best;
  }
}

inline void update_centroids(const Mat<double>& x, const std::vector<int>& assignment, Mat<double>& centroids,
                             std::vector<int>& counts) {
  const Eigen::Index k = centroids.rows();
  centroids.setZero();
  counts.assign(static_cast<std::size_t>(k), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    centroids.row(assignment[i]) += x.row(i);
    ++counts[assignment[i]];
  }
  for (Eigen::Index c = 0; c < k; ++c) {
    if (counts[c] > 0) centroids.row(c) /= counts[c];
  }
}

/// Moves the point farthest from its centroid in the largest cluster into each empty one.
inline bool repair_empty(const Mat<double>& x, std::vector<int>& assignment, Mat<double>& centroids,
                         std::vector<int>& counts) {
  bool repaired = false;
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    if (counts[c] > 0) continue;
    const int largest = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    Eigen::Index far = -1;
    double far_d = -1.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (assignment[i] != largest) continue;
      const double d = squared_distance(x, i, centroids, largest);
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    assignment[far] = static_cast<int>(c);
    update_centroids(x, assignment, centroids, counts);
    repaired = true;
  }
  return repaired;
}

}  // namespace detail

/// Lloyd iterations from k-means++ seeding. Stops when assignments are stable,
/// the relative inertia change drops below the tolerance, or max_iter is reached.
inline ClusterAssignment kmeans(const Mat<double>& x, int k, std::uint64_t seed, KMeansOptions options = {}) {
  const Eigen::Index n = x.rows();
  if (k < 1) throw std::invalid_argument("kmeans: K must be >= 1");
  if (n < k) throw std::invalid_argument("kmeans: fewer points (" + std::to_string(n) + ") than clusters (" +
                                         std::to_string(k) + ")");
  ClusterAssignment out;
  out.centroids.resize(k, x.cols());
  const auto seeds = kmeanspp_seeds(x, k, seed);
  for (int c = 0; c < k; ++c) out.centroids.row(c) = x.row(seeds[c]);

  out.assignment.assign(static_cast<std::size_t>(n), -1);
  std::vector<int> previous, counts;
  double last_inertia = std::numeric_limits<double>::infinity();
  for (int it = 0; it < options.max_iter; ++it) {
    previous = out.assignment;
    detail::assign_nearest(x, out.centroids, out.assignment);
    detail::update_centroids(x, out.assignment, out.centroids, counts);
    detail::repair_empty(x, out.assignment, out.centroids, counts);
    const double inertia = compute_inertia(x, out.assignment, out.centroids);
    out.inertia_history.push_back(inertia);
    out.iterations = it + 1;
    const bool stable = out.assignment == previous;
    const bool flat = std::isfinite(last_inertia) &&
                      std::abs(last_inertia - inertia) <= options.tolerance * std::max(last_inertia, 1e-300);
    last_inertia = inertia;
    if (stable || flat) break;
  }
  out.inertia = compute_inertia(x, out.assignment, out.centroids);
  return out;
}

/// Best-inertia result over `restarts` seeds derived from `seed`.
inline ClusterAssignment kmeans_restarts(const Mat<double>& x, int k, std::uint64_t seed, int restarts,
                                         KMeansOptions options = {}) {
  ClusterAssignment best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    auto res = kmeans(x, k, seed * 1000003ULL + static_cast<std::uint64_t>(r), options);
    if (res.inertia < best.inertia) best = std::move(res);
  }
  return best;
}

/// Splits dataset row indices by cluster; cluster c feeds learner c.
inline std::vector<std::vector<std::size_t>> assign_groups(const ClusterAssignment& clusters, std::size_t data_size) {
  if (clusters.assignment.size() != data_size) throw std::invalid_argument("assign_groups: assignment does not cover data");
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(clusters.k()));
  for (std::size_t i = 0; i < data_size; ++i) groups.at(clusters.assignment[i]).push_back(i);
  return groups;
}

inline void write_assignment_csv(const ClusterAssignment& clusters, const Dataset& data, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "id,cluster\n";
  for (std::size_t i = 0; i < data.size(); ++i) f << data.samples[i].id << ',' << clusters.assignment[i] << '\n';
}

}  // namespace dsl
