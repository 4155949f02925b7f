#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "dsl/dsl.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

using namespace dsl;

namespace {

Mat<double> two_blobs() {
  Mat<double> x(6, 2);
  x << 0, 0, 0.1, 0, 0, 0.1, 10, 10, 10.1, 10, 10, 10.1;
  return x;
}

bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if ((a[i] == a[j]) != (b[i] == b[j])) return false;
  return true;
}

}  // namespace

TEST(KMeans, SingleClusterIsTheMean) {
  fixture::Rng rng(1);
  const auto x = fixture::random_matrix(rng, 20, 3);
  const auto r = kmeans(x, 1, 7);
  EXPECT_EQ(r.k(), 1);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(r.centroids(0, j), x.col(j).mean(), 1e-12);
  for (int a : r.assignment) EXPECT_EQ(a, 0);
}

TEST(KMeans, SeparatesTwoObviousGroups) {
  const auto x = two_blobs();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = kmeans(x, 2, seed);
    EXPECT_EQ(r.assignment[0], r.assignment[1]);
    EXPECT_EQ(r.assignment[0], r.assignment[2]);
    EXPECT_EQ(r.assignment[3], r.assignment[4]);
    EXPECT_EQ(r.assignment[3], r.assignment[5]);
    EXPECT_NE(r.assignment[0], r.assignment[3]);
  }
}

TEST(KMeans, MatchesPlainLloydFromTheSameSeeds) {
  fixture::Rng rng(2);
  int compared = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + trial % 3;
    const auto x = fixture::random_matrix(rng, 30, 2);
    const auto seeds = kmeanspp_seeds(x, k, static_cast<std::uint64_t>(trial));
    ASSERT_EQ(std::set<Eigen::Index>(seeds.begin(), seeds.end()).size(), static_cast<std::size_t>(k));
    const auto rows = fixture::to_rows(x);
    oracle::Rows init;
    for (auto s : seeds) init.push_back(rows[static_cast<std::size_t>(s)]);
    const auto ref = oracle::lloyd(rows, init);
    // The oracle has no empty-cluster repair; skip the rare instances where it would be needed.
    if (std::set<int>(ref.assignment.begin(), ref.assignment.end()).size() != static_cast<std::size_t>(k)) continue;
    const auto r = kmeans(x, k, static_cast<std::uint64_t>(trial));
    EXPECT_EQ(r.assignment, ref.assignment) << "trial " << trial;
    EXPECT_NEAR(r.inertia, ref.inertia, 1e-9);
    ++compared;
  }
  EXPECT_GE(compared, 90);
}

TEST(KMeans, InertiaNeverIncreasesAndBeatsRandomAssignment) {
  fixture::Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = fixture::random_matrix(rng, 40, 3);
    const int k = 1 + trial % 5;
    const auto r = kmeans(x, k, static_cast<std::uint64_t>(trial));
    for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
      EXPECT_LE(r.inertia_history[i], r.inertia_history[i - 1] + 1e-9);
    EXPECT_NEAR(r.inertia, compute_inertia(x, r.assignment, r.centroids), 1e-9);
    // Every cluster is non-empty.
    EXPECT_EQ(std::set<int>(r.assignment.begin(), r.assignment.end()).size(), static_cast<std::size_t>(k));
    // Total scatter around the global mean bounds any k >= 1 optimum from above.
    const double total = (x.rowwise() - x.colwise().mean()).squaredNorm();
    EXPECT_LE(r.inertia, total + 1e-9);
  }
}

TEST(KMeans, DeterministicForFixedSeed) {
  fixture::Rng rng(4);
  const auto x = fixture::random_matrix(rng, 50, 4);
  const auto a = kmeans_restarts(x, 3, 11, 5);
  const auto b = kmeans_restarts(x, 3, 11, 5);
  EXPECT_EQ(a.assignment, b.assignment);
  EXPECT_EQ(a.inertia, b.inertia);
  EXPECT_TRUE(a.centroids == b.centroids);
}

TEST(KMeans, RestartsKeepTheLowestInertia) {
  fixture::Rng rng(5);
  const auto x = fixture::random_matrix(rng, 40, 2);
  const auto best = kmeans_restarts(x, 4, 3, 6);
  for (int r = 0; r < 6; ++r) EXPECT_LE(best.inertia, kmeans(x, 4, 3 * 1000003ULL + r).inertia);
}

TEST(KMeans, RejectsTooFewPoints) {
  Mat<double> x(2, 2);
  x.setZero();
  EXPECT_THROW(kmeans(x, 3, 0), std::invalid_argument);
  EXPECT_THROW(kmeans(x, 0, 0), std::invalid_argument);
}

TEST(KMeans, RepairsEmptyClusterOnDuplicatePoints) {
  // Three identical points and one outlier, K=3: seeding cannot give three distinct centres.
  Mat<double> x(4, 1);
  x << 0, 0, 0, 5;
  const auto r = kmeans(x, 3, 1);
  std::vector<int> counts(3, 0);
  for (int a : r.assignment) ++counts[a];
  for (int c : counts) EXPECT_GE(c, 1);
}

TEST(KMeans, PermutingRowsPermutesThePartition) {
  fixture::Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    // Well-separated blobs so the optimum is unique.
    Mat<double> x(24, 2);
    std::normal_distribution<double> g(0.0, 0.2);
    for (int i = 0; i < 24; ++i) {
      x(i, 0) = 10.0 * (i % 3) + g(rng);
      x(i, 1) = g(rng);
    }
    std::vector<int> perm(24);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat<double> px(24, 2);
    for (int i = 0; i < 24; ++i) px.row(i) = x.row(perm[i]);
    const auto a = kmeans_restarts(x, 3, trial, 3);
    const auto b = kmeans_restarts(px, 3, trial, 3);
    std::vector<int> back(24);
    for (int i = 0; i < 24; ++i) back[perm[i]] = b.assignment[i];
    EXPECT_TRUE(same_partition(a.assignment, back));
    EXPECT_NEAR(a.inertia, b.inertia, 1e-9);
  }
}

TEST(AssignGroups, PartitionsIndices) {
  const auto r = kmeans(two_blobs(), 2, 0);
  const auto groups = assign_groups(r, 6);
  ASSERT_EQ(groups.size(), 2u);
  std::vector<std::size_t> all;
  for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_THROW(assign_groups(r, 5), std::invalid_argument);
}
