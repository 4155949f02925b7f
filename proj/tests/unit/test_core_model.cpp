#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dsl/dsl.hpp"
#include "support/fixtures.hpp"

using namespace dsl;

namespace {

std::vector<double> vec(std::initializer_list<double> v) { return v; }

}  // namespace

TEST(SubspaceLayout, SubEmbeddingNormalizesSliceThreeFourFive) {
  const SubspaceLayout layout(4, {{0, 1}}, {2, 3});
  const auto e = vec({3, 4, 0, 5});
  const auto s1 = sub_embedding(std::span<const double>(e), layout, 0);
  ASSERT_EQ(s1.size(), 2u);
  EXPECT_NEAR(s1[0], 0.6, 1e-12);
  EXPECT_NEAR(s1[1], 0.8, 1e-12);
  const auto rem = sub_embedding(std::span<const double>(e), layout, 1);
  EXPECT_NEAR(rem[0], 0.0, 1e-12);
  EXPECT_NEAR(rem[1], 1.0, 1e-12);
}

TEST(SubspaceLayout, SingleLearnerSubEmbeddingIsFullNormalizedVector) {
  const auto layout = SubspaceLayout::single(3);
  const auto e = vec({1, 2, 2});
  const auto s = sub_embedding(std::span<const double>(e), layout, 0);
  EXPECT_NEAR(s[0], 1.0 / 3, 1e-12);
  EXPECT_NEAR(s[1], 2.0 / 3, 1e-12);
  EXPECT_NEAR(s[2], 2.0 / 3, 1e-12);
}

TEST(SubspaceLayout, OutOfRangeLearnerThrows) {
  const auto layout = SubspaceLayout::single(4);
  const auto e = vec({1, 0, 0, 0});
  EXPECT_THROW(sub_embedding(std::span<const double>(e), layout, 1), std::out_of_range);
  EXPECT_THROW(sub_embedding(std::span<const double>(e), layout, -1), std::out_of_range);
}

TEST(SubspaceLayout, ZeroSubVectorStaysFinite) {
  const SubspaceLayout layout(3, {{0}}, {1, 2});
  const auto e = vec({0, 0, 0});
  const auto s = sub_embedding(std::span<const double>(e), layout, 1);
  for (double v : s) EXPECT_EQ(v, 0.0);
}

TEST(SubspaceLayout, RejectsOverlapsGapsAndForeignSplits) {
  EXPECT_THROW(SubspaceLayout(4, {{0, 1}}, {1, 2, 3}), std::logic_error);
  EXPECT_THROW(SubspaceLayout(4, {{0}}, {1, 2}), std::logic_error);
  EXPECT_THROW(SubspaceLayout(4, {{}}, {0, 1, 2, 3}), std::logic_error);
  const SubspaceLayout l(4, {{0}}, {1, 2, 3});
  EXPECT_THROW(l.with_split({0}), std::invalid_argument);
}

TEST(SubspaceLayout, EqualSplitIsContiguousAndBalanced) {
  const auto l = SubspaceLayout::equal_split(128, 4);
  EXPECT_EQ(l.learner_count(), 4);
  EXPECT_EQ(l.slice_sizes(), (std::vector<int>{32, 32, 32, 32}));
  const auto odd = SubspaceLayout::equal_split(10, 3);
  EXPECT_EQ(odd.slice_sizes(), (std::vector<int>{4, 3, 3}));
  EXPECT_THROW(SubspaceLayout::equal_split(3, 4), ConfigError);
}

// Property: concatenating raw sub-embeddings in slice order reproduces the
// embedding, for random partitions.
TEST(SubspaceLayout, PropertyConcatenationReproducesEmbedding) {
  fixture::Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int d = std::uniform_int_distribution<int>(1, 20)(rng);
    std::vector<int> perm(d);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto layout = SubspaceLayout::single(d);
    // Random sequence of splits taking arbitrary remainder subsets.
    while (layout.remainder().size() > 1 && std::bernoulli_distribution(0.6)(rng)) {
      auto rem = layout.remainder();
      std::shuffle(rem.begin(), rem.end(), rng);
      const auto take = std::uniform_int_distribution<std::size_t>(1, rem.size() - 1)(rng);
      layout = layout.with_split(std::vector<int>(rem.begin(), rem.begin() + static_cast<std::ptrdiff_t>(take)));
    }
    std::vector<double> e(d);
    for (auto& v : e) v = std::normal_distribution<double>()(rng);
    std::vector<double> rebuilt(d, std::nan(""));
    int total = 0;
    for (int k = 0; k < layout.learner_count(); ++k) {
      const auto part = raw_sub_embedding(std::span<const double>(e), layout, k);
      const auto& idx = layout.slice(k);
      for (std::size_t j = 0; j < idx.size(); ++j) rebuilt[idx[j]] = part[j];
      total += static_cast<int>(idx.size());
    }
    EXPECT_EQ(total, d);
    EXPECT_EQ(rebuilt, e);
  }
}

TEST(AttentionModule, ChannelSequenceAndRangeAndPadding) {
  const AttentionModule<double> att(256, {128, 32, 1}, 5);
  EXPECT_EQ(att.channel_sequence(), (std::vector<int>{256, 128, 32, 1}));
  const AttentionModule<double> small(6, {4, 1}, 5);
  fixture::Rng rng(2);
  nn::Tensor<double> x(2, 6, 8, 8);
  for (auto& v : x.values()) v = std::normal_distribution<double>(0, 3)(rng);
  const auto y = small.infer(x);
  EXPECT_EQ(y.shape(), (std::array<int, 4>{2, 1, 8, 8}));
  for (double v : y.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_THROW(AttentionModule<double>(0, {1}, 0), ConfigError);
}

TEST(AttentivePool, IdentityAndAnnihilatorAttention) {
  fixture::Rng rng(3);
  nn::Tensor<double> f(2, 3, 4, 4);
  for (auto& v : f.values()) v = std::normal_distribution<double>()(rng);
  nn::Tensor<double> ones(2, 1, 4, 4, 1.0), zeros(2, 1, 4, 4, 0.0);
  const auto p1 = attentive_pool(f, ones);
  const auto p0 = attentive_pool(f, zeros);
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 3; ++c) {
      double gap = 0;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) gap += f.at(i, c, y, x);
      EXPECT_NEAR(p1(i, c), gap / 16, 1e-12);
      EXPECT_EQ(p0(i, c), 0.0);
    }
}

TEST(AttentivePool, SaturatingAttentionApproachesLimitsMonotonically) {
  fixture::Rng rng(4);
  nn::Tensor<double> f(1, 2, 3, 3);
  for (auto& v : f.values()) v = std::abs(std::normal_distribution<double>()(rng)) + 0.1;
  const double gap = attentive_pool(f, nn::Tensor<double>(1, 1, 3, 3, 1.0))(0, 0);
  double prev_hi = -1, prev_lo = 1e9;
  for (double s : {1.0, 4.0, 16.0, 64.0}) {
    nn::Tensor<double> hi(1, 1, 3, 3), lo(1, 1, 3, 3);
    for (std::size_t p = 0; p < 9; ++p) {
      const double pre = 0.5 + 0.1 * static_cast<double>(p);
      hi.values()[p] = 1 / (1 + std::exp(-s * pre));
      lo.values()[p] = 1 / (1 + std::exp(s * pre));
    }
    const double ph = attentive_pool(f, hi)(0, 0), pl = attentive_pool(f, lo)(0, 0);
    EXPECT_GE(ph, prev_hi);
    EXPECT_LE(pl, prev_lo);
    prev_hi = ph;
    prev_lo = pl;
  }
  EXPECT_NEAR(prev_hi, gap, 1e-9);
  EXPECT_NEAR(prev_lo, 0.0, 1e-9);
}

TEST(EmbeddingModel, ForwardShapesAndAttentionRange) {
  auto spec = fixture::tiny_spec(128);
  EmbeddingModel<float> model(spec);
  fixture::Rng rng(5);
  const auto data = fixture::random_images(rng, 4, 8, 2);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto pass = model.infer(make_batch<float>(data, idx));
  EXPECT_EQ(pass.embedding.rows(), 4);
  EXPECT_EQ(pass.embedding.cols(), 128);
  EXPECT_EQ(pass.attention.shape(), (std::array<int, 4>{4, 1, 2, 2}));
  for (float v : pass.attention.values()) {
    EXPECT_GT(v, 0.f);
    EXPECT_LT(v, 1.f);
  }
}

TEST(EmbeddingModel, DefaultBackboneGivesFourByFourMapFor64Input) {
  ModelSpec spec;
  spec.embedding_dim = 8;
  EmbeddingModel<float> model(spec);
  EXPECT_EQ(model.feature_size(), 4);
  EXPECT_EQ(model.feature_channels(), 128);
}

TEST(EmbeddingModel, InputMismatchIsConfigError) {
  EmbeddingModel<float> model(fixture::tiny_spec());
  fixture::Rng rng(6);
  const auto wrong = fixture::random_images(rng, 2, 16, 2);
  const std::vector<std::size_t> idx{0, 1};
  EXPECT_THROW(model.infer(make_batch<float>(wrong, idx)), ConfigError);
}

TEST(EmbeddingModel, InferIsDeterministic) {
  EmbeddingModel<float> model(fixture::tiny_spec());
  fixture::Rng rng(7);
  const auto data = fixture::random_images(rng, 3, 8, 2);
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto a = model.infer(make_batch<float>(data, idx));
  const auto b = model.infer(make_batch<float>(data, idx));
  EXPECT_EQ(a.embedding, b.embedding);
  EXPECT_EQ(a.attention.values(), b.attention.values());
}

TEST(ResetRemainder, FrozenOutputUntouchedRemainderRedrawnDeterministically) {
  const SubspaceLayout layout(6, {{0, 2, 4}}, {1, 3, 5});
  fixture::Rng rng(8);
  const auto data = fixture::random_images(rng, 4, 8, 2);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto batch = make_batch<double>(data, idx);

  EmbeddingModel<double> a(fixture::tiny_spec()), b(fixture::tiny_spec());
  const auto before = a.infer(batch).embedding;
  reset_remainder(a, layout, 99);
  reset_remainder(b, layout, 99);
  const auto after = a.infer(batch).embedding;
  for (int i = 0; i < 4; ++i) {
    for (int c : layout.frozen_slices()[0]) EXPECT_EQ(after(i, c), before(i, c));
    for (int c : layout.remainder()) EXPECT_NE(after(i, c), before(i, c));
  }
  EXPECT_EQ(a.head().weight().value, b.head().weight().value);
  EXPECT_EQ(a.head().bias().value, b.head().bias().value);
}

TEST(ResetRemainder, EmptyRemainderRejected) {
  EmbeddingModel<double> m(fixture::tiny_spec(2));
  const SubspaceLayout layout(2, {{0}, {1}}, {});
  EXPECT_THROW(reset_remainder(m, layout, 1), std::invalid_argument);
}

TEST(SampleRecord, ValidationCatchesBrokenRecords) {
  SampleRecord s;
  s.id = "x";
  s.image = Image(1, 2, 2, 0.5f);
  s.label = 0;
  EXPECT_NO_THROW(validate_sample(s, 1));
  s.image.data[0] = 1.5f;
  EXPECT_THROW(validate_sample(s, 1), ConfigError);
  s.image.data[0] = 0.f;
  s.label = 3;
  EXPECT_THROW(validate_sample(s, 2), ConfigError);
  s.label = 0;
  s.mask = Mask(3, 3);
  EXPECT_THROW(validate_sample(s, 1), ConfigError);
  s.mask = Mask(2, 2, 2);
  EXPECT_THROW(validate_sample(s, 1), ConfigError);
}

TEST(Augment, EachSampleIsADihedralImageOfItself) {
  fixture::Rng rng(9);
  nn::Tensor<double> x(16, 2, 5, 5);
  for (auto& v : x.values()) v = std::uniform_real_distribution<double>()(rng);
  auto y = x;
  fixture::Rng aug(10);
  augment_batch(y, aug);
  int changed = 0;
  for (int i = 0; i < 16; ++i) {
    bool found = false;
    for (int t = 0; t < 8 && !found; ++t) {
      const bool fx = t & 1, fy = t & 2, tr = t & 4;
      bool same = true;
      for (int c = 0; c < 2 && same; ++c)
        for (int r = 0; r < 5 && same; ++r)
          for (int q = 0; q < 5 && same; ++q) {
            int sy = fy ? 4 - r : r, sx = fx ? 4 - q : q;
            if (tr) std::swap(sy, sx);
            same = y.at(i, c, r, q) == x.at(i, c, sy, sx);
          }
      found = same;
    }
    EXPECT_TRUE(found) << "sample " << i;
    changed += std::equal(y.sample(i), y.sample(i) + y.sample_size(), x.sample(i)) ? 0 : 1;
  }
  EXPECT_GT(changed, 0);
}

TEST(MakeBatch, RejectsMixedSizes) {
  Dataset d;
  d.num_classes = 1;
  d.samples.push_back({"a", Image(3, 4, 4), 0, std::nullopt});
  d.samples.push_back({"b", Image(3, 5, 5), 0, std::nullopt});
  const std::vector<std::size_t> idx{0, 1};
  EXPECT_THROW(make_batch<float>(d, idx), ConfigError);
  EXPECT_THROW(make_batch<float>(d, std::span<const std::size_t>()), std::invalid_argument);
}
