#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dsl/dsl.hpp"
#include "dsl/harness/synthetic.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

using namespace dsl;

namespace {

AttentionMap flat_map(const std::vector<float>& v, int h, int w) { return make_attention_map("m", v, h, w, h, w); }

std::vector<Mask> gt_of(const Dataset& d) {
  std::vector<Mask> out;
  for (const auto& s : d.samples) out.push_back(*s.mask);
  return out;
}

}  // namespace

TEST(Upsample, ConstantStaysConstant) {
  const auto up = upsample_bilinear(std::vector<float>(16, 0.7f), 4, 4, 64, 64);
  ASSERT_EQ(up.size(), 64u * 64u);
  for (float v : up) EXPECT_NEAR(v, 0.7f, 1e-6);
}

TEST(Upsample, CornersAlignAndValuesStayInRange) {
  fixture::Rng rng(1);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 2 + trial % 4, w = 2 + trial % 3, s = 1 + trial % 4;
    std::vector<float> src(static_cast<std::size_t>(h * w));
    for (auto& v : src) v = u(rng);
    const int oh = (h - 1) * s + 1, ow = (w - 1) * s + 1;
    const auto up = upsample_bilinear(src, h, w, oh, ow);
    const float lo = *std::min_element(src.begin(), src.end()), hi = *std::max_element(src.begin(), src.end());
    for (float v : up) {
      EXPECT_GE(v, lo - 1e-6f);
      EXPECT_LE(v, hi + 1e-6f);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) EXPECT_NEAR(up[(y * s) * ow + x * s], src[y * w + x], 1e-6);
  }
}

TEST(Upsample, CheckerboardMaxPoolRecoversLocalMaxima) {
  const int m = 5, s = 4, o = (m - 1) * s + 1;
  std::vector<float> src(m * m);
  for (int y = 0; y < m; ++y)
    for (int x = 0; x < m; ++x) src[y * m + x] = static_cast<float>((x + y) % 2);
  const auto up = upsample_bilinear(src, m, m, o, o);
  for (int y = 0; y < m; ++y)
    for (int x = 0; x < m; ++x) {
      float mx = 0.f;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y * s + dy, xx = x * s + dx;
          if (yy >= 0 && yy < o && xx >= 0 && xx < o) mx = std::max(mx, up[yy * o + xx]);
        }
      EXPECT_EQ(mx > 0.5f, src[y * m + x] > 0.5f) << y << "," << x;
    }
}

TEST(Binarize, StrictAtThreshold) {
  const auto p = binarize(flat_map(std::vector<float>(9, 0.5f), 3, 3), 0.5);
  EXPECT_EQ(p.mask.count(), 0u);
  EXPECT_EQ(p.threshold_used, 0.5);
  EXPECT_THROW(binarize(flat_map({0.5f}, 1, 1), 0.0), std::invalid_argument);
  EXPECT_THROW(binarize(flat_map({0.5f}, 1, 1), 1.0), std::invalid_argument);
}

TEST(Binarize, TinyThresholdKeepsSigmoidOutputs) {
  std::vector<float> v{0.01f, 0.2f, 0.99f, 1e-3f};
  EXPECT_EQ(binarize(flat_map(v, 2, 2), 1e-6).mask.count(), 4u);
}

TEST(Binarize, RaisingThresholdNeverAddsForeground) {
  fixture::Rng rng(2);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> v(36);
    for (auto& x : v) x = u(rng);
    const auto map = make_attention_map("m", v, 6, 6, 12, 12);
    Mask prev = binarize(map, 0.05).mask;
    for (double t = 0.1; t < 0.99; t += 0.05) {
      const Mask cur = binarize(map, t).mask;
      for (std::size_t i = 0; i < cur.data.size(); ++i) EXPECT_LE(cur.data[i], prev.data[i]);
      prev = cur;
    }
  }
}

TEST(SelectThreshold, PerfectMapsTieToSmallest) {
  const std::vector<float> gt_v{1, 0, 0, 1};
  Mask gt(2, 2);
  gt.data = {1, 0, 0, 1};
  const auto s = select_threshold({flat_map(gt_v, 2, 2)}, {gt});
  EXPECT_EQ(s.best, 0.1);
  EXPECT_EQ(s.best_dice, 1.0);
  for (double d : s.mean_dice) EXPECT_EQ(d, 1.0);
}

TEST(SelectThreshold, SinglePointGrid) {
  Mask gt(1, 2);
  gt.data = {1, 0};
  const auto s = select_threshold({flat_map({0.9f, 0.1f}, 1, 2)}, {gt}, {0.5});
  EXPECT_EQ(s.best, 0.5);
  EXPECT_THROW(select_threshold({flat_map({0.9f, 0.1f}, 1, 2)}, {gt}, {}), std::invalid_argument);
  EXPECT_THROW(select_threshold({}, {}), std::invalid_argument);
}

TEST(SelectThreshold, InvertedMapsOnFourByFourByHand) {
  // gt is the upper-left 2x2 block; the map is 1 - gt with graded values.
  Mask gt(4, 4);
  std::vector<float> v(16);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const bool fg = y < 2 && x < 2;
      gt.data[y * 4 + x] = fg ? 1 : 0;
      v[y * 4 + x] = fg ? 0.05f : 0.15f + 0.05f * static_cast<float>(y * 4 + x) / 15.f * 10.f;
    }
  // Foreground sits at 0.05, below every grid value, so each threshold selects a subset of
  // the background (possibly empty). Against a non-empty gt every such mask has Dice 0.
  const auto s = select_threshold({flat_map(v, 4, 4)}, {gt});
  for (double d : s.mean_dice) EXPECT_EQ(d, 0.0);
  EXPECT_EQ(s.best, 0.1);
  EXPECT_EQ(s.best_dice, 0.0);
}

TEST(SelectThreshold, MatchesExhaustiveSweepOracle) {
  fixture::Rng rng(3);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 4;
    std::vector<AttentionMap> maps;
    std::vector<Mask> gts;
    for (int i = 0; i < n; ++i) {
      std::vector<float> v(16);
      for (auto& x : v) x = u(rng);
      maps.push_back(flat_map(v, 4, 4));
      gts.push_back(fixture::random_mask(rng, 4, 4, 0.4));
    }
    const auto grid = default_threshold_grid();
    double best = -1, best_t = 0;
    for (double t : grid) {
      double total = 0;
      for (int i = 0; i < n; ++i) {
        std::vector<std::uint8_t> m(16);
        for (int k = 0; k < 16; ++k) m[k] = maps[i].upsampled[k] > t ? 1 : 0;
        total += oracle::dice(m, gts[i].data);
      }
      if (total / n > best) best = total / n, best_t = t;
    }
    const auto s = select_threshold(maps, gts);
    EXPECT_EQ(s.best, best_t);
    EXPECT_NEAR(s.best_dice, best, 1e-12);
  }
}

TEST(Bce, UniformHalfIsLnTwo) {
  const std::vector<double> p(9, 0.5);
  const std::vector<std::uint8_t> t{1, 0, 1, 0, 1, 0, 1, 0, 1};
  EXPECT_NEAR(bce_loss<double>(p, t), std::log(2.0), 1e-15);
}

TEST(Bce, ConfidentCorrectPredictionIsNearZero) {
  const std::vector<double> p{1.0, 0.0, 1.0};
  const std::vector<std::uint8_t> t{1, 0, 1};
  EXPECT_LE(bce_loss<double>(p, t), -std::log(1.0 - kBceEpsilon) + 1e-15);
  const auto g = bce_grad<double>(p, t);
  for (double v : g) EXPECT_EQ(v, 0.0);  // clamp active
}

TEST(Bce, MatchesTermwiseOracleOnRandomInstances) {
  fixture::Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(9);
    std::vector<std::uint8_t> t(9);
    std::vector<int> ti(9);
    for (int i = 0; i < 9; ++i) {
      p[i] = u(rng);
      ti[i] = t[i] = u(rng) < 0.5 ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(bce_loss<double>(p, t), oracle::bce(p, ti));
  }
  EXPECT_THROW(bce_loss<double>(std::vector<double>{0.5}, std::vector<std::uint8_t>{}), std::invalid_argument);
}

TEST(Bce, GradientMatchesCentralDifferences) {
  fixture::Rng rng(5);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> p(9);
  std::vector<std::uint8_t> t(9);
  for (int i = 0; i < 9; ++i) p[i] = u(rng), t[i] = i % 2;
  const auto g = bce_grad<double>(p, t);
  for (int i = 0; i < 9; ++i) {
    auto f = [&] { return bce_loss<double>(p, t); };
    const double num = oracle::central_diff(f, p[i], 1e-7);
    EXPECT_LE(std::abs(g[i] - num) / std::abs(num), 1e-4);
  }
}

TEST(UNet, BceGradientThroughNetworkMatchesCentralDifferences) {
  fixture::Rng rng(6);
  SegmenterSpec spec;
  spec.base_width = 2;
  spec.depth = 2;
  spec.seed = 4;
  UNet<double> net(spec);
  const auto data = fixture::random_images(rng, 2, 4, 2);
  const std::vector<std::size_t> idx{0, 1};
  const auto x = make_batch<double>(data, idx);
  std::vector<std::uint8_t> target(32);
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = (i * 7) % 3 == 0;
  auto f = [&] {
    const auto prob = net.forward(x);
    return bce_loss<double>(std::span<const double>(prob.data(), prob.size()), target);
  };
  net.zero_grad();
  const auto prob = net.forward(x);
  const auto g = bce_grad<double>(std::span<const double>(prob.data(), prob.size()), target);
  nn::Tensor<double> d(prob.n(), 1, prob.h(), prob.w());
  std::copy(g.begin(), g.end(), d.data());
  net.backward(d);
  std::vector<AlignedVector<double>> grads;
  for (auto* p : net.parameters()) grads.push_back(p->grad);
  std::size_t k = 0;
  for (auto* p : net.parameters()) {
    const auto& gp = grads[k++];
    const std::size_t step = std::max<std::size_t>(1, p->size() / 6);
    for (std::size_t i = 0; i < p->size(); i += step) {
      const double num = oracle::central_diff(f, p->value[i], 1e-6);
      const double scale = std::max({1e-4, std::abs(num), std::abs(gp[i])});
      EXPECT_LE(std::abs(gp[i] - num) / scale, 1e-4) << p->name << "[" << i << "] " << gp[i] << " vs " << num;
    }
  }
}

TEST(UNet, OutputShapeAndInputChecks) {
  SegmenterSpec spec;
  spec.base_width = 4;
  spec.depth = 3;
  UNet<float> net(spec);
  fixture::Rng rng(7);
  const auto data = fixture::random_images(rng, 2, 16, 2);
  const std::vector<std::size_t> idx{0, 1};
  const auto prob = net.infer(make_batch<float>(data, idx));
  EXPECT_EQ(prob.shape(), (std::array<int, 4>{2, 1, 16, 16}));
  for (float v : prob.values()) EXPECT_TRUE(v > 0.f && v < 1.f);
  const auto odd = fixture::random_images(rng, 1, 6, 1);
  const std::vector<std::size_t> one{0};
  EXPECT_THROW(net.infer(make_batch<float>(odd, one)), ConfigError);
  SegmenterSpec bad = spec;
  bad.depth = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Segment, DeterministicAndShaped) {
  SegmenterSpec spec;
  spec.base_width = 4;
  spec.depth = 2;
  UNet<float> net(spec);
  fixture::Rng rng(8);
  const auto data = fixture::random_images(rng, 3, 8, 2);
  const auto a = segment(net, data.samples[1].image);
  const auto b = segment(net, data.samples[1].image);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.height, 8);
  EXPECT_EQ(a.width, 8);
  EXPECT_EQ(segment(net, data).size(), 3u);
}

TEST(TrainSegmenter, ZeroEpochsReturnsInitialNetwork) {
  const auto data = harness::generate_synthetic(fixture::small_synthetic(8), 1);
  std::vector<ProxyMask> proxies;
  for (const auto& s : data.samples) proxies.push_back({s.id, *s.mask, 0.5});
  SegmenterSpec spec;
  spec.base_width = 4;
  spec.depth = 2;
  SegmenterOptions opt;
  opt.epochs = 0;
  const auto r = train_segmenter<float>(data, proxies, spec, opt);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best_epoch, 0);
  UNet<float> fresh(spec);
  EXPECT_EQ(segment(r.net, data), segment(fresh, data));
}

TEST(TrainSegmenter, WarnsOnAllEmptyProxiesAndLearnsBackground) {
  const auto data = harness::generate_synthetic(fixture::small_synthetic(32), 2);
  std::vector<ProxyMask> proxies;
  for (const auto& s : data.samples) proxies.push_back({s.id, Mask(16, 16), 0.5});
  SegmenterSpec spec;
  spec.base_width = 4;
  spec.depth = 2;
  SegmenterOptions opt;
  opt.epochs = 8;
  opt.batch_size = 8;
  opt.lr = 1e-2;
  opt.val_fraction = 0.0;
  fixture::WarningCapture cap;
  const auto r = train_segmenter<float>(data, proxies, spec, opt);
  ASSERT_EQ(cap.warnings.size(), 1u);
  double fg = 0;
  for (const auto& m : segment(r.net, data)) fg += static_cast<double>(m.count()) / m.data.size();
  EXPECT_LT(fg / static_cast<double>(data.size()), 0.01);
}

TEST(TrainSegmenter, PerfectProxiesReachHighValidationDice) {
  const auto train = harness::generate_synthetic(fixture::small_synthetic(96), 3);
  const auto val = harness::generate_synthetic(fixture::small_synthetic(24), 4);
  std::vector<ProxyMask> proxies;
  for (const auto& s : train.samples) proxies.push_back({s.id, *s.mask, 0.5});
  SegmenterSpec spec;
  spec.base_width = 8;
  spec.depth = 2;
  SegmenterOptions opt;
  opt.epochs = 15;
  opt.batch_size = 8;
  opt.lr = 3e-3;
  const auto r = train_segmenter<float>(train, proxies, spec, opt, &val);
  EXPECT_EQ(r.history.size(), 15u);
  EXPECT_GE(r.best_val_dice, 0.9);
  EXPECT_NEAR(mean_dice(segment(r.net, val), gt_of(val)), r.best_val_dice, 1e-12);
}
