#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "dsl/dsl.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

using namespace dsl;
using nn::Tensor;

namespace {

Tensor<double> random_tensor(fixture::Rng& rng, int n, int c, int h, int w) {
  Tensor<double> t(n, c, h, w);
  for (auto& v : t.values()) v = std::normal_distribution<double>()(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

// Relative error, with an absolute floor near the round-off of a central difference
// at h = 1e-6 (conv biases ahead of batch norm have an exactly zero gradient).
void expect_close(double analytic, double numeric, const std::string& what) {
  const double scale = std::max({1e-4, std::abs(analytic), std::abs(numeric)});
  EXPECT_LE(std::abs(analytic - numeric) / scale, 1e-4) << what << ": analytic " << analytic << " numeric " << numeric;
}

}  // namespace

class ConvGrad : public ::testing::TestWithParam<std::tuple<int, int, int>> {};

TEST_P(ConvGrad, BackwardMatchesCentralDifferences) {
  const auto [kernel, stride, padding] = GetParam();
  fixture::Rng rng(1);
  nn::Conv2d<double> conv("c", 2, 3, kernel, stride, padding);
  conv.init(rng);
  auto x = random_tensor(rng, 2, 2, 5, 5);
  const auto probe_shape = conv.infer(x);
  const auto w = random_tensor(rng, probe_shape.n(), probe_shape.c(), probe_shape.h(), probe_shape.w());
  auto f = [&] { return dot(conv.infer(x), w); };

  conv.weight().zero_grad();
  conv.bias().zero_grad();
  conv.forward(x);
  const auto dx = conv.backward(w);
  for (std::size_t i = 0; i < x.size(); ++i) {
    expect_close(dx.values()[i], oracle::central_diff(f, x.values()[i], 1e-6), "dx");
  }
  for (std::size_t i = 0; i < conv.weight().size(); ++i) {
    expect_close(conv.weight().grad[i], oracle::central_diff(f, conv.weight().value[i], 1e-6), "dw");
  }
  for (std::size_t i = 0; i < conv.bias().size(); ++i) {
    expect_close(conv.bias().grad[i], oracle::central_diff(f, conv.bias().value[i], 1e-6), "db");
  }
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvGrad,
                         ::testing::Values(std::make_tuple(3, 1, 1), std::make_tuple(3, 2, 1), std::make_tuple(1, 1, 0),
                                           std::make_tuple(3, 2, 0)));

TEST(Conv2d, OutputSizeFormula) {
  nn::Conv2d<float> c("c", 1, 1, 3, 2, 1);
  EXPECT_EQ(c.out_size(64), 32);
  EXPECT_EQ(c.out_size(5), 3);
}

TEST(BatchNorm2d, TrainingBackwardMatchesCentralDifferences) {
  fixture::Rng rng(2);
  nn::BatchNorm2d<double> bn("bn", 3);
  auto x = random_tensor(rng, 4, 3, 2, 3);
  const auto w = random_tensor(rng, 4, 3, 2, 3);
  auto f = [&] {
    nn::BatchNorm2d<double> copy = bn;
    return dot(copy.forward(x), w);
  };
  std::vector<nn::Parameter<double>*> ps;
  bn.collect(ps);
  for (std::size_t c = 0; c < 3; ++c) {
    ps[0]->value[c] = 0.5 + 0.3 * static_cast<double>(c);
    ps[1]->value[c] = -0.2 * static_cast<double>(c);
  }
  nn::BatchNorm2d<double> run = bn;
  run.forward(x);
  const auto dx = run.backward(w);
  std::vector<nn::Parameter<double>*> rps;
  run.collect(rps);
  for (std::size_t i = 0; i < x.size(); ++i) expect_close(dx.values()[i], oracle::central_diff(f, x.values()[i], 1e-5), "dx");
  for (std::size_t c = 0; c < 3; ++c) {
    expect_close(rps[0]->grad[c], oracle::central_diff(f, ps[0]->value[c], 1e-6), "dgamma");
    expect_close(rps[1]->grad[c], oracle::central_diff(f, ps[1]->value[c], 1e-6), "dbeta");
  }
}

TEST(BatchNorm2d, RunningStatisticsAndInference) {
  nn::BatchNorm2d<double> bn("bn", 1, 0.5);
  Tensor<double> x(2, 1, 1, 2);
  x.values() = {1, 3, 5, 7};  // mean 4, biased var 5, unbiased 20/3
  const auto y = bn.forward(x);
  double s = 0, q = 0;
  for (double v : y.values()) s += v, q += v * v;
  EXPECT_NEAR(s, 0.0, 1e-12);
  EXPECT_NEAR(q / 4, 5.0 / (5.0 + 1e-5), 1e-9);
  std::vector<nn::Parameter<double>*> buf;
  bn.buffers(buf);
  EXPECT_NEAR(buf[0]->value[0], 2.0, 1e-12);
  EXPECT_NEAR(buf[1]->value[0], 0.5 + 0.5 * 20.0 / 3.0, 1e-12);
  const auto yi = bn.infer(x);
  EXPECT_NEAR(yi.values()[0], (1 - 2.0) / std::sqrt(buf[1]->value[0] + 1e-5), 1e-12);
}

TEST(Linear, BackwardMatchesCentralDifferences) {
  fixture::Rng rng(3);
  nn::Linear<double> lin("l", 4, 3);
  lin.init(rng);
  Mat<double> x = fixture::random_matrix(rng, 5, 4);
  const Mat<double> w = fixture::random_matrix(rng, 5, 3);
  auto f = [&] { return (lin.infer(x).array() * w.array()).sum(); };
  lin.weight().zero_grad();
  lin.bias().zero_grad();
  lin.forward(x);
  const Mat<double> dx = lin.backward(w);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) expect_close(dx(i, j), oracle::central_diff(f, x(i, j), 1e-6), "dx");
  for (std::size_t i = 0; i < lin.weight().size(); ++i)
    expect_close(lin.weight().grad[i], oracle::central_diff(f, lin.weight().value[i], 1e-6), "dw");
}

TEST(Linear, InitRowsTouchesOnlyNamedRows) {
  fixture::Rng rng(4);
  nn::Linear<double> lin("l", 3, 4);
  lin.init(rng);
  const auto before = lin.weight().value;
  const auto bias = lin.bias().value;
  lin.init_rows({1, 3}, rng);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) {
      const auto i = static_cast<std::size_t>(r * 3 + c);
      if (r == 0 || r == 2) EXPECT_EQ(lin.weight().value[i], before[i]);
      else EXPECT_NE(lin.weight().value[i], before[i]);
    }
  EXPECT_EQ(lin.bias().value[0], bias[0]);
  EXPECT_EQ(lin.bias().value[2], bias[2]);
  // Fan-in uniform bound 1/sqrt(in).
  for (double v : lin.weight().value) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(3.0));
}

TEST(PoolingAndUpsampling, BackwardMatchesCentralDifferences) {
  fixture::Rng rng(5);
  auto x = random_tensor(rng, 2, 2, 4, 4);
  const auto wp = random_tensor(rng, 2, 2, 2, 2);
  nn::MaxPool2<double> pool;
  pool.forward(x);
  const auto dxp = pool.backward(wp);
  auto fp = [&] { return dot(nn::MaxPool2<double>::infer(x), wp); };
  for (std::size_t i = 0; i < x.size(); ++i) expect_close(dxp.values()[i], oracle::central_diff(fp, x.values()[i], 1e-6), "pool");

  const auto wu = random_tensor(rng, 2, 2, 8, 8);
  const auto dxu = nn::Upsample2<double>::backward(wu);
  auto fu = [&] { return dot(nn::Upsample2<double>::infer(x), wu); };
  for (std::size_t i = 0; i < x.size(); ++i) expect_close(dxu.values()[i], oracle::central_diff(fu, x.values()[i], 1e-6), "up");
}

// Whole network: learner loss through head, pooling, attention and backbone.
TEST(EmbeddingModel, LearnerLossGradientMatchesCentralDifferences) {
  fixture::Rng rng(6);
  EmbeddingModel<double> model(fixture::tiny_spec(6));
  const auto data = fixture::random_images(rng, 6, 8, 3);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  const auto x = make_batch<double>(data, idx);
  const auto labels = data.labels();
  std::mt19937_64 prng(0);
  const auto pairs = mine_pairs(std::span<const int>(labels), PairPolicy::all, prng);
  const SubspaceLayout layout(6, {{0, 3}}, {1, 2, 4, 5});

  for (int k = 0; k < 2; ++k) {
    auto f = [&] { return learner_loss_batch(model.forward(x).embedding, layout, k, pairs, MarginLossParams{}).sum; };
    model.zero_grad();
    const auto pass = model.forward(x);
    const auto loss = learner_loss_batch(pass.embedding, layout, k, pairs, MarginLossParams{}, true);
    model.backward(loss.grad);
    std::vector<std::pair<std::string, AlignedVector<double>>> grads;
    for (auto* p : model.parameters()) grads.emplace_back(p->name, p->grad);
    std::size_t pi = 0;
    for (auto* p : model.parameters()) {
      const auto& g = grads[pi++].second;
      const std::size_t step = std::max<std::size_t>(1, p->size() / 12);
      for (std::size_t i = 0; i < p->size(); i += step) {
        expect_close(g[i], oracle::central_diff(f, p->value[i], 1e-6), p->name + "[" + std::to_string(i) + "]");
      }
    }
    // Head rows outside learner k receive exactly zero gradient.
    const auto& own = layout.slice(k);
    const auto& hw = model.head().weight();
    for (int r = 0; r < 6; ++r) {
      if (std::find(own.begin(), own.end(), r) != own.end()) continue;
      for (int c = 0; c < model.head().in_features(); ++c) EXPECT_EQ(hw.grad[static_cast<std::size_t>(r) * model.head().in_features() + c], 0.0);
      EXPECT_EQ(model.head().bias().grad[r], 0.0);
    }
  }
}

TEST(Tensor, StorageMeetsEigenAlignment) {
  // Eigen's vectorised loops split at the first aligned element, so storage
  // alignment must not depend on what the heap held before.
  std::vector<std::vector<char>> clutter;
  for (int i = 1; i < 40; ++i) {
    clutter.emplace_back(static_cast<std::size_t>(i * 3));
    Tensor<float> t(1, i, 3, 1);
    nn::Parameter<double> p("p", {i, 5});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data()) % EIGEN_MAX_ALIGN_BYTES, 0u);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(p.value.data()) % EIGEN_MAX_ALIGN_BYTES, 0u);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(p.grad.data()) % EIGEN_MAX_ALIGN_BYTES, 0u);
  }
}
