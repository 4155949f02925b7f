#pragma once

// Hand-rolled generators and tiny models/datasets shared by the unit tests.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dsl/dsl.hpp"
#include "dsl/harness/synthetic.hpp"

namespace fixture {

using Rng = std::mt19937_64;

inline std::vector<int> random_labels(Rng& rng, std::size_t n, int classes) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> out(n);
  for (auto& v : out) v = u(rng);
  return out;
}

inline dsl::Mat<double> random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  dsl::Mat<double> m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = g(rng);
  return m;
}

inline std::vector<std::vector<double>> to_rows(const dsl::Mat<double>& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) out[i].push_back(m(i, j));
  return out;
}

inline dsl::Mask random_mask(Rng& rng, int h, int w, double p) {
  std::bernoulli_distribution b(p);
  dsl::Mask m(h, w);
  for (auto& v : m.data) v = b(rng) ? 1 : 0;
  return m;
}

/// Small 8x8-input network: two stride-2 convs give a 2x2 map.
inline dsl::ModelSpec tiny_spec(int d = 6, std::uint64_t seed = 3, int input = 8) {
  dsl::ModelSpec s;
  s.input_channels = 3;
  s.input_size = input;
  s.backbone_channels = {4, 8};
  s.backbone_strides = {2, 2};
  s.attention_channels = {4, 1};
  s.embedding_dim = d;
  s.seed = seed;
  return s;
}

inline dsl::Dataset random_images(Rng& rng, std::size_t n, int size, int classes, int channels = 3) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  dsl::Dataset d;
  d.num_classes = classes;
  for (int c = 0; c < classes; ++c) d.class_names.push_back("c" + std::to_string(c));
  for (std::size_t i = 0; i < n; ++i) {
    dsl::SampleRecord s;
    s.id = "img" + std::to_string(i);
    s.label = static_cast<int>(i % static_cast<std::size_t>(classes));
    s.image = dsl::Image(channels, size, size);
    for (auto& v : s.image.data) v = u(rng);
    d.samples.push_back(std::move(s));
  }
  return d;
}

/// colour x shape blobs at 16x16.
inline dsl::harness::SyntheticSpec small_synthetic(std::size_t n, int size = 16) {
  dsl::harness::SyntheticSpec s;
  s.n_samples = n;
  s.image_size = size;
  s.blob_min = size / 3;
  s.blob_max = size * 2 / 3;
  return s;
}

inline dsl::TrainerConfig tiny_trainer(int d, int epochs) {
  dsl::TrainerConfig c;
  c.embedding_dim = d;
  c.total_epochs = epochs;
  c.finetune_epochs = 0;
  c.batch_size = 8;
  c.per_class = 2;
  c.plateau_patience = 2;
  c.lr = 1e-3;
  c.iterations_per_epoch = 4;
  c.scoring_samples = 32;
  return c;
}

/// Captures warnings emitted through the library log hook while alive.
class WarningCapture {
 public:
  WarningCapture() : saved_(dsl::log_sink()) {
    dsl::log_sink() = [this](dsl::LogLevel level, std::string_view msg) {
      if (level == dsl::LogLevel::warning) warnings.emplace_back(msg);
    };
  }
  ~WarningCapture() { dsl::log_sink() = saved_; }
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  std::vector<std::string> warnings;

 private:
  dsl::LogSink saved_;
};

}  // namespace fixture
