#pragma once

// Embedding network: feature extractor -> attention module -> attentive pooling
// -> affine embedding head, plus the partition of the embedding into learner slices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsl/nn/layers.hpp"
#include "dsl/nn/tensor.hpp"

namespace dsl {

using nn::Parameter;
using nn::Tensor;

/// C x H x W float image with values in [0, 1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

/// Binary H x W mask; every value is 0 or 1.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(data.begin(), data.end(), 1)); }
  bool operator==(const Mask&) const = default;
};

struct SampleRecord {
  std::string id;
  Image image;
  int label = 0;
  std::optional<Mask> mask;  // ground truth, evaluation only
};

struct Dataset {
  std::vector<SampleRecord> samples;
  int num_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }
  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out{{}, num_classes, class_names};
    out.samples.reserve(indices.size());
    for (auto i : indices) out.samples.push_back(samples.at(i));
    return out;
  }
};

/// Throws ConfigError if a record breaks the SampleRecord invariants.
inline void validate_sample(const SampleRecord& s, int num_classes) {
  const auto& img = s.image;
  if (img.data.size() != static_cast<std::size_t>(img.channels) * img.height * img.width || img.data.empty()) {
    throw ConfigError("sample " + s.id + ": image buffer does not match its dims");
  }
  for (float v : img.data) {
    if (!(v >= 0.f && v <= 1.f)) throw ConfigError("sample " + s.id + ": image value outside [0,1]");
  }
  if (s.label < 0 || s.label >= num_classes) throw ConfigError("sample " + s.id + ": label out of range");
  if (s.mask) {
    if (s.mask->height != img.height || s.mask->width != img.width) {
      throw ConfigError("sample " + s.id + ": mask dims differ from image dims");
    }
    for (auto v : s.mask->data) {
      if (v > 1) throw ConfigError("sample " + s.id + ": mask is not binary");
    }
  }
}

/// In-place random dihedral transform per sample: horizontal flip, vertical flip and
/// (square images only) transpose, each with probability 1/2.
template <typename T, typename Rng>
void augment_batch(Tensor<T>& batch, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  const int h = batch.h(), w = batch.w();
  std::vector<T> plane(batch.plane_size());
  for (int i = 0; i < batch.n(); ++i) {
    const bool fx = coin(rng), fy = coin(rng), tr = h == w && coin(rng);
    if (!fx && !fy && !tr) continue;
    for (int c = 0; c < batch.c(); ++c) {
      T* p = batch.sample(i) + static_cast<std::size_t>(c) * batch.plane_size();
      std::copy(p, p + plane.size(), plane.begin());
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          int sy = fy ? h - 1 - y : y, sx = fx ? w - 1 - x : x;
          if (tr) std::swap(sy, sx);
          p[static_cast<std::size_t>(y) * w + x] = plane[static_cast<std::size_t>(sy) * w + sx];
        }
      }
    }
  }
}

/// Stacks the selected images into an N x C x H x W tensor.
template <typename T = float>
Tensor<T> make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const Image& first = data.samples.at(indices[0]).image;
  Tensor<T> out(static_cast<int>(indices.size()), first.channels, first.height, first.width);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Image& img = data.samples.at(indices[i]).image;
    if (img.channels != first.channels || img.height != first.height || img.width != first.width) {
      throw ConfigError("make_batch: images in a batch must share dims");
    }
    std::transform(img.data.begin(), img.data.end(), out.sample(static_cast<int>(i)),
                   [](float v) { return static_cast<T>(v); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subspace layout

/// Partition of {0..d-1} into committed learner slices plus the trainable remainder.
/// Learners are indexed 0..K-1; index K-1 is the remainder.
class SubspaceLayout {
 public:
  SubspaceLayout() = default;
  SubspaceLayout(int dim, std::vector<std::vector<int>> frozen, std::vector<int> remainder)
      : dim_(dim), frozen_(std::move(frozen)), remainder_(std::move(remainder)) {
    validate();
  }

  static SubspaceLayout single(int dim) {
    std::vector<int> all(dim);
    std::iota(all.begin(), all.end(), 0);
    return SubspaceLayout(dim, {}, std::move(all));
  }

  /// K contiguous slices whose sizes differ by at most one (larger ones first).
  static SubspaceLayout equal_split(int dim, int k) {
    if (k < 1 || k > dim) throw ConfigError("equal_split: need 1 <= K <= d");
    std::vector<std::vector<int>> slices;
    int start = 0;
    for (int i = 0; i < k; ++i) {
      const int size = dim / k + (i < dim % k ? 1 : 0);
      std::vector<int> s(size);
      std::iota(s.begin(), s.end(), start);
      start += size;
      slices.push_back(std::move(s));
    }
    std::vector<int> rem = std::move(slices.back());
    slices.pop_back();
    return SubspaceLayout(dim, std::move(slices), std::move(rem));
  }

  int dim() const { return dim_; }
  int learner_count() const { return static_cast<int>(frozen_.size()) + 1; }
  const std::vector<std::vector<int>>& frozen_slices() const { return frozen_; }
  const std::vector<int>& remainder() const { return remainder_; }

  const std::vector<int>& slice(int k) const {
    if (k < 0 || k >= learner_count()) {
      throw std::out_of_range("learner index " + std::to_string(k) + " outside [0, " +
                              std::to_string(learner_count()) + ")");
    }
    return k + 1 == learner_count() ? remainder_ : frozen_[k];
  }

  std::vector<int> slice_sizes() const {
    std::vector<int> out;
    for (const auto& s : frozen_) out.push_back(static_cast<int>(s.size()));
    out.push_back(static_cast<int>(remainder_.size()));
    return out;
  }

  /// Commits `taken` (a subset of the remainder) as the newest frozen slice.
  SubspaceLayout with_split(std::vector<int> taken) const {
    std::sort(taken.begin(), taken.end());
    std::vector<int> rest;
    std::set_difference(remainder_.begin(), remainder_.end(), taken.begin(), taken.end(), std::back_inserter(rest));
    if (rest.size() + taken.size() != remainder_.size()) {
      throw std::invalid_argument("with_split: split coordinates must come from the remainder");
    }
    auto frozen = frozen_;
    frozen.push_back(std::move(taken));
    return SubspaceLayout(dim_, std::move(frozen), std::move(rest));
  }

  /// Disjoint-cover check over {0..d-1}; non-empty slices.
  void validate() const {
    std::vector<int> seen(dim_, 0);
    auto mark = [&](const std::vector<int>& s, bool allow_empty) {
      if (s.empty() && !allow_empty) throw std::logic_error("subspace layout: empty slice");
      for (int i : s) {
        if (i < 0 || i >= dim_) throw std::logic_error("subspace layout: index outside embedding");
        if (seen[i]++) throw std::logic_error("subspace layout: slices overlap at " + std::to_string(i));
      }
    };
    for (const auto& s : frozen_) mark(s, false);
    mark(remainder_, true);
    for (int i = 0; i < dim_; ++i) {
      if (!seen[i]) throw std::logic_error("subspace layout: coordinate " + std::to_string(i) + " unassigned");
    }
  }

  bool operator==(const SubspaceLayout&) const = default;

 private:
  int dim_ = 0;
  std::vector<std::vector<int>> frozen_;
  std::vector<int> remainder_;
};

inline constexpr double kNormEpsilon = 1e-12;

/// Coordinates of `embedding` owned by learner k, without normalization.
template <typename T>
std::vector<T> raw_sub_embedding(std::span<const T> embedding, const SubspaceLayout& layout, int k) {
  const auto& idx = layout.slice(k);
  std::vector<T> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(embedding[i]);
  return out;
}

template <typename T>
void l2_normalize(std::span<T> v) {
  T n = 0;
  for (T x : v) n += x * x;
  n = std::sqrt(n) + static_cast<T>(kNormEpsilon);
  for (T& x : v) x /= n;
}

/// Learner k's coordinates, L2-normalized.
template <typename T>
std::vector<T> sub_embedding(std::span<const T> embedding, const SubspaceLayout& layout, int k) {
  if (static_cast<int>(embedding.size()) != layout.dim()) throw ConfigError("sub_embedding: dimension mismatch");
  auto v = raw_sub_embedding(embedding, layout, k);
  l2_normalize(std::span<T>(v));
  return v;
}

// ---------------------------------------------------------------------------
// Network pieces

/// Pluggable image -> (c x m x n) feature map.
template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual Tensor<T> infer(const Tensor<T>& x) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
  virtual void collect(std::vector<Parameter<T>*>& out) = 0;
  /// Non-trainable state (e.g. normalization statistics) that checkpoints must carry.
  virtual void buffers(std::vector<Parameter<T>*>&) {}
  virtual int out_channels() const = 0;
  virtual int out_size(int input_size) const = 0;
};

/// Conv3x3 (+ BatchNorm) + ReLU blocks; each block's stride sets the downsampling.
template <typename T>
class ConvBackbone final : public FeatureExtractor<T> {
 public:
  ConvBackbone(int in_channels, const std::vector<int>& channels, const std::vector<int>& strides, std::uint64_t seed,
               bool batch_norm = true)
      : batch_norm_(batch_norm) {
    if (channels.empty() || channels.size() != strides.size()) throw ConfigError("backbone: channels/strides mismatch");
    std::mt19937_64 rng(seed);
    int c = in_channels;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const std::string name = "backbone." + std::to_string(i);
      convs_.emplace_back(name, c, channels[i], 3, strides[i], 1);
      convs_.back().init(rng);
      if (batch_norm_) norms_.emplace_back(name + ".bn", channels[i]);
      c = channels[i];
    }
    relus_.resize(convs_.size());
  }

  Tensor<T> infer(const Tensor<T>& x) const override {
    Tensor<T> h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i].infer(h);
      if (batch_norm_) h = norms_[i].infer(h);
      h = nn::ReLU<T>::infer(std::move(h));
    }
    return h;
  }
  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i].forward(h);
      if (batch_norm_) h = norms_[i].forward(h);
      h = relus_[i].forward(std::move(h));
    }
    return h;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> g = dy;
    for (std::size_t i = convs_.size(); i-- > 0;) {
      g = relus_[i].backward(std::move(g));
      if (batch_norm_) g = norms_[i].backward(g);
      g = convs_[i].backward(g);
    }
    return g;
  }
  void collect(std::vector<Parameter<T>*>& out) override {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect(out);
      if (batch_norm_) norms_[i].collect(out);
    }
  }
  void buffers(std::vector<Parameter<T>*>& out) override {
    for (auto& n : norms_) n.buffers(out);
  }
  int out_channels() const override { return convs_.back().out_channels(); }
  int out_size(int input_size) const override {
    int s = input_size;
    for (const auto& c : convs_) s = c.out_size(s);
    return s;
  }

 private:
  bool batch_norm_ = true;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::BatchNorm2d<T>> norms_;
  std::vector<nn::ReLU<T>> relus_;
};

/// 3x3 convs (size-preserving) with ReLU between and a sigmoid after the last.
template <typename T>
class AttentionModule {
 public:
  AttentionModule() = default;
  AttentionModule(int in_channels, const std::vector<int>& channels, std::uint64_t seed) {
    if (in_channels < 1) throw ConfigError("attention module: c_in must be >= 1");
    if (channels.empty() || channels.back() != 1) throw ConfigError("attention module: last layer must have 1 channel");
    std::mt19937_64 rng(seed);
    int c = in_channels;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      convs_.emplace_back("attention." + std::to_string(i), c, channels[i], 3, 1, 1);
      convs_.back().init(rng);
      c = channels[i];
    }
    relus_.resize(convs_.size() - 1);
  }

  /// Channel sequence c_in -> ... -> 1.
  std::vector<int> channel_sequence() const {
    std::vector<int> out{convs_.front().in_channels()};
    for (const auto& c : convs_) out.push_back(c.out_channels());
    return out;
  }

  Tensor<T> infer(const Tensor<T>& features) const {
    Tensor<T> h = features;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i].infer(h);
      h = i + 1 < convs_.size() ? nn::ReLU<T>::infer(std::move(h)) : nn::Sigmoid<T>::infer(std::move(h));
    }
    return h;
  }
  Tensor<T> forward(const Tensor<T>& features) {
    Tensor<T> h = features;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i].forward(h);
      h = i + 1 < convs_.size() ? relus_[i].forward(h) : sigmoid_.forward(h);
    }
    return h;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> g = sigmoid_.backward(dy);
    for (std::size_t i = convs_.size(); i-- > 0;) {
      g = convs_[i].backward(g);
      if (i > 0) g = relus_[i - 1].backward(std::move(g));
    }
    return g;
  }
  void collect(std::vector<Parameter<T>*>& out) {
    for (auto& c : convs_) c.collect(out);
  }
  nn::Conv2d<T>& last_layer() { return convs_.back(); }

 private:
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::ReLU<T>> relus_;
  nn::Sigmoid<T> sigmoid_;
};

struct ModelSpec {
  int input_channels = 3;
  int input_size = 64;
  std::vector<int> backbone_channels{16, 32, 64, 128};
  std::vector<int> backbone_strides{2, 2, 2, 2};
  std::vector<int> attention_channels{128, 32, 1};
  bool batch_norm = true;
  int embedding_dim = 128;
  std::uint64_t seed = 0;
};

template <typename T>
struct ForwardPass {
  Tensor<T> features;   // N x c x m x n
  Tensor<T> attention;  // N x 1 x m x n, values in (0,1)
  Mat<T> pooled;        // N x c
  Mat<T> embedding;     // N x d
};

/// GAP(attention (.) features): the attention plane broadcast over every channel.
template <typename T>
Mat<T> attentive_pool(const Tensor<T>& features, const Tensor<T>& attention) {
  const int n = features.n(), c = features.c();
  const std::size_t plane = features.plane_size();
  Mat<T> pooled(n, c);
  for (int i = 0; i < n; ++i) {
    const T* a = attention.sample(i);
    for (int ch = 0; ch < c; ++ch) {
      const T* f = features.sample(i) + ch * plane;
      T acc = 0;
      for (std::size_t p = 0; p < plane; ++p) acc += a[p] * f[p];
      pooled(i, ch) = acc / static_cast<T>(plane);
    }
  }
  return pooled;
}

template <typename T = float>
class EmbeddingModel {
 public:
  explicit EmbeddingModel(const ModelSpec& spec)
      : spec_(spec),
        backbone_(std::make_unique<ConvBackbone<T>>(spec.input_channels, spec.backbone_channels,
                                                    spec.backbone_strides, spec.seed * 4 + 1,
                                                    spec.batch_norm)) {
    build_top();
  }

  /// Uses a caller-supplied feature extractor in place of the default backbone.
  EmbeddingModel(const ModelSpec& spec, std::unique_ptr<FeatureExtractor<T>> extractor)
      : spec_(spec), backbone_(std::move(extractor)) {
    build_top();
  }

  EmbeddingModel(const EmbeddingModel&) = delete;
  EmbeddingModel& operator=(const EmbeddingModel&) = delete;
  EmbeddingModel(EmbeddingModel&&) = default;

  const ModelSpec& spec() const { return spec_; }
  int dim() const { return spec_.embedding_dim; }
  int feature_channels() const { return backbone_->out_channels(); }
  int feature_size() const { return backbone_->out_size(spec_.input_size); }

  ForwardPass<T> infer(const Tensor<T>& images) const {
    check_input(images);
    ForwardPass<T> out;
    out.features = backbone_->infer(images);
    out.attention = attention_.infer(out.features);
    out.pooled = attentive_pool(out.features, out.attention);
    out.embedding = head_.infer(out.pooled);
    return out;
  }

  /// Training forward; caches what backward() needs.
  ForwardPass<T> forward(const Tensor<T>& images) {
    check_input(images);
    ForwardPass<T> out;
    out.features = backbone_->forward(images);
    out.attention = attention_.forward(out.features);
    out.pooled = attentive_pool(out.features, out.attention);
    out.embedding = head_.forward(out.pooled);
    cache_features_ = out.features;
    cache_attention_ = out.attention;
    return out;
  }

  /// Backpropagates d(loss)/d(embedding) through the whole network, accumulating grads.
  void backward(const Mat<T>& d_embedding) {
    const Mat<T> d_pooled = head_.backward(d_embedding);
    const Tensor<T>& f = cache_features_;
    const Tensor<T>& a = cache_attention_;
    const std::size_t plane = f.plane_size();
    const T inv = T(1) / static_cast<T>(plane);
    Tensor<T> d_features(f.n(), f.c(), f.h(), f.w());
    Tensor<T> d_attention(a.n(), 1, a.h(), a.w());
    for (int i = 0; i < f.n(); ++i) {
      const T* ai = a.sample(i);
      T* dai = d_attention.sample(i);
      for (int ch = 0; ch < f.c(); ++ch) {
        const T g = d_pooled(i, ch) * inv;
        const T* fi = f.sample(i) + ch * plane;
        T* dfi = d_features.sample(i) + ch * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          dfi[p] = g * ai[p];
          dai[p] += g * fi[p];
        }
      }
    }
    nn::add_inplace(d_features, attention_.backward(d_attention));
    backbone_->backward(d_features);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    backbone_->collect(out);
    attention_.collect(out);
    head_.collect(out);
    return out;
  }

  std::vector<Parameter<T>*> buffers() {
    std::vector<Parameter<T>*> out;
    backbone_->buffers(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  nn::Linear<T>& head() { return head_; }
  const nn::Linear<T>& head() const { return head_; }
  AttentionModule<T>& attention_module() { return attention_; }
  FeatureExtractor<T>& feature_extractor() { return *backbone_; }

 private:
  void build_top() {
    if (spec_.embedding_dim < 1) throw ConfigError("embedding dimension must be >= 1");
    if (backbone_->out_size(spec_.input_size) < 1) throw ConfigError("input too small for the backbone");
    attention_ = AttentionModule<T>(backbone_->out_channels(), spec_.attention_channels, spec_.seed * 4 + 2);
    head_ = nn::Linear<T>("head", backbone_->out_channels(), spec_.embedding_dim);
    std::mt19937_64 rng(spec_.seed * 4 + 3);
    head_.init(rng);
  }

  void check_input(const Tensor<T>& images) const {
    if (images.n() < 1) throw std::invalid_argument("forward: empty batch");
    if (images.c() != spec_.input_channels || images.h() != spec_.input_size || images.w() != spec_.input_size) {
      throw ConfigError("forward: input " + nn::shape_string(images.shape()) + " does not match model input " +
                        std::to_string(spec_.input_channels) + "x" + std::to_string(spec_.input_size) + "x" +
                        std::to_string(spec_.input_size));
    }
  }

  ModelSpec spec_;
  std::unique_ptr<FeatureExtractor<T>> backbone_;
  AttentionModule<T> attention_;
  nn::Linear<T> head_;
  Tensor<T> cache_features_, cache_attention_;
};

/// Redraws the head rows (weights and biases) that produce remainder coordinates.
/// All other parameters are left untouched.
template <typename T>
void reset_remainder(EmbeddingModel<T>& model, const SubspaceLayout& layout, std::uint64_t rng_seed) {
  if (layout.remainder().empty()) throw std::invalid_argument("reset_remainder: remainder is empty");
  std::mt19937_64 rng(rng_seed);
  model.head().init_rows(layout.remainder(), rng);
}

/// Raw (unnormalized) embeddings for the whole dataset, computed in chunks.
template <typename T>
Mat<T> embed_dataset(const EmbeddingModel<T>& model, const Dataset& data, int chunk = 64) {
  Mat<T> out(static_cast<Eigen::Index>(data.size()), model.dim());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const auto pass = model.infer(make_batch<T>(data, idx));
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(idx.size())) = pass.embedding;
  }
  return out;
}

/// Row-wise L2 normalization (with the same epsilon as sub_embedding).
template <typename T>
Mat<double> normalized_rows(const Mat<T>& m) {
  Mat<double> out = m.template cast<double>();
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= out.row(i).norm() + kNormEpsilon;
  return out;
}

}  // namespace dsl
