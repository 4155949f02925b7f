#pragma once

// Weakly supervised segmentation: attention maps -> binarized proxy masks ->
// UNet segmenter trained with pixel-wise binary cross-entropy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsl/core_model.hpp"
#include "dsl/dynamic_subspace.hpp"
#include "dsl/evaluation.hpp"
#include "dsl/log.hpp"
#include "dsl/nn/adam.hpp"

namespace dsl {

struct AttentionMap {
  std::string sample_id;
  int height = 0;  // feature resolution
  int width = 0;
  std::vector<float> values;
  int out_height = 0;  // input resolution
  int out_width = 0;
  std::vector<float> upsampled;
};

struct ProxyMask {
  std::string sample_id;
  Mask mask;
  double threshold_used = 0.5;
};

/// Bilinear resize with corner alignment: output pixel (0,0) and (H-1,W-1) sit on
/// the source corners, so an integer-ratio upsampling lands on every source centre.
inline std::vector<float> upsample_bilinear(std::span<const float> src, int h, int w, int out_h, int out_w) {
  if (h < 1 || w < 1 || out_h < 1 || out_w < 1) throw std::invalid_argument("upsample_bilinear: empty grid");
  if (src.size() != static_cast<std::size_t>(h) * w) throw std::invalid_argument("upsample_bilinear: size mismatch");
  std::vector<float> out(static_cast<std::size_t>(out_h) * out_w);
  const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
  for (int y = 0; y < out_h; ++y) {
    const double fy = y * sy;
    const int y0 = std::min(static_cast<int>(fy), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = x * sx;
      const int x0 = std::min(static_cast<int>(fx), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      const double top = src[y0 * w + x0] * (1 - tx) + src[y0 * w + x1] * tx;
      const double bottom = src[y1 * w + x0] * (1 - tx) + src[y1 * w + x1] * tx;
      out[static_cast<std::size_t>(y) * out_w + x] = static_cast<float>(std::clamp(top * (1 - ty) + bottom * ty, 0.0, 1.0));
    }
  }
  return out;
}

inline AttentionMap make_attention_map(std::string id, std::vector<float> values, int h, int w, int out_h, int out_w) {
  AttentionMap m;
  m.sample_id = std::move(id);
  m.height = h;
  m.width = w;
  m.values = std::move(values);
  m.out_height = out_h;
  m.out_width = out_w;
  m.upsampled = upsample_bilinear(m.values, h, w, out_h, out_w);
  return m;
}

/// One attention map per sample, at feature resolution and upsampled to the image size.
template <typename T>
std::vector<AttentionMap> extract_attention(const EmbeddingModel<T>& model, const Dataset& data,
                                            std::size_t chunk = 64) {
  std::vector<AttentionMap> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t stop = std::min(data.size(), start + chunk);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto pass = model.infer(make_batch<T>(data, idx));
    const auto& a = pass.attention;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& rec = data.samples[idx[i]];
      const T* p = a.sample(static_cast<int>(i));
      out.push_back(make_attention_map(rec.id, std::vector<float>(p, p + a.plane_size()), a.h(), a.w(),
                                       rec.image.height, rec.image.width));
    }
  }
  return out;
}

/// Foreground where the upsampled map is strictly greater than `threshold`.
inline ProxyMask binarize(const AttentionMap& map, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("binarize: threshold must lie in (0,1)");
  ProxyMask p;
  p.sample_id = map.sample_id;
  p.threshold_used = threshold;
  p.mask = Mask(map.out_height, map.out_width);
  for (std::size_t i = 0; i < map.upsampled.size(); ++i) p.mask.data[i] = map.upsampled[i] > threshold ? 1 : 0;
  return p;
}

inline std::vector<ProxyMask> binarize(const std::vector<AttentionMap>& maps, double threshold) {
  std::vector<ProxyMask> out;
  out.reserve(maps.size());
  for (const auto& m : maps) out.push_back(binarize(m, threshold));
  return out;
}

inline std::vector<double> default_threshold_grid() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

struct ThresholdSweep {
  std::vector<double> grid;
  std::vector<double> mean_dice;  // per grid entry
  double best = 0.0;
  double best_dice = 0.0;
};

/// Grid value maximizing the mean Dice between binarized maps and ground truth.
/// Ties go to the smaller threshold.
inline ThresholdSweep select_threshold(const std::vector<AttentionMap>& maps, const std::vector<Mask>& gt,
                                       std::vector<double> grid = default_threshold_grid()) {
  if (grid.empty()) throw std::invalid_argument("select_threshold: empty grid");
  if (maps.size() != gt.size() || maps.empty()) throw std::invalid_argument("select_threshold: maps/masks mismatch");
  std::sort(grid.begin(), grid.end());
  ThresholdSweep s;
  s.grid = grid;
  s.best_dice = -1.0;
  for (double t : grid) {
    double total = 0.0;
    for (std::size_t i = 0; i < maps.size(); ++i) total += dice(binarize(maps[i], t).mask, gt[i]);
    const double mean = total / static_cast<double>(maps.size());
    s.mean_dice.push_back(mean);
    if (mean > s.best_dice) {
      s.best_dice = mean;
      s.best = t;
    }
  }
  return s;
}

inline constexpr double kBceEpsilon = 1e-7;

/// Mean over pixels of -[t log p + (1-t) log(1-p)], with p clamped to [eps, 1-eps].
template <typename T>
double bce_loss(std::span<const T> predictions, std::span<const std::uint8_t> targets) {
  if (predictions.size() != targets.size() || predictions.empty()) throw std::invalid_argument("bce_loss: shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = std::clamp(static_cast<double>(predictions[i]), kBceEpsilon, 1.0 - kBceEpsilon);
    total -= targets[i] ? std::log(p) : std::log(1.0 - p);
  }
  return total / static_cast<double>(predictions.size());
}

/// d(bce_loss)/d(prediction); zero where the clamp is active.
template <typename T>
std::vector<T> bce_grad(std::span<const T> predictions, std::span<const std::uint8_t> targets) {
  if (predictions.size() != targets.size() || predictions.empty()) throw std::invalid_argument("bce_grad: shape mismatch");
  const double n = static_cast<double>(predictions.size());
  std::vector<T> g(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = predictions[i];
    if (p < kBceEpsilon || p > 1.0 - kBceEpsilon) {
      g[i] = T(0);
      continue;
    }
    g[i] = static_cast<T>((targets[i] ? -1.0 / p : 1.0 / (1.0 - p)) / n);
  }
  return g;
}

namespace detail {

/// conv3x3 -> BN -> ReLU, twice.
template <typename T>
class DoubleConv {
 public:
  DoubleConv() = default;
  template <typename Rng>
  DoubleConv(const std::string& name, int in, int out, Rng& rng)
      : c1_(name + ".conv1", in, out, 3, 1, 1),
        c2_(name + ".conv2", out, out, 3, 1, 1),
        n1_(name + ".bn1", out),
        n2_(name + ".bn2", out) {
    c1_.init(rng);
    c2_.init(rng);
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    auto h = nn::ReLU<T>::infer(n1_.infer(c1_.infer(x)));
    return nn::ReLU<T>::infer(n2_.infer(c2_.infer(h)));
  }
  Tensor<T> forward(const Tensor<T>& x) {
    auto h = r1_.forward(n1_.forward(c1_.forward(x)));
    return r2_.forward(n2_.forward(c2_.forward(h)));
  }
  Tensor<T> backward(Tensor<T> g) {
    g = c2_.backward(n2_.backward(r2_.backward(std::move(g))));
    return c1_.backward(n1_.backward(r1_.backward(std::move(g))));
  }
  void collect(std::vector<Parameter<T>*>& out) {
    c1_.collect(out);
    n1_.collect(out);
    c2_.collect(out);
    n2_.collect(out);
  }
  void buffers(std::vector<Parameter<T>*>& out) {
    n1_.buffers(out);
    n2_.buffers(out);
  }

 private:
  nn::Conv2d<T> c1_, c2_;
  nn::BatchNorm2d<T> n1_, n2_;
  nn::ReLU<T> r1_, r2_;
};

}  // namespace detail

struct SegmenterSpec {
  int input_channels = 3;
  int base_width = 32;
  int depth = 3;  // resolution levels; depth - 1 poolings
  std::uint64_t seed = 0;

  void validate() const {
    if (input_channels < 1 || base_width < 1) throw ConfigError("segmenter: channels must be positive");
    if (depth < 1 || depth > 8) throw ConfigError("segmenter: depth must be in [1, 8]");
  }
};

/// Encoder-decoder with skip connections. Level l has base_width * 2^l channels;
/// the decoder upsamples (nearest + 3x3 conv), concatenates the skip, and applies
/// a double conv. A 1x1 conv and a sigmoid give the per-pixel probability.
template <typename T>
class UNet {
 public:
  explicit UNet(SegmenterSpec spec) : spec_(spec) {
    spec_.validate();
    std::mt19937_64 rng(spec_.seed);
    int in = spec_.input_channels;
    for (int l = 0; l < spec_.depth; ++l) {
      const int c = width(l);
      enc_.emplace_back("unet.enc" + std::to_string(l), in, c, rng);
      in = c;
    }
    pools_.resize(static_cast<std::size_t>(spec_.depth - 1));
    for (int l = spec_.depth - 2; l >= 0; --l) {
      up_.emplace_back("unet.up" + std::to_string(l), width(l + 1), width(l), 3, 1, 1);
      up_.back().init(rng);
      dec_.emplace_back("unet.dec" + std::to_string(l), 2 * width(l), width(l), rng);
    }
    up_relu_.resize(up_.size());
    head_ = nn::Conv2d<T>("unet.head", width(0), 1, 1, 1, 0);
    head_.init(rng);
  }

  const SegmenterSpec& spec() const { return spec_; }

  /// Spatial dims must be divisible by 2^(depth-1).
  void check_input(const Tensor<T>& x) const {
    const int f = 1 << (spec_.depth - 1);
    if (x.c() != spec_.input_channels) throw ConfigError("segmenter: input channel mismatch");
    if (x.h() % f != 0 || x.w() % f != 0) {
      throw ConfigError("segmenter: input size must be divisible by " + std::to_string(f));
    }
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    check_input(x);
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (int l = 0; l < spec_.depth; ++l) {
      h = enc_[l].infer(h);
      if (l + 1 < spec_.depth) {
        skips.push_back(h);
        h = nn::MaxPool2<T>::infer(h);
      }
    }
    for (std::size_t j = 0; j < up_.size(); ++j) {
      h = nn::ReLU<T>::infer(up_[j].infer(nn::Upsample2<T>::infer(h)));
      h = dec_[j].infer(nn::concat_channels(skips[skips.size() - 1 - j], h));
    }
    return nn::Sigmoid<T>::infer(head_.infer(h));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    check_input(x);
    skip_channels_.clear();
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (int l = 0; l < spec_.depth; ++l) {
      h = enc_[l].forward(h);
      if (l + 1 < spec_.depth) {
        skips.push_back(h);
        h = pools_[l].forward(h);
      }
    }
    for (std::size_t j = 0; j < up_.size(); ++j) {
      h = up_relu_[j].forward(up_[j].forward(nn::Upsample2<T>::infer(h)));
      const auto& skip = skips[skips.size() - 1 - j];
      skip_channels_.push_back(skip.c());
      h = dec_[j].forward(nn::concat_channels(skip, h));
    }
    return sigmoid_.forward(head_.forward(h));
  }

  /// Takes d(loss)/d(probability map) and accumulates parameter gradients.
  void backward(const Tensor<T>& d_prob) {
    Tensor<T> g = head_.backward(sigmoid_.backward(d_prob));
    std::vector<Tensor<T>> d_skips(up_.size());
    for (std::size_t j = up_.size(); j-- > 0;) {
      auto [d_skip, d_up] = nn::split_channels(dec_[j].backward(std::move(g)), skip_channels_[j]);
      d_skips[j] = std::move(d_skip);
      g = nn::Upsample2<T>::backward(up_[j].backward(up_relu_[j].backward(std::move(d_up))));
    }
    for (int l = spec_.depth - 1; l >= 0; --l) {
      if (l + 1 < spec_.depth) {
        g = pools_[l].backward(g);
        // Level l's skip fed decoder stage depth-2-l.
        nn::add_inplace(g, d_skips[static_cast<std::size_t>(spec_.depth - 2 - l)]);
      }
      g = enc_[l].backward(std::move(g));
    }
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& e : enc_) e.collect(out);
    for (std::size_t j = 0; j < up_.size(); ++j) {
      up_[j].collect(out);
      dec_[j].collect(out);
    }
    head_.collect(out);
    return out;
  }

  std::vector<Parameter<T>*> buffers() {
    std::vector<Parameter<T>*> out;
    for (auto& e : enc_) e.buffers(out);
    for (auto& d : dec_) d.buffers(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

 private:
  int width(int level) const { return spec_.base_width << level; }

  SegmenterSpec spec_;
  std::vector<detail::DoubleConv<T>> enc_, dec_;
  std::vector<nn::MaxPool2<T>> pools_;
  std::vector<nn::Conv2d<T>> up_;
  std::vector<nn::ReLU<T>> up_relu_;
  nn::Conv2d<T> head_;
  nn::Sigmoid<T> sigmoid_;
  std::vector<int> skip_channels_;
};

/// Probability map > threshold, per image.
template <typename T>
std::vector<Mask> segment(const UNet<T>& net, const Dataset& data, double threshold = 0.5, std::size_t chunk = 16) {
  std::vector<Mask> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t stop = std::min(data.size(), start + chunk);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto prob = net.infer(make_batch<T>(data, idx));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Mask m(prob.h(), prob.w());
      const T* p = prob.sample(static_cast<int>(i));
      for (std::size_t k = 0; k < m.data.size(); ++k) m.data[k] = p[k] > static_cast<T>(threshold) ? 1 : 0;
      out.push_back(std::move(m));
    }
  }
  return out;
}

template <typename T>
Mask segment(const UNet<T>& net, const Image& image, double threshold = 0.5) {
  Dataset one;
  one.num_classes = 1;
  one.samples.push_back({"", image, 0, std::nullopt});
  return segment(net, one, threshold).front();
}

inline double mean_dice(const std::vector<Mask>& predicted, const std::vector<Mask>& truth) {
  if (predicted.size() != truth.size() || predicted.empty()) throw std::invalid_argument("mean_dice: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) total += dice(predicted[i], truth[i]);
  return total / static_cast<double>(predicted.size());
}

struct SegmenterOptions {
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-3;
  double val_fraction = 0.1;  // held-out proxy pairs when no validation set is given
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ConfigError("segmenter: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("segmenter: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("segmenter: lr must be > 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("segmenter: val_fraction must lie in [0,1)");
  }
};

struct SegmenterEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;
};

template <typename T>
struct SegmenterResult {
  UNet<T> net;
  std::vector<SegmenterEpoch> history;
  int best_epoch = 0;  // 0: the initial network was never beaten
  double best_val_dice = 0.0;
};

namespace detail {

template <typename T>
std::vector<AlignedVector<T>> snapshot(UNet<T>& net) {
  std::vector<AlignedVector<T>> s;
  for (auto* p : net.parameters()) s.push_back(p->value);
  for (auto* p : net.buffers()) s.push_back(p->value);
  return s;
}

template <typename T>
void restore(UNet<T>& net, const std::vector<AlignedVector<T>>& s) {
  std::size_t k = 0;
  for (auto* p : net.parameters()) p->value = s.at(k++);
  for (auto* p : net.buffers()) p->value = s.at(k++);
}

}  // namespace detail

/// Fits the segmenter to (image, proxy mask) pairs with BCE and keeps the weights
/// with the best validation Dice. Validation uses `val` (images with ground-truth
/// masks) when given, otherwise a held-out fraction of the proxy pairs.
template <typename T>
SegmenterResult<T> train_segmenter(const Dataset& images, const std::vector<ProxyMask>& proxies,
                                   const SegmenterSpec& spec, const SegmenterOptions& options,
                                   const Dataset* val = nullptr) {
  options.validate();
  if (images.size() != proxies.size() || images.empty()) throw ConfigError("train_segmenter: images/masks mismatch");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images.samples[i].image;
    if (proxies[i].mask.height != img.height || proxies[i].mask.width != img.width) {
      throw ConfigError("train_segmenter: proxy mask for " + images.samples[i].id + " is not at image resolution");
    }
  }
  if (std::all_of(proxies.begin(), proxies.end(), [](const ProxyMask& p) { return p.mask.count() == 0; })) {
    log_warning("train_segmenter: every proxy mask is empty; labels are degenerate");
  }

  std::mt19937_64 rng(derive_seed(options.seed, 0, 0x5e6));
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> train_idx = order, val_idx;
  Dataset val_images;
  std::vector<Mask> val_masks;
  if (val) {
    val_images = *val;
    for (const auto& s : val->samples) {
      if (!s.mask) throw ConfigError("train_segmenter: validation sample " + s.id + " has no mask");
      val_masks.push_back(*s.mask);
    }
  } else if (options.val_fraction > 0.0 && images.size() > 1) {
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(options.val_fraction * static_cast<double>(images.size()))), 1,
        images.size() - 1);
    val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(train_idx.begin(), train_idx.end());
    val_images = images.subset(val_idx);
    for (auto i : val_idx) val_masks.push_back(proxies[i].mask);
  }

  SegmenterResult<T> result{UNet<T>(spec), {}, 0, 0.0};
  UNet<T>& net = result.net;
  const bool has_val = !val_masks.empty();
  if (has_val) result.best_val_dice = mean_dice(segment(net, val_images), val_masks);
  auto best = detail::snapshot(net);

  nn::Adam<T> adam(net.parameters(), nn::AdamOptions{options.lr});
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t stop = std::min(train_idx.size(), start + static_cast<std::size_t>(options.batch_size));
      const std::span<const std::size_t> idx(train_idx.data() + start, stop - start);
      if (idx.size() < 2) continue;  // batch statistics need more than one sample
      const auto x = make_batch<T>(images, idx);
      std::vector<std::uint8_t> target;
      target.reserve(x.n() * x.plane_size());
      for (auto i : idx) target.insert(target.end(), proxies[i].mask.data.begin(), proxies[i].mask.data.end());
      adam.zero_grad();
      const auto prob = net.forward(x);
      const std::span<const T> p(prob.data(), prob.size());
      loss_sum += bce_loss(p, std::span<const std::uint8_t>(target));
      ++batches;
      const auto g = bce_grad(p, std::span<const std::uint8_t>(target));
      Tensor<T> d_prob(prob.n(), 1, prob.h(), prob.w());
      std::copy(g.begin(), g.end(), d_prob.data());
      net.backward(d_prob);
      adam.step();
    }
    SegmenterEpoch rec{epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0, 0.0};
    if (has_val) {
      rec.val_dice = mean_dice(segment(net, val_images), val_masks);
      if (rec.val_dice > result.best_val_dice) {
        result.best_val_dice = rec.val_dice;
        result.best_epoch = epoch;
        best = detail::snapshot(net);
      }
    } else {
      result.best_epoch = epoch;
      best = detail::snapshot(net);
    }
    log_info("segmenter epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.train_loss) + " val dice " +
             std::to_string(rec.val_dice));
    result.history.push_back(rec);
  }
  detail::restore(net, best);
  return result;
}

}  // namespace dsl
