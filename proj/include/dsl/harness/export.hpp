#pragma once

// Embedding dumps for external projection tools, and PNG export of attention maps
// and masks.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "json.hpp"

#include "dsl/core_model.hpp"
#include "dsl/wss.hpp"

namespace dsl::harness {

inline constexpr char kEmbeddingMagic[8] = {'D', 'S', 'L', 'E', 'M', 'B', '\0', '\0'};

/// Header: magic[8], u64 N, u32 d, u32 K, K x u32 slice sizes; then N x d float32 rows.
struct EmbeddingFile {
  std::vector<int> slice_sizes;
  Mat<float> rows;  // N x d
};

inline std::size_t embedding_header_size(std::size_t k) { return 8 + 8 + 4 + 4 + 4 * k; }

inline void write_embeddings(const std::filesystem::path& path, const Mat<float>& rows,
                             const std::vector<int>& slice_sizes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  const std::uint64_t n = static_cast<std::uint64_t>(rows.rows());
  const std::uint32_t d = static_cast<std::uint32_t>(rows.cols());
  const std::uint32_t k = static_cast<std::uint32_t>(slice_sizes.size());
  f.write(kEmbeddingMagic, sizeof kEmbeddingMagic);
  f.write(reinterpret_cast<const char*>(&n), sizeof n);
  f.write(reinterpret_cast<const char*>(&d), sizeof d);
  f.write(reinterpret_cast<const char*>(&k), sizeof k);
  for (int s : slice_sizes) {
    const std::uint32_t v = static_cast<std::uint32_t>(s);
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  f.write(reinterpret_cast<const char*>(rows.data()), static_cast<std::streamsize>(rows.size() * sizeof(float)));
  if (!f) throw std::runtime_error("short write on " + path.string());
}

inline EmbeddingFile read_embeddings(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + path.string());
  char magic[8];
  std::uint64_t n = 0;
  std::uint32_t d = 0, k = 0;
  f.read(magic, sizeof magic);
  f.read(reinterpret_cast<char*>(&n), sizeof n);
  f.read(reinterpret_cast<char*>(&d), sizeof d);
  f.read(reinterpret_cast<char*>(&k), sizeof k);
  if (!f || std::memcmp(magic, kEmbeddingMagic, sizeof magic) != 0) throw ConfigError(path.string() + ": not an embedding file");
  EmbeddingFile out;
  for (std::uint32_t i = 0; i < k; ++i) {
    std::uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof v);
    out.slice_sizes.push_back(static_cast<int>(v));
  }
  out.rows.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  f.read(reinterpret_cast<char*>(out.rows.data()), static_cast<std::streamsize>(out.rows.size() * sizeof(float)));
  if (!f) throw ConfigError(path.string() + ": truncated embedding rows");
  return out;
}

/// Raw (unnormalized) embeddings of `data` plus an id/label CSV next to `path`.
template <typename T>
void export_embeddings(const EmbeddingModel<T>& model, const SubspaceLayout& layout, const Dataset& data,
                       const std::filesystem::path& path) {
  if (layout.dim() != model.dim()) throw ConfigError("export_embeddings: layout does not match the model");
  const Mat<float> rows = embed_dataset(model, data).template cast<float>();
  write_embeddings(path, rows, layout.slice_sizes());
  std::ofstream csv(path.string() + ".csv");
  if (!csv) throw std::runtime_error("cannot write " + path.string() + ".csv");
  csv << "row,id,label,class\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.samples[i];
    csv << i << ',' << s.id << ',' << s.label << ','
        << (static_cast<std::size_t>(s.label) < data.class_names.size() ? data.class_names[s.label] : "") << '\n';
  }
}

/// File-system safe version of a sample id.
inline std::string file_stem(const std::string& id) {
  std::string out = id;
  for (char& c : out) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) c = '_';
  }
  return out;
}

/// 16-bit grayscale PNG, value = round(p * 65535).
inline void write_probability_png(const std::filesystem::path& path, std::span<const float> values, int h, int w) {
  cv::Mat m(h, w, CV_16UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double p = std::clamp(static_cast<double>(values[static_cast<std::size_t>(y) * w + x]), 0.0, 1.0);
      m.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(std::lround(p * 65535.0));
    }
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write " + path.string());
}

inline std::vector<float> read_probability_png(const std::filesystem::path& path, int& h, int& w) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty() || m.type() != CV_16UC1) throw ConfigError(path.string() + ": not a 16-bit grayscale PNG");
  h = m.rows;
  w = m.cols;
  std::vector<float> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out[static_cast<std::size_t>(y) * w + x] = m.at<std::uint16_t>(y, x) / 65535.f;
  return out;
}

/// 8-bit PNG with foreground 255, background 0.
inline void write_mask_png(const std::filesystem::path& path, const Mask& mask) {
  cv::Mat m(mask.height, mask.width, CV_8UC1);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) m.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write " + path.string());
}

/// Upsampled maps as <dir>/<id>.png plus <dir>/attention.json listing ids and sizes.
inline void write_attention_maps(const std::filesystem::path& dir, const std::vector<AttentionMap>& maps) {
  std::filesystem::create_directories(dir);
  nlohmann::json side = nlohmann::json::array();
  for (const auto& m : maps) {
    const std::string file = file_stem(m.sample_id) + ".png";
    write_probability_png(dir / file, m.upsampled, m.out_height, m.out_width);
    side.push_back({{"id", m.sample_id},
                    {"file", file},
                    {"feature_size", {m.height, m.width}},
                    {"image_size", {m.out_height, m.out_width}}});
  }
  std::ofstream f(dir / "attention.json");
  f << nlohmann::json{{"encoding", "uint16 = round(p * 65535)"}, {"maps", side}}.dump(2) << '\n';
}

}  // namespace dsl::harness
