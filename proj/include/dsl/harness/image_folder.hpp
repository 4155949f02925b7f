#pragma once

// Folder-per-class image datasets. Optional masks live in <root>/<mask_dir>/<class>/
// (or directly under <root>/<mask_dir>/) and are matched to images by file stem.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dsl/core_model.hpp"
#include "dsl/harness/config.hpp"
#include "dsl/log.hpp"

namespace dsl::harness {

namespace fs = std::filesystem;

struct DataSplits {
  Dataset train, val, test;
};

/// Loader thread count: DSL_NUM_WORKERS if set and positive, else 1.
inline int num_workers() {
  if (const char* v = std::getenv("DSL_NUM_WORKERS")) {
    const int n = std::atoi(v);
    if (n > 0) return n;
  }
  return 1;
}

/// Reads an image as C x size x size floats in [0,1] (RGB order for colour images).
inline std::optional<Image> read_image(const fs::path& path, int size, int channels) {
  cv::Mat m = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (m.empty()) return std::nullopt;
  if (m.rows != size || m.cols != size) cv::resize(m, m, cv::Size(size, size), 0, 0, cv::INTER_AREA);
  if (channels == 3) cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
  cv::Mat f;
  m.convertTo(f, CV_32F, m.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0);
  Image img(channels, size, size);
  for (int y = 0; y < size; ++y) {
    const float* row = f.ptr<float>(y);
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < channels; ++c) img.at(c, y, x) = std::clamp(row[x * channels + c], 0.f, 1.f);
  }
  return img;
}

/// Nonzero pixels are foreground; resized with nearest-neighbour sampling.
inline std::optional<Mask> read_mask(const fs::path& path, int size) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) return std::nullopt;
  if (m.rows != size || m.cols != size) cv::resize(m, m, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
  Mask out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) out.at(y, x) = m.at<std::uint8_t>(y, x) ? 1 : 0;
  return out;
}

namespace detail {

inline bool has_extension(const fs::path& p, const std::vector<std::string>& exts) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return std::find(exts.begin(), exts.end(), e) != exts.end();
}

inline std::map<std::string, fs::path> index_masks(const fs::path& dir, const std::vector<std::string>& exts) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && has_extension(e.path(), exts)) out.emplace(e.path().stem().string(), e.path());
  }
  return out;
}

}  // namespace detail

/// Loads every class folder under `cfg.path` and splits each class by the configured
/// fractions (stratified, shuffled with `cfg.seed`). Unreadable files are skipped.
inline DataSplits load_image_folder(const FolderData& cfg, int input_size, int channels = 3) {
  const fs::path root(cfg.path);
  if (!fs::is_directory(root)) throw ConfigError("image folder not found: " + cfg.path);
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && e.path().filename() != cfg.mask_dir) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw ConfigError("image folder has no class subdirectories: " + cfg.path);
  const auto masks = detail::index_masks(root / cfg.mask_dir, cfg.extensions);

  struct Entry {
    fs::path path;
    int label;
  };
  std::vector<std::vector<Entry>> per_class(class_dirs.size());
  std::vector<std::string> names;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    names.push_back(class_dirs[c].filename().string());
    for (const auto& e : fs::directory_iterator(class_dirs[c])) {
      if (e.is_regular_file() && detail::has_extension(e.path(), cfg.extensions)) {
        per_class[c].push_back({e.path(), static_cast<int>(c)});
      }
    }
    if (per_class[c].empty()) throw ConfigError("class folder is empty: " + class_dirs[c].string());
    std::sort(per_class[c].begin(), per_class[c].end(), [](const Entry& a, const Entry& b) { return a.path < b.path; });
  }

  // Decode everything up front, in parallel; order is fixed by the index.
  std::vector<Entry> all;
  for (const auto& v : per_class) all.insert(all.end(), v.begin(), v.end());
  std::vector<std::optional<SampleRecord>> decoded(all.size());
  const int workers = std::max(1, std::min<int>(num_workers(), static_cast<int>(all.size())));
  auto work = [&](int w) {
    for (std::size_t i = static_cast<std::size_t>(w); i < all.size(); i += static_cast<std::size_t>(workers)) {
      auto img = read_image(all[i].path, input_size, channels);
      if (!img) continue;
      SampleRecord rec;
      rec.id = names[static_cast<std::size_t>(all[i].label)] + "/" + all[i].path.stem().string();
      rec.image = std::move(*img);
      rec.label = all[i].label;
      if (auto it = masks.find(all[i].path.stem().string()); it != masks.end()) rec.mask = read_mask(it->second, input_size);
      decoded[i] = std::move(rec);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }

  DataSplits out;
  for (Dataset* d : {&out.train, &out.val, &out.test}) {
    d->num_classes = static_cast<int>(class_dirs.size());
    d->class_names = names;
  }
  std::mt19937_64 rng(cfg.seed);
  std::size_t offset = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    std::vector<SampleRecord> recs;
    for (std::size_t i = 0; i < per_class[c].size(); ++i) {
      auto& d = decoded[offset + i];
      if (d) recs.push_back(std::move(*d));
      else log_warning("skipping unreadable image " + all[offset + i].path.string());
    }
    offset += per_class[c].size();
    std::shuffle(recs.begin(), recs.end(), rng);
    const auto n = recs.size();
    const auto n_train = static_cast<std::size_t>(std::llround(cfg.split[0] * static_cast<double>(n)));
    const auto n_val = std::min(n - std::min(n, n_train),
                                static_cast<std::size_t>(std::llround(cfg.split[1] * static_cast<double>(n))));
    for (std::size_t i = 0; i < n; ++i) {
      Dataset& d = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
      d.samples.push_back(std::move(recs[i]));
    }
  }
  return out;
}

/// Writes a dataset as <dir>/<class>/<stem>.png with masks under <dir>/masks/<class>/.
inline void write_image_folder(const Dataset& data, const fs::path& dir) {
  for (const auto& s : data.samples) {
    const std::string cls = data.class_names.empty() ? std::to_string(s.label) : data.class_names.at(s.label);
    const std::string stem = s.id.substr(s.id.find_last_of('/') + 1);
    fs::create_directories(dir / cls);
    const auto& im = s.image;
    cv::Mat m(im.height, im.width, im.channels == 1 ? CV_8UC1 : CV_8UC3);
    for (int y = 0; y < im.height; ++y) {
      for (int x = 0; x < im.width; ++x) {
        for (int c = 0; c < im.channels; ++c) {
          // OpenCV stores BGR.
          const int dst_c = im.channels == 3 ? 2 - c : c;
          m.ptr<std::uint8_t>(y)[x * im.channels + dst_c] =
              static_cast<std::uint8_t>(std::lround(std::clamp(im.at(c, y, x), 0.f, 1.f) * 255.f));
        }
      }
    }
    if (!cv::imwrite((dir / cls / (stem + ".png")).string(), m)) throw std::runtime_error("cannot write image " + stem);
    if (s.mask) {
      fs::create_directories(dir / "masks" / cls);
      cv::Mat mk(s.mask->height, s.mask->width, CV_8UC1);
      for (int y = 0; y < s.mask->height; ++y)
        for (int x = 0; x < s.mask->width; ++x) mk.at<std::uint8_t>(y, x) = s.mask->at(y, x) ? 255 : 0;
      if (!cv::imwrite((dir / "masks" / cls / (stem + ".png")).string(), mk)) {
        throw std::runtime_error("cannot write mask " + stem);
      }
    }
  }
}

}  // namespace dsl::harness
