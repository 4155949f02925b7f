#pragma once

// Multi-seed experiment driver: data -> train -> evaluate -> (optional) WSS, with
// per-seed run directories and a mean/std summary.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsl/clustering.hpp"
#include "dsl/dynamic_subspace.hpp"
#include "dsl/evaluation.hpp"
#include "dsl/harness/checkpoint.hpp"
#include "dsl/harness/config.hpp"
#include "dsl/harness/export.hpp"
#include "dsl/harness/image_folder.hpp"
#include "dsl/harness/plots.hpp"
#include "dsl/harness/synthetic.hpp"
#include "dsl/log.hpp"
#include "dsl/wss.hpp"

namespace dsl::harness {

namespace fs = std::filesystem;

inline DataSplits synthetic_splits(const SyntheticData& s) {
  SyntheticSpec spec = s.spec;
  DataSplits out;
  spec.n_samples = s.n_train;
  out.train = generate_synthetic(spec, derive_seed(s.seed, 1));
  spec.n_samples = s.n_val;
  out.val = generate_synthetic(spec, derive_seed(s.seed, 2));
  spec.n_samples = s.n_test;
  out.test = generate_synthetic(spec, derive_seed(s.seed, 3));
  return out;
}

inline DataSplits load_data(const ExperimentConfig& cfg) {
  if (cfg.source == DataSource::synthetic) return synthetic_splits(cfg.synthetic);
  auto d = load_image_folder(cfg.folder, cfg.model.input_size, cfg.model.input_channels);
  for (const Dataset* ds : {&d.train, &d.val, &d.test}) {
    if (ds->size() < 2) throw ConfigError("image folder split too small; every split needs at least 2 images");
  }
  return d;
}

/// Directory name for a training mode, e.g. "dynamic" or "static-K1".
inline std::string mode_tag(const TrainerConfig& t) {
  return t.mode == TrainMode::dynamic ? "dynamic" : "static-K" + std::to_string(t.static_k);
}

struct WssResult {
  ThresholdSweep sweep;
  double raw_val_dice = 0.0;      // binarized attention maps vs ground truth
  double refined_val_dice = 0.0;  // segmenter predictions vs ground truth
  double raw_test_dice = 0.0;
  double refined_test_dice = 0.0;
  std::vector<SegmenterEpoch> segmenter_history;
  int best_epoch = 0;
};

inline nlohmann::json to_json(const WssResult& w) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : w.segmenter_history) {
    hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_dice", e.val_dice}});
  }
  return {{"threshold", w.sweep.best},
          {"grid", w.sweep.grid},
          {"grid_mean_dice", w.sweep.mean_dice},
          {"raw_val_dice", w.raw_val_dice},
          {"refined_val_dice", w.refined_val_dice},
          {"raw_test_dice", w.raw_test_dice},
          {"refined_test_dice", w.refined_test_dice},
          {"segmenter_best_epoch", w.best_epoch},
          {"segmenter_history", hist}};
}

inline std::vector<Mask> ground_truth(const Dataset& d) {
  std::vector<Mask> out;
  for (const auto& s : d.samples) {
    if (!s.mask) throw ConfigError("sample " + s.id + " has no ground-truth mask");
    out.push_back(*s.mask);
  }
  return out;
}

inline bool all_have_masks(const Dataset& d) {
  return !d.empty() && std::all_of(d.samples.begin(), d.samples.end(), [](const SampleRecord& s) { return s.mask.has_value(); });
}

inline std::vector<Mask> masks_of(const std::vector<ProxyMask>& p) {
  std::vector<Mask> out;
  for (const auto& m : p) out.push_back(m.mask);
  return out;
}

/// Threshold sweep on validation maps, proxy masks for training images, segmenter
/// fit, and Dice of raw maps versus segmenter on validation and test.
template <typename T>
WssResult run_wss(const EmbeddingModel<T>& model, const DataSplits& data, const WssConfig& cfg, std::uint64_t seed,
                  const fs::path& dir = {}) {
  if (!all_have_masks(data.val)) throw ConfigError("wss: validation images need ground-truth masks");
  WssResult r;
  const auto val_gt = ground_truth(data.val);
  const auto val_maps = extract_attention(model, data.val);
  r.sweep = select_threshold(val_maps, val_gt, cfg.grid);
  r.raw_val_dice = r.sweep.best_dice;

  Dataset train = data.train;
  if (cfg.max_train > 0 && train.size() > cfg.max_train) train.samples.resize(cfg.max_train);
  const auto proxies = binarize(extract_attention(model, train), r.sweep.best);

  SegmenterSpec spec = cfg.segmenter;
  spec.input_channels = model.spec().input_channels;
  spec.seed = derive_seed(seed, 0, 0x5e9);
  SegmenterOptions opts = cfg.options;
  opts.seed = derive_seed(seed, 1, 0x5e9);
  auto seg = train_segmenter<T>(train, proxies, spec, opts, &data.val);
  r.segmenter_history = seg.history;
  r.best_epoch = seg.best_epoch;
  r.refined_val_dice = mean_dice(segment(seg.net, data.val), val_gt);
  if (all_have_masks(data.test)) {
    const auto test_gt = ground_truth(data.test);
    r.raw_test_dice = mean_dice(masks_of(binarize(extract_attention(model, data.test), r.sweep.best)), test_gt);
    r.refined_test_dice = mean_dice(segment(seg.net, data.test), test_gt);
  }

  if (!dir.empty()) {
    fs::create_directories(dir);
    std::ofstream(dir / "wss.json") << to_json(r).dump(2) << '\n';
    write_line_chart(dir / "dice_vs_threshold.svg", "Dice of initial maps", "T_s", "mean Dice",
                     {{"validation", r.sweep.grid, r.sweep.mean_dice}});
    Series loss{"train BCE", {}, {}}, dice{"val Dice", {}, {}};
    for (const auto& e : r.segmenter_history) {
      loss.x.push_back(e.epoch);
      loss.y.push_back(e.train_loss);
      dice.x.push_back(e.epoch);
      dice.y.push_back(e.val_dice);
    }
    write_line_chart(dir / "segmenter.svg", "Segmenter training", "epoch", "value", {loss, dice});
  }
  return r;
}

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricReport test;
  int final_k = 0;
  std::vector<int> slice_sizes;
  std::optional<WssResult> wss;
  fs::path dir;
};

inline nlohmann::json to_json(const SeedResult& r) {
  nlohmann::json j{{"seed", r.seed}, {"ok", r.ok}, {"dir", r.dir.string()}};
  if (!r.ok) {
    j["error"] = r.error;
    return j;
  }
  j["test"] = to_json(r.test);
  j["K"] = r.final_k;
  j["slice_sizes"] = r.slice_sizes;
  if (r.wss) j["wss"] = to_json(*r.wss);
  return j;
}

inline void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream f(path, std::ios::trunc);
  for (const auto& r : history) f << to_json(r).dump() << '\n';
}

inline void write_history_plots(const fs::path& dir, const std::vector<EpochRecord>& history) {
  Series loss{"train loss", {}, {}}, nmi_s{"val NMI", {}, {}}, r1{"val R@1", {}, {}}, k{"K", {}, {}};
  for (const auto& r : history) {
    for (Series* s : {&loss, &nmi_s, &r1, &k}) s->x.push_back(r.epoch);
    loss.y.push_back(r.train_loss);
    nmi_s.y.push_back(r.val_nmi);
    r1.y.push_back(r.val_r1);
    k.y.push_back(r.k);
  }
  write_line_chart(dir / "curves.svg", "Training curves", "epoch", "value", {loss, nmi_s, r1});
  write_line_chart(dir / "learners.svg", "Learner count", "epoch", "K", {k});
}

/// One seed: trains (optionally resuming), evaluates on the test split, runs WSS.
/// Writes config.json, history.jsonl, last.ckpt, best.ckpt, final.ckpt, metrics.json,
/// clusters.csv and plots under `dir`.
template <typename T = float>
SeedResult run_seed(const ExperimentConfig& cfg, const DataSplits& data, std::uint64_t seed, const fs::path& dir,
                    const std::optional<fs::path>& resume = std::nullopt, bool with_wss = true) {
  SeedResult out;
  out.seed = seed;
  out.dir = dir;
  fs::create_directories(dir);
  ExperimentConfig run_cfg = cfg;
  run_cfg.trainer.seed = seed;
  run_cfg.model.seed = seed;
  run_cfg.seeds = {seed};
  std::ofstream(dir / "config.json") << to_json(run_cfg).dump(2) << '\n';

  EmbeddingModel<T> model(run_cfg.model);
  TrainHooks hooks;
  DynamicSubspaceTrainer<T>* tp = nullptr;
  hooks.on_epoch = [&](const EpochRecord& r) {
    std::ofstream(dir / "history.jsonl", std::ios::app) << to_json(r).dump() << '\n';
    log_info("seed " + std::to_string(seed) + " epoch " + std::to_string(r.epoch) + " K=" + std::to_string(r.k) +
             " loss=" + std::to_string(r.train_loss) + " val_nmi=" + std::to_string(r.val_nmi) +
             " val_r1=" + std::to_string(r.val_r1) + (r.event.empty() ? "" : " [" + r.event + "]"));
    save_checkpoint(capture_training(*tp), dir / "last.ckpt");
  };
  hooks.on_checkpoint = [&](const std::string& reason) {
    save_checkpoint(capture_training(*tp), dir / (reason + ".ckpt"));
  };
  DynamicSubspaceTrainer<T> trainer(run_cfg.trainer, model, data.train, data.val, hooks);
  tp = &trainer;
  if (resume) {
    const auto ck = load_checkpoint(*resume);
    apply_training(ck, trainer);
    log_info("resumed from " + resume->string() + " at epoch " + std::to_string(trainer.state().epoch));
  }
  write_history(dir / "history.jsonl", trainer.state().history);
  trainer.run();

  save_checkpoint(capture_training(trainer), dir / "final.ckpt");
  write_history_plots(dir, trainer.state().history);
  if (!trainer.clusters().assignment.empty()) write_assignment_csv(trainer.clusters(), data.train, (dir / "clusters.csv").string());

  out.test = evaluate_checkpoint(model, trainer.layout(), data.test, seed);
  out.final_k = trainer.layout().learner_count();
  out.slice_sizes = trainer.layout().slice_sizes();
  nlohmann::json metrics = to_json(out.test);
  metrics["K"] = out.final_k;
  metrics["slice_sizes"] = out.slice_sizes;
  std::ofstream(dir / "metrics.json") << metrics.dump(2) << '\n';

  if (with_wss && cfg.wss.enabled) {
    if (all_have_masks(data.val)) {
      out.wss = run_wss(model, data, cfg.wss, seed, dir / "wss");
    } else {
      log_warning("wss skipped: validation images carry no masks");
    }
  }
  out.ok = true;
  return out;
}

struct Stat {
  double mean = 0.0, std = 0.0;
  std::size_t n = 0;
};

/// Mean and sample standard deviation (0 for a single value).
inline Stat summarize(const std::vector<double>& v) {
  Stat s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double acc = 0.0;
    for (double x : v) acc += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(acc / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline nlohmann::json summary_json(const std::vector<SeedResult>& results, const std::string& mode) {
  std::vector<double> nmi_v, r1, r4, k, raw, refined;
  nlohmann::json runs = nlohmann::json::array(), failed = nlohmann::json::array();
  for (const auto& r : results) {
    runs.push_back(to_json(r));
    if (!r.ok) {
      failed.push_back({{"seed", r.seed}, {"error", r.error}});
      continue;
    }
    nmi_v.push_back(r.test.nmi);
    if (r.test.recall.count(1)) r1.push_back(r.test.recall.at(1));
    if (r.test.recall.count(4)) r4.push_back(r.test.recall.at(4));
    k.push_back(r.final_k);
    if (r.wss) {
      raw.push_back(r.wss->raw_val_dice);
      refined.push_back(r.wss->refined_val_dice);
    }
  }
  auto stat = [](const std::vector<double>& v) {
    const auto s = summarize(v);
    return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
  };
  nlohmann::json j{{"mode", mode},
                   {"seeds_run", results.size()},
                   {"seeds_failed", failed},
                   {"nmi", stat(nmi_v)},
                   {"recall@1", stat(r1)},
                   {"recall@4", stat(r4)},
                   {"K", stat(k)},
                   {"runs", runs}};
  if (!raw.empty()) {
    j["wss_raw_val_dice"] = stat(raw);
    j["wss_refined_val_dice"] = stat(refined);
  }
  return j;
}

/// Runs every configured seed into <output_dir>/<mode>/seed_<s>/ and writes
/// <output_dir>/<mode>/summary.json. A failing seed is recorded and skipped.
template <typename T = float>
fs::path run_experiment(const ExperimentConfig& cfg, const std::optional<fs::path>& resume = std::nullopt) {
  cfg.validate();
  const auto data = load_data(cfg);
  const fs::path root = fs::path(cfg.output_dir) / mode_tag(cfg.trainer);
  fs::create_directories(root);
  std::vector<SeedResult> results;
  for (auto seed : cfg.seeds) {
    const fs::path dir = root / ("seed_" + std::to_string(seed));
    try {
      results.push_back(run_seed<T>(cfg, data, seed, dir, resume));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      log_warning("seed " + std::to_string(seed) + " failed: " + e.what());
      SeedResult r;
      r.seed = seed;
      r.error = e.what();
      r.dir = dir;
      results.push_back(std::move(r));
    }
  }
  std::ofstream(root / "summary.json") << summary_json(results, mode_tag(cfg.trainer)).dump(2) << '\n';
  return root;
}

}  // namespace dsl::harness
