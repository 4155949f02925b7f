#pragma once

// JSON experiment configuration. Every key is optional; missing keys keep the
// defaults below, unknown keys are rejected so typos do not pass silently.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsl/core_model.hpp"
#include "dsl/dynamic_subspace.hpp"
#include "dsl/harness/synthetic.hpp"
#include "dsl/wss.hpp"

namespace dsl::harness {

using nlohmann::json;

enum class DataSource { synthetic, folder };

struct SyntheticData {
  SyntheticSpec spec;  // n_samples is ignored; the split sizes below apply
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  std::uint64_t seed = 1;  // data seed, independent of the run seeds
};

struct FolderData {
  std::string path;
  std::vector<std::string> extensions{".png", ".jpg", ".jpeg", ".bmp"};
  std::vector<double> split{0.6, 0.2, 0.2};  // train, val, test
  std::string mask_dir = "masks";             // under path; masks matched by file stem
  std::uint64_t seed = 1;
};

struct WssConfig {
  bool enabled = true;
  std::vector<double> grid = default_threshold_grid();
  SegmenterSpec segmenter;
  SegmenterOptions options;
  std::size_t max_train = 0;  // 0 = every training image
};

struct ExperimentConfig {
  DataSource source = DataSource::synthetic;
  SyntheticData synthetic;
  FolderData folder;
  ModelSpec model;
  TrainerConfig trainer;
  WssConfig wss;
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds{0, 1, 2};

  void validate() const {
    if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
    if (source == DataSource::synthetic) {
      synthetic.spec.validate();
      if (synthetic.spec.image_size != model.input_size) {
        throw ConfigError("config: synthetic image_size must equal model input_size");
      }
      if (synthetic.n_train < 2 || synthetic.n_val < 2 || synthetic.n_test < 2) {
        throw ConfigError("config: synthetic splits need at least 2 samples each");
      }
    } else {
      if (folder.path.empty()) throw ConfigError("config: data.folder.path is required");
      if (folder.split.size() != 3) throw ConfigError("config: split must have three fractions");
      double total = 0.0;
      for (double f : folder.split) {
        if (f < 0.0) throw ConfigError("config: split fractions must be >= 0");
        total += f;
      }
      if (std::abs(total - 1.0) > 1e-9) throw ConfigError("config: split fractions must sum to 1");
    }
    if (model.embedding_dim != trainer.embedding_dim) {
      throw ConfigError("config: model.embedding_dim and trainer.embedding_dim differ");
    }
    trainer.validate();
    wss.segmenter.validate();
    wss.options.validate();
    if (wss.grid.empty()) throw ConfigError("config: wss.grid must be non-empty");
    for (double t : wss.grid) {
      if (!(t > 0.0 && t < 1.0)) throw ConfigError("config: wss.grid values must lie in (0,1)");
    }
  }
};

namespace detail {

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.count(key)) throw ConfigError("config: unknown key '" + where + "." + key + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline SyntheticSpec synthetic_spec_from_json(const json& j, SyntheticSpec s = {}) {
  detail::check_keys(j, "synthetic", {"n_samples", "image_size", "n_colors", "n_shapes", "texture_noise", "rule",
                                      "blob_min", "blob_max", "color_jitter", "background_seed", "n_train", "n_val",
                                      "n_test", "seed"});
  detail::read(j, "n_samples", s.n_samples);
  detail::read(j, "image_size", s.image_size);
  detail::read(j, "n_colors", s.n_colors);
  detail::read(j, "n_shapes", s.n_shapes);
  detail::read(j, "texture_noise", s.texture_noise);
  if (j.contains("rule")) s.rule = parse_label_rule(j.at("rule").get<std::string>());
  detail::read(j, "blob_min", s.blob_min);
  detail::read(j, "blob_max", s.blob_max);
  detail::read(j, "color_jitter", s.color_jitter);
  detail::read(j, "background_seed", s.background_seed);
  return s;
}

inline json to_json(const SyntheticSpec& s) {
  return {{"n_samples", s.n_samples},       {"image_size", s.image_size}, {"n_colors", s.n_colors},
          {"n_shapes", s.n_shapes},         {"texture_noise", s.texture_noise}, {"rule", to_string(s.rule)},
          {"blob_min", s.blob_min},         {"blob_max", s.blob_max},     {"color_jitter", s.color_jitter},
          {"background_seed", s.background_seed}};
}

inline ModelSpec model_spec_from_json(const json& j, ModelSpec m = {}) {
  detail::check_keys(j, "model", {"input_channels", "input_size", "backbone_channels", "backbone_strides",
                                  "attention_channels", "batch_norm", "embedding_dim", "seed"});
  detail::read(j, "input_channels", m.input_channels);
  detail::read(j, "input_size", m.input_size);
  detail::read(j, "backbone_channels", m.backbone_channels);
  detail::read(j, "backbone_strides", m.backbone_strides);
  detail::read(j, "attention_channels", m.attention_channels);
  detail::read(j, "batch_norm", m.batch_norm);
  detail::read(j, "embedding_dim", m.embedding_dim);
  detail::read(j, "seed", m.seed);
  return m;
}

inline json to_json(const ModelSpec& m) {
  return {{"input_channels", m.input_channels},     {"input_size", m.input_size},
          {"backbone_channels", m.backbone_channels}, {"backbone_strides", m.backbone_strides},
          {"attention_channels", m.attention_channels}, {"batch_norm", m.batch_norm},
          {"embedding_dim", m.embedding_dim},       {"seed", m.seed}};
}

inline TrainerConfig trainer_config_from_json(const json& j, TrainerConfig c = {}) {
  detail::check_keys(j, "trainer",
                     {"recluster_period", "plateau_patience", "total_epochs", "finetune_epochs", "embedding_dim",
                      "batch_size", "per_class", "score_threshold", "min_remainder", "lr", "seed", "mode", "static_k",
                      "alpha", "beta", "pair_policy", "cluster_sampling", "scoring_samples", "iterations_per_epoch",
                      "augment"});
  detail::read(j, "recluster_period", c.recluster_period);
  detail::read(j, "plateau_patience", c.plateau_patience);
  detail::read(j, "total_epochs", c.total_epochs);
  detail::read(j, "finetune_epochs", c.finetune_epochs);
  detail::read(j, "embedding_dim", c.embedding_dim);
  detail::read(j, "batch_size", c.batch_size);
  detail::read(j, "per_class", c.per_class);
  detail::read(j, "score_threshold", c.score_threshold);
  detail::read(j, "min_remainder", c.min_remainder);
  detail::read(j, "lr", c.lr);
  detail::read(j, "seed", c.seed);
  if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
  detail::read(j, "static_k", c.static_k);
  detail::read(j, "alpha", c.margin.alpha);
  detail::read(j, "beta", c.margin.beta);
  if (j.contains("pair_policy")) c.pair_policy = parse_pair_policy(j.at("pair_policy").get<std::string>());
  if (j.contains("cluster_sampling")) {
    c.cluster_sampling = parse_cluster_sampling(j.at("cluster_sampling").get<std::string>());
  }
  detail::read(j, "scoring_samples", c.scoring_samples);
  detail::read(j, "iterations_per_epoch", c.iterations_per_epoch);
  detail::read(j, "augment", c.augment);
  return c;
}

inline json to_json(const TrainerConfig& c) {
  return {{"recluster_period", c.recluster_period},
          {"plateau_patience", c.plateau_patience},
          {"total_epochs", c.total_epochs},
          {"finetune_epochs", c.finetune_epochs},
          {"embedding_dim", c.embedding_dim},
          {"batch_size", c.batch_size},
          {"per_class", c.per_class},
          {"score_threshold", c.score_threshold},
          {"min_remainder", c.min_remainder},
          {"lr", c.lr},
          {"seed", c.seed},
          {"mode", to_string(c.mode)},
          {"static_k", c.static_k},
          {"alpha", c.margin.alpha},
          {"beta", c.margin.beta},
          {"pair_policy", to_string(c.pair_policy)},
          {"cluster_sampling", to_string(c.cluster_sampling)},
          {"scoring_samples", c.scoring_samples},
          {"iterations_per_epoch", c.iterations_per_epoch},
          {"augment", c.augment}};
}

inline WssConfig wss_config_from_json(const json& j, WssConfig w = {}) {
  detail::check_keys(j, "wss", {"enabled", "grid", "base_width", "depth", "epochs", "batch_size", "lr", "val_fraction",
                                "max_train"});
  detail::read(j, "enabled", w.enabled);
  detail::read(j, "grid", w.grid);
  detail::read(j, "base_width", w.segmenter.base_width);
  detail::read(j, "depth", w.segmenter.depth);
  detail::read(j, "epochs", w.options.epochs);
  detail::read(j, "batch_size", w.options.batch_size);
  detail::read(j, "lr", w.options.lr);
  detail::read(j, "val_fraction", w.options.val_fraction);
  detail::read(j, "max_train", w.max_train);
  return w;
}

inline json to_json(const WssConfig& w) {
  return {{"enabled", w.enabled},
          {"grid", w.grid},
          {"base_width", w.segmenter.base_width},
          {"depth", w.segmenter.depth},
          {"epochs", w.options.epochs},
          {"batch_size", w.options.batch_size},
          {"lr", w.options.lr},
          {"val_fraction", w.options.val_fraction},
          {"max_train", w.max_train}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  detail::check_keys(j, "", {"data", "model", "trainer", "wss", "output_dir", "seeds"});
  ExperimentConfig c;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, "data", {"source", "synthetic", "folder"});
    if (d.contains("source")) {
      const auto s = d.at("source").get<std::string>();
      if (s == "synthetic") c.source = DataSource::synthetic;
      else if (s == "folder") c.source = DataSource::folder;
      else throw ConfigError("config: unknown data source '" + s + "'");
    }
    if (d.contains("synthetic")) {
      const auto& sj = d.at("synthetic");
      c.synthetic.spec = synthetic_spec_from_json(sj);
      detail::read(sj, "n_train", c.synthetic.n_train);
      detail::read(sj, "n_val", c.synthetic.n_val);
      detail::read(sj, "n_test", c.synthetic.n_test);
      detail::read(sj, "seed", c.synthetic.seed);
    }
    if (d.contains("folder")) {
      const auto& fj = d.at("folder");
      detail::check_keys(fj, "folder", {"path", "extensions", "split", "mask_dir", "seed"});
      detail::read(fj, "path", c.folder.path);
      detail::read(fj, "extensions", c.folder.extensions);
      detail::read(fj, "split", c.folder.split);
      detail::read(fj, "mask_dir", c.folder.mask_dir);
      detail::read(fj, "seed", c.folder.seed);
    }
  }
  if (j.contains("model")) c.model = model_spec_from_json(j.at("model"));
  if (j.contains("trainer")) c.trainer = trainer_config_from_json(j.at("trainer"));
  if (j.contains("wss")) c.wss = wss_config_from_json(j.at("wss"));
  detail::read(j, "output_dir", c.output_dir);
  detail::read(j, "seeds", c.seeds);
  // The embedding width is one setting; the trainer section may carry it alone.
  if (j.contains("trainer") && j.at("trainer").contains("embedding_dim") &&
      !(j.contains("model") && j.at("model").contains("embedding_dim"))) {
    c.model.embedding_dim = c.trainer.embedding_dim;
  } else if (j.contains("model") && j.at("model").contains("embedding_dim") &&
             !(j.contains("trainer") && j.at("trainer").contains("embedding_dim"))) {
    c.trainer.embedding_dim = c.model.embedding_dim;
  }
  c.validate();
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  json synthetic = to_json(c.synthetic.spec);
  synthetic["n_train"] = c.synthetic.n_train;
  synthetic["n_val"] = c.synthetic.n_val;
  synthetic["n_test"] = c.synthetic.n_test;
  synthetic["seed"] = c.synthetic.seed;
  json folder = {{"path", c.folder.path},
                 {"extensions", c.folder.extensions},
                 {"split", c.folder.split},
                 {"mask_dir", c.folder.mask_dir},
                 {"seed", c.folder.seed}};
  return {{"data",
           {{"source", c.source == DataSource::synthetic ? "synthetic" : "folder"},
            {"synthetic", synthetic},
            {"folder", folder}}},
          {"model", to_json(c.model)},
          {"trainer", to_json(c.trainer)},
          {"wss", to_json(c.wss)},
          {"output_dir", c.output_dir},
          {"seeds", c.seeds}};
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

/// Desk-scale preset: 64x64 synthetic colour x shape data, d=32, 60 epochs.
inline ExperimentConfig desk_preset() {
  ExperimentConfig c;
  c.trainer.total_epochs = 60;
  c.trainer.finetune_epochs = 10;
  c.trainer.embedding_dim = 32;
  c.trainer.lr = 1e-3;
  c.model.embedding_dim = 32;
  c.wss.segmenter.base_width = 16;
  c.wss.options.epochs = 8;
  c.wss.max_train = 1000;
  c.output_dir = "runs/desk";
  return c;
}

/// Full-scale hyperparameters (300 epochs, d=128, lr 1e-4, segmenter width 32).
inline ExperimentConfig full_preset() {
  ExperimentConfig c;
  c.model.input_size = 224;
  c.synthetic.spec.image_size = 224;
  c.synthetic.spec.blob_min = 70;
  c.synthetic.spec.blob_max = 126;
  c.output_dir = "runs/full";
  return c;
}

}  // namespace dsl::harness
