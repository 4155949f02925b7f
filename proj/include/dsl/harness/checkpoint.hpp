#pragma once

// Binary checkpoint: "DSLCKPT\0", u32 version, u64 manifest length, JSON manifest,
// then little-endian float32 blobs addressed by (offset, count) in the manifest.
// See docs/formats.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsl/core_model.hpp"
#include "dsl/dynamic_subspace.hpp"
#include "dsl/harness/config.hpp"

namespace dsl::harness {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelSpec model;
  std::optional<TrainerConfig> trainer;
  SubspaceLayout layout;
  std::optional<TrainingState> state;
  std::vector<int> assignment;     // training-set cluster routing
  std::int64_t adam_steps = 0;
  std::map<std::string, std::vector<float>> tensors;  // name -> values
};

inline nlohmann::json layout_to_json(const SubspaceLayout& l) {
  return {{"dim", l.dim()}, {"frozen", l.frozen_slices()}, {"remainder", l.remainder()}};
}

inline SubspaceLayout layout_from_json(const nlohmann::json& j) {
  return SubspaceLayout(j.at("dim").get<int>(), j.at("frozen").get<std::vector<std::vector<int>>>(),
                        j.at("remainder").get<std::vector<int>>());
}

namespace detail {

template <typename V>
std::vector<float> to_float(const V& v) {
  return std::vector<float>(v.begin(), v.end());
}

template <typename V>
void assign_from(V& dst, const std::vector<float>& src, const std::string& name) {
  if (dst.size() != src.size()) {
    throw ConfigError("checkpoint tensor " + name + " has " + std::to_string(src.size()) + " values, model expects " +
                      std::to_string(dst.size()));
  }
  std::copy(src.begin(), src.end(), dst.begin());
}

}  // namespace detail

/// Captures model weights and normalization statistics.
template <typename T>
Checkpoint capture_model(EmbeddingModel<T>& model, const SubspaceLayout& layout) {
  Checkpoint c;
  c.model = model.spec();
  c.layout = layout;
  for (auto* p : model.parameters()) c.tensors["param/" + p->name] = detail::to_float(p->value);
  for (auto* p : model.buffers()) c.tensors["buffer/" + p->name] = detail::to_float(p->value);
  return c;
}

/// Model plus everything needed to resume training bit-exactly.
template <typename T>
Checkpoint capture_training(DynamicSubspaceTrainer<T>& trainer) {
  Checkpoint c = capture_model(trainer.model(), trainer.layout());
  c.trainer = trainer.config();
  c.state = trainer.state();
  c.assignment = trainer.clusters().assignment;
  auto& adam = trainer.optimizer();
  c.adam_steps = adam.steps();
  const auto& params = adam.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    c.tensors["adam_m/" + params[k]->name] = detail::to_float(adam.first_moments()[k]);
    c.tensors["adam_v/" + params[k]->name] = detail::to_float(adam.second_moments()[k]);
  }
  return c;
}

template <typename T>
void apply_model(const Checkpoint& c, EmbeddingModel<T>& model) {
  if (c.model.embedding_dim != model.dim()) throw ConfigError("checkpoint embedding dim differs from the model");
  for (auto* p : model.parameters()) {
    auto it = c.tensors.find("param/" + p->name);
    if (it == c.tensors.end()) throw ConfigError("checkpoint lacks parameter " + p->name);
    detail::assign_from(p->value, it->second, p->name);
  }
  for (auto* p : model.buffers()) {
    auto it = c.tensors.find("buffer/" + p->name);
    if (it == c.tensors.end()) throw ConfigError("checkpoint lacks buffer " + p->name);
    detail::assign_from(p->value, it->second, p->name);
  }
}

/// Restores optimizer moments, layout, state and cluster routing into a trainer
/// built over the same model and data.
template <typename T>
void apply_training(const Checkpoint& c, DynamicSubspaceTrainer<T>& trainer) {
  if (!c.state) throw ConfigError("checkpoint holds no training state; it cannot be resumed");
  apply_model(c, trainer.model());
  auto& adam = trainer.optimizer();
  const auto& params = adam.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto m = c.tensors.find("adam_m/" + params[k]->name);
    const auto v = c.tensors.find("adam_v/" + params[k]->name);
    if (m == c.tensors.end() || v == c.tensors.end()) throw ConfigError("checkpoint lacks optimizer state");
    detail::assign_from(adam.first_moments()[k], m->second, params[k]->name);
    detail::assign_from(adam.second_moments()[k], v->second, params[k]->name);
  }
  adam.set_steps(c.adam_steps);
  trainer.restore(c.layout, *c.state, c.assignment);
}

/// Writes to `path` via a temporary file and rename, so readers never see a torn file.
inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  nlohmann::json manifest;
  manifest["model"] = to_json(c.model);
  if (c.trainer) manifest["trainer"] = to_json(*c.trainer);
  manifest["layout"] = layout_to_json(c.layout);
  if (c.state) manifest["state"] = to_json(*c.state);
  manifest["assignment"] = c.assignment;
  manifest["adam_steps"] = c.adam_steps;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, values] : c.tensors) {
    tensors.push_back({{"name", name}, {"offset", offset}, {"count", values.size()}});
    offset += values.size() * sizeof(float);
  }
  manifest["tensors"] = tensors;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    f.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    f.write(reinterpret_cast<const char*>(&version), sizeof version);
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, values] : c.tensors) {
      f.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  f.read(magic, sizeof magic);
  f.read(reinterpret_cast<char*>(&version), sizeof version);
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw ConfigError(path.string() + " is not a checkpoint file");
  }
  if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  if (!f) throw ConfigError("truncated checkpoint manifest in " + path.string());
  const auto manifest = nlohmann::json::parse(text);
  const auto data_start = f.tellg();

  Checkpoint c;
  c.model = model_spec_from_json(manifest.at("model"));
  if (manifest.contains("trainer")) c.trainer = trainer_config_from_json(manifest.at("trainer"));
  c.layout = layout_from_json(manifest.at("layout"));
  if (manifest.contains("state")) c.state = training_state_from_json(manifest.at("state"));
  c.assignment = manifest.value("assignment", std::vector<int>{});
  c.adam_steps = manifest.value("adam_steps", std::int64_t{0});
  for (const auto& t : manifest.at("tensors")) {
    std::vector<float> values(t.at("count").get<std::size_t>());
    f.seekg(data_start + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    f.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!f) throw ConfigError("truncated tensor " + t.at("name").get<std::string>() + " in " + path.string());
    c.tensors.emplace(t.at("name").get<std::string>(), std::move(values));
  }
  return c;
}

}  // namespace dsl::harness
