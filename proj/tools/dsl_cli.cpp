// dsl: command-line front end for training, evaluation, export and WSS.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsl/harness.hpp"

namespace fs = std::filesystem;
using namespace dsl;
using namespace dsl::harness;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::optional<int> static_k;
  std::string out;
  std::string resume;
  std::string checkpoint;
  std::string split = "test";
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? desk_preset() : load_config(o.config);
  if (o.seed) cfg.seeds = {*o.seed};
  if (!o.mode.empty()) cfg.trainer.mode = parse_train_mode(o.mode);
  if (o.static_k) {
    cfg.trainer.static_k = *o.static_k;
    if (o.mode.empty()) cfg.trainer.mode = TrainMode::static_k;
  }
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.validate();
  return cfg;
}

const Dataset& pick_split(const DataSplits& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "val") return d.val;
  if (name == "test") return d.test;
  throw ConfigError("unknown split '" + name + "' (train, val, test)");
}

EmbeddingModel<float> load_model(const std::string& path, SubspaceLayout& layout) {
  if (path.empty()) throw ConfigError("a checkpoint path is required");
  const auto ck = load_checkpoint(path);
  EmbeddingModel<float> model(ck.model);
  apply_model(ck, model);
  layout = ck.layout;
  return model;
}

fs::path out_dir(const Options& o, const char* fallback) { return o.out.empty() ? fs::path(fallback) : fs::path(o.out); }

int cmd_synth_gen(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? desk_preset() : load_config(o.config);
  if (o.seed) cfg.synthetic.seed = *o.seed;
  const auto data = synthetic_splits(cfg.synthetic);
  const fs::path root = out_dir(o, "synthetic");
  write_image_folder(data.train, root / "train");
  write_image_folder(data.val, root / "val");
  write_image_folder(data.test, root / "test");
  std::cout << "wrote " << data.train.size() + data.val.size() + data.test.size() << " images under " << root << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  const auto cfg = resolve_config(o);
  std::optional<fs::path> resume;
  if (!o.resume.empty()) {
    if (cfg.seeds.size() != 1) throw ConfigError("--resume needs a single seed (use --seed)");
    resume = o.resume;
  }
  const auto root = run_experiment(cfg, resume);
  std::ifstream f(root / "summary.json");
  const auto s = nlohmann::json::parse(f);
  std::cout << "mode " << s["mode"].get<std::string>() << ": NMI " << s["nmi"]["mean"] << " +/- " << s["nmi"]["std"]
            << ", R@1 " << s["recall@1"]["mean"] << " +/- " << s["recall@1"]["std"] << ", K " << s["K"]["mean"] << '\n';
  std::cout << "summary: " << (root / "summary.json").string() << '\n';
  return s["seeds_failed"].empty() ? 0 : 2;
}

int cmd_eval(const Options& o) {
  const auto cfg = resolve_config(o);
  SubspaceLayout layout;
  const auto model = load_model(o.checkpoint, layout);
  const auto data = load_data(cfg);
  const auto report = evaluate_checkpoint(model, layout, pick_split(data, o.split), cfg.seeds.front());
  const auto j = to_json(report);
  std::cout << j.dump(2) << '\n';
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream(fs::path(o.out) / "results.jsonl", std::ios::app) << j.dump() << '\n';
  }
  return 0;
}

int cmd_embed(const Options& o) {
  const auto cfg = resolve_config(o);
  SubspaceLayout layout;
  const auto model = load_model(o.checkpoint, layout);
  const auto data = load_data(cfg);
  const fs::path path = o.out.empty() ? fs::path("embeddings.bin") : fs::path(o.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  export_embeddings(model, layout, pick_split(data, o.split), path);
  std::cout << "wrote " << path.string() << " and " << path.string() << ".csv\n";
  return 0;
}

int cmd_attend(const Options& o) {
  const auto cfg = resolve_config(o);
  SubspaceLayout layout;
  const auto model = load_model(o.checkpoint, layout);
  const auto data = load_data(cfg);
  const fs::path dir = out_dir(o, "attention");
  write_attention_maps(dir, extract_attention(model, pick_split(data, o.split)));
  std::cout << "wrote attention maps to " << dir.string() << '\n';
  return 0;
}

int cmd_wss_threshold(const Options& o) {
  const auto cfg = resolve_config(o);
  SubspaceLayout layout;
  const auto model = load_model(o.checkpoint, layout);
  const auto data = load_data(cfg);
  const auto sweep = select_threshold(extract_attention(model, data.val), ground_truth(data.val), cfg.wss.grid);
  const fs::path dir = out_dir(o, "wss");
  fs::create_directories(dir);
  std::ofstream(dir / "threshold.json") << nlohmann::json{{"threshold", sweep.best},
                                                          {"mean_dice", sweep.best_dice},
                                                          {"grid", sweep.grid},
                                                          {"grid_mean_dice", sweep.mean_dice}}
                                               .dump(2)
                                        << '\n';
  write_line_chart(dir / "dice_vs_threshold.svg", "Dice of initial maps", "T_s", "mean Dice",
                   {{"validation", sweep.grid, sweep.mean_dice}});
  std::cout << "T_s = " << sweep.best << " (mean Dice " << sweep.best_dice << ")\n";
  return 0;
}

int cmd_wss_train(const Options& o) {
  const auto cfg = resolve_config(o);
  SubspaceLayout layout;
  const auto model = load_model(o.checkpoint, layout);
  const auto data = load_data(cfg);
  const auto r = run_wss(model, data, cfg.wss, cfg.seeds.front(), out_dir(o, "wss"));
  std::cout << "T_s " << r.sweep.best << ": raw maps Dice " << r.raw_val_dice << ", segmenter Dice "
            << r.refined_val_dice << " (validation)\n";
  return 0;
}

int cmd_report(const Options& o) {
  const fs::path root = out_dir(o, "runs");
  if (!fs::is_directory(root)) throw ConfigError("no run directory " + root.string());
  std::vector<fs::path> summaries;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().filename() == "summary.json") summaries.push_back(e.path());
  }
  std::sort(summaries.begin(), summaries.end());
  if (summaries.empty()) throw ConfigError("no summary.json under " + root.string());
  std::ostringstream md;
  md << "| mode | seeds | NMI | R@1 | R@4 | K | WSS raw Dice | WSS refined Dice |\n|---|---|---|---|---|---|---|---|\n";
  auto cell = [](const nlohmann::json& s, const char* key) {
    if (!s.contains(key)) return std::string("-");
    std::ostringstream c;
    c.precision(4);
    c << s[key]["mean"].get<double>() << " ± " << s[key]["std"].get<double>();
    return c.str();
  };
  for (const auto& p : summaries) {
    std::ifstream f(p);
    const auto s = nlohmann::json::parse(f);
    md << "| " << s["mode"].get<std::string>() << " | " << s["nmi"]["n"] << "/" << s["seeds_run"] << " | "
       << cell(s, "nmi") << " | " << cell(s, "recall@1") << " | " << cell(s, "recall@4") << " | " << cell(s, "K")
       << " | " << cell(s, "wss_raw_val_dice") << " | " << cell(s, "wss_refined_val_dice") << " |\n";
  }
  std::ofstream(root / "report.md") << md.str();
  std::cout << md.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic subspace metric learning with attention"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c, bool needs_checkpoint) {
    c->add_option("--config", o.config, "JSON experiment config (default: desk preset)");
    c->add_option("--seed", o.seed, "Run a single seed");
    c->add_option("--mode", o.mode, "dynamic | static-K");
    c->add_option("--static-k", o.static_k, "Learner count for static-K mode");
    c->add_option("--out", o.out, "Output directory or file");
    if (needs_checkpoint) {
      c->add_option("checkpoint", o.checkpoint, "Checkpoint file")->required();
      c->add_option("--split", o.split, "Data split: train | val | test");
    }
  };
  auto* synth = app.add_subcommand("synth-gen", "Write the synthetic dataset as an image folder");
  common(synth, false);
  auto* train = app.add_subcommand("train", "Train every configured seed and summarize");
  common(train, false);
  train->add_option("--resume", o.resume, "Resume from a checkpoint (single seed)");
  auto* eval = app.add_subcommand("eval", "NMI and recall of a checkpoint");
  common(eval, true);
  auto* embed = app.add_subcommand("embed", "Export embeddings");
  common(embed, true);
  auto* attend = app.add_subcommand("attend", "Export attention maps as 16-bit PNGs");
  common(attend, true);
  auto* thr = app.add_subcommand("wss-threshold", "Select T_s on validation maps");
  common(thr, true);
  auto* wss = app.add_subcommand("wss-train", "Train the segmenter on proxy masks");
  common(wss, true);
  auto* report = app.add_subcommand("report", "Tabulate summaries under --out");
  report->add_option("--out", o.out, "Run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth_gen(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*embed) return cmd_embed(o);
    if (*attend) return cmd_attend(o);
    if (*thr) return cmd_wss_threshold(o);
    if (*wss) return cmd_wss_train(o);
    if (*report) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
