// stdnet command-line driver: train, eval, decompose, ablate, synth.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include <Eigen/Core>

#include "stdnet/pipeline.hpp"

namespace {

using namespace stdnet;

struct Globals {
  std::optional<std::uint64_t> seed;
  bool strict = false;
  std::string device = "cpu";
};

TrainConfig load_config(const std::string& path, const Globals& g, const std::vector<std::string>& overrides) {
  TrainConfig cfg = TrainConfig::load(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

void apply_globals(const Globals& g) {
  if (g.device != "cpu") throw Error("device '" + g.device + "' is not available (cpu only)");
  // All kernels are single-threaded and order-fixed; strict mode pins that.
  if (g.strict) Eigen::setNbThreads(1);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structure-texture demixing segmentation toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Override the run seed");
  app.add_flag("--strict-determinism", g.strict, "Force single-threaded, order-fixed execution");
  app.add_option("--device", g.device, "Compute device (cpu)")->capture_default_str();

  std::string config_path;
  std::vector<std::string> overrides;

  auto* train_cmd = app.add_subcommand("train", "Train one model");
  train_cmd->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--set", overrides, "Override a config key (key=value)");

  std::string checkpoint, data_root, out_dir, split = "test", aggregation;
  std::optional<double> threshold;
  bool save_predictions = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint archive")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_root, "Dataset root (default: the training run's data)");
  eval->add_option("--split", split, "Split to score")->check(CLI::IsMember({"training", "test"}))->capture_default_str();
  eval->add_option("--out", out_dir, "Output directory (default: checkpoint directory)");
  eval->add_option("--threshold", threshold, "Binarization threshold");
  eval->add_option("--aggregation", aggregation, "per_image or pooled");
  eval->add_flag("--save-predictions", save_predictions, "Write probability maps as PNG");

  std::string image;
  auto* dec = app.add_subcommand("decompose", "Render S, T and E for one image");
  dec->add_option("--checkpoint", checkpoint, "Checkpoint archive")->required()->check(CLI::ExistingFile);
  dec->add_option("--image", image, "Input image")->required()->check(CLI::ExistingFile);
  dec->add_option("--out", out_dir, "Output directory")->capture_default_str();

  auto* abl = app.add_subcommand("ablate", "Train and evaluate a variant x seed matrix");
  abl->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  abl->add_option("--set", overrides, "Override a config key (key=value)");

  auto* syn = app.add_subcommand("synth", "Write a synthetic dataset in the loader layout");
  syn->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  syn->add_option("--out", out_dir, "Output root")->required();
  syn->add_option("--set", overrides, "Override a config key (key=value)");

  CLI11_PARSE(app, argc, argv);

  try {
    apply_globals(g);
    if (*train_cmd) {
      const auto cfg = load_config(config_path, g, overrides);
      const auto r = stdnet::train(cfg, &std::cout);
      std::cout << "checkpoint " << r.checkpoint.string() << " after " << r.steps << " steps ("
                << r.seconds << " s), train IOU "
                << (r.train_iou ? std::to_string(*r.train_iou) : std::string("null")) << '\n';
    } else if (*eval) {
      EvalOptions opt;
      if (!data_root.empty()) opt.data_root = data_root;
      opt.split = split;
      opt.threshold = threshold;
      if (!aggregation.empty()) opt.aggregation = parse_aggregation(aggregation);
      if (!out_dir.empty()) opt.out_dir = out_dir;
      opt.save_predictions = save_predictions;
      const auto rep = evaluate(checkpoint, opt);
      std::cout << metrics_table_csv(std::span<const MetricsReport>(&rep, 1));
    } else if (*dec) {
      const auto r = decompose(checkpoint, image, out_dir.empty() ? "." : out_dir);
      std::cout << r.structure.string() << '\n' << r.texture.string() << '\n' << r.e_structures.string() << '\n';
    } else if (*abl) {
      const auto cfg = load_config(config_path, g, overrides);
      ablate(cfg, &std::cout);
      std::cout << std::ifstream(fs::path(cfg.out_dir) / "ablation.csv").rdbuf();
    } else if (*syn) {
      auto cfg = load_config(config_path, g, overrides);
      cfg.data_root.clear();
      cfg.synth_config().validate();
      for (const char* split : {"training", "test"}) {
        const auto samples = load_split(cfg, split);
        write_synth_split(samples, cfg.synth_config().kind, out_dir, split);
        std::cout << split << ": " << samples.size() << " samples\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
