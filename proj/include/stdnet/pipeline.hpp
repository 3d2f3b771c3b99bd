#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "stdnet/checkpoint.hpp"
#include "stdnet/config.hpp"
#include "stdnet/data.hpp"
#include "stdnet/metrics.hpp"
#include "stdnet/model.hpp"

namespace stdnet {

class NonFiniteLoss : public Error {
public:
  using Error::Error;
};

/// Raw samples for one split, either read from data_root or generated.
inline std::vector<Sample> load_split(const TrainConfig& cfg, const std::string& split) {
  if (split != "training" && split != "test") throw Error("split must be 'training' or 'test'");
  if (cfg.data_root.empty()) {
    const bool train = split == "training";
    return synth_generate(cfg.synth_config(), train ? cfg.synth_train : cfg.synth_test,
                          train ? 0 : cfg.synth_train);
  }
  const fs::path root = cfg.data_root;
  if (cfg.task == Task::Vessel) return load_drive_split(root, split, cfg.input_size);
  return load_disc_split(root / split, cfg.mask_convention);
}

inline std::string dataset_id(const TrainConfig& cfg, const std::string& split) {
  if (!cfg.data_root.empty()) return cfg.data_root + ":" + split;
  std::ostringstream os;
  os << "synth:" << to_string(cfg.synth_config().kind) << ":seed=" << cfg.synth.seed << ":size=" << cfg.synth.size
     << ":" << split;
  return os.str();
}

/// Cartesian evaluation view of a raw sample: resized (vessel) or disc crop.
inline Sample reference_view(const TrainConfig& cfg, const Sample& raw, bool training) {
  if (cfg.task == Task::Vessel) {
    const int n = cfg.network_size();
    if (raw.image.h() == n && raw.image.w() == n) return raw;
    Sample s;
    s.meta = raw.meta;
    s.image = resize_bilinear(raw.image, n, n);
    s.mask = resize_nearest(raw.mask, n, n);
    if (raw.fov) s.fov = resize_nearest(*raw.fov, n, n);
    return s;
  }
  // Training crops follow the annotation; inference crops use the configured
  // centre when one is available.
  std::optional<DiscLocation> loc;
  if (!training && raw.meta.disc && raw.meta.disc->radius) loc = raw.meta.disc;
  return crop_disc_region(raw, loc, cfg.crop_margin, cfg.crop_size);
}

/// Network view of a reference sample (polar for disc_cup by default).
inline Sample network_view(const TrainConfig& cfg, const Sample& ref) {
  return cfg.use_polar() ? polar_sample(ref) : ref;
}

inline std::vector<Sample> reference_views(const TrainConfig& cfg, const std::vector<Sample>& raw, bool training) {
  std::vector<Sample> out;
  out.reserve(raw.size());
  for (const auto& s : raw) out.push_back(reference_view(cfg, s, training));
  return out;
}

inline ConfusionCounts pooled_counts(StdNet<float>& net, const TrainConfig& cfg, const std::vector<Sample>& views) {
  ConfusionCounts total;
  for (const auto& s : views) {
    const auto pass = net.forward(s.image, false);
    const auto pred = binarize(pass.output.fused, cfg.threshold);
    for (int c = 0; c < pred.c(); ++c) {
      const std::span<const std::uint8_t> p(pred.plane(0, c), pred.shape().plane());
      const std::span<const std::uint8_t> g(s.mask.plane(0, c), pred.shape().plane());
      total += s.fov ? confusion(p, g, s.fov->values()) : confusion(p, g);
    }
  }
  return total;
}

/// Pooled IOU of the network's thresholded output on network-view samples.
inline std::optional<double> training_iou(StdNet<float>& net, const TrainConfig& cfg,
                                          const std::vector<Sample>& views) {
  return rates(pooled_counts(net, cfg, views)).iou;
}

struct TrainResult {
  fs::path checkpoint;
  long steps = 0;
  LossBreakdown last;
  std::optional<double> train_iou;
  double seconds = 0;
};

inline nlohmann::ordered_json breakdown_json(const LossBreakdown& b) {
  nlohmann::ordered_json j;
  j["loss_seg"] = b.segmentation;
  if (b.texture) j["loss_texture"] = *b.texture;
  if (b.structure) j["loss_structure"] = *b.structure;
  j["total"] = b.total;
  return j;
}

inline CheckpointInfo checkpoint_info(const TrainConfig& cfg, long step) {
  return {cfg.model_config(), to_string(cfg.task), cfg.seed, step, cfg.to_map()};
}

inline bool forward_finite(const ForwardPass<float>& pass) {
  if (!all_finite(pass.decomposition.texture) || !all_finite(pass.output.fused)) return false;
  for (const auto& s : pass.output.side_outputs)
    if (!all_finite(s)) return false;
  return true;
}

inline void log_line(std::ostream* progress, const std::string& msg) {
  if (progress) *progress << msg << std::endl;
}

/// Optimizes the variant's objective on the training split. Writes
/// train_log.jsonl, config.txt, summary.json and checkpoint.bin to out_dir.
inline TrainResult train(const TrainConfig& cfg, std::ostream* progress = nullptr,
                         const std::vector<Sample>* preloaded_train = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  std::ofstream(out / "config.txt") << cfg.dump();

  const std::vector<Sample> raw = preloaded_train ? *preloaded_train : load_split(cfg, "training");
  if (raw.empty()) throw Error("training split is empty");
  const auto refs = reference_views(cfg, raw, true);
  std::vector<Sample> views;
  for (const auto& r : refs) views.push_back(network_view(cfg, r));

  StdNet<float> net(cfg.model_config());
  net.init(cfg.seed);
  Adam<float> opt(net.parameters(), {cfg.lr});
  EpochSampler sampler(refs.size(), cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const long per_epoch = static_cast<long>((refs.size() + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * per_epoch;
  const LossWeights weights{cfg.lambda_s, cfg.mu};

  std::ofstream log(out / "train_log.jsonl");
  TrainResult result;
  for (long step = 1; step <= total_steps; ++step) {
    const auto idx = sampler.next(static_cast<std::size_t>(cfg.batch_size));
    std::vector<Sample> items;
    for (auto i : idx) {
      if (cfg.augment) {
        const Sample aug = augment(refs[i], sampler.rng()());
        items.push_back(network_view(cfg, aug));
      } else {
        items.push_back(views[i]);
      }
    }
    const Batch batch = make_batch(items);
    const auto pass = net.forward(batch.image, true);
    nlohmann::ordered_json line;
    line["step"] = step;
    line["epoch"] = sampler.epoch();
    const auto abort = [&](const std::string& what, const nlohmann::ordered_json& detail) {
      line["error"] = what;
      log << line.dump() << '\n';
      log.flush();
      throw NonFiniteLoss(what + " at step " + std::to_string(step) + ": " + detail.dump());
    };
    if (!forward_finite(pass)) abort("non-finite forward pass", nlohmann::ordered_json::object());
    net.zero_grad();
    const LossBreakdown b = net.backward(pass, batch.labels, weights, cfg.loss_reduction);

    auto entry = breakdown_json(b);
    line.update(entry);
    if (!std::isfinite(b.total)) abort("non-finite loss", entry);
    opt.step();
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == total_steps)) log << line.dump() << '\n';
    result.last = b;
    result.steps = step;

    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save_checkpoint(out / ("checkpoint_step" + std::to_string(step) + ".bin"), net, checkpoint_info(cfg, step));
    if (progress && (step % 50 == 0 || step == 1))
      log_line(progress, "step " + std::to_string(step) + "/" + std::to_string(total_steps) + " " + entry.dump());
    if (cfg.target_train_iou > 0 && cfg.check_every > 0 && step % cfg.check_every == 0) {
      result.train_iou = training_iou(net, cfg, views);
      log_line(progress, "step " + std::to_string(step) + " train IOU " +
                             (result.train_iou ? std::to_string(*result.train_iou) : "null"));
      if (result.train_iou && *result.train_iou >= cfg.target_train_iou) break;
    }
  }
  log.close();
  if (!result.train_iou || cfg.target_train_iou <= 0) result.train_iou = training_iou(net, cfg, views);
  result.checkpoint = out / "checkpoint.bin";
  save_checkpoint(result.checkpoint, net, checkpoint_info(cfg, result.steps));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  nlohmann::ordered_json summary;
  summary["variant"] = to_string(cfg.variant);
  summary["task"] = to_string(cfg.task);
  summary["seed"] = cfg.seed;
  summary["steps"] = result.steps;
  summary["final"] = breakdown_json(result.last);
  summary["train_iou"] = result.train_iou ? nlohmann::ordered_json(*result.train_iou) : nlohmann::ordered_json();
  summary["seconds"] = result.seconds;
  summary["eigen_threads"] = Eigen::nbThreads();
  std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
  return result;
}

/// Scores Cartesian probability maps against reference views.
inline MetricsReport score_predictions(Task task, double threshold, Aggregation agg,
                                       const std::vector<Tensor<float>>& probs, const std::vector<Sample>& refs) {
  if (probs.size() != refs.size()) throw Error("score_predictions: size mismatch");
  if (refs.empty()) throw Error("evaluation dataset is empty");
  if (task == Task::Vessel) {
    VesselEvaluator ev(agg, threshold);
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto& r = refs[i];
      if (!probs[i].shape().same_spatial(r.mask.shape()) || probs[i].c() != 1)
        throw Error("prediction shape does not match reference for " + r.meta.id);
      ev.add(r.meta.id, probs[i].values(), r.mask.values(),
             r.fov ? r.fov->values() : std::span<const std::uint8_t>{});
    }
    auto rep = ev.report();
    rep.threshold = threshold;
    return rep;
  }
  DiscCupEvaluator ev(agg);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& r = refs[i];
    if (probs[i].c() != 2 || !probs[i].shape().same_spatial(r.mask.shape()))
      throw Error("prediction shape does not match reference for " + r.meta.id);
    auto m = binarize(probs[i], threshold);
    keep_largest_component(m);
    const std::size_t plane = m.shape().plane();
    for (std::size_t k = 0; k < plane; ++k) m.plane(0, 1)[k] &= m.plane(0, 0)[k];
    ev.add(r.meta.id, {m.plane(0, 0), plane}, {m.plane(0, 1), plane}, {r.mask.plane(0, 0), plane},
           {r.mask.plane(0, 1), plane});
  }
  auto rep = ev.report();
  rep.threshold = threshold;
  return rep;
}

/// Cartesian fused probabilities for one reference view.
inline Tensor<float> predict(StdNet<float>& net, const TrainConfig& cfg, const Sample& ref) {
  const Sample view = network_view(cfg, ref);
  auto probs = net.forward(view.image, false).output.fused;
  if (cfg.use_polar()) probs = inverse_polar(probs);
  return probs;
}

inline MetricsReport evaluate_model(StdNet<float>& net, const TrainConfig& cfg, const std::vector<Sample>& raw_test,
                                    const std::string& dataset, const std::string& checkpoint) {
  if (raw_test.empty()) throw Error("evaluation dataset is empty");
  const auto refs = reference_views(cfg, raw_test, false);
  std::vector<Tensor<float>> probs;
  for (const auto& r : refs) probs.push_back(predict(net, cfg, r));
  auto rep = score_predictions(cfg.task, cfg.threshold, cfg.aggregation, probs, refs);
  rep.method = to_string(cfg.variant);
  rep.dataset = dataset;
  rep.checkpoint = checkpoint;
  return rep;
}

struct EvalOptions {
  std::optional<std::string> data_root;  // default: the run's data
  std::string split = "test";
  std::optional<double> threshold;
  std::optional<Aggregation> aggregation;
  std::optional<fs::path> out_dir;  // default: next to the checkpoint
  bool save_predictions = false;
};

inline TrainConfig config_from_checkpoint(const CheckpointInfo& info) {
  TrainConfig cfg = TrainConfig::from_map(info.train_config);
  if (cfg.model_config().backbone_channels != info.model.backbone_channels ||
      cfg.model_config().variant != info.model.variant || to_string(cfg.task) != info.task)
    throw Error("checkpoint manifest is inconsistent with its stored configuration");
  return cfg;
}

/// Loads a checkpoint, scores it on a split and writes metrics.json/.csv.
inline MetricsReport evaluate(const fs::path& checkpoint, const EvalOptions& opt = {}) {
  auto loaded = load_checkpoint(checkpoint);
  TrainConfig cfg = config_from_checkpoint(loaded.info);
  if (opt.data_root) cfg.data_root = *opt.data_root;
  if (opt.threshold) cfg.threshold = *opt.threshold;
  if (opt.aggregation) cfg.aggregation = *opt.aggregation;
  const auto raw = load_split(cfg, opt.split);
  auto rep = evaluate_model(loaded.net, cfg, raw, dataset_id(cfg, opt.split), checkpoint.filename().string());
  const fs::path out = opt.out_dir ? *opt.out_dir : checkpoint.parent_path();
  fs::create_directories(out);
  write_report(rep, (out / "metrics.json").string(), (out / "metrics.csv").string());
  if (opt.save_predictions) {
    const auto refs = reference_views(cfg, raw, false);
    for (const auto& r : refs) {
      const auto p = predict(loaded.net, cfg, r);
      write_png(out / "predictions" / (r.meta.id + ".png"), p.slice_channels(0, 1));
    }
  }
  return rep;
}

struct DecomposeResult {
  fs::path structure;
  fs::path texture;
  fs::path e_structures;
};

/// Green-channel renderings of S (16-bit), 0.5 + T/2 (16-bit) and min-max
/// normalized E (8-bit), at the input's resolution.
inline DecomposeResult decompose(const fs::path& checkpoint, const fs::path& image, const fs::path& out_dir) {
  auto loaded = load_checkpoint(checkpoint);
  if (loaded.info.step <= 0) throw Error("checkpoint " + checkpoint.string() + " has not been trained");
  auto& net = loaded.net;
  if (!net.extractor()) throw Error("variant " + to_string(net.config().variant) + " has no texture extractor");
  const Tensor<float> img = read_rgb(image);
  auto ex = net.extractor()->forward(img);
  const Tensor<float> s = compute_structure(img, ex.texture);
  Tensor<float> e(1, 1, img.h(), img.w());
  if (net.texture_block()) e = net.texture_block()->forward(ex.features, false);

  const auto green = [](const Tensor<float>& t) { return t.slice_channels(1, 1); };
  Tensor<float> t_view = green(ex.texture);
  for (auto& v : t_view.values()) v = 0.5f + v / 2.0f;
  const float lo = *std::min_element(e.values().begin(), e.values().end());
  const float hi = *std::max_element(e.values().begin(), e.values().end());
  for (auto& v : e.values()) v = hi > lo ? (v - lo) / (hi - lo) : 0.0f;

  fs::create_directories(out_dir);
  DecomposeResult r{out_dir / "S.png", out_dir / "T.png", out_dir / "E.png"};
  write_png(r.structure, green(s), 0, true);
  write_png(r.texture, t_view, 0, true);
  write_png(r.e_structures, e);
  return r;
}

struct AblationRun {
  Variant variant;
  std::uint64_t seed;
  MetricsReport report;
  TrainResult train;
};

inline std::vector<std::string> metric_names(Task t) {
  if (t == Task::Vessel) return {"Acc", "AUC", "Sen", "Spe", "IOU"};
  return {"OE_disc", "OE_cup", "OE_total"};
}

/// One row per variant with metrics averaged over seeds (runs whose metric is
/// null are skipped for that column).
inline std::string ablation_table(Task task, const std::vector<AblationRun>& runs, const std::vector<Variant>& order) {
  std::vector<MetricsReport> rows;
  for (Variant v : order) {
    MetricsReport r;
    r.method = to_string(v);
    for (const auto& name : metric_names(task)) {
      std::vector<std::optional<double>> xs;
      for (const auto& run : runs)
        if (run.variant == v) xs.push_back(run.report.get(name));
      r.metrics.emplace_back(name, mean_defined(xs));
    }
    rows.push_back(r);
  }
  return metrics_table_csv(rows);
}

/// Trains and evaluates every variant for every seed on a shared dataset.
/// Writes ablation.csv (means) and ablation_runs.csv (one row per run).
inline std::vector<AblationRun> ablate(const TrainConfig& base, std::ostream* progress = nullptr) {
  base.validate();
  const fs::path out = base.out_dir;
  fs::create_directories(out);
  const auto train_raw = load_split(base, "training");
  const auto test_raw = load_split(base, "test");
  std::vector<AblationRun> runs;
  std::ofstream per_run(out / "ablation_runs.csv");
  per_run << "variant,seed,steps,seconds";
  for (const auto& n : metric_names(base.task)) per_run << ',' << n;
  per_run << '\n';
  for (Variant v : base.variants)
    for (std::uint64_t seed : base.seeds) {
      TrainConfig cfg = base;
      cfg.variant = v;
      cfg.seed = seed;
      cfg.out_dir = (out / (to_string(v) + "_seed" + std::to_string(seed))).string();
      log_line(progress, "== " + to_string(v) + " seed " + std::to_string(seed));
      auto tr = train(cfg, progress, &train_raw);
      auto loaded = load_checkpoint(tr.checkpoint);
      auto rep = evaluate_model(loaded.net, cfg, test_raw, dataset_id(cfg, "test"), tr.checkpoint.string());
      write_report(rep, (fs::path(cfg.out_dir) / "metrics.json").string(),
                   (fs::path(cfg.out_dir) / "metrics.csv").string());
      per_run << to_string(v) << ',' << seed << ',' << tr.steps << ',' << std::fixed << std::setprecision(1)
              << tr.seconds;
      for (const auto& n : metric_names(base.task)) per_run << ',' << format_metric(rep.get(n));
      per_run << std::endl;
      log_line(progress, to_string(v) + " seed " + std::to_string(seed) + ": " + rep.to_json()["metrics"].dump());
      runs.push_back({v, seed, std::move(rep), std::move(tr)});
      std::ofstream(out / "ablation.csv") << ablation_table(base.task, runs, base.variants);
    }
  return runs;
}

}  // namespace stdnet
