#include <gtest/gtest.h>

#include <fstream>
#include <opencv2/imgcodecs.hpp>

#include "stdnet/pipeline.hpp"
#include "support/temp_dir.hpp"

namespace stdnet {
namespace {

TrainConfig tiny_vessel(const fs::path& out, Variant v = Variant::STD) {
  TrainConfig c;
  c.task = Task::Vessel;
  c.variant = v;
  c.synth.size = 32;
  c.synth.curves_min = 2;
  c.synth.curves_max = 3;
  c.synth_train = 4;
  c.synth_test = 2;
  c.extractor_width = 4;
  c.extractor_layers = 3;
  c.block_width = 4;
  c.backbone_channels = {4, 8, 16};
  c.steps = 6;
  c.seed = 3;
  c.out_dir = out.string();
  return c;
}

TrainConfig tiny_disc(const fs::path& out) {
  TrainConfig c = tiny_vessel(out);
  c.task = Task::DiscCup;
  c.synth.size = 128;
  c.crop_size = 32;
  c.crop_margin = 10;
  return c;
}

std::vector<nlohmann::json> read_log(const fs::path& p) {
  std::ifstream in(p);
  std::vector<nlohmann::json> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Train, LoggedTermsFollowVariant) {
  testing::TempDir dir;
  struct Case {
    Variant v;
    bool texture, structure;
  };
  for (const Case& c : {Case{Variant::BL, false, false}, Case{Variant::BL_Ls, false, true},
                        Case{Variant::BL_Lt, true, false}, Case{Variant::BLST, true, true},
                        Case{Variant::STD, true, true}}) {
    auto cfg = tiny_vessel(dir / to_string(c.v), c.v);
    cfg.steps = 3;
    train(cfg);
    const auto log = read_log(fs::path(cfg.out_dir) / "train_log.jsonl");
    ASSERT_EQ(log.size(), 3u);
    for (const auto& line : log) {
      EXPECT_EQ(line.contains("loss_texture"), c.texture) << to_string(c.v);
      EXPECT_EQ(line.contains("loss_structure"), c.structure) << to_string(c.v);
      if (!c.texture && !c.structure) EXPECT_EQ(line["total"].get<double>(), line["loss_seg"].get<double>());
    }
  }
}

TEST(Train, LoggedTotalMatchesComponents) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir.path());
  cfg.mu = 0.004;
  cfg.lambda_s = 0.7;
  train(cfg);
  for (const auto& line : read_log(dir / "train_log.jsonl")) {
    const double expected = line["loss_seg"].get<double>() +
                            0.004 * (line["loss_texture"].get<double>() + 0.7 * line["loss_structure"].get<double>());
    EXPECT_NEAR(line["total"].get<double>(), expected, 1e-6 * std::abs(expected));
  }
}

TEST(Train, RepeatedRunsAreBitIdentical) {
  testing::TempDir dir;
  auto a = tiny_vessel(dir / "a");
  a.steps = 200;
  a.log_every = 50;
  auto b = a;
  b.out_dir = (dir / "b").string();
  const auto ra = train(a);
  const auto rb = train(b);
  EXPECT_EQ(ra.last.total, rb.last.total);
  EXPECT_EQ(slurp(dir / "a" / "train_log.jsonl"), slurp(dir / "b" / "train_log.jsonl"));
  // The manifests differ only in out_dir.
  auto pa = load_checkpoint(ra.checkpoint);
  auto pb = load_checkpoint(rb.checkpoint);
  auto xa = pa.net.parameters();
  auto xb = pb.net.parameters();
  ASSERT_EQ(xa.size(), xb.size());
  for (std::size_t k = 0; k < xa.size(); ++k) EXPECT_EQ(*xa[k].value, *xb[k].value) << xa[k].name;
}

TEST(Train, WritesArtifactsAndPeriodicCheckpoints) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir.path());
  cfg.checkpoint_every = 2;
  const auto r = train(cfg);
  EXPECT_EQ(r.steps, 6);
  for (const char* f : {"config.txt", "train_log.jsonl", "summary.json", "checkpoint.bin", "checkpoint_step2.bin",
                        "checkpoint_step4.bin", "checkpoint_step6.bin"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(load_checkpoint(dir / "checkpoint_step4.bin").info.step, 4);
  EXPECT_EQ(TrainConfig::load(dir / "config.txt").to_map(), cfg.to_map());
}

TEST(Train, NonFiniteLossAbortsWithComponents) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir.path());
  cfg.mu = 1e308;
  try {
    train(cfg);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 1"), std::string::npos);
    EXPECT_NE(msg.find("loss_structure"), std::string::npos);
  }
  const auto log = read_log(dir / "train_log.jsonl");
  ASSERT_EQ(log.size(), 1u);
  EXPECT_TRUE(log[0].contains("error"));
}

TEST(Train, RejectsPolarVessel) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir.path());
  cfg.polar = true;
  EXPECT_THROW(train(cfg), Error);
}

TEST(Evaluate, GroundTruthAsPredictionIsPerfect) {
  TrainConfig cfg = tiny_vessel("unused");
  const auto refs = reference_views(cfg, load_split(cfg, "test"), false);
  std::vector<Tensor<float>> probs;
  for (const auto& r : refs) probs.push_back(to_float(r.mask));
  const auto rep = score_predictions(Task::Vessel, 0.5, Aggregation::PerImage, probs, refs);
  EXPECT_EQ(*rep.get("Acc"), 1.0);
  EXPECT_EQ(*rep.get("IOU"), 1.0);
  EXPECT_EQ(*rep.get("AUC"), 1.0);

  TrainConfig disc = tiny_disc("unused");
  const auto drefs = reference_views(disc, load_split(disc, "test"), false);
  std::vector<Tensor<float>> dprobs;
  for (const auto& r : drefs) dprobs.push_back(to_float(r.mask));
  const auto drep = score_predictions(Task::DiscCup, 0.5, Aggregation::PerImage, dprobs, drefs);
  EXPECT_EQ(*drep.get("OE_disc"), 0.0);
  EXPECT_EQ(*drep.get("OE_cup"), 0.0);
  EXPECT_EQ(*drep.get("OE_total"), 0.0);
}

TEST(Evaluate, ConstantHalfGivesChanceAuc) {
  TrainConfig cfg = tiny_vessel("unused");
  const auto refs = reference_views(cfg, load_split(cfg, "test"), false);
  std::vector<Tensor<float>> probs;
  for (const auto& r : refs) probs.push_back(Tensor<float>(r.mask.shape(), 0.5f));
  for (Aggregation agg : {Aggregation::PerImage, Aggregation::Pooled}) {
    const auto rep = score_predictions(Task::Vessel, 0.5, agg, probs, refs);
    EXPECT_EQ(*rep.get("AUC"), 0.5);
  }
}

TEST(Evaluate, EmptyDatasetAndShapeErrors) {
  TrainConfig cfg = tiny_vessel("unused");
  EXPECT_THROW(score_predictions(Task::Vessel, 0.5, Aggregation::PerImage, {}, {}), Error);
  const auto refs = reference_views(cfg, load_split(cfg, "test"), false);
  std::vector<Tensor<float>> wrong(refs.size(), Tensor<float>(1, 1, 8, 8));
  EXPECT_THROW(score_predictions(Task::Vessel, 0.5, Aggregation::PerImage, wrong, refs), Error);
}

TEST(Evaluate, CheckpointRoundTripScoresIdentically) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir.path());
  const auto r = train(cfg);
  const auto test = load_split(cfg, "test");

  auto first = load_checkpoint(r.checkpoint);
  const auto a = evaluate_model(first.net, cfg, test, "d", "c");
  save_checkpoint(dir / "again.bin", first.net, first.info);
  EXPECT_EQ(slurp(dir / "again.bin"), slurp(r.checkpoint));
  auto second = load_checkpoint(dir / "again.bin");
  const auto b = evaluate_model(second.net, cfg, test, "d", "c");
  EXPECT_EQ(a.to_json(), b.to_json());
}

TEST(Evaluate, WritesReportsAndPredictions) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir / "run");
  const auto r = train(cfg);
  EvalOptions opt;
  opt.out_dir = dir / "eval";
  opt.save_predictions = true;
  opt.aggregation = Aggregation::Pooled;
  const auto rep = evaluate(r.checkpoint, opt);
  EXPECT_EQ(rep.images, 2);
  EXPECT_EQ(rep.aggregation, Aggregation::Pooled);
  EXPECT_TRUE(fs::exists(dir / "eval" / "metrics.json"));
  EXPECT_TRUE(fs::exists(dir / "eval" / "metrics.csv"));
  std::ifstream in(dir / "eval" / "metrics.json");
  const auto j = nlohmann::ordered_json::parse(in);
  EXPECT_EQ(MetricsReport::from_json(j).to_json(), rep.to_json());
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(dir / "eval" / "predictions")) {
    const cv::Mat m = cv::imread(e.path().string(), cv::IMREAD_UNCHANGED);
    EXPECT_EQ(m.rows, 32);
    EXPECT_EQ(m.cols, 32);
    ++pngs;
  }
  EXPECT_EQ(pngs, 2);
}

TEST(Evaluate, DiscPipelineRunsThroughPolarView) {
  testing::TempDir dir;
  auto cfg = tiny_disc(dir.path());
  cfg.steps = 2;
  const auto r = train(cfg);
  const auto rep = evaluate(r.checkpoint);
  ASSERT_EQ(rep.metrics.size(), 3u);
  EXPECT_EQ(rep.metrics[0].first, "OE_disc");
  if (rep.get("OE_disc") && rep.get("OE_cup"))
    EXPECT_NEAR(*rep.get("OE_total"), *rep.get("OE_disc") + *rep.get("OE_cup"), 1e-12);
}

TEST(Evaluate, RejectsManifestThatContradictsConfig) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir.path());
  cfg.steps = 1;
  const auto r = train(cfg);
  auto loaded = load_checkpoint(r.checkpoint);
  loaded.info.train_config["task"] = "disc_cup";
  save_checkpoint(dir / "bad.bin", loaded.net, loaded.info);
  EXPECT_THROW(evaluate(dir / "bad.bin"), Error);
}

TEST(Decompose, ReconstructsGreenChannel) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir / "run");
  const auto r = train(cfg);
  const auto sample = load_split(cfg, "test").front();
  write_png(dir / "input.png", sample.image);
  const auto out = decompose(r.checkpoint, dir / "input.png", dir / "vis");

  const cv::Mat in = cv::imread((dir / "input.png").string(), cv::IMREAD_COLOR);
  const cv::Mat s = cv::imread(out.structure.string(), cv::IMREAD_UNCHANGED);
  const cv::Mat t = cv::imread(out.texture.string(), cv::IMREAD_UNCHANGED);
  const cv::Mat e = cv::imread(out.e_structures.string(), cv::IMREAD_UNCHANGED);
  for (const cv::Mat* m : {&s, &t, &e}) {
    EXPECT_EQ(m->rows, in.rows);
    EXPECT_EQ(m->cols, in.cols);
  }
  ASSERT_EQ(s.depth(), CV_16U);
  ASSERT_EQ(t.depth(), CV_16U);
  int checked = 0;
  for (int y = 0; y < in.rows; ++y)
    for (int x = 0; x < in.cols; ++x) {
      const double sv = s.at<std::uint16_t>(y, x) / 65535.0;
      const double tv = (t.at<std::uint16_t>(y, x) / 65535.0 - 0.5) * 2.0;
      if (sv <= 0.0 || sv >= 1.0 || tv <= -1.0 || tv >= 1.0) continue;
      const double g = in.at<cv::Vec3b>(y, x)[1] / 255.0;
      EXPECT_LE(std::abs(sv + tv - g), 1.0 / 255.0);
      ++checked;
    }
  EXPECT_GT(checked, in.rows * in.cols / 2);
}

TEST(Decompose, Errors) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir / "bl", Variant::BL);
  cfg.steps = 1;
  const auto bl = train(cfg);
  const auto sample = load_split(cfg, "test").front();
  write_png(dir / "input.png", sample.image);
  EXPECT_THROW(decompose(bl.checkpoint, dir / "input.png", dir / "vis"), Error);

  StdNet<float> fresh(tiny_vessel(dir.path()).model_config());
  fresh.init(std::uint64_t{1});
  save_checkpoint(dir / "fresh.bin", fresh, checkpoint_info(tiny_vessel(dir.path()), 0));
  EXPECT_THROW(decompose(dir / "fresh.bin", dir / "input.png", dir / "vis"), Error);
  EXPECT_THROW(decompose(dir / "missing.bin", dir / "input.png", dir / "vis"), Error);
}

TEST(Ablate, TableHasOneRowPerVariant) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir.path());
  cfg.steps = 2;
  cfg.variants = {kAllVariants.begin(), kAllVariants.end()};
  cfg.seeds = {1, 2};
  const auto runs = ablate(cfg);
  EXPECT_EQ(runs.size(), 10u);
  std::ifstream in(dir / "ablation.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 6u);
  EXPECT_EQ(lines[0].substr(0, 6), "Method");
  for (const char* col : {"Acc", "AUC", "Sen", "Spe", "IOU"}) EXPECT_NE(lines[0].find(col), std::string::npos);
  EXPECT_EQ(lines[1].substr(0, 2), "BL");
  EXPECT_EQ(lines[5].substr(0, 3), "STD");
  for (Variant v : kAllVariants)
    for (int s : {1, 2})
      EXPECT_TRUE(fs::exists(dir / (to_string(v) + "_seed" + std::to_string(s)) / "metrics.json"));
}

TEST(Ablate, SingleVariantMatchesEvaluate) {
  testing::TempDir dir;
  auto cfg = tiny_vessel(dir.path());
  cfg.steps = 2;
  cfg.variants = {Variant::BLST};
  cfg.seeds = {5};
  const auto runs = ablate(cfg);
  ASSERT_EQ(runs.size(), 1u);
  const auto again = evaluate(runs[0].train.checkpoint, EvalOptions{.out_dir = dir / "eval"});
  for (const auto& [name, value] : again.metrics) EXPECT_EQ(value, runs[0].report.get(name)) << name;
}

// Shipped smoke checkpoint and its stored report on the synthetic test split.
TEST(Golden, SmokeCheckpointReproducesReference) {
  const fs::path data = STDNET_TEST_DATA;
  testing::TempDir dir;
  const auto rep = evaluate(data / "golden" / "smoke_checkpoint.bin", EvalOptions{.out_dir = dir.path()});
  std::ifstream in(data / "golden" / "smoke_metrics.json");
  const auto ref = MetricsReport::from_json(nlohmann::ordered_json::parse(in));
  ASSERT_EQ(rep.metrics.size(), ref.metrics.size());
  for (std::size_t i = 0; i < ref.metrics.size(); ++i) {
    EXPECT_EQ(rep.metrics[i].first, ref.metrics[i].first);
    ASSERT_EQ(rep.metrics[i].second.has_value(), ref.metrics[i].second.has_value());
    if (ref.metrics[i].second) EXPECT_NEAR(*rep.metrics[i].second, *ref.metrics[i].second, 1e-6);
  }
}

double mean_abs_texture(StdNet<float>& net, const SynthConfig& sc, int count) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : synth_generate(sc, count, 1000)) {
    const auto ex = net.extractor()->forward(s.image);
    for (float v : ex.texture.values()) total += std::abs(v);
    n += ex.texture.size();
  }
  return total / static_cast<double>(n);
}

TEST(Golden, TrainedExtractorSeparatesNoiseFromSmooth) {
  const fs::path data = STDNET_TEST_DATA;
  auto loaded = load_checkpoint(data / "golden" / "smoke_checkpoint.bin");
  SynthConfig smooth = config_from_checkpoint(loaded.info).synth_config();
  smooth.noise_amplitude = 0.0;
  SynthConfig noisy = smooth;
  noisy.noise_amplitude = 0.15;
  noisy.noise_freq_min = 0.4;
  noisy.noise_freq_max = 0.5;
  EXPECT_LT(mean_abs_texture(loaded.net, smooth, 3), mean_abs_texture(loaded.net, noisy, 3));
}

}  // namespace
}  // namespace stdnet
