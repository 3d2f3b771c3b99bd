#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "stdnet/checkpoint.hpp"
#include "support/temp_dir.hpp"

namespace stdnet {
namespace {

ModelConfig tiny(Variant v) {
  ModelConfig m;
  m.variant = v;
  m.extractor_width = 4;
  m.extractor_layers = 3;
  m.block_width = 4;
  m.backbone_channels = {4, 8};
  return m;
}

CheckpointInfo info_for(const ModelConfig& m) {
  CheckpointInfo info;
  info.model = m;
  info.task = "vessel";
  info.seed = 7;
  info.step = 42;
  info.train_config = {{"lr", "0.001"}, {"variant", to_string(m.variant)}};
  return info;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  testing::TempDir dir;
  for (Variant v : kAllVariants) {
    StdNet<float> net(tiny(v));
    net.init(std::uint64_t{3});
    const auto path = dir.path() / (to_string(v) + ".bin");
    save_checkpoint(path, net, info_for(net.config()));
    auto loaded = load_checkpoint(path);
    EXPECT_EQ(loaded.info.task, "vessel");
    EXPECT_EQ(loaded.info.seed, 7u);
    EXPECT_EQ(loaded.info.step, 42);
    EXPECT_EQ(loaded.info.train_config.at("lr"), "0.001");
    EXPECT_EQ(loaded.info.model.variant, v);
    auto a = net.parameters();
    auto b = loaded.net.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      EXPECT_EQ(a[k].name, b[k].name);
      EXPECT_EQ(*a[k].value, *b[k].value) << a[k].name;
    }
  }
}

TEST(Checkpoint, LoadedModelGivesIdenticalOutputs) {
  testing::TempDir dir;
  StdNet<float> net(tiny(Variant::STD));
  net.init(std::uint64_t{9});
  save_checkpoint(dir.path() / "c.bin", net, info_for(net.config()));
  auto loaded = load_checkpoint(dir.path() / "c.bin");
  std::mt19937_64 rng(1);
  Tensor<float> img(1, 3, 16, 16);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : img.values()) v = u(rng);
  const auto a = net.forward(img, false);
  const auto b = loaded.net.forward(img, false);
  EXPECT_EQ(a.output.fused, b.output.fused);
}

TEST(Checkpoint, RejectsMissingAndCorruptFiles) {
  testing::TempDir dir;
  EXPECT_THROW(load_checkpoint(dir.path() / "absent.bin"), Error);

  {
    std::ofstream(dir.path() / "junk.bin") << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(dir.path() / "junk.bin"), Error);

  StdNet<float> net(tiny(Variant::BLST));
  net.init(std::uint64_t{1});
  const auto good = dir.path() / "good.bin";
  save_checkpoint(good, net, info_for(net.config()));
  const auto size = std::filesystem::file_size(good);
  std::filesystem::copy_file(good, dir.path() / "short.bin");
  std::filesystem::resize_file(dir.path() / "short.bin", size - 4);
  EXPECT_THROW(load_checkpoint(dir.path() / "short.bin"), Error);
}

TEST(Checkpoint, RejectsArchitectureMismatch) {
  testing::TempDir dir;
  StdNet<float> net(tiny(Variant::STD));
  net.init(std::uint64_t{1});
  auto info = info_for(net.config());
  save_checkpoint(dir.path() / "a.bin", net, info);

  // Rewrite the manifest so it claims a different extractor width.
  std::ifstream in(dir.path() / "a.bin", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  const std::string from = "\"extractor_width\":4";
  const auto at = bytes.find(from);
  ASSERT_NE(at, std::string::npos);
  bytes.replace(at, from.size(), "\"extractor_width\":5");
  std::ofstream(dir.path() / "b.bin", std::ios::binary) << bytes;
  EXPECT_THROW(load_checkpoint(dir.path() / "b.bin"), Error);
}

TEST(ModelConfigJson, RoundTrip) {
  auto m = tiny(Variant::BL_Lt);
  m.classes = 2;
  m.slope = 0.1;
  const auto back = model_config_from_json(model_config_to_json(m));
  EXPECT_EQ(back.variant, m.variant);
  EXPECT_EQ(back.classes, 2);
  EXPECT_EQ(back.extractor_layers, 3);
  EXPECT_EQ(back.slope, 0.1);
  EXPECT_EQ(back.backbone_channels, m.backbone_channels);
}

}  // namespace
}  // namespace stdnet
