#include <gtest/gtest.h>

#include <random>

#include "stdnet/demixer.hpp"
#include "stdnet/model.hpp"
#include "support/oracles.hpp"

namespace stdnet {
namespace {

Tensor<float> grid_image(Shape s, std::mt19937_64& rng) {
  auto t = oracle::random_tensor<float>(s, rng, 0.0, 1.0);
  snap_to_grid(t, 1.0 + kGridStep);
  return t;
}

TEST(ComputeStructure, Subtraction) {
  Tensor<double> i(1, 1, 1, 1, 1.0), t(1, 1, 1, 1, 0.3);
  EXPECT_DOUBLE_EQ(compute_structure(i, t)[0], 0.7);
  Tensor<float> img(1, 3, 2, 2, 0.4f);
  EXPECT_EQ(compute_structure(img, Tensor<float>(img.shape())), img);
  EXPECT_THROW(compute_structure(img, Tensor<float>(1, 3, 2, 3)), Error);
}

TEST(TextureExtractor, ShapePreservingWithFeatureTap) {
  std::mt19937_64 rng(1);
  TextureExtractor<float> ex({3, 8, 10, 0.2});
  ex.init(rng);
  auto img = grid_image({2, 3, 16, 12}, rng);
  auto out = ex.forward(img);
  EXPECT_EQ(out.texture.shape(), img.shape());
  EXPECT_EQ(out.features.shape(), (Shape{2, 8, 16, 12}));
  EXPECT_EQ(ex.convs().size(), 10u);
  EXPECT_THROW(ex.forward(Tensor<float>(1, 1, 8, 8)), Error);
  EXPECT_THROW(ex.forward(Tensor<float>(1, 3, 2, 2)), Error);
}

TEST(TextureExtractor, ZeroNetworkGivesZeroTexture) {
  TextureExtractor<float> ex({3, 8, 10, 0.2});
  std::mt19937_64 rng(2);
  auto img = grid_image({1, 3, 8, 8}, rng);
  auto out = ex.forward(img);
  EXPECT_EQ(max_abs(out.texture), 0.0f);
  EXPECT_EQ(compute_structure(img, out.texture), img);
}

TEST(TextureBlock, ZeroInputAndShape) {
  TextureBlock<float> block({8, 4, 1, 0.2});
  std::mt19937_64 rng(3);
  block.init(rng);
  auto e = block.forward(Tensor<float>(2, 8, 10, 6), true);
  EXPECT_EQ(e.shape(), (Shape{2, 1, 10, 6}));
  EXPECT_EQ(max_abs(e), 0.0f);
  EXPECT_THROW(block.forward(Tensor<float>(1, 7, 10, 6), true), Error);
}

TEST(AdaptiveNormFunction, Corners) {
  std::mt19937_64 rng(4);
  auto x = oracle::random_tensor<double>({2, 3, 5, 5}, rng);
  const auto identity = adaptive_norm(x, 1.0, 0.0);
  EXPECT_EQ(identity, x);
  const auto bn = adaptive_norm(x, 0.0, 1.0);
  for (int c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 25; ++i) mean += x.plane(n, c)[i];
    mean /= 50;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 25; ++i) var += std::pow(x.plane(n, c)[i] - mean, 2);
    var /= 50;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 25; ++i)
        EXPECT_NEAR(bn.plane(n, c)[i], (x.plane(n, c)[i] - mean) / std::sqrt(var + 1e-5), 1e-12);
  }
  const auto half = adaptive_norm(x, 0.5, 0.5);
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_NEAR(half[i], 0.5 * (identity[i] + bn[i]), 1e-12);
  // Zero-variance channel stays finite.
  const auto flat = adaptive_norm(Tensor<double>(1, 1, 3, 3, 2.0), 0.0, 1.0);
  EXPECT_TRUE(all_finite(flat));
  EXPECT_EQ(max_abs(flat), 0.0);
}

TEST(Reconstruction, ExactOverRandomForwardPasses) {
  ModelConfig cfg;
  cfg.extractor_width = 8;
  cfg.block_width = 4;
  cfg.backbone_channels = {4, 8};
  StdNet<float> net(cfg);
  std::mt19937_64 rng(5);
  float worst = 0.0f;
  for (int pass = 0; pass < 20; ++pass) {
    net.init(rng);
    auto img = grid_image({1, 3, 16, 16}, rng);
    auto fp = net.forward(img, true);
    const auto& d = fp.decomposition;
    EXPECT_EQ(d.input, img);
    for (std::size_t i = 0; i < img.size(); ++i)
      worst = std::max(worst, std::abs((d.structure[i] + d.texture[i]) - d.input[i]));
  }
  EXPECT_EQ(worst, 0.0f);
}

TEST(SnapToGrid, ValuesAndBounds) {
  EXPECT_EQ(snap_to_grid(0.3f), static_cast<float>(std::nearbyint(0.3 * 65536) / 65536));
  EXPECT_EQ(snap_to_grid(1e9f), static_cast<float>(kTextureBound - kGridStep));
  Tensor<float> t(1, 1, 1, 3);
  t[0] = 0.25f;
  t[1] = 1.0f / 3.0f;
  EXPECT_FALSE(on_grid(t));
  snap_to_grid(t);
  EXPECT_TRUE(on_grid(t));
}

TEST(Equivariance, ShiftCommutesOnInterior) {
  std::mt19937_64 rng(6);
  TextureExtractor<float> ex({3, 16, 10, 0.2});
  ex.init(rng);
  TextureBlock<float> block({16, 8, 1, 0.2});
  block.init(rng);
  auto big = grid_image({1, 3, 136, 136}, rng);
  auto crop = [](const Tensor<float>& t, int off, int size) {
    Tensor<float> out(t.n(), t.c(), size, size);
    for (int n = 0; n < t.n(); ++n)
      for (int c = 0; c < t.c(); ++c)
        for (int y = 0; y < size; ++y)
          for (int x = 0; x < size; ++x) out.at(n, c, y, x) = t.at(n, c, y + off, x + off);
    return out;
  };
  const int k = 8;
  auto a = crop(big, 0, 128);
  auto b = crop(big, k, 128);
  auto ea = ex.forward(a);
  auto eb = ex.forward(b);
  // Eval-mode normalization keeps the block a pure local operator.
  auto fa = block.forward(ea.features, false);
  auto fb = block.forward(eb.features, false);
  const int margin = 16;
  for (int c = 0; c < 3; ++c)
    for (int y = margin; y < 128 - margin - k; ++y)
      for (int x = margin; x < 128 - margin - k; ++x)
        ASSERT_NEAR(ea.texture.at(0, c, y + k, x + k), eb.texture.at(0, c, y, x), 1e-4);
  for (int y = margin; y < 128 - margin - k; ++y)
    for (int x = margin; x < 128 - margin - k; ++x)
      ASSERT_NEAR(fa.at(0, 0, y + k, x + k), fb.at(0, 0, y, x), 1e-4);
}

}  // namespace
}  // namespace stdnet
