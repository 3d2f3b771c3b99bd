#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "stdnet/data.hpp"
#include "stdnet/losses.hpp"
#include "support/temp_dir.hpp"

namespace stdnet {
namespace {

using testing::TempDir;

const fs::path kData = STDNET_TEST_DATA;

TEST(Gif, DecodesLikeReferencePng) {
  for (const char* name : {"noise", "mask_interlaced"}) {
    const cv::Mat g = read_gray_u8(kData / (std::string(name) + ".gif"));
    const cv::Mat p = cv::imread((kData / (std::string(name) + ".png")).string(), cv::IMREAD_GRAYSCALE);
    ASSERT_EQ(g.size(), p.size()) << name;
    EXPECT_EQ(cv::countNonZero(g != p), 0) << name;
  }
}

TEST(Gif, RejectsGarbage) {
  EXPECT_THROW(gif::decode({'G', 'I', 'F', '8', '9'}), Error);
  EXPECT_THROW(gif::decode({'P', 'N', 'G', '8', '9', 'a', 1, 0, 1, 0, 0, 0, 0}), Error);
}

cv::Mat gray(int h, int w, int v) { return cv::Mat(h, w, CV_8U, cv::Scalar(v)); }

TEST(VesselLoader, ResizesAndRebinarizes) {
  TempDir dir;
  cv::Mat img(40, 60, CV_8UC3, cv::Scalar(10, 100, 200));
  write_mat(dir / "img.png", img);
  cv::Mat gt = gray(40, 60, 0);
  gt(cv::Rect(0, 0, 30, 40)) = 200;  // lossy-storage gray levels
  gt(cv::Rect(30, 0, 30, 40)) = 90;
  write_mat(dir / "gt.png", gt);
  write_mat(dir / "fov.png", gray(40, 60, 255));
  const Sample s = load_vessel_sample(dir / "img.png", dir / "gt.png", dir / "fov.png", 32);
  EXPECT_EQ(s.image.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(s.mask.shape(), (Shape{1, 1, 32, 32}));
  ASSERT_TRUE(s.fov.has_value());
  EXPECT_EQ(s.meta.original_w, 60);
  EXPECT_EQ(s.mask.at(0, 0, 5, 2), 1);
  EXPECT_EQ(s.mask.at(0, 0, 5, 30), 0);
  EXPECT_FLOAT_EQ(s.image.at(0, 0, 3, 3), snap_to_grid(200.0f / 255.0f, 1.0));
  for (auto v : s.mask.values()) EXPECT_LE(v, 1);
}

TEST(VesselLoader, Errors) {
  TempDir dir;
  write_mat(dir / "img.png", cv::Mat(40, 60, CV_8UC3, cv::Scalar::all(0)));
  write_mat(dir / "gt.png", gray(41, 60, 0));
  EXPECT_THROW(load_vessel_sample(dir / "img.png", dir / "gt.png", std::nullopt), Error);
  EXPECT_THROW(load_vessel_sample(dir / "none.png", dir / "gt.png", std::nullopt), Error);
  std::ofstream(dir / "bad.png") << "not an image";
  EXPECT_THROW(load_vessel_sample(dir / "bad.png", dir / "gt.png", std::nullopt), Error);
}

Sample blank(int h, int w) {
  Sample s;
  s.image = Tensor<float>(1, 3, h, w, 0.5f);
  s.mask = Tensor<std::uint8_t>(1, 2, h, w);
  return s;
}

TEST(CropDisc, FiftyPixelRule) {
  Sample s = blank(512, 512);
  for (int y = 100; y < 200; ++y)
    for (int x = 100; x < 200; ++x) s.mask.at(0, 0, y, x) = 1;
  const Sample c = crop_disc_region(s, std::nullopt, 50);
  EXPECT_EQ(*c.meta.crop, (Box{50, 50, 250, 250}));
  EXPECT_EQ(c.image.h(), 256);
  EXPECT_EQ(c.mask.w(), 256);
  const Sample tight = crop_disc_region(s, std::nullopt, 0);
  EXPECT_EQ(*tight.meta.crop, (Box{100, 100, 200, 200}));
  const auto disc = tight.mask.slice_channels(0, 1);
  for (auto v : disc.values()) EXPECT_EQ(v, 1);
}

TEST(CropDisc, ClampsAtImageEdge) {
  Sample s = blank(300, 400);
  for (int y = 0; y < 40; ++y)
    for (int x = 370; x < 400; ++x) s.mask.at(0, 0, y, x) = 1;
  const Sample c = crop_disc_region(s, std::nullopt, 50);
  EXPECT_EQ(*c.meta.crop, (Box{320, 0, 400, 90}));
  EXPECT_EQ(c.image.shape(), (Shape{1, 3, 256, 256}));
}

TEST(CropDisc, ConfiguredCenterAndErrors) {
  Sample s = blank(200, 200);
  const Sample c = crop_disc_region(s, DiscLocation{100, 80, 20.0}, 10);
  EXPECT_EQ(*c.meta.crop, (Box{70, 50, 130, 110}));
  EXPECT_THROW(crop_disc_region(s, DiscLocation{250, 80, 20.0}, 10), Error);
  EXPECT_THROW(crop_disc_region(s, std::nullopt, 10), Error);
  EXPECT_THROW(crop_disc_region(s, DiscLocation{50, 50, std::nullopt}, 10), Error);
}

double psnr_inside(const Tensor<float>& a, const Tensor<float>& b, double radius) {
  const int n = a.h();
  double se = 0;
  long count = 0;
  for (int c = 0; c < a.c(); ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (std::hypot(x + 0.5 - n / 2.0, y + 0.5 - n / 2.0) <= radius) {
          const double d = a.at(0, c, y, x) - b.at(0, c, y, x);
          se += d * d;
          ++count;
        }
  return 10 * std::log10(1.0 / (se / count));
}

TEST(Polar, ConstantMapsToConstantExactly) {
  const Tensor<float> k(1, 3, 64, 64, 0.3f);
  const auto fwd = polar_transform(k);
  const auto inv = inverse_polar(k);
  const auto zero = inverse_polar(Tensor<float>(1, 1, 64, 64));
  for (float v : fwd.values()) ASSERT_EQ(v, 0.3f);
  for (float v : inv.values()) ASSERT_EQ(v, 0.3f);
  for (float v : zero.values()) ASSERT_EQ(v, 0.0f);
}

TEST(Polar, RingsBecomeBands) {
  const int n = 128;
  Tensor<float> rings(1, 1, n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      rings.at(0, 0, y, x) = static_cast<float>(0.5 + 0.5 * std::cos(std::hypot(x + 0.5 - 64, y + 0.5 - 64) / 6));
  const auto p = polar_transform(rings);
  for (int i = 4; i < n; i += 9) {
    const double expect = 0.5 + 0.5 * std::cos((i * 64.0 / n) / 6);
    for (int j = 0; j < n; ++j) EXPECT_NEAR(p.at(0, 0, i, j), expect, 0.02) << i << "," << j;
  }
  Tensor<float> bands(1, 1, n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) bands.at(0, 0, i, j) = static_cast<float>(i) / n;
  const auto back = inverse_polar(bands);
  for (int y = 0; y < n; y += 7)
    for (int x = 0; x < n; x += 5) {
      const double r = std::hypot(x + 0.5 - 64, y + 0.5 - 64);
      if (r < 60) EXPECT_NEAR(back.at(0, 0, y, x), r / 64.0, 1e-5);
    }
}

TEST(Polar, RoundTripPsnrOnSmoothImage) {
  const int n = 256;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(0, 1);
  cv::Mat noise(n, n, CV_32FC3);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) noise.at<cv::Vec3f>(y, x) = {u(rng), u(rng), u(rng)};
  cv::Mat blurred;
  cv::GaussianBlur(noise, blurred, cv::Size(0, 0), 4.0);
  cv::normalize(blurred, blurred, 0, 1, cv::NORM_MINMAX);
  Tensor<float> img(1, 3, n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = blurred.at<cv::Vec3f>(y, x)[c];
  const auto back = inverse_polar(polar_transform(img));
  EXPECT_GE(psnr_inside(img, back, 0.9 * n / 2), 30.0);
}

TEST(Polar, NearestKeepsLabelsBinaryAndRejectsNonSquare) {
  Tensor<std::uint8_t> m(1, 1, 32, 32);
  for (int y = 10; y < 22; ++y)
    for (int x = 10; x < 22; ++x) m.at(0, 0, y, x) = 1;
  const auto p = polar_transform(m, {}, Sampling::Nearest);
  for (auto v : p.values()) EXPECT_LE(v, 1);
  EXPECT_EQ(p.at(0, 0, 0, 0), 1);
  EXPECT_EQ(p.at(0, 0, 31, 0), 0);
  EXPECT_THROW(polar_transform(Tensor<float>(1, 1, 32, 30)), Error);
  EXPECT_THROW(inverse_polar(Tensor<float>(1, 1, 30, 32)), Error);
}

TEST(Synth, SameSeedIsBitIdentical) {
  SynthConfig cfg;
  cfg.seed = 7;
  cfg.size = 64;
  const auto a = synth_generate(cfg, 3), b = synth_generate(cfg, 3);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
    a[i].validate();
  }
  cfg.seed = 8;
  EXPECT_FALSE(synth_generate(cfg, 1)[0].image == a[0].image);
  // sample i depends only on (seed, i)
  cfg.seed = 7;
  EXPECT_EQ(synth_generate(cfg, 1, 2)[0].image, a[2].image);
}

TEST(Synth, NoiseOnlyChangesTheImage) {
  SynthConfig cfg;
  cfg.size = 64;
  cfg.seed = 3;
  const auto noisy = synth_generate(cfg, 2);
  cfg.noise_amplitude = 0;
  const auto clean = synth_generate(cfg, 2);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(noisy[i].mask, clean[i].mask);
    EXPECT_LT(tv_structure_loss(clean[i].image.cast<double>()), tv_structure_loss(noisy[i].image.cast<double>()));
  }
}

TEST(Synth, DiscCupIsNested) {
  SynthConfig cfg;
  cfg.kind = SynthKind::DiscCup;
  cfg.size = 128;
  cfg.seed = 5;
  for (const auto& s : synth_generate(cfg, 10)) {
    s.validate();
    long cup = 0;
    for (int y = 0; y < 128; ++y)
      for (int x = 0; x < 128; ++x) {
        cup += s.mask.at(0, 1, y, x);
        if (s.mask.at(0, 1, y, x)) ASSERT_EQ(s.mask.at(0, 0, y, x), 1);
      }
    EXPECT_GT(cup, 0);
    ASSERT_TRUE(s.meta.disc && s.meta.disc->radius);
    const Sample c = crop_disc_region(s, std::nullopt, 20, 64);
    for (int i = 0; i < 64 * 64; ++i)
      if (c.mask.plane(0, 1)[i]) ASSERT_EQ(c.mask.plane(0, 0)[i], 1);
  }
  cfg.cup_radius_max = cfg.disc_radius_min;
  EXPECT_THROW(synth_generate(cfg, 1), Error);
}

TEST(Synth, VesselLayoutRoundTrip) {
  TempDir dir;
  SynthConfig cfg;
  cfg.size = 48;
  const auto samples = synth_generate(cfg, 3);
  write_synth_split(samples, SynthKind::Vessel, dir.path(), "training");
  const auto loaded = load_drive_split(dir.path(), "training", 48);
  ASSERT_EQ(loaded.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded[i].mask, samples[i].mask);
    EXPECT_EQ(*loaded[i].fov, *samples[i].fov);
    for (std::size_t k = 0; k < samples[i].image.size(); ++k)
      ASSERT_NEAR(loaded[i].image[k], samples[i].image[k], 0.5 / 255 + kGridStep);
  }
  fs::remove(sorted_files(dir / "training/1st_manual").front());
  EXPECT_THROW(load_drive_split(dir.path(), "training", 48), Error);
}

TEST(Synth, DiscLayoutRoundTrip) {
  TempDir dir;
  SynthConfig cfg;
  cfg.kind = SynthKind::DiscCup;
  cfg.size = 96;
  cfg.disc_radius_min = 14;
  cfg.disc_radius_max = 20;
  cfg.cup_radius_min = 5;
  cfg.cup_radius_max = 10;
  const auto samples = synth_generate(cfg, 2);
  write_synth_split(samples, SynthKind::DiscCup, dir.path(), "test");
  const auto loaded = load_disc_split(dir / "test");
  ASSERT_EQ(loaded.size(), 2u);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(loaded[i].mask, samples[i].mask);
    ASSERT_TRUE(loaded[i].meta.disc.has_value());
    EXPECT_NEAR(loaded[i].meta.disc->cx, samples[i].meta.disc->cx, 1e-4);
    EXPECT_NEAR(*loaded[i].meta.disc->radius, *samples[i].meta.disc->radius, 1e-4);
  }
}

TEST(MaskConvention, RefugeCoding) {
  cv::Mat g(1, 3, CV_8U);
  g.at<std::uint8_t>(0, 0) = 0;
  g.at<std::uint8_t>(0, 1) = 128;
  g.at<std::uint8_t>(0, 2) = 255;
  const auto std_m = decode_disc_cup(g, MaskConvention::Standard);
  const auto ref_m = decode_disc_cup(g, MaskConvention::Refuge);
  EXPECT_EQ(std_m.at(0, 0, 0, 0), 0);
  EXPECT_EQ(std_m.at(0, 1, 0, 2), 1);
  EXPECT_EQ(ref_m.at(0, 1, 0, 0), 1);
  EXPECT_EQ(ref_m.at(0, 0, 0, 1), 1);
  EXPECT_EQ(ref_m.at(0, 1, 0, 1), 0);
  EXPECT_EQ(ref_m.at(0, 0, 0, 2), 0);
}

TEST(CentersCsv, ParsesAndRejects) {
  TempDir dir;
  std::ofstream(dir / "c.csv") << "filename,cx,cy,radius\na.png,10.5,20,7\nb.png,1,2\n";
  const auto c = read_centers_csv(dir / "c.csv");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].second.cx, 10.5);
  EXPECT_EQ(*c[0].second.radius, 7.0);
  EXPECT_FALSE(c[1].second.radius.has_value());
  std::ofstream(dir / "bad.csv") << "a.png,x,2\n";
  EXPECT_THROW(read_centers_csv(dir / "bad.csv"), Error);
}

Sample landmark(int n, int x, int y) {
  Sample s = blank(n, n);
  s.mask = Tensor<std::uint8_t>(1, 1, n, n);
  s.mask.at(0, 0, y, x) = 1;
  s.image.at(0, 1, y, x) = 1.0f;
  s.fov = s.mask;
  return s;
}

std::pair<int, int> find_one(const Tensor<std::uint8_t>& m) {
  for (int y = 0; y < m.h(); ++y)
    for (int x = 0; x < m.w(); ++x)
      if (m.at(0, 0, y, x)) return {x, y};
  return {-1, -1};
}

TEST(Augment, IdentityAndInvolution) {
  const Sample s = landmark(8, 2, 5);
  EXPECT_EQ(apply_augment(s, AugmentOp{}).image, s.image);
  const AugmentOp h{true, false, 0};
  const Sample twice = apply_augment(apply_augment(s, h), h);
  EXPECT_EQ(twice.image, s.image);
  EXPECT_EQ(twice.mask, s.mask);
  const AugmentOp quarter{false, false, 1};
  Sample r = s;
  for (int k = 0; k < 4; ++k) r = apply_augment(r, quarter);
  EXPECT_EQ(r.image, s.image);
}

TEST(Augment, LandmarksStayAligned) {
  const int n = 8;
  const Sample s = landmark(n, 2, 5);
  EXPECT_EQ(find_one(apply_augment(s, AugmentOp{true, false, 0}).mask), (std::pair{n - 1 - 2, 5}));
  EXPECT_EQ(find_one(apply_augment(s, AugmentOp{false, true, 0}).mask), (std::pair{2, n - 1 - 5}));
  EXPECT_EQ(find_one(apply_augment(s, AugmentOp{false, false, 1}).mask), (std::pair{5, n - 1 - 2}));
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    const Sample a = augment(s, seed);
    const auto [x, y] = find_one(a.mask);
    EXPECT_EQ(a.image.at(0, 1, y, x), 1.0f);
    EXPECT_EQ(find_one(*a.fov), (std::pair{x, y}));
  }
}

TEST(EpochSampler, DeterministicPermutations) {
  EpochSampler a(10, 42), b(10, 42);
  for (int epoch = 0; epoch < 3; ++epoch) {
    const auto ia = a.next(10), ib = b.next(10);
    EXPECT_EQ(ia, ib);
    auto sorted = ia;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(sorted[i], i);
  }
  EXPECT_EQ(a.epoch(), 3);
  EXPECT_THROW(EpochSampler(0, 1), Error);
}

TEST(Batch, StacksSamples) {
  SynthConfig cfg;
  cfg.size = 32;
  const auto s = synth_generate(cfg, 2);
  const Batch b = make_batch(s);
  EXPECT_EQ(b.image.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(b.labels.shape(), (Shape{2, 1, 32, 32}));
}

}  // namespace
}  // namespace stdnet
