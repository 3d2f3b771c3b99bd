#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "stdnet/image_io.hpp"
#include "stdnet/tensor.hpp"

namespace stdnet {

namespace fs = std::filesystem;

struct DiscLocation {
  double cx = 0;
  double cy = 0;
  std::optional<double> radius;
};

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool operator==(const Box&) const = default;
};

struct SampleMeta {
  std::string id;
  int original_h = 0;
  int original_w = 0;
  std::optional<DiscLocation> disc;
  std::optional<Box> crop;
};

/// image (1, 3, H, W) in [0, 1]; mask (1, K, H, W) in {0, 1}; optional fov
/// (1, 1, H, W) in {0, 1}.
struct Sample {
  Tensor<float> image;
  Tensor<std::uint8_t> mask;
  std::optional<Tensor<std::uint8_t>> fov;
  SampleMeta meta;

  void validate() const {
    if (image.n() != 1 || image.c() != 3) throw Error("sample image must be (1, 3, H, W)");
    if (mask.n() != 1 || !image.shape().same_spatial(mask.shape()))
      throw Error("sample mask is not aligned with the image");
    if (fov && (fov->c() != 1 || !image.shape().same_spatial(fov->shape())))
      throw Error("sample fov is not aligned with the image");
    for (float v : image.values())
      if (!(v >= 0.0f && v <= 1.0f)) throw Error("sample image outside [0, 1]");
    for (auto v : mask.values())
      if (v > 1) throw Error("sample mask is not binary");
    if (fov)
      for (auto v : fov->values())
        if (v > 1) throw Error("sample fov is not binary");
  }
};

inline Tensor<std::uint8_t> binarize_gray(const cv::Mat& gray) {
  Tensor<std::uint8_t> m(1, 1, gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x) m.at(0, 0, y, x) = gray.at<std::uint8_t>(y, x) >= 128 ? 1 : 0;
  return m;
}

/// Image + manual annotation (+ optional FOV), resized to size x size.
inline Sample load_vessel_sample(const fs::path& image, const fs::path& manual,
                                 const std::optional<fs::path>& fov, int size = 512) {
  Sample s;
  s.meta.id = image.stem().string();
  const Tensor<float> raw = read_rgb(image);
  const cv::Mat gt = read_gray_u8(manual);
  if (gt.rows != raw.h() || gt.cols != raw.w())
    throw Error("annotation size " + std::to_string(gt.cols) + "x" + std::to_string(gt.rows) +
                " does not match image " + std::to_string(raw.w()) + "x" + std::to_string(raw.h()));
  s.meta.original_h = raw.h();
  s.meta.original_w = raw.w();
  s.image = resize_bilinear(raw, size, size);
  s.mask = resize_nearest(binarize_gray(gt), size, size);
  if (fov) {
    const cv::Mat f = read_gray_u8(*fov);
    if (f.rows != raw.h() || f.cols != raw.w()) throw Error("fov size does not match image");
    s.fov = resize_nearest(binarize_gray(f), size, size);
  }
  s.validate();
  return s;
}

inline std::vector<fs::path> sorted_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("missing directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename().string()[0] != '.') out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string leading_number(const fs::path& p) {
  const std::string s = p.filename().string();
  std::size_t k = 0;
  while (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) ++k;
  return s.substr(0, k);
}

/// `<root>/<split>/{images,1st_manual,mask}/`, files paired by sorted order
/// and checked by their leading index.
inline std::vector<Sample> load_drive_split(const fs::path& root, const std::string& split, int size = 512) {
  const fs::path base = root / split;
  const auto images = sorted_files(base / "images");
  const auto manual = sorted_files(base / "1st_manual");
  const bool has_fov = fs::is_directory(base / "mask");
  const auto fov = has_fov ? sorted_files(base / "mask") : std::vector<fs::path>{};
  if (images.empty()) throw Error("no images in " + (base / "images").string());
  if (manual.size() != images.size() || (has_fov && fov.size() != images.size()))
    throw Error("image/annotation/mask counts differ in " + base.string());
  std::vector<Sample> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto idx = leading_number(images[i]);
    if (!idx.empty() && (leading_number(manual[i]) != idx || (has_fov && leading_number(fov[i]) != idx)))
      throw Error("files are not index-matched: " + images[i].filename().string());
    out.push_back(load_vessel_sample(images[i], manual[i],
                                     has_fov ? std::optional<fs::path>(fov[i]) : std::nullopt, size));
  }
  return out;
}

/// Gray-level coding of disc/cup masks. Standard: background 0, rim 128,
/// cup 255. Refuge: cup 0, rim 128, background 255.
enum class MaskConvention { Standard, Refuge };

inline MaskConvention parse_mask_convention(const std::string& s) {
  if (s == "standard") return MaskConvention::Standard;
  if (s == "refuge") return MaskConvention::Refuge;
  throw Error("unknown mask convention '" + s + "'");
}

inline Tensor<std::uint8_t> decode_disc_cup(const cv::Mat& gray, MaskConvention conv) {
  Tensor<std::uint8_t> m(1, 2, gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x) {
      const int g = gray.at<std::uint8_t>(y, x);
      const bool disc = conv == MaskConvention::Standard ? g >= 64 : g < 192;
      const bool cup = conv == MaskConvention::Standard ? g >= 192 : g < 64;
      m.at(0, 0, y, x) = disc;
      m.at(0, 1, y, x) = cup;
    }
  return m;
}

inline std::vector<std::pair<std::string, DiscLocation>> read_centers_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing file: " + path.string());
  std::vector<std::pair<std::string, DiscLocation>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    if (lineno == 1 && f.size() >= 1 && f[0] == "filename") continue;
    if (f.size() < 3 || f.size() > 4)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected filename,cx,cy[,radius]");
    DiscLocation d;
    try {
      d.cx = std::stod(f[1]);
      d.cy = std::stod(f[2]);
      if (f.size() == 4 && !f[3].empty()) d.radius = std::stod(f[3]);
    } catch (const std::exception&) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
    out.emplace_back(f[0], d);
  }
  return out;
}

/// Full-size fundus image with its 2-channel (disc, cup) mask.
inline Sample load_disc_sample(const fs::path& image, const fs::path& mask,
                               MaskConvention conv = MaskConvention::Standard) {
  Sample s;
  s.meta.id = image.stem().string();
  s.image = read_rgb(image);
  const cv::Mat g = read_gray_u8(mask);
  if (g.rows != s.image.h() || g.cols != s.image.w()) throw Error("annotation size does not match image");
  s.mask = decode_disc_cup(g, conv);
  s.meta.original_h = s.image.h();
  s.meta.original_w = s.image.w();
  s.validate();
  return s;
}

/// `<root>/{images,masks}/` + optional `<root>/centers.csv`; masks are paired
/// with images by file stem.
inline std::vector<Sample> load_disc_split(const fs::path& root,
                                           MaskConvention conv = MaskConvention::Standard) {
  const auto images = sorted_files(root / "images");
  const auto masks = sorted_files(root / "masks");
  std::vector<std::pair<std::string, DiscLocation>> centers;
  if (fs::exists(root / "centers.csv")) centers = read_centers_csv(root / "centers.csv");
  std::vector<Sample> out;
  for (const auto& img : images) {
    auto it = std::find_if(masks.begin(), masks.end(),
                           [&](const fs::path& m) { return m.stem() == img.stem(); });
    if (it == masks.end()) throw Error("no mask for " + img.filename().string());
    Sample s = load_disc_sample(img, *it, conv);
    for (const auto& [name, loc] : centers)
      if (name == img.filename().string() || name == img.stem().string()) s.meta.disc = loc;
    out.push_back(std::move(s));
  }
  if (out.empty()) throw Error("no images in " + (root / "images").string());
  return out;
}

/// Tight box of the nonzero pixels of mask channel c; empty when none.
inline std::optional<Box> mask_bounding_box(const Tensor<std::uint8_t>& m, int c = 0) {
  Box b{m.w(), m.h(), 0, 0};
  bool any = false;
  for (int y = 0; y < m.h(); ++y)
    for (int x = 0; x < m.w(); ++x)
      if (m.at(0, c, y, x)) {
        any = true;
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
  if (!any) return std::nullopt;
  return b;
}

template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar>& t, const Box& b) {
  Tensor<Scalar> out(t.n(), t.c(), b.height(), b.width());
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < b.height(); ++y)
        for (int x = 0; x < b.width(); ++x) out.at(n, c, y, x) = t.at(n, c, b.y0 + y, b.x0 + x);
  return out;
}

/// Crops the disc box grown by margin_px on each side (clamped to the image)
/// and resizes it to out_size x out_size. The box comes from center +/- radius
/// when a radius is known, otherwise from the disc annotation.
inline Sample crop_disc_region(const Sample& s, const std::optional<DiscLocation>& center,
                               int margin_px = 50, int out_size = 256) {
  if (margin_px < 0) throw Error("crop margin must be >= 0");
  const int h = s.image.h(), w = s.image.w();
  if (center && !(center->cx >= 0 && center->cx < w && center->cy >= 0 && center->cy < h))
    throw Error("disc center outside the image");
  Box b;
  if (center && center->radius) {
    const double r = *center->radius;
    b = {static_cast<int>(std::floor(center->cx - r)), static_cast<int>(std::floor(center->cy - r)),
         static_cast<int>(std::ceil(center->cx + r)), static_cast<int>(std::ceil(center->cy + r))};
  } else {
    const auto tight = mask_bounding_box(s.mask, 0);
    if (!tight) throw Error("empty disc annotation for " + s.meta.id);
    b = *tight;
  }
  b = {std::max(0, b.x0 - margin_px), std::max(0, b.y0 - margin_px), std::min(w, b.x1 + margin_px),
       std::min(h, b.y1 + margin_px)};
  if (b.width() <= 0 || b.height() <= 0) throw Error("empty crop region");
  Sample out;
  out.meta = s.meta;
  out.meta.crop = b;
  out.image = resize_bilinear(crop(s.image, b), out_size, out_size);
  out.mask = resize_nearest(crop(s.mask, b), out_size, out_size);
  if (s.fov) out.fov = resize_nearest(crop(*s.fov, b), out_size, out_size);
  return out;
}

/// Polar geometry in continuous pixel coordinates (pixel (x, y) is centred at
/// (x + 0.5, y + 0.5)). Defaults: patch centre and half the side.
struct PolarGeometry {
  std::optional<double> cx;
  std::optional<double> cy;
  std::optional<double> radius;
};

namespace detail {

template <typename Scalar>
Scalar lerp(Scalar a, Scalar b, double t) {
  return static_cast<Scalar>(a + (b - a) * t);
}

/// Bilinear sample with clamped borders; x, y in pixel-index coordinates.
template <typename Scalar>
Scalar sample_bilinear(const Scalar* p, int h, int w, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double tx = x - x0, ty = y - y0;
  const Scalar top = lerp(p[y0 * w + x0], p[y0 * w + x1], tx);
  const Scalar bot = lerp(p[y1 * w + x0], p[y1 * w + x1], tx);
  return lerp(top, bot, ty);
}

template <typename Scalar>
Scalar sample_nearest(const Scalar* p, int h, int w, double x, double y) {
  const int xi = std::clamp(static_cast<int>(std::lround(x)), 0, w - 1);
  const int yi = std::clamp(static_cast<int>(std::lround(y)), 0, h - 1);
  return p[yi * w + xi];
}

inline void require_square(const Shape& s, const char* what) {
  if (s.h != s.w || s.h == 0) throw Error(std::string(what) + ": patch must be square and non-empty");
}

}  // namespace detail

enum class Sampling { Bilinear, Nearest };

/// Cartesian -> polar on a grid of the same size: row i is radius i * R / N,
/// column j is angle 2 pi j / N.
template <typename Scalar>
Tensor<Scalar> polar_transform(const Tensor<Scalar>& patch, PolarGeometry g = {},
                               Sampling mode = Sampling::Bilinear) {
  detail::require_square(patch.shape(), "polar_transform");
  const int n = patch.h();
  const double cx = g.cx.value_or(n / 2.0), cy = g.cy.value_or(n / 2.0), r = g.radius.value_or(n / 2.0);
  Tensor<Scalar> out(patch.shape());
  for (int b = 0; b < patch.n(); ++b)
    for (int c = 0; c < patch.c(); ++c) {
      const Scalar* src = patch.plane(b, c);
      Scalar* dst = out.plane(b, c);
      for (int i = 0; i < n; ++i) {
        const double rho = i * r / n;
        for (int j = 0; j < n; ++j) {
          const double th = 2.0 * std::numbers::pi * j / n;
          const double x = cx + rho * std::cos(th) - 0.5, y = cy + rho * std::sin(th) - 0.5;
          dst[i * n + j] = mode == Sampling::Bilinear ? detail::sample_bilinear(src, n, n, x, y)
                                                      : detail::sample_nearest(src, n, n, x, y);
        }
      }
    }
  return out;
}

/// Polar -> Cartesian; the angle axis wraps, radii beyond the last row clamp.
template <typename Scalar>
Tensor<Scalar> inverse_polar(const Tensor<Scalar>& polar, PolarGeometry g = {},
                             Sampling mode = Sampling::Bilinear) {
  detail::require_square(polar.shape(), "inverse_polar");
  const int n = polar.h();
  const double cx = g.cx.value_or(n / 2.0), cy = g.cy.value_or(n / 2.0), r = g.radius.value_or(n / 2.0);
  Tensor<Scalar> out(polar.shape());
  for (int b = 0; b < polar.n(); ++b)
    for (int c = 0; c < polar.c(); ++c) {
      const Scalar* src = polar.plane(b, c);
      Scalar* dst = out.plane(b, c);
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double row = std::hypot(dx, dy) * n / r;
          double col = std::atan2(dy, dx) / (2.0 * std::numbers::pi) * n;
          if (col < 0) col += n;
          Scalar v;
          if (mode == Sampling::Nearest) {
            const int ri = std::min(static_cast<int>(std::lround(row)), n - 1);
            const int ci = static_cast<int>(std::lround(col)) % n;
            v = src[ri * n + ci];
          } else {
            const double rr = std::min(row, static_cast<double>(n - 1));
            const int r0 = static_cast<int>(std::floor(rr)), r1 = std::min(r0 + 1, n - 1);
            const int c0 = static_cast<int>(std::floor(col)) % n, c1 = (c0 + 1) % n;
            const double tr = rr - r0, tc = col - std::floor(col);
            const Scalar lo = detail::lerp(src[r0 * n + c0], src[r0 * n + c1], tc);
            const Scalar hi = detail::lerp(src[r1 * n + c0], src[r1 * n + c1], tc);
            v = detail::lerp(lo, hi, tr);
          }
          dst[y * n + x] = v;
        }
    }
  return out;
}

/// Sample-level polar transform (bilinear image, nearest labels).
inline Sample polar_sample(const Sample& s) {
  Sample out;
  out.meta = s.meta;
  out.image = polar_transform(s.image);
  snap_to_grid(out.image, 1.0);
  out.mask = polar_transform(s.mask, {}, Sampling::Nearest);
  if (s.fov) out.fov = polar_transform(*s.fov, {}, Sampling::Nearest);
  return out;
}

enum class SynthKind { Vessel, DiscCup };

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "vessel") return SynthKind::Vessel;
  if (s == "disc_cup") return SynthKind::DiscCup;
  throw Error("unknown synthetic kind '" + s + "' (expected vessel or disc_cup)");
}

inline const char* to_string(SynthKind k) { return k == SynthKind::Vessel ? "vessel" : "disc_cup"; }

struct SynthConfig {
  SynthKind kind = SynthKind::Vessel;
  int size = 128;
  int curves_min = 6;
  int curves_max = 10;
  double width_min = 1.0;
  double width_max = 3.0;
  double vessel_contrast = 0.35;
  double noise_amplitude = 0.06;
  double noise_freq_min = 0.18;  // cycles per pixel
  double noise_freq_max = 0.45;
  int noise_components = 32;
  double disc_radius_min = 24;
  double disc_radius_max = 34;
  double cup_radius_min = 9;
  double cup_radius_max = 18;
  std::uint64_t seed = 0;

  void validate() const {
    if (size < 16) throw Error("synth: size must be >= 16");
    if (curves_min < 0 || curves_max < curves_min) throw Error("synth: bad curve count range");
    if (width_min <= 0 || width_max < width_min) throw Error("synth: bad vessel width range");
    if (noise_amplitude < 0) throw Error("synth: noise amplitude must be >= 0");
    if (noise_freq_min <= 0 || noise_freq_max < noise_freq_min || noise_freq_max > 0.5)
      throw Error("synth: noise band must satisfy 0 < min <= max <= 0.5");
    if (noise_components < 1) throw Error("synth: noise_components must be >= 1");
    if (kind == SynthKind::DiscCup) {
      if (disc_radius_min <= 0 || disc_radius_max < disc_radius_min) throw Error("synth: bad disc radius range");
      if (cup_radius_min <= 0 || cup_radius_max < cup_radius_min) throw Error("synth: bad cup radius range");
      if (cup_radius_max >= disc_radius_min) throw Error("synth: cup radius must be below disc radius");
      if (2 * disc_radius_max >= size) throw Error("synth: disc does not fit the canvas");
    }
  }
};

namespace synth {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Smooth fundus-like illumination field.
inline std::vector<double> background(int n, Rng& rng) {
  std::vector<double> bg(static_cast<std::size_t>(n) * n);
  const double gx = uniform(rng, -0.1, 0.1), gy = uniform(rng, -0.1, 0.1);
  const double f1 = uniform(rng, 0.5, 1.5), p1 = uniform(rng, 0, 2 * std::numbers::pi);
  const double f2 = uniform(rng, 0.5, 1.5), p2 = uniform(rng, 0, 2 * std::numbers::pi);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double u = x / double(n) - 0.5, v = y / double(n) - 0.5;
      const double vignette = 1.0 - 0.6 * (u * u + v * v);
      bg[y * n + x] = (0.62 + gx * u + gy * v + 0.04 * std::sin(2 * std::numbers::pi * f1 * u + p1) +
                       0.04 * std::sin(2 * std::numbers::pi * f2 * v + p2)) *
                      vignette;
    }
  return bg;
}

/// Sum of random plane waves with spatial frequency in [fmin, fmax] and unit
/// variance, scaled to the requested amplitude.
inline std::vector<double> band_noise(int n, const SynthConfig& c, Rng& rng) {
  std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
  if (c.noise_amplitude == 0) return out;
  const double scale = c.noise_amplitude * std::sqrt(2.0 / c.noise_components);
  for (int k = 0; k < c.noise_components; ++k) {
    const double f = uniform(rng, c.noise_freq_min, c.noise_freq_max);
    const double th = uniform(rng, 0, std::numbers::pi);
    const double ph = uniform(rng, 0, 2 * std::numbers::pi);
    const double fx = 2 * std::numbers::pi * f * std::cos(th), fy = 2 * std::numbers::pi * f * std::sin(th);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) out[y * n + x] += scale * std::cos(fx * x + fy * y + ph);
  }
  return out;
}

struct Stroke {
  std::vector<std::array<double, 2>> points;
  double radius;
};

/// Smooth random walk with slowly drifting curvature.
inline Stroke random_curve(int n, double x, double y, double heading, double radius, double length, Rng& rng) {
  Stroke s{{{x, y}}, radius};
  double kappa = 0;
  for (double t = 0; t < length; t += 1.0) {
    kappa = std::clamp(kappa + uniform(rng, -0.015, 0.015), -0.06, 0.06);
    heading += kappa;
    x += std::cos(heading);
    y += std::sin(heading);
    s.points.push_back({x, y});
    if (x < -4 || y < -4 || x > n + 4 || y > n + 4) break;
  }
  return s;
}

/// Per-pixel coverage max(0, min(1, r + 0.5 - d)) and exact mask d <= r.
inline void rasterize(const Stroke& s, int n, std::vector<double>& coverage, std::vector<std::uint8_t>& mask) {
  const double r = s.radius;
  for (std::size_t k = 0; k + 1 < s.points.size(); ++k) {
    const auto [ax, ay] = s.points[k];
    const auto [bx, by] = s.points[k + 1];
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - r - 1)));
    const int x1 = std::min(n - 1, static_cast<int>(std::ceil(std::max(ax, bx) + r + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - r - 1)));
    const int y1 = std::min(n - 1, static_cast<int>(std::ceil(std::max(ay, by) + r + 1)));
    const double vx = bx - ax, vy = by - ay, len2 = vx * vx + vy * vy;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        double t = len2 > 0 ? ((x - ax) * vx + (y - ay) * vy) / len2 : 0;
        t = std::clamp(t, 0.0, 1.0);
        const double d = std::hypot(x - (ax + t * vx), y - (ay + t * vy));
        const std::size_t i = static_cast<std::size_t>(y) * n + x;
        coverage[i] = std::max(coverage[i], std::clamp(r + 0.5 - d, 0.0, 1.0));
        if (d <= r) mask[i] = 1;
      }
  }
}

inline Tensor<float> compose_rgb(int n, const std::vector<double>& bg, const std::vector<double>& shade,
                                 const std::vector<double>& noise, const std::array<double, 3>& tint,
                                 const std::vector<std::array<double, 3>>* add = nullptr) {
  Tensor<float> img(1, 3, n, n);
  const std::array<double, 3> noise_gain = {1.0, 0.8, 0.6};
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < bg.size(); ++i) {
      double v = bg[i] * tint[c];
      if (add) v += (*add)[i][c];
      v *= 1.0 - shade[i];
      v += noise_gain[c] * noise[i];
      img.plane(0, c)[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  snap_to_grid(img, 1.0);
  return img;
}

inline Sample vessel_sample(const SynthConfig& c, Rng& rng, const std::string& id) {
  const int n = c.size;
  auto bg = background(n, rng);
  std::vector<double> coverage(bg.size(), 0.0);
  std::vector<std::uint8_t> mask(bg.size(), 0);
  const int count = std::uniform_int_distribution<int>(c.curves_min, c.curves_max)(rng);
  for (int k = 0; k < count; ++k) {
    const double r = uniform(rng, c.width_min, c.width_max) / 2.0;
    const auto curve = random_curve(n, uniform(rng, 0.1 * n, 0.9 * n), uniform(rng, 0.1 * n, 0.9 * n),
                                    uniform(rng, 0, 2 * std::numbers::pi), r, uniform(rng, 0.4 * n, 1.2 * n), rng);
    rasterize(curve, n, coverage, mask);
  }
  std::vector<double> shade(bg.size());
  for (std::size_t i = 0; i < bg.size(); ++i) shade[i] = c.vessel_contrast * coverage[i];
  const auto noise = band_noise(n, c, rng);

  Sample s;
  s.meta = {id, n, n, std::nullopt, std::nullopt};
  s.image = compose_rgb(n, bg, shade, noise, {0.95, 0.55, 0.3});
  s.mask = Tensor<std::uint8_t>(1, 1, n, n);
  Tensor<std::uint8_t> fov(1, 1, n, n);
  const double fr = 0.49 * n;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * n + x;
      const bool inside = std::hypot(x + 0.5 - n / 2.0, y + 0.5 - n / 2.0) <= fr;
      fov[i] = inside;
      s.mask[i] = inside && mask[i];
      if (!inside)
        for (int ch = 0; ch < 3; ++ch) s.image.plane(0, ch)[i] = 0.0f;
    }
  s.fov = std::move(fov);
  return s;
}

inline Sample disc_cup_sample(const SynthConfig& c, Rng& rng, const std::string& id) {
  const int n = c.size;
  auto bg = background(n, rng);
  const double rd = uniform(rng, c.disc_radius_min, c.disc_radius_max);
  const double rc = uniform(rng, c.cup_radius_min, c.cup_radius_max);
  const double dcx = uniform(rng, rd + 4, n - rd - 4), dcy = uniform(rng, rd + 4, n - rd - 4);
  const double off = (rd - rc) * 0.4;
  const double ang = uniform(rng, 0, 2 * std::numbers::pi);
  const double ccx = dcx + uniform(rng, 0, off) * std::cos(ang), ccy = dcy + uniform(rng, 0, off) * std::sin(ang);

  std::vector<double> coverage(bg.size(), 0.0);
  std::vector<std::uint8_t> vmask(bg.size(), 0);
  const int count = std::uniform_int_distribution<int>(c.curves_min, c.curves_max)(rng);
  for (int k = 0; k < count; ++k) {
    const double r = uniform(rng, c.width_min, c.width_max) / 2.0;
    rasterize(random_curve(n, ccx, ccy, uniform(rng, 0, 2 * std::numbers::pi), r, uniform(rng, 0.3 * n, 0.8 * n), rng),
              n, coverage, vmask);
  }
  std::vector<double> shade(bg.size());
  std::vector<std::array<double, 3>> add(bg.size());
  Sample s;
  s.mask = Tensor<std::uint8_t>(1, 2, n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * n + x;
      const double dd = std::hypot(x - dcx, y - dcy), dc = std::hypot(x - ccx, y - ccy);
      const double cov_d = std::clamp(rd + 0.5 - dd, 0.0, 1.0), cov_c = std::clamp(rc + 0.5 - dc, 0.0, 1.0);
      // soft halo outside the rim
      const double halo = std::exp(-std::max(0.0, dd - rd) / 6.0) * 0.08;
      add[i] = {0.30 * cov_d + 0.12 * cov_c + halo, 0.28 * cov_d + 0.14 * cov_c + halo,
                0.12 * cov_d + 0.08 * cov_c};
      shade[i] = c.vessel_contrast * coverage[i];
      s.mask.at(0, 0, y, x) = dd <= rd;
      s.mask.at(0, 1, y, x) = dc <= rc;
    }
  const auto noise = band_noise(n, c, rng);
  s.image = compose_rgb(n, bg, shade, noise, {0.9, 0.5, 0.25}, &add);
  s.meta = {id, n, n, DiscLocation{dcx + 0.5, dcy + 0.5, rd}, std::nullopt};
  return s;
}

}  // namespace synth

/// Deterministic sequence of n samples; sample i depends only on (seed, i).
inline std::vector<Sample> synth_generate(const SynthConfig& cfg, int n, int first_index = 0) {
  cfg.validate();
  if (n < 0) throw Error("synth: sample count must be >= 0");
  std::vector<Sample> out;
  out.reserve(n);
  for (int i = first_index; i < first_index + n; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(i), 0x5d1e5eedU};
    synth::Rng rng(seq);
    char id[16];
    std::snprintf(id, sizeof id, "%04d", i);
    out.push_back(cfg.kind == SynthKind::Vessel ? synth::vessel_sample(cfg, rng, id)
                                                : synth::disc_cup_sample(cfg, rng, id));
  }
  return out;
}

/// Writes synthetic samples in the on-disk layout the loaders read:
/// vessel -> `<root>/<split>/{images,1st_manual,mask}/`,
/// disc_cup -> `<root>/<split>/{images,masks}/` + centers.csv.
inline void write_synth_split(const std::vector<Sample>& samples, SynthKind kind, const fs::path& root,
                              const std::string& split) {
  const fs::path base = root / split;
  std::ofstream centers;
  if (kind == SynthKind::DiscCup) {
    fs::create_directories(base);
    centers.open(base / "centers.csv");
    centers << "filename,cx,cy,radius\n";
  }
  for (const auto& s : samples) {
    const std::string id = s.meta.id;
    if (kind == SynthKind::Vessel) {
      write_png(base / "images" / (id + "_image.png"), s.image);
      write_mask_png(base / "1st_manual" / (id + "_manual1.png"), s.mask);
      write_mask_png(base / "mask" / (id + "_mask.png"), *s.fov);
    } else {
      write_png(base / "images" / (id + ".png"), s.image);
      cv::Mat m(s.mask.h(), s.mask.w(), CV_8U);
      for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x)
          m.at<std::uint8_t>(y, x) = s.mask.at(0, 1, y, x) ? 255 : s.mask.at(0, 0, y, x) ? 128 : 0;
      write_mat(base / "masks" / (id + ".png"), m);
      const auto& d = *s.meta.disc;
      centers << id << ".png," << d.cx << ',' << d.cy << ',' << *d.radius << '\n';
    }
  }
}

/// Draw of the flip/rotation augmentation.
struct AugmentOp {
  bool hflip = false;
  bool vflip = false;
  int rot90 = 0;  // counter-clockwise quarter turns

  bool identity() const { return !hflip && !vflip && rot90 == 0; }
};

inline AugmentOp draw_augment(std::uint64_t seed, bool allow_rotation = true) {
  std::mt19937_64 rng(seed);
  AugmentOp op;
  op.hflip = rng() & 1;
  op.vflip = rng() & 1;
  op.rot90 = allow_rotation ? static_cast<int>(rng() % 4) : 0;
  return op;
}

template <typename Scalar>
Tensor<Scalar> apply_augment(const Tensor<Scalar>& t, const AugmentOp& op) {
  if (op.rot90 % 2 && t.h() != t.w()) throw Error("augment: quarter turns need square images");
  Tensor<Scalar> out(t.shape());
  const int h = t.h(), w = t.w();
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int sx = op.hflip ? w - 1 - x : x;
          int sy = op.vflip ? h - 1 - y : y;
          for (int k = 0; k < op.rot90; ++k) {
            // output (sx, sy) of a ccw turn reads input (w - 1 - sy, sx)
            const int nx = w - 1 - sy, ny = sx;
            sx = nx;
            sy = ny;
          }
          out.at(n, c, y, x) = t.at(n, c, sy, sx);
        }
  return out;
}

inline Sample apply_augment(const Sample& s, const AugmentOp& op) {
  if (op.identity()) return s;
  Sample out;
  out.meta = s.meta;
  out.image = apply_augment(s.image, op);
  out.mask = apply_augment(s.mask, op);
  if (s.fov) out.fov = apply_augment(*s.fov, op);
  return out;
}

inline Sample augment(const Sample& s, std::uint64_t seed) {
  return apply_augment(s, draw_augment(seed, s.image.h() == s.image.w()));
}

/// Reshuffles 0..n-1 at every epoch boundary from a single owned stream.
class EpochSampler {
public:
  EpochSampler(std::size_t n, std::uint64_t seed, bool shuffle = true) : rng_(seed), shuffle_(shuffle) {
    if (n == 0) throw Error("EpochSampler: empty dataset");
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    pos_ = n;
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        if (shuffle_) std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
        ++epoch_;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  long epoch() const { return epoch_; }
  std::mt19937_64& rng() { return rng_; }

private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  bool shuffle_;
  std::size_t pos_ = 0;
  long epoch_ = 0;
};

struct Batch {
  Tensor<float> image;
  Tensor<float> labels;
};

inline Tensor<float> to_float(const Tensor<std::uint8_t>& m) {
  Tensor<float> out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i];
  return out;
}

inline Batch make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw Error("make_batch: no samples");
  std::vector<Tensor<float>> images, labels;
  for (const auto& s : samples) {
    images.push_back(s.image);
    labels.push_back(to_float(s.mask));
  }
  return {stack_batch(std::span<const Tensor<float>>(images)), stack_batch(std::span<const Tensor<float>>(labels))};
}

}  // namespace stdnet
