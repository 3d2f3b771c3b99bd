#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stdnet/layers.hpp"
#include "stdnet/tensor.hpp"

namespace stdnet {

/// Spacing of the dyadic grid that images and texture maps live on. With
/// |T| < kTextureBound and inputs in [0, 1] on this grid, I - T needs at most
/// 24 significant bits, so the subtraction and the reconstruction S + T are
/// both exact in single precision.
inline constexpr double kGridStep = 1.0 / 65536.0;
inline constexpr double kTextureBound = 128.0;

template <typename Scalar>
Scalar snap_to_grid(Scalar v, double bound = kTextureBound) {
  const double limit = bound - kGridStep;
  const double clamped = std::clamp(static_cast<double>(v), -limit, limit);
  return static_cast<Scalar>(std::nearbyint(clamped / kGridStep) * kGridStep);
}

template <typename Scalar>
void snap_to_grid(Tensor<Scalar>& t, double bound = kTextureBound) {
  for (auto& v : t.values()) v = snap_to_grid(v, bound);
}

template <typename Scalar>
bool on_grid(const Tensor<Scalar>& t) {
  for (Scalar v : t.values()) {
    const double q = static_cast<double>(v) / kGridStep;
    if (q != std::nearbyint(q)) return false;
  }
  return true;
}

template <typename Scalar>
struct Decomposition {
  Tensor<Scalar> input;
  Tensor<Scalar> structure;
  Tensor<Scalar> texture;
  Tensor<Scalar> texture_features;
};

/// S = I - T, element-wise.
template <typename Scalar>
Tensor<Scalar> compute_structure(const Tensor<Scalar>& image, const Tensor<Scalar>& texture) {
  require_same_shape(image, texture, "compute_structure");
  return image - texture;
}

struct ExtractorConfig {
  int in_channels = 3;
  int width = 64;
  int layers = 10;
  double slope = 0.2;
  /// Snap T to the dyadic grid (straight-through gradient). Only gradient
  /// checks in double precision turn this off.
  bool snap_texture = true;
};

/// Shape-preserving stack of 3×3 convolutions, leaky ReLU after every layer
/// but the last. The last layer emits the signed texture map; the activation
/// feeding it is exposed as the texture features.
template <typename Scalar>
class TextureExtractor {
public:
  struct Output {
    Tensor<Scalar> texture;
    Tensor<Scalar> features;
  };

  TextureExtractor() = default;
  explicit TextureExtractor(const ExtractorConfig& cfg) : cfg_(cfg) {
    if (cfg.layers < 2) throw Error("TextureExtractor: need at least two layers");
    for (int i = 0; i < cfg.layers; ++i) {
      const int in = i == 0 ? cfg.in_channels : cfg.width;
      const int out = i + 1 == cfg.layers ? cfg.in_channels : cfg.width;
      convs_.emplace_back(in, out, 3);
      if (i + 1 < cfg.layers) acts_.emplace_back(static_cast<Scalar>(cfg.slope));
    }
  }

  const ExtractorConfig& config() const { return cfg_; }
  int feature_channels() const { return cfg_.width; }

  template <typename Rng>
  void init(Rng& rng) {
    for (auto& c : convs_) c.init(rng);
  }

  Output forward(const Tensor<Scalar>& image) {
    if (image.c() != cfg_.in_channels)
      throw Error("TextureExtractor: expected " + std::to_string(cfg_.in_channels) +
                  " channels, got " + std::to_string(image.c()));
    if (image.h() < 3 || image.w() < 3)
      throw Error("TextureExtractor: spatial size " + image.shape().str() +
                  " smaller than the 3x3 receptive field");
    Tensor<Scalar> x = image;
    for (std::size_t i = 0; i + 1 < convs_.size(); ++i) x = acts_[i].forward(convs_[i].forward(x));
    Output out;
    out.texture = convs_.back().forward(x);
    if (cfg_.snap_texture) snap_to_grid(out.texture);
    out.features = std::move(x);
    return out;
  }

  /// d_texture flows straight through the grid snap. d_features, when not
  /// empty, is added at the feature tap.
  Tensor<Scalar> backward(const Tensor<Scalar>& d_texture, const Tensor<Scalar>& d_features,
                          bool want_input_grad = false) {
    Tensor<Scalar> g = convs_.back().backward(d_texture);
    if (!d_features.empty()) g += d_features;
    for (std::size_t i = convs_.size() - 1; i-- > 0;) {
      g = acts_[i].backward(std::move(g));
      g = convs_[i].backward(g, want_input_grad || i > 0);
    }
    return g;
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i].collect(out, prefix + ".conv" + std::to_string(i + 1));
  }

  std::vector<Conv2d<Scalar>>& convs() { return convs_; }

private:
  ExtractorConfig cfg_{};
  std::vector<Conv2d<Scalar>> convs_;
  std::vector<LeakyRelu<Scalar>> acts_;
};

struct TextureBlockConfig {
  int in_channels = 64;
  int width = 32;
  int out_channels = 1;
  double slope = 0.2;
};

/// conv -> adaptive normalization -> leaky ReLU -> conv, shape preserving.
/// The output is the E-structure map.
template <typename Scalar>
class TextureBlock {
public:
  TextureBlock() = default;
  explicit TextureBlock(const TextureBlockConfig& cfg)
      : cfg_(cfg),
        conv1_(cfg.in_channels, cfg.width, 3),
        norm_(cfg.width),
        act_(static_cast<Scalar>(cfg.slope)),
        conv2_(cfg.width, cfg.out_channels, 3) {}

  const TextureBlockConfig& config() const { return cfg_; }

  template <typename Rng>
  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& features, bool training) {
    if (features.c() != cfg_.in_channels)
      throw Error("TextureBlock: expected " + std::to_string(cfg_.in_channels) +
                  " feature channels, got " + std::to_string(features.c()));
    return conv2_.forward(act_.forward(norm_.forward(conv1_.forward(features), training)));
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& d_e) {
    Tensor<Scalar> g = conv2_.backward(d_e);
    g = act_.backward(std::move(g));
    g = norm_.backward(g);
    return conv1_.backward(g);
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) {
    conv1_.collect(out, prefix + ".conv1");
    norm_.collect(out, prefix + ".norm");
    conv2_.collect(out, prefix + ".conv2");
  }

  Conv2d<Scalar>& conv1() { return conv1_; }
  Conv2d<Scalar>& conv2() { return conv2_; }
  AdaptiveNorm<Scalar>& norm() { return norm_; }

private:
  TextureBlockConfig cfg_{};
  Conv2d<Scalar> conv1_;
  AdaptiveNorm<Scalar> norm_;
  LeakyRelu<Scalar> act_;
  Conv2d<Scalar> conv2_;
};

/// Which statistics adaptive_norm uses.
enum class NormStats { Batch, Running };

/// y = a * x + b * BN(x), BN without affine terms.
template <typename Scalar>
Tensor<Scalar> adaptive_norm(const Tensor<Scalar>& x, Scalar a, Scalar b,
                             NormStats stats = NormStats::Batch) {
  AdaptiveNorm<Scalar> norm(x.c());
  norm.a() = a;
  norm.b() = b;
  return norm.forward(x, stats == NormStats::Batch);
}

}  // namespace stdnet
