#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "stdnet/backbone.hpp"
#include "stdnet/demixer.hpp"
#include "stdnet/losses.hpp"

namespace stdnet {

/// Ablation ladder. BL is the plain segmenter; the loss variants add a texture
/// extractor trained with the named demixing terms; STD also adds the texture
/// block.
enum class Variant { BL, BL_Ls, BL_Lt, BLST, STD };

inline constexpr std::array<Variant, 5> kAllVariants = {Variant::BL, Variant::BL_Ls,
                                                        Variant::BL_Lt, Variant::BLST,
                                                        Variant::STD};

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::BL: return "BL";
    case Variant::BL_Ls: return "BL+Ls";
    case Variant::BL_Lt: return "BL+Lt";
    case Variant::BLST: return "BLST";
    case Variant::STD: return "STD";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  if (s == "BL_Ls") return Variant::BL_Ls;
  if (s == "BL_Lt") return Variant::BL_Lt;
  if (s == "STD-Net") return Variant::STD;
  throw Error("unknown variant '" + s + "' (expected BL, BL+Ls, BL+Lt, BLST or STD)");
}

struct VariantTraits {
  bool extractor = false;
  bool texture_loss = false;
  bool structure_loss = false;
  bool texture_block = false;
};

inline VariantTraits traits(Variant v) {
  switch (v) {
    case Variant::BL: return {false, false, false, false};
    case Variant::BL_Ls: return {true, false, true, false};
    case Variant::BL_Lt: return {true, true, false, false};
    case Variant::BLST: return {true, true, true, false};
    case Variant::STD: return {true, true, true, true};
  }
  return {};
}

struct ModelConfig {
  Variant variant = Variant::STD;
  int image_channels = 3;
  int classes = 1;
  int extractor_width = 64;
  int extractor_layers = 10;
  int block_width = 32;
  double slope = 0.2;
  std::vector<int> backbone_channels = {32, 64, 128, 256};
  bool snap_texture = true;
};

template <typename Scalar>
struct ForwardPass {
  Decomposition<Scalar> decomposition;
  Tensor<Scalar> e_structures;
  SegmentationOutput<Scalar> output;
};

/// Texture extractor + texture block + multi-scale segmenter. Modules that a
/// variant does not use are not instantiated, so they own no parameters and
/// receive no gradient.
template <typename Scalar>
class StdNet {
public:
  explicit StdNet(const ModelConfig& cfg) : cfg_(cfg), traits_(traits(cfg.variant)) {
    if (traits_.extractor)
      extractor_.emplace(ExtractorConfig{cfg.image_channels, cfg.extractor_width,
                                         cfg.extractor_layers, cfg.slope,
                                         cfg.snap_texture});
    if (traits_.texture_block)
      block_.emplace(TextureBlockConfig{cfg.extractor_width, cfg.block_width, 1, cfg.slope});
    backbone_.emplace(MNetConfig{cfg.image_channels, 1, cfg.classes, cfg.backbone_channels});
  }

  const ModelConfig& config() const { return cfg_; }
  const VariantTraits& variant_traits() const { return traits_; }

  template <typename Rng>
  void init(Rng& rng) {
    if (extractor_) extractor_->init(rng);
    if (block_) block_->init(rng);
    backbone_->init(rng);
  }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    init(rng);
  }

  /// Inputs are expected on the dyadic grid (see kGridStep); they are
  /// re-snapped here so the decomposition is exact for any caller.
  ForwardPass<Scalar> forward(const Tensor<Scalar>& image, bool training) {
    ForwardPass<Scalar> pass;
    auto& dec = pass.decomposition;
    dec.input = image;
    if (cfg_.snap_texture) snap_to_grid(dec.input, 1.0 + kGridStep * 2);
    const Shape s = image.shape();
    if (extractor_) {
      auto ex = extractor_->forward(dec.input);
      dec.texture = std::move(ex.texture);
      dec.texture_features = std::move(ex.features);
      dec.structure = compute_structure(dec.input, dec.texture);
    } else {
      dec.texture = Tensor<Scalar>(s);
      dec.structure = dec.input;
    }
    if (block_)
      pass.e_structures = block_->forward(dec.texture_features, training);
    else
      pass.e_structures = Tensor<Scalar>(s.n, 1, s.h, s.w);
    pass.output = backbone_->forward(dec.structure, pass.e_structures);
    return pass;
  }

  /// Evaluates the objective for the variant's active terms and backpropagates
  /// it into every active module. Gradients accumulate; call zero_grad first.
  LossBreakdown backward(const ForwardPass<Scalar>& pass, const Tensor<Scalar>& gt,
                         const LossWeights& weights, Reduction reduction = Reduction::Sum) {
    weights.validate();
    const auto& dec = pass.decomposition;
    LossBreakdown b;
    auto seg = segmentation_loss_with_grad(pass.output, gt);
    b.segmentation = seg.value;

    const bool need_input = extractor_.has_value();
    auto in_grad = backbone_->backward(seg.d_fused, seg.d_sides, need_input);

    if (extractor_) {
      Tensor<Scalar>& d_structure = in_grad.image;
      Tensor<Scalar> d_texture(dec.texture.shape());
      if (traits_.texture_loss) {
        auto lt = l1_texture_loss_with_grad(dec.texture, reduction);
        b.texture = lt.value;
        d_texture += lt.grad * static_cast<Scalar>(weights.mu);
      }
      if (traits_.structure_loss) {
        auto ls = tv_structure_loss_with_grad(dec.structure, reduction);
        b.structure = ls.value;
        d_structure += ls.grad * static_cast<Scalar>(weights.mu * weights.lambda_s);
      }
      // S = I - T
      d_texture -= d_structure;
      Tensor<Scalar> d_features;
      if (block_) d_features = block_->backward(in_grad.extra);
      extractor_->backward(d_texture, d_features);
    }
    b.total = combine_losses(b.segmentation, b.texture, b.structure, weights);
    return b;
  }

  ParameterList<Scalar> parameters() {
    ParameterList<Scalar> out;
    if (extractor_) extractor_->collect(out, "extractor");
    if (block_) block_->collect(out, "texture_block");
    backbone_->collect(out, "backbone");
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters())
      if (p.grad) p.grad->fill(Scalar(0));
  }

  std::optional<TextureExtractor<Scalar>>& extractor() { return extractor_; }
  std::optional<TextureBlock<Scalar>>& texture_block() { return block_; }
  MNet<Scalar>& backbone() { return *backbone_; }

private:
  ModelConfig cfg_;
  VariantTraits traits_;
  std::optional<TextureExtractor<Scalar>> extractor_;
  std::optional<TextureBlock<Scalar>> block_;
  std::optional<MNet<Scalar>> backbone_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction; state is keyed by parameter order.
template <typename Scalar>
class Adam {
public:
  Adam(ParameterList<Scalar> params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (auto& p : params)
      if (p.trainable) {
        params_.push_back(p);
        m_.emplace_back(p.value->size(), 0.0);
        v_.emplace_back(p.value->size(), 0.0);
      }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& value = *params_[k].value;
      const auto& grad = *params_[k].grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double update = cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        value[i] = static_cast<Scalar>(value[i] - update);
      }
    }
  }

  long steps() const { return t_; }

private:
  AdamConfig cfg_;
  ParameterList<Scalar> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long t_ = 0;
};

}  // namespace stdnet
