#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "stdnet/segmentation_output.hpp"
#include "stdnet/tensor.hpp"

namespace stdnet {

enum class Reduction { Sum, Mean };

inline Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::Sum;
  if (s == "mean") return Reduction::Mean;
  throw Error("unknown loss reduction '" + s + "' (expected sum or mean)");
}

inline const char* to_string(Reduction r) { return r == Reduction::Sum ? "sum" : "mean"; }

/// Weights of the demixing term: total = seg + mu * (texture + lambda_s * structure).
struct LossWeights {
  double lambda_s = 1.0;
  double mu = 0.001;

  void validate() const {
    if (!(lambda_s >= 0.0) || !(mu >= 0.0))
      throw Error("loss weights must be nonnegative");
  }
};

/// Forward differences with a zero trailing row/column.
template <typename Scalar>
struct GradientField {
  Tensor<Scalar> dx;
  Tensor<Scalar> dy;
};

template <typename Scalar>
struct LossAndGrad {
  double value = 0.0;
  Tensor<Scalar> grad;
};

namespace detail {

template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const char* what) {
  if (!all_finite(t)) throw Error(std::string(what) + ": non-finite input");
}

template <typename Scalar>
void require_nonempty_image(const Tensor<Scalar>& t, const char* what) {
  if (t.n() <= 0 || t.c() <= 0 || t.h() <= 0 || t.w() <= 0)
    throw Error(std::string(what) + ": degenerate image " + t.shape().str());
}

}  // namespace detail

template <typename Scalar>
GradientField<Scalar> spatial_gradient(const Tensor<Scalar>& s) {
  detail::require_nonempty_image(s, "spatial_gradient");
  GradientField<Scalar> g{Tensor<Scalar>(s.shape()), Tensor<Scalar>(s.shape())};
  const int h = s.h(), w = s.w();
  for (int n = 0; n < s.n(); ++n)
    for (int c = 0; c < s.c(); ++c) {
      const Scalar* src = s.plane(n, c);
      Scalar* dx = g.dx.plane(n, c);
      Scalar* dy = g.dy.plane(n, c);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int i = y * w + x;
          dx[i] = x + 1 < w ? src[i + 1] - src[i] : Scalar(0);
          dy[i] = y + 1 < h ? src[i + w] - src[i] : Scalar(0);
        }
    }
  return g;
}

/// Isotropic total variation: sum over pixel sites of the Euclidean norm of
/// the forward-difference gradient, pooled over both directions and all
/// channels. The gradient uses the zero subgradient where the norm vanishes.
template <typename Scalar>
LossAndGrad<Scalar> tv_structure_loss_with_grad(const Tensor<Scalar>& s,
                                                Reduction reduction = Reduction::Sum,
                                                bool want_grad = true) {
  detail::require_finite(s, "tv_structure_loss");
  const auto g = spatial_gradient(s);
  const int h = s.h(), w = s.w(), channels = s.c();
  const std::size_t plane = s.shape().plane();
  LossAndGrad<Scalar> out;
  if (want_grad) out.grad = Tensor<Scalar>(s.shape());
  const double scale =
      reduction == Reduction::Sum ? 1.0 : 1.0 / (static_cast<double>(s.n()) * plane);
  double total = 0.0;
  for (int n = 0; n < s.n(); ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      double sq = 0.0;
      for (int c = 0; c < channels; ++c) {
        const double a = g.dx.plane(n, c)[i];
        const double b = g.dy.plane(n, c)[i];
        sq += a * a + b * b;
      }
      const double r = std::sqrt(sq);
      total += r;
      if (!want_grad || r == 0.0) continue;
      const int y = static_cast<int>(i / w);
      const int x = static_cast<int>(i % w);
      const double k = scale / r;
      for (int c = 0; c < channels; ++c) {
        Scalar* d = out.grad.plane(n, c);
        const double ax = g.dx.plane(n, c)[i] * k;
        const double ay = g.dy.plane(n, c)[i] * k;
        if (x + 1 < w) {
          d[i + 1] += static_cast<Scalar>(ax);
          d[i] -= static_cast<Scalar>(ax);
        }
        if (y + 1 < h) {
          d[i + w] += static_cast<Scalar>(ay);
          d[i] -= static_cast<Scalar>(ay);
        }
      }
    }
  }
  out.value = total * scale;
  return out;
}

template <typename Scalar>
double tv_structure_loss(const Tensor<Scalar>& s, Reduction reduction = Reduction::Sum) {
  return tv_structure_loss_with_grad(s, reduction, false).value;
}

/// ||T||_1 with sign(T) as the (sub)gradient, zero at exact zeros.
template <typename Scalar>
LossAndGrad<Scalar> l1_texture_loss_with_grad(const Tensor<Scalar>& t,
                                              Reduction reduction = Reduction::Sum,
                                              bool want_grad = true) {
  detail::require_finite(t, "l1_texture_loss");
  const double scale =
      reduction == Reduction::Sum || t.size() == 0 ? 1.0 : 1.0 / static_cast<double>(t.size());
  LossAndGrad<Scalar> out;
  if (want_grad) out.grad = Tensor<Scalar>(t.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t[i];
    total += std::abs(v);
    if (want_grad)
      out.grad[i] = static_cast<Scalar>(v > 0 ? scale : (v < 0 ? -scale : 0.0));
  }
  out.value = total * scale;
  return out;
}

template <typename Scalar>
double l1_texture_loss(const Tensor<Scalar>& t, Reduction reduction = Reduction::Sum) {
  return l1_texture_loss_with_grad(t, reduction, false).value;
}

inline constexpr double kProbabilityEpsilon = 1e-7;

/// Mean binary cross-entropy of one probability map against a {0,1} label map.
/// The gradient is taken with respect to the probabilities; the clamp only
/// guards the logarithm.
template <typename Scalar>
LossAndGrad<Scalar> binary_cross_entropy_with_grad(const Tensor<Scalar>& probs,
                                                   const Tensor<Scalar>& gt,
                                                   bool want_grad = true) {
  require_same_shape(probs, gt, "binary_cross_entropy");
  if (probs.empty()) throw Error("binary_cross_entropy: empty input");
  constexpr double eps = kProbabilityEpsilon;
  const double inv = 1.0 / static_cast<double>(probs.size());
  LossAndGrad<Scalar> out;
  if (want_grad) out.grad = Tensor<Scalar>(probs.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    const double y = gt[i];
    if (!(p >= 0.0 && p <= 1.0))
      throw Error("binary_cross_entropy: probability outside [0,1]");
    if (y != 0.0 && y != 1.0) throw Error("binary_cross_entropy: label not in {0,1}");
    const double pc = std::clamp(p, eps, 1.0 - eps);
    total -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    if (want_grad)
      out.grad[i] = static_cast<Scalar>(inv * (y > 0 ? -1.0 / pc : 1.0 / (1.0 - pc)));
  }
  out.value = total * inv;
  return out;
}

template <typename Scalar>
struct SegmentationLossGrad {
  double value = 0.0;
  Tensor<Scalar> d_fused;
  std::vector<Tensor<Scalar>> d_sides;
};

/// Uniform average of the per-output BCE over the fused map and every side output.
template <typename Scalar>
SegmentationLossGrad<Scalar> segmentation_loss_with_grad(const SegmentationOutput<Scalar>& out,
                                                         const Tensor<Scalar>& gt,
                                                         bool want_grad = true) {
  const double weight = 1.0 / static_cast<double>(out.side_outputs.size() + 1);
  SegmentationLossGrad<Scalar> res;
  auto fused = binary_cross_entropy_with_grad(out.fused, gt, want_grad);
  res.value = fused.value;
  if (want_grad) res.d_fused = fused.grad * static_cast<Scalar>(weight);
  for (const auto& side : out.side_outputs) {
    auto s = binary_cross_entropy_with_grad(side, gt, want_grad);
    res.value += s.value;
    if (want_grad) res.d_sides.push_back(s.grad * static_cast<Scalar>(weight));
  }
  res.value *= weight;
  return res;
}

template <typename Scalar>
double segmentation_loss(const SegmentationOutput<Scalar>& out, const Tensor<Scalar>& gt) {
  return segmentation_loss_with_grad(out, gt, false).value;
}

/// Which demixing terms participate in the objective.
struct ActiveTerms {
  bool texture = true;
  bool structure = true;
};

/// Loss components of one evaluation of the objective. Inactive terms are
/// absent rather than zero.
struct LossBreakdown {
  double segmentation = 0.0;
  std::optional<double> texture;
  std::optional<double> structure;
  double total = 0.0;
};

inline double combine_losses(double seg, std::optional<double> texture,
                             std::optional<double> structure, const LossWeights& w) {
  if (!texture && !structure) return seg;
  double demix = 0.0;
  if (texture) demix += *texture;
  if (structure) demix += w.lambda_s * *structure;
  return seg + w.mu * demix;
}

/// seg + mu * (||T||_1 + lambda_s * TV(I - T)) restricted to the active terms.
template <typename Scalar>
LossBreakdown total_loss(const Tensor<Scalar>& image, const Tensor<Scalar>& texture,
                         const SegmentationOutput<Scalar>& out, const Tensor<Scalar>& gt,
                         const LossWeights& w, ActiveTerms terms = {},
                         Reduction reduction = Reduction::Sum) {
  w.validate();
  require_same_shape(image, texture, "total_loss");
  LossBreakdown b;
  b.segmentation = segmentation_loss(out, gt);
  if (terms.texture) b.texture = l1_texture_loss(texture, reduction);
  if (terms.structure) b.structure = tv_structure_loss(image - texture, reduction);
  b.total = combine_losses(b.segmentation, b.texture, b.structure, w);
  return b;
}

}  // namespace stdnet
