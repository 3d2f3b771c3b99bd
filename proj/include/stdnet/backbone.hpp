#pragma once

#include <memory>
#include <queue>
#include <string>
#include <vector>

#include "stdnet/layers.hpp"
#include "stdnet/segmentation_output.hpp"
#include "stdnet/tensor.hpp"

namespace stdnet {

/// Average-pooled image pyramid: level k has 1/2^k of the input resolution.
template <typename Scalar>
std::vector<Tensor<Scalar>> build_multiscale_inputs(const Tensor<Scalar>& image, int depth) {
  if (depth < 2) throw Error("build_multiscale_inputs: depth must be at least 2");
  const int factor = 1 << (depth - 1);
  if (image.h() % factor != 0 || image.w() % factor != 0 || image.h() == 0 || image.w() == 0)
    throw Error("build_multiscale_inputs: spatial size " + image.shape().str() +
                " not divisible by " + std::to_string(factor));
  std::vector<Tensor<Scalar>> levels;
  levels.reserve(depth);
  levels.push_back(image);
  for (int k = 1; k < depth; ++k) levels.push_back(avg_pool2(levels.back()));
  return levels;
}

struct MNetConfig {
  int image_channels = 3;
  int extra_channels = 1;
  int classes = 1;
  std::vector<int> channels = {32, 64, 128, 256};

  int depth() const { return static_cast<int>(channels.size()); }
};

/// Multi-scale-input, deeply supervised U-shaped segmenter. Pyramid levels of
/// the image join the encoder at every scale; every decoder scale emits a
/// side output, and the fused output is the mean of the side probabilities.
template <typename Scalar>
class MNet {
public:
  MNet() = default;
  explicit MNet(const MNetConfig& cfg) : cfg_(cfg) {
    const int d = cfg.depth();
    if (d < 2) throw Error("MNet: depth must be at least 2");
    for (int c : cfg.channels)
      if (c <= 0) throw Error("MNet: channel widths must be positive");
    if (cfg.classes <= 0) throw Error("MNet: class count must be positive");
    const auto& ch = cfg.channels;
    for (int k = 0; k < d; ++k) {
      Block enc;
      int in;
      if (k == 0) {
        in = cfg.image_channels + cfg.extra_channels;
      } else {
        side_in_.emplace_back(cfg.image_channels, ch[k - 1], 3);
        side_act_.emplace_back(Scalar(0));
        in = 2 * ch[k - 1];
      }
      enc.conv_a = Conv2d<Scalar>(in, ch[k], 3);
      enc.conv_b = Conv2d<Scalar>(ch[k], ch[k], 3);
      encoder_.push_back(std::move(enc));
      heads_.emplace_back(ch[k], cfg.classes, 1);
    }
    pools_.resize(d - 1);
    ups_.resize(d - 1);
    side_ups_.resize(d);
    for (int k = 0; k + 1 < d; ++k) {
      Block dec;
      dec.conv_a = Conv2d<Scalar>(ch[k + 1] + ch[k], ch[k], 3);
      dec.conv_b = Conv2d<Scalar>(ch[k], ch[k], 3);
      decoder_.push_back(std::move(dec));
    }
    sigmoids_.resize(d);
  }

  const MNetConfig& config() const { return cfg_; }
  int depth() const { return cfg_.depth(); }

  template <typename Rng>
  void init(Rng& rng) {
    for (auto& b : encoder_) b.init(rng);
    for (auto& b : decoder_) b.init(rng);
    for (auto& c : side_in_) c.init(rng);
    for (auto& c : heads_) c.init(rng);
  }

  SegmentationOutput<Scalar> forward(const Tensor<Scalar>& image, const Tensor<Scalar>& extra) {
    if (image.c() != cfg_.image_channels)
      throw Error("MNet: expected " + std::to_string(cfg_.image_channels) + " image channels");
    if (extra.c() != cfg_.extra_channels || extra.n() != image.n() ||
        !extra.shape().same_spatial(image.shape()))
      throw Error("MNet: auxiliary input " + extra.shape().str() + " misaligned with image " +
                  image.shape().str());
    const int d = depth();
    pyramid_shapes_.clear();
    const auto pyramid = build_multiscale_inputs(image, d);
    for (const auto& p : pyramid) pyramid_shapes_.push_back(p.shape());

    std::vector<Tensor<Scalar>> skips(d);
    for (int k = 0; k < d; ++k) {
      Tensor<Scalar> in;
      if (k == 0) {
        in = concat_channels(image, extra);
      } else {
        const Tensor<Scalar> pooled = pools_[k - 1].forward(skips[k - 1]);
        const Tensor<Scalar> side = side_act_[k - 1].forward(side_in_[k - 1].forward(pyramid[k]));
        in = concat_channels(pooled, side);
      }
      skips[k] = encoder_[k].forward(in);
    }
    std::vector<Tensor<Scalar>> dec(d);
    dec[d - 1] = skips[d - 1];
    for (int k = d - 2; k >= 0; --k) {
      ups_[k] = BilinearResize<Scalar>(skips[k].h(), skips[k].w());
      dec[k] = decoder_[k].forward(concat_channels(ups_[k].forward(dec[k + 1]), skips[k]));
    }
    skip_channels_.clear();
    for (const auto& s : skips) skip_channels_.push_back(s.c());

    SegmentationOutput<Scalar> out;
    out.fused = Tensor<Scalar>(image.n(), cfg_.classes, image.h(), image.w());
    const Scalar inv = Scalar(1) / static_cast<Scalar>(d);
    for (int k = 0; k < d; ++k) {
      side_ups_[k] = BilinearResize<Scalar>(image.h(), image.w());
      Tensor<Scalar> probs = sigmoids_[k].forward(side_ups_[k].forward(heads_[k].forward(dec[k])));
      for (std::size_t i = 0; i < probs.size(); ++i) out.fused[i] += probs[i] * inv;
      out.side_outputs.push_back(std::move(probs));
    }
    return out;
  }

  struct InputGrad {
    Tensor<Scalar> image;
    Tensor<Scalar> extra;
  };

  /// Gradients w.r.t. the fused map and each side map (either may be empty).
  InputGrad backward(const Tensor<Scalar>& d_fused, const std::vector<Tensor<Scalar>>& d_sides,
                     bool want_input_grad) {
    const int d = depth();
    const Scalar inv = Scalar(1) / static_cast<Scalar>(d);
    std::vector<Tensor<Scalar>> d_dec(d);
    for (int k = 0; k < d; ++k) {
      Tensor<Scalar> g = d_sides.empty() ? Tensor<Scalar>(sigmoids_[k].output().shape())
                                         : d_sides.at(k);
      if (!d_fused.empty())
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d_fused[i] * inv;
      d_dec[k] = heads_[k].backward(side_ups_[k].backward(sigmoids_[k].backward(std::move(g))));
    }
    std::vector<Tensor<Scalar>> d_skip(d);
    for (int k = 0; k + 1 < d; ++k) {
      const Tensor<Scalar> g = decoder_[k].backward(d_dec[k]);
      const int up_c = g.c() - skip_channels_[k];
      d_dec[k + 1] += ups_[k].backward(g.slice_channels(0, up_c));
      d_skip[k] = g.slice_channels(up_c, skip_channels_[k]);
    }
    d_skip[d - 1] = std::move(d_dec[d - 1]);

    std::vector<Tensor<Scalar>> d_pyramid(d);
    InputGrad res;
    for (int k = d - 1; k >= 0; --k) {
      const bool need_in = k > 0 || want_input_grad;
      Tensor<Scalar> g = encoder_[k].backward(d_skip[k], need_in);
      if (k == 0) {
        if (want_input_grad) {
          res.image = g.slice_channels(0, cfg_.image_channels);
          res.extra = g.slice_channels(cfg_.image_channels, cfg_.extra_channels);
        }
        break;
      }
      const int pooled_c = skip_channels_[k - 1];
      d_skip[k - 1] += pools_[k - 1].backward(g.slice_channels(0, pooled_c));
      Tensor<Scalar> gs = side_act_[k - 1].backward(g.slice_channels(pooled_c, g.c() - pooled_c));
      d_pyramid[k] = side_in_[k - 1].backward(gs, want_input_grad);
    }
    if (want_input_grad) {
      Tensor<Scalar> acc;
      for (int k = d - 1; k >= 1; --k) {
        if (!acc.empty()) d_pyramid[k] += acc;
        acc = avg_pool2_backward(d_pyramid[k], pyramid_shapes_[k - 1]);
      }
      res.image += acc;
    }
    return res;
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) {
    for (std::size_t k = 0; k < encoder_.size(); ++k)
      encoder_[k].collect(out, prefix + ".enc" + std::to_string(k));
    for (std::size_t k = 0; k < side_in_.size(); ++k)
      side_in_[k].collect(out, prefix + ".side_in" + std::to_string(k + 1));
    for (std::size_t k = 0; k < decoder_.size(); ++k)
      decoder_[k].collect(out, prefix + ".dec" + std::to_string(k));
    for (std::size_t k = 0; k < heads_.size(); ++k)
      heads_[k].collect(out, prefix + ".head" + std::to_string(k));
  }

private:
  struct Block {
    Conv2d<Scalar> conv_a;
    LeakyRelu<Scalar> act_a{Scalar(0)};
    Conv2d<Scalar> conv_b;
    LeakyRelu<Scalar> act_b{Scalar(0)};

    template <typename Rng>
    void init(Rng& rng) {
      conv_a.init(rng);
      conv_b.init(rng);
    }
    Tensor<Scalar> forward(const Tensor<Scalar>& x) {
      return act_b.forward(conv_b.forward(act_a.forward(conv_a.forward(x))));
    }
    Tensor<Scalar> backward(const Tensor<Scalar>& dy, bool want_input_grad = true) {
      Tensor<Scalar> g = conv_b.backward(act_b.backward(dy));
      return conv_a.backward(act_a.backward(std::move(g)), want_input_grad);
    }
    void collect(ParameterList<Scalar>& out, const std::string& prefix) {
      conv_a.collect(out, prefix + "_conv1");
      conv_b.collect(out, prefix + "_conv2");
    }
  };

  MNetConfig cfg_{};
  std::vector<Block> encoder_;
  std::vector<Block> decoder_;
  std::vector<Conv2d<Scalar>> side_in_;
  std::vector<LeakyRelu<Scalar>> side_act_;
  std::vector<MaxPool2<Scalar>> pools_;
  std::vector<BilinearResize<Scalar>> ups_;
  std::vector<BilinearResize<Scalar>> side_ups_;
  std::vector<Conv2d<Scalar>> heads_;
  std::vector<Sigmoid<Scalar>> sigmoids_;
  std::vector<Shape> pyramid_shapes_;
  std::vector<int> skip_channels_;
};

/// Per-class binary masks (probability >= threshold). For two-class output
/// (disc, cup) the cup mask is intersected with the disc mask.
template <typename Scalar>
Tensor<std::uint8_t> binarize(const Tensor<Scalar>& probs, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("binarize: threshold must lie in (0,1)");
  Tensor<std::uint8_t> mask(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i)
    mask[i] = static_cast<double>(probs[i]) >= threshold ? 1 : 0;
  if (probs.c() == 2)
    for (int n = 0; n < probs.n(); ++n) {
      const std::uint8_t* disc = mask.plane(n, 0);
      std::uint8_t* cup = mask.plane(n, 1);
      for (std::size_t i = 0; i < probs.shape().plane(); ++i) cup[i] &= disc[i];
    }
  return mask;
}

template <typename Scalar>
Tensor<std::uint8_t> binarize(const SegmentationOutput<Scalar>& out, double threshold = 0.5) {
  return binarize(out.fused, threshold);
}

/// Keeps only the largest 4-connected foreground component of every plane.
inline void keep_largest_component(Tensor<std::uint8_t>& mask) {
  const int h = mask.h(), w = mask.w();
  std::vector<int> label(mask.shape().plane());
  for (int n = 0; n < mask.n(); ++n)
    for (int c = 0; c < mask.c(); ++c) {
      std::uint8_t* m = mask.plane(n, c);
      std::fill(label.begin(), label.end(), -1);
      int best = -1, best_size = 0, next = 0;
      for (int start = 0; start < h * w; ++start) {
        if (!m[start] || label[start] >= 0) continue;
        int size = 0;
        std::queue<int> q;
        q.push(start);
        label[start] = next;
        while (!q.empty()) {
          const int p = q.front();
          q.pop();
          ++size;
          const int y = p / w, x = p % w;
          const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
          for (const auto& v : nb) {
            if (v[0] < 0 || v[0] >= h || v[1] < 0 || v[1] >= w) continue;
            const int j = v[0] * w + v[1];
            if (m[j] && label[j] < 0) {
              label[j] = next;
              q.push(j);
            }
          }
        }
        if (size > best_size) {
          best_size = size;
          best = next;
        }
        ++next;
      }
      for (int i = 0; i < h * w; ++i) m[i] = (m[i] && label[i] == best) ? 1 : 0;
    }
}

}  // namespace stdnet
