#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "stdnet/tensor.hpp"

namespace stdnet {

/// Named handle onto a parameter array owned by a layer. Buffers (running
/// statistics) are checkpointed but not optimized.
template <typename Scalar>
struct ParameterRef {
  std::string name;
  Tensor<Scalar>* value = nullptr;
  Tensor<Scalar>* grad = nullptr;
  bool trainable = true;
};

template <typename Scalar>
using ParameterList = std::vector<ParameterRef<Scalar>>;

template <typename Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;

  explicit Parameter(Shape s = {}) : value(s), grad(s) {}
  void zero_grad() { grad.fill(Scalar(0)); }
};

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

}  // namespace detail

/// Stride-1 convolution with "same" zero padding (odd kernel sizes only).
/// The lowered patch matrix is built in row bands to bound memory at large
/// resolutions.
template <typename Scalar>
class Conv2d {
public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel = 3)
      : in_(in_channels),
        out_(out_channels),
        k_(kernel),
        weight_(Shape{out_channels, in_channels, kernel, kernel}),
        bias_(Shape{1, out_channels, 1, 1}) {
    if (in_channels <= 0 || out_channels <= 0) throw Error("Conv2d: channels must be positive");
    if (kernel <= 0 || kernel % 2 == 0) throw Error("Conv2d: kernel size must be odd");
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }

  /// Kaiming fan-in normal weights, zero biases.
  template <typename Rng>
  void init(Rng& rng) {
    const double fan_in = static_cast<double>(in_) * k_ * k_;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : weight_.value.values()) v = static_cast<Scalar>(dist(rng));
    bias_.value.fill(Scalar(0));
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    check_input(x);
    input_ = x;
    const int h = x.h(), w = x.w();
    Tensor<Scalar> y(x.n(), out_, h, w);
    const auto wm = weights();
    for (int n = 0; n < x.n(); ++n) {
      detail::MatrixMap<Scalar> out(y.sample(n), out_, static_cast<Eigen::Index>(h) * w);
      for (int y0 = 0; y0 < h; y0 += band_rows(h, w)) {
        const int rows = std::min(band_rows(h, w), h - y0);
        const Eigen::Index cols = static_cast<Eigen::Index>(rows) * w;
        auto block = out.middleCols(static_cast<Eigen::Index>(y0) * w, cols);
        if (k_ == 1) {
          detail::ConstMatrixMap<Scalar> in(x.sample(n), in_, static_cast<Eigen::Index>(h) * w);
          block.noalias() = wm * in.middleCols(static_cast<Eigen::Index>(y0) * w, cols);
        } else {
          im2col(x, n, y0, rows);
          block.noalias() = wm * col_.topLeftCorner(patch_size(), cols);
        }
      }
      for (int c = 0; c < out_; ++c) out.row(c).array() += bias_.value[c];
    }
    return y;
  }

  /// Accumulates parameter gradients; returns the input gradient when asked.
  Tensor<Scalar> backward(const Tensor<Scalar>& dy, bool want_input_grad = true) {
    const Tensor<Scalar>& x = input_;
    if (dy.n() != x.n() || dy.c() != out_ || !dy.shape().same_spatial(x.shape()))
      throw Error("Conv2d::backward: gradient shape " + dy.shape().str());
    const int h = x.h(), w = x.w();
    Tensor<Scalar> dx;
    if (want_input_grad) dx = Tensor<Scalar>(x.shape());
    const auto wm = weights();
    detail::MatrixMap<Scalar> dw(weight_.grad.data(), out_, patch_size());
    for (int n = 0; n < x.n(); ++n) {
      detail::ConstMatrixMap<Scalar> g(dy.sample(n), out_, static_cast<Eigen::Index>(h) * w);
      for (int c = 0; c < out_; ++c) bias_.grad[c] += g.row(c).sum();
      for (int y0 = 0; y0 < h; y0 += band_rows(h, w)) {
        const int rows = std::min(band_rows(h, w), h - y0);
        const Eigen::Index cols = static_cast<Eigen::Index>(rows) * w;
        const auto gb = g.middleCols(static_cast<Eigen::Index>(y0) * w, cols);
        if (k_ == 1) {
          detail::ConstMatrixMap<Scalar> in(x.sample(n), in_, static_cast<Eigen::Index>(h) * w);
          dw.noalias() += gb * in.middleCols(static_cast<Eigen::Index>(y0) * w, cols).transpose();
          if (want_input_grad) {
            detail::MatrixMap<Scalar> dxm(dx.sample(n), in_, static_cast<Eigen::Index>(h) * w);
            dxm.middleCols(static_cast<Eigen::Index>(y0) * w, cols).noalias() = wm.transpose() * gb;
          }
        } else {
          im2col(x, n, y0, rows);
          dw.noalias() += gb * col_.topLeftCorner(patch_size(), cols).transpose();
          if (want_input_grad) {
            dcol_.resize(patch_size(), cols);
            dcol_.noalias() = wm.transpose() * gb;
            col2im(dx, n, y0, rows);
          }
        }
      }
    }
    return dx;
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight_.value, &weight_.grad, true});
    out.push_back({prefix + ".bias", &bias_.value, &bias_.grad, true});
  }

  Parameter<Scalar>& weight() { return weight_; }
  Parameter<Scalar>& bias() { return bias_; }
  void release_cache() { input_ = Tensor<Scalar>(); }

private:
  Eigen::Index patch_size() const { return static_cast<Eigen::Index>(in_) * k_ * k_; }

  int band_rows(int h, int w) const {
    constexpr std::size_t kMaxPatchElements = std::size_t{1} << 23;
    const std::size_t per_row = static_cast<std::size_t>(patch_size()) * w;
    return std::clamp(static_cast<int>(kMaxPatchElements / std::max<std::size_t>(per_row, 1)), 1, h);
  }

  detail::ConstMatrixMap<Scalar> weights() const {
    return {weight_.value.data(), out_, patch_size()};
  }

  void check_input(const Tensor<Scalar>& x) const {
    if (x.c() != in_)
      throw Error("Conv2d: expected " + std::to_string(in_) + " input channels, got " +
                  std::to_string(x.c()));
    if (x.h() <= 0 || x.w() <= 0) throw Error("Conv2d: empty input " + x.shape().str());
  }

  void im2col(const Tensor<Scalar>& x, int n, int y0, int rows) {
    const int h = x.h(), w = x.w(), r = k_ / 2;
    col_.resize(patch_size(), static_cast<Eigen::Index>(rows) * w);
    for (int c = 0; c < in_; ++c) {
      const Scalar* src = x.plane(n, c);
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          Scalar* dst = col_.row((static_cast<Eigen::Index>(c) * k_ + ky) * k_ + kx).data();
          const int x_lo = std::max(0, r - kx), x_hi = std::min(w, w + r - kx);
          for (int yy = 0; yy < rows; ++yy) {
            Scalar* d = dst + static_cast<std::size_t>(yy) * w;
            const int sy = y0 + yy + ky - r;
            if (sy < 0 || sy >= h) {
              std::fill(d, d + w, Scalar(0));
              continue;
            }
            const Scalar* s = src + static_cast<std::size_t>(sy) * w + (x_lo + kx - r);
            std::fill(d, d + x_lo, Scalar(0));
            std::copy(s, s + (x_hi - x_lo), d + x_lo);
            std::fill(d + x_hi, d + w, Scalar(0));
          }
        }
    }
  }

  void col2im(Tensor<Scalar>& dx, int n, int y0, int rows) const {
    const int h = dx.h(), w = dx.w(), r = k_ / 2;
    for (int c = 0; c < in_; ++c) {
      Scalar* dst = dx.plane(n, c);
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const Scalar* src = dcol_.row((static_cast<Eigen::Index>(c) * k_ + ky) * k_ + kx).data();
          const int x_lo = std::max(0, r - kx), x_hi = std::min(w, w + r - kx);
          for (int yy = 0; yy < rows; ++yy) {
            const int sy = y0 + yy + ky - r;
            if (sy < 0 || sy >= h) continue;
            const Scalar* s = src + static_cast<std::size_t>(yy) * w + x_lo;
            Scalar* d = dst + static_cast<std::size_t>(sy) * w + (x_lo + kx - r);
            for (int xx = 0; xx < x_hi - x_lo; ++xx) d[xx] += s[xx];
          }
        }
    }
  }

  int in_ = 0;
  int out_ = 0;
  int k_ = 3;
  Parameter<Scalar> weight_;
  Parameter<Scalar> bias_;
  Tensor<Scalar> input_;
  detail::RowMatrix<Scalar> col_;
  detail::RowMatrix<Scalar> dcol_;
};

/// Leaky ReLU; slope 0 gives a plain ReLU.
template <typename Scalar>
class LeakyRelu {
public:
  explicit LeakyRelu(Scalar slope = Scalar(0.2)) : slope_(slope) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    output_ = x;
    for (auto& v : output_.values())
      if (v < 0) v *= slope_;
    return output_;
  }

  Tensor<Scalar> backward(Tensor<Scalar> dy) const {
    require_same_shape(dy, output_, "LeakyRelu::backward");
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (!(output_[i] > 0)) dy[i] *= slope_;
    return dy;
  }

  void release_cache() { output_ = Tensor<Scalar>(); }

private:
  Scalar slope_;
  Tensor<Scalar> output_;
};

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  return Scalar(1) / (Scalar(1) + std::exp(-z));
}

template <typename Scalar>
class Sigmoid {
public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    output_ = x;
    for (auto& v : output_.values()) v = sigmoid(v);
    return output_;
  }

  Tensor<Scalar> backward(Tensor<Scalar> dy) const {
    require_same_shape(dy, output_, "Sigmoid::backward");
    for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= output_[i] * (Scalar(1) - output_[i]);
    return dy;
  }

  const Tensor<Scalar>& output() const { return output_; }

private:
  Tensor<Scalar> output_;
};

inline void require_even(const Shape& s, const char* what) {
  if (s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0)
    throw Error(std::string(what) + ": spatial size " + s.str() + " not divisible by 2");
}

template <typename Scalar>
class MaxPool2 {
public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    require_even(x.shape(), "MaxPool2");
    in_shape_ = x.shape();
    const int oh = x.h() / 2, ow = x.w() / 2;
    Tensor<Scalar> y(x.n(), x.c(), oh, ow);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c) {
        const Scalar* src = x.plane(n, c);
        const std::size_t within = static_cast<std::size_t>(c) * x.shape().plane();
        for (int yy = 0; yy < oh; ++yy)
          for (int xx = 0; xx < ow; ++xx, ++o) {
            std::uint32_t best = static_cast<std::uint32_t>((2 * yy) * x.w() + 2 * xx);
            const std::uint32_t cand[3] = {best + 1, best + static_cast<std::uint32_t>(x.w()),
                                           best + static_cast<std::uint32_t>(x.w()) + 1};
            for (auto k : cand)
              if (src[k] > src[best]) best = k;
            y[o] = src[best];
            argmax_[o] = static_cast<std::uint32_t>(within) + best;
          }
      }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) const {
    Tensor<Scalar> dx(in_shape_);
    if (dy.size() != argmax_.size()) throw Error("MaxPool2::backward: gradient shape mismatch");
    const std::size_t out_per_sample = dy.size() / std::max(dy.n(), 1);
    const std::size_t in_per_sample = dx.size() / std::max(dx.n(), 1);
    for (std::size_t o = 0; o < dy.size(); ++o)
      dx[(o / out_per_sample) * in_per_sample + argmax_[o]] += dy[o];
    return dx;
  }

private:
  Shape in_shape_{};
  std::vector<std::uint32_t> argmax_;
};

/// 2×2 average pooling.
template <typename Scalar>
Tensor<Scalar> avg_pool2(const Tensor<Scalar>& x) {
  require_even(x.shape(), "avg_pool2");
  const int oh = x.h() / 2, ow = x.w() / 2, w = x.w();
  Tensor<Scalar> y(x.n(), x.c(), oh, ow);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const Scalar* s = x.plane(n, c);
      Scalar* d = y.plane(n, c);
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          const Scalar* p = s + static_cast<std::size_t>(2 * yy) * w + 2 * xx;
          d[yy * ow + xx] = (p[0] + p[1] + p[w] + p[w + 1]) * Scalar(0.25);
        }
    }
  return y;
}

template <typename Scalar>
Tensor<Scalar> avg_pool2_backward(const Tensor<Scalar>& dy, const Shape& in_shape) {
  Tensor<Scalar> dx(in_shape);
  const int w = in_shape.w;
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < dy.c(); ++c) {
      const Scalar* g = dy.plane(n, c);
      Scalar* d = dx.plane(n, c);
      for (int yy = 0; yy < dy.h(); ++yy)
        for (int xx = 0; xx < dy.w(); ++xx) {
          const Scalar v = g[yy * dy.w() + xx] * Scalar(0.25);
          Scalar* p = d + static_cast<std::size_t>(2 * yy) * w + 2 * xx;
          p[0] += v;
          p[1] += v;
          p[w] += v;
          p[w + 1] += v;
        }
    }
  return dx;
}

/// Half-pixel-centred bilinear resampling (edge-clamped), with its adjoint.
template <typename Scalar>
class BilinearResize {
public:
  BilinearResize() = default;
  BilinearResize(int out_h, int out_w) : out_h_(out_h), out_w_(out_w) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) {
    in_shape_ = x.shape();
    if (x.h() == out_h_ && x.w() == out_w_) return x;
    build(x.h(), x.w());
    Tensor<Scalar> y(x.n(), x.c(), out_h_, out_w_);
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c) {
        const Scalar* s = x.plane(n, c);
        Scalar* d = y.plane(n, c);
        for (int yy = 0; yy < out_h_; ++yy) {
          const Axis& ay = rows_[yy];
          const Scalar* r0 = s + static_cast<std::size_t>(ay.i0) * x.w();
          const Scalar* r1 = s + static_cast<std::size_t>(ay.i1) * x.w();
          for (int xx = 0; xx < out_w_; ++xx) {
            const Axis& ax = cols_[xx];
            const Scalar top = r0[ax.i0] * ax.w0 + r0[ax.i1] * ax.w1;
            const Scalar bot = r1[ax.i0] * ax.w0 + r1[ax.i1] * ax.w1;
            d[yy * out_w_ + xx] = top * ay.w0 + bot * ay.w1;
          }
        }
      }
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) const {
    if (in_shape_.h == out_h_ && in_shape_.w == out_w_) return dy;
    Tensor<Scalar> dx(in_shape_);
    const int w = in_shape_.w;
    for (int n = 0; n < dy.n(); ++n)
      for (int c = 0; c < dy.c(); ++c) {
        const Scalar* g = dy.plane(n, c);
        Scalar* d = dx.plane(n, c);
        for (int yy = 0; yy < out_h_; ++yy) {
          const Axis& ay = rows_[yy];
          Scalar* r0 = d + static_cast<std::size_t>(ay.i0) * w;
          Scalar* r1 = d + static_cast<std::size_t>(ay.i1) * w;
          for (int xx = 0; xx < out_w_; ++xx) {
            const Axis& ax = cols_[xx];
            const Scalar v = g[yy * out_w_ + xx];
            r0[ax.i0] += v * ay.w0 * ax.w0;
            r0[ax.i1] += v * ay.w0 * ax.w1;
            r1[ax.i0] += v * ay.w1 * ax.w0;
            r1[ax.i1] += v * ay.w1 * ax.w1;
          }
        }
      }
    return dx;
  }

private:
  struct Axis {
    int i0, i1;
    Scalar w0, w1;
  };

  static std::vector<Axis> axis(int in, int out) {
    std::vector<Axis> a(out);
    const double scale = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
      const double src = std::max(0.0, (i + 0.5) * scale - 0.5);
      const int i0 = std::min(static_cast<int>(src), in - 1);
      const int i1 = std::min(i0 + 1, in - 1);
      const double l = src - i0;
      a[i] = {i0, i1, static_cast<Scalar>(1.0 - l), static_cast<Scalar>(l)};
    }
    return a;
  }

  void build(int in_h, int in_w) {
    rows_ = axis(in_h, out_h_);
    cols_ = axis(in_w, out_w_);
  }

  int out_h_ = 0;
  int out_w_ = 0;
  Shape in_shape_{};
  std::vector<Axis> rows_;
  std::vector<Axis> cols_;
};

/// Learnable blend of identity and batch normalization:
/// y = a * x + b * (x - mean) / sqrt(var + eps), with a = 1, b = 0 at init.
/// Training uses batch statistics over (N, H, W) per channel; evaluation
/// uses running estimates.
template <typename Scalar>
class AdaptiveNorm {
public:
  static constexpr double kEpsilon = 1e-5;

  AdaptiveNorm() = default;
  explicit AdaptiveNorm(int channels, double momentum = 0.1)
      : channels_(channels),
        momentum_(momentum),
        a_(Shape{1, 1, 1, 1}),
        b_(Shape{1, 1, 1, 1}),
        running_mean_(1, channels, 1, 1, Scalar(0)),
        running_var_(1, channels, 1, 1, Scalar(1)) {
    a_.value[0] = Scalar(1);
    b_.value[0] = Scalar(0);
  }

  Scalar& a() { return a_.value[0]; }
  Scalar& b() { return b_.value[0]; }
  Parameter<Scalar>& a_param() { return a_; }
  Parameter<Scalar>& b_param() { return b_; }
  const Tensor<Scalar>& running_mean() const { return running_mean_; }
  const Tensor<Scalar>& running_var() const { return running_var_; }

  /// Plain batch normalization of x (no affine) with the chosen statistics.
  Tensor<Scalar> normalize(const Tensor<Scalar>& x, bool training) {
    if (x.c() != channels_)
      throw Error("AdaptiveNorm: expected " + std::to_string(channels_) + " channels, got " +
                  std::to_string(x.c()));
    training_ = training;
    const std::size_t plane = x.shape().plane();
    const double count = static_cast<double>(x.n()) * plane;
    inv_std_.assign(channels_, 0.0);
    Tensor<Scalar> xhat(x.shape());
    for (int c = 0; c < channels_; ++c) {
      double mean, var;
      if (training) {
        double s = 0.0;
        for (int n = 0; n < x.n(); ++n)
          for (std::size_t i = 0; i < plane; ++i) s += x.plane(n, c)[i];
        mean = s / count;
        double q = 0.0;
        for (int n = 0; n < x.n(); ++n)
          for (std::size_t i = 0; i < plane; ++i) {
            const double d = x.plane(n, c)[i] - mean;
            q += d * d;
          }
        var = q / count;
        const double unbiased = count > 1 ? q / (count - 1) : var;
        running_mean_[c] = static_cast<Scalar>((1 - momentum_) * running_mean_[c] + momentum_ * mean);
        running_var_[c] = static_cast<Scalar>((1 - momentum_) * running_var_[c] + momentum_ * unbiased);
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const double inv = 1.0 / std::sqrt(var + kEpsilon);
      inv_std_[c] = inv;
      for (int n = 0; n < x.n(); ++n) {
        const Scalar* s = x.plane(n, c);
        Scalar* d = xhat.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i)
          d[i] = static_cast<Scalar>((s[i] - mean) * inv);
      }
    }
    return xhat;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training) {
    input_ = x;
    xhat_ = normalize(x, training);
    Tensor<Scalar> y(x.shape());
    const Scalar a = a_.value[0], b = b_.value[0];
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a * x[i] + b * xhat_[i];
    return y;
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& dy) {
    require_same_shape(dy, input_, "AdaptiveNorm::backward");
    const Scalar a = a_.value[0], b = b_.value[0];
    double da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      da += static_cast<double>(dy[i]) * input_[i];
      db += static_cast<double>(dy[i]) * xhat_[i];
    }
    a_.grad[0] += static_cast<Scalar>(da);
    b_.grad[0] += static_cast<Scalar>(db);

    Tensor<Scalar> dx(dy.shape());
    const std::size_t plane = dy.shape().plane();
    const double count = static_cast<double>(dy.n()) * plane;
    for (int c = 0; c < channels_; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      if (training_)
        for (int n = 0; n < dy.n(); ++n)
          for (std::size_t i = 0; i < plane; ++i) {
            const double g = static_cast<double>(dy.plane(n, c)[i]) * b;
            sum_g += g;
            sum_gx += g * xhat_.plane(n, c)[i];
          }
      const double inv = inv_std_[c];
      for (int n = 0; n < dy.n(); ++n) {
        const Scalar* g = dy.plane(n, c);
        const Scalar* xh = xhat_.plane(n, c);
        Scalar* d = dx.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double gb = static_cast<double>(g[i]) * b;
          const double dn = training_ ? inv * (gb - sum_g / count - xh[i] * sum_gx / count)
                                      : inv * gb;
          d[i] = static_cast<Scalar>(a * g[i] + dn);
        }
      }
    }
    return dx;
  }

  void collect(ParameterList<Scalar>& out, const std::string& prefix) {
    out.push_back({prefix + ".scale", &a_.value, &a_.grad, true});
    out.push_back({prefix + ".shift", &b_.value, &b_.grad, true});
    out.push_back({prefix + ".running_mean", &running_mean_, nullptr, false});
    out.push_back({prefix + ".running_var", &running_var_, nullptr, false});
  }

private:
  int channels_ = 0;
  double momentum_ = 0.1;
  Parameter<Scalar> a_;
  Parameter<Scalar> b_;
  Tensor<Scalar> running_mean_;
  Tensor<Scalar> running_var_;
  Tensor<Scalar> input_;
  Tensor<Scalar> xhat_;
  std::vector<double> inv_std_;
  bool training_ = true;
};

}  // namespace stdnet
