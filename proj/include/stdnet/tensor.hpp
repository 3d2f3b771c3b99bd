#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stdnet {

/// Raised for contract violations on shapes, ranges and file contents.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool same_spatial(const Shape& o) const { return h == o.h && w == o.w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
  }
};

/// 64-byte aligned storage. Vectorized reductions peel differently depending
/// on the start address, so a fixed alignment keeps results run-independent.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

/// Dense NCHW tensor with value semantics.
template <typename Scalar>
class Tensor {
public:
  using value_type = Scalar;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(shape), data_(shape.size(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
      throw Error("negative tensor dimension " + shape.str());
  }
  Tensor(int n, int c, int h, int w, Scalar fill = Scalar(0))
      : Tensor(Shape{n, c, h, w}, fill) {}

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  Scalar& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const Scalar& at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  /// Pointer to the (n, c) image plane.
  Scalar* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const Scalar* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  /// Pointer to the contiguous C×H×W block of sample n.
  Scalar* sample(int n) { return plane(n, 0); }
  const Scalar* sample(int n) const { return plane(n, 0); }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(*this, o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(*this, o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(Scalar s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, Scalar s) { return a *= s; }
  friend Tensor operator*(Scalar s, Tensor a) { return a *= s; }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return out;
  }

  /// Copy of samples [first, first + count).
  Tensor slice_batch(int first, int count) const {
    if (first < 0 || count < 0 || first + count > shape_.n)
      throw Error("batch slice out of range");
    Tensor out(count, shape_.c, shape_.h, shape_.w);
    if (count > 0)
      std::copy_n(sample(first), out.size(), out.data());
    return out;
  }

  /// Copy of channels [first, first + count).
  Tensor slice_channels(int first, int count) const {
    if (first < 0 || count < 0 || first + count > shape_.c)
      throw Error("channel slice out of range");
    Tensor out(shape_.n, count, shape_.h, shape_.w);
    for (int n = 0; n < shape_.n; ++n)
      std::copy_n(plane(n, first), static_cast<std::size_t>(count) * shape_.plane(),
                  out.sample(n));
    return out;
  }

  friend void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!(a.shape_ == b.shape_))
      throw Error(std::string(what) + ": shape mismatch " + a.shape_.str() + " vs " +
                  b.shape_.str());
  }

private:
  Shape shape_{};
  std::vector<Scalar, AlignedAllocator<Scalar>> data_;
};

/// Concatenates tensors along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(std::span<const Tensor<Scalar>* const> parts) {
  if (parts.empty()) throw Error("concat_channels: no inputs");
  const Shape first = parts.front()->shape();
  int channels = 0;
  for (const auto* p : parts) {
    if (p->n() != first.n || !p->shape().same_spatial(first))
      throw Error("concat_channels: incompatible shapes " + first.str() + " vs " +
                  p->shape().str());
    channels += p->c();
  }
  Tensor<Scalar> out(first.n, channels, first.h, first.w);
  for (int n = 0; n < first.n; ++n) {
    Scalar* dst = out.sample(n);
    for (const auto* p : parts) {
      const std::size_t count = static_cast<std::size_t>(p->c()) * first.plane();
      std::copy_n(p->sample(n), count, dst);
      dst += count;
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Tensor<Scalar>* parts[] = {&a, &b};
  return concat_channels<Scalar>(std::span<const Tensor<Scalar>* const>(parts));
}

/// Stacks single-sample tensors into one batch.
template <typename Scalar>
Tensor<Scalar> stack_batch(std::span<const Tensor<Scalar>> items) {
  if (items.empty()) throw Error("stack_batch: no inputs");
  const Shape s = items.front().shape();
  Tensor<Scalar> out(static_cast<int>(items.size()) * s.n, s.c, s.h, s.w);
  Scalar* dst = out.data();
  for (const auto& t : items) {
    if (t.c() != s.c || !t.shape().same_spatial(s))
      throw Error("stack_batch: incompatible shapes " + s.str() + " vs " + t.shape().str());
    dst = std::copy(t.data(), t.data() + t.size(), dst);
  }
  return out;
}

template <typename Scalar>
bool all_finite(const Tensor<Scalar>& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](Scalar v) { return std::isfinite(static_cast<double>(v)); });
}

template <typename Scalar>
Scalar max_abs(const Tensor<Scalar>& t) {
  Scalar m = 0;
  for (Scalar v : t.values()) m = std::max(m, static_cast<Scalar>(std::abs(v)));
  return m;
}

template <typename Scalar>
double mean_abs(const Tensor<Scalar>& t) {
  if (t.empty()) return 0.0;
  double acc = 0.0;
  for (Scalar v : t.values()) acc += std::abs(static_cast<double>(v));
  return acc / static_cast<double>(t.size());
}

}  // namespace stdnet
