#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "stdnet/demixer.hpp"
#include "stdnet/tensor.hpp"

namespace stdnet {

namespace gif {

class Reader {
public:
  explicit Reader(std::vector<std::uint8_t> bytes) : b_(std::move(bytes)) {}

  std::uint8_t u8() {
    if (pos_ >= b_.size()) throw Error("gif: truncated stream");
    return b_[pos_++];
  }
  int u16() {
    const int lo = u8();
    return lo | (u8() << 8);
  }
  void skip(std::size_t n) {
    if (pos_ + n > b_.size()) throw Error("gif: truncated stream");
    pos_ += n;
  }
  std::vector<std::uint8_t> sub_blocks() {
    std::vector<std::uint8_t> out;
    for (int len = u8(); len; len = u8()) {
      if (pos_ + len > b_.size()) throw Error("gif: truncated stream");
      out.insert(out.end(), b_.begin() + static_cast<long>(pos_), b_.begin() + static_cast<long>(pos_ + len));
      pos_ += len;
    }
    return out;
  }
  void skip_sub_blocks() {
    for (int len = u8(); len; len = u8()) skip(len);
  }

private:
  std::vector<std::uint8_t> b_;
  std::size_t pos_ = 0;
};

/// Variable-width LZW as used by GIF (LSB-first codes, max 12 bits).
inline std::vector<std::uint8_t> lzw_decode(const std::vector<std::uint8_t>& data, int min_code_size,
                                            std::size_t expected) {
  if (min_code_size < 2 || min_code_size > 8) throw Error("gif: bad LZW code size");
  const int clear = 1 << min_code_size;
  const int eoi = clear + 1;
  std::array<std::uint16_t, 4096> prefix{};
  std::array<std::uint8_t, 4096> suffix{};
  std::array<std::uint8_t, 4096> first{};
  for (int i = 0; i < clear; ++i) {
    suffix[i] = static_cast<std::uint8_t>(i);
    first[i] = static_cast<std::uint8_t>(i);
  }
  std::vector<std::uint8_t> out;
  out.reserve(expected);
  std::vector<std::uint8_t> stack;
  int width = min_code_size + 1;
  int next = eoi + 1;
  int prev = -1;
  std::uint32_t acc = 0;
  int bits = 0;
  std::size_t i = 0;
  while (out.size() < expected) {
    while (bits < width && i < data.size()) {
      acc |= static_cast<std::uint32_t>(data[i++]) << bits;
      bits += 8;
    }
    if (bits < width) break;
    const int code = static_cast<int>(acc & ((1u << width) - 1));
    acc >>= width;
    bits -= width;
    if (code == clear) {
      width = min_code_size + 1;
      next = eoi + 1;
      prev = -1;
      continue;
    }
    if (code == eoi) break;
    if (prev < 0) {
      if (code >= clear) throw Error("gif: corrupt LZW stream");
      out.push_back(static_cast<std::uint8_t>(code));
      prev = code;
      continue;
    }
    int cur = code;
    std::uint8_t head;
    if (code < next) {
      head = first[code];
    } else if (code == next) {
      head = first[prev];
      stack.push_back(head);
      cur = prev;
    } else {
      throw Error("gif: corrupt LZW stream");
    }
    while (cur >= clear) {
      stack.push_back(suffix[cur]);
      cur = prefix[cur];
    }
    stack.push_back(static_cast<std::uint8_t>(cur));
    out.insert(out.end(), stack.rbegin(), stack.rend());
    stack.clear();
    if (next < 4096) {
      prefix[next] = static_cast<std::uint16_t>(prev);
      suffix[next] = head;
      first[next] = first[prev];
      ++next;
      if (next == (1 << width) && width < 12) ++width;
    }
    prev = code;
  }
  if (out.size() < expected) out.resize(expected, 0);
  out.resize(expected);
  return out;
}

/// Decodes the first frame of a GIF into an 8-bit BGR image of the logical
/// screen size.
inline cv::Mat decode(std::vector<std::uint8_t> bytes) {
  Reader r(std::move(bytes));
  std::string sig;
  for (int k = 0; k < 6; ++k) sig.push_back(static_cast<char>(r.u8()));
  if (sig != "GIF87a" && sig != "GIF89a") throw Error("gif: bad signature");
  const int sw = r.u16(), sh = r.u16();
  const int flags = r.u8();
  const int bg = r.u8();
  r.u8();
  std::vector<std::array<std::uint8_t, 3>> global;
  if (flags & 0x80) {
    global.resize(std::size_t{2} << (flags & 7));
    for (auto& c : global) c = {r.u8(), r.u8(), r.u8()};
  }
  cv::Mat canvas(sh, sw, CV_8UC3, cv::Scalar(0, 0, 0));
  if (bg < static_cast<int>(global.size()))
    canvas.setTo(cv::Scalar(global[bg][2], global[bg][1], global[bg][0]));
  int transparent = -1;
  for (;;) {
    const int tag = r.u8();
    if (tag == 0x3B) throw Error("gif: no image data");
    if (tag == 0x21) {
      const int label = r.u8();
      if (label == 0xF9) {
        const auto gce = r.sub_blocks();
        if (gce.size() >= 4 && (gce[0] & 1)) transparent = gce[3];
      } else {
        r.skip_sub_blocks();
      }
      continue;
    }
    if (tag != 0x2C) throw Error("gif: unexpected block");
    const int left = r.u16(), top = r.u16(), w = r.u16(), h = r.u16();
    const int iflags = r.u8();
    auto palette = global;
    if (iflags & 0x80) {
      palette.assign(std::size_t{2} << (iflags & 7), {});
      for (auto& c : palette) c = {r.u8(), r.u8(), r.u8()};
    }
    if (palette.empty()) throw Error("gif: missing colour table");
    const int min_code = r.u8();
    const auto idx = lzw_decode(r.sub_blocks(), min_code, static_cast<std::size_t>(w) * h);
    std::vector<int> rows(h);
    if (iflags & 0x40) {
      int k = 0;
      for (auto [start, step] : {std::pair{0, 8}, {4, 8}, {2, 4}, {1, 2}})
        for (int y = start; y < h; y += step) rows[k++] = y;
    } else {
      std::iota(rows.begin(), rows.end(), 0);
    }
    for (int k = 0; k < h; ++k) {
      const int y = top + rows[k];
      if (y < 0 || y >= sh) continue;
      for (int x = 0; x < w; ++x) {
        const int cx = left + x;
        if (cx < 0 || cx >= sw) continue;
        const int p = idx[static_cast<std::size_t>(k) * w + x];
        if (p == transparent || p >= static_cast<int>(palette.size())) continue;
        canvas.at<cv::Vec3b>(y, cx) = {palette[p][2], palette[p][1], palette[p][0]};
      }
    }
    return canvas;
  }
}

}  // namespace gif

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Reads any OpenCV-supported file or a GIF as 8/16-bit BGR.
inline cv::Mat read_bgr(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing file: " + path.string());
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  cv::Mat m;
  if (ext == ".gif") {
    m = gif::decode(read_bytes(path));
  } else {
    m = cv::imread(path.string(), cv::IMREAD_COLOR | cv::IMREAD_ANYDEPTH);
    if (m.empty()) throw Error("unreadable image: " + path.string());
  }
  return m;
}

/// Single-channel 8-bit view: the mean of the colour channels.
inline cv::Mat read_gray_u8(const std::filesystem::path& path) {
  cv::Mat bgr = read_bgr(path);
  if (bgr.depth() == CV_16U) bgr.convertTo(bgr, CV_8U, 1.0 / 257.0);
  std::vector<cv::Mat> ch;
  cv::split(bgr, ch);
  cv::Mat sum;
  ch[0].convertTo(sum, CV_32F);
  for (std::size_t k = 1; k < ch.size(); ++k) cv::add(sum, ch[k], sum, cv::noArray(), CV_32F);
  cv::Mat out;
  sum.convertTo(out, CV_8U, 1.0 / static_cast<double>(ch.size()));
  return out;
}

/// RGB image in [0, 1], shape (1, 3, H, W), values on the dyadic grid.
inline Tensor<float> mat_to_rgb_tensor(const cv::Mat& bgr) {
  if (bgr.channels() != 3) throw Error("expected a 3-channel image");
  cv::Mat f;
  bgr.convertTo(f, CV_32F, bgr.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0);
  Tensor<float> t(1, 3, f.rows, f.cols);
  for (int y = 0; y < f.rows; ++y) {
    const auto* row = f.ptr<cv::Vec3f>(y);
    for (int x = 0; x < f.cols; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = std::clamp(row[x][2 - c], 0.0f, 1.0f);
  }
  snap_to_grid(t, 1.0);
  return t;
}

inline Tensor<float> read_rgb(const std::filesystem::path& path) {
  return mat_to_rgb_tensor(read_bgr(path));
}

/// Bilinear (half-pixel centres) resize of every plane.
inline Tensor<float> resize_bilinear(const Tensor<float>& t, int h, int w) {
  if (t.h() == h && t.w() == w) return t;
  Tensor<float> out(t.n(), t.c(), h, w);
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c) {
      cv::Mat src(t.h(), t.w(), CV_32F, const_cast<float*>(t.plane(n, c)));
      cv::Mat dst(h, w, CV_32F, out.plane(n, c));
      cv::resize(src, dst, dst.size(), 0, 0, cv::INTER_LINEAR);
    }
  snap_to_grid(out, 1.0);
  return out;
}

/// Nearest-neighbour resize for label maps.
inline Tensor<std::uint8_t> resize_nearest(const Tensor<std::uint8_t>& t, int h, int w) {
  if (t.h() == h && t.w() == w) return t;
  Tensor<std::uint8_t> out(t.n(), t.c(), h, w);
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < t.c(); ++c) {
      cv::Mat src(t.h(), t.w(), CV_8U, const_cast<std::uint8_t*>(t.plane(n, c)));
      cv::Mat dst(h, w, CV_8U, out.plane(n, c));
      cv::resize(src, dst, dst.size(), 0, 0, cv::INTER_NEAREST_EXACT);
    }
  return out;
}

inline void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

inline void write_mat(const std::filesystem::path& path, const cv::Mat& m) {
  ensure_parent(path);
  if (!cv::imwrite(path.string(), m)) throw Error("cannot write " + path.string());
}

/// Writes plane (n, c..c+2) as an 8-bit RGB PNG, or a single plane as gray.
/// Values are clamped to [0, 1].
inline void write_png(const std::filesystem::path& path, const Tensor<float>& t, int n = 0,
                      bool sixteen_bit = false) {
  if (t.c() != 1 && t.c() != 3) throw Error("write_png: expected 1 or 3 channels");
  const double scale = sixteen_bit ? 65535.0 : 255.0;
  cv::Mat m(t.h(), t.w(), CV_MAKETYPE(sixteen_bit ? CV_16U : CV_8U, t.c()));
  for (int y = 0; y < t.h(); ++y)
    for (int x = 0; x < t.w(); ++x)
      for (int c = 0; c < t.c(); ++c) {
        const double v = std::round(std::clamp<double>(t.at(n, c, y, x), 0.0, 1.0) * scale);
        const int dst_c = t.c() == 3 ? 2 - c : 0;
        if (sixteen_bit)
          m.ptr<std::uint16_t>(y)[x * t.c() + dst_c] = static_cast<std::uint16_t>(v);
        else
          m.ptr<std::uint8_t>(y)[x * t.c() + dst_c] = static_cast<std::uint8_t>(v);
      }
  write_mat(path, m);
}

/// Writes a {0,1} label plane as a 0/255 PNG.
inline void write_mask_png(const std::filesystem::path& path, const Tensor<std::uint8_t>& m, int n = 0,
                           int c = 0) {
  cv::Mat out(m.h(), m.w(), CV_8U);
  const auto p = m.plane(n, c);
  for (int i = 0; i < m.h() * m.w(); ++i) out.data[i] = p[i] ? 255 : 0;
  write_mat(path, out);
}

}  // namespace stdnet
