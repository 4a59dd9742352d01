// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "distillseg/core/tensor.hpp"

namespace distillseg {

namespace detail {

struct LerpTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;  // weight of `hi`
};

// Half-pixel-centre sampling positions (align_corners = false).
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::max(src, 0.0);
    auto lo = static_cast<std::size_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    taps[i].lo = lo;
    taps[i].hi = std::min(lo + 1, in - 1);
    taps[i].frac = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of every (sample, channel) plane to (out_h, out_w).
template <typename T>
Tensor4<T> resize_bilinear(const Tensor4<T>& in, std::size_t out_h, std::size_t out_w) {
  const Shape4& s = in.shape();
  require(out_h >= 1 && out_w >= 1, "resize target must be at least 1x1");
  if (s.h == out_h && s.w == out_w) return in;
  const auto ty = detail::lerp_taps(s.h, out_h);
  const auto tx = detail::lerp_taps(s.w, out_w);
  Tensor4<T> out(Shape4{s.n, s.c, out_h, out_w});
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      const T* src = in.plane(b, ch);
      T* dst = out.plane(b, ch);
      for (std::size_t y = 0; y < out_h; ++y) {
        const T fy = static_cast<T>(ty[y].frac);
        const T* r0 = src + ty[y].lo * s.w;
        const T* r1 = src + ty[y].hi * s.w;
        for (std::size_t x = 0; x < out_w; ++x) {
          const T fx = static_cast<T>(tx[x].frac);
          const T top = r0[tx[x].lo] * (T{1} - fx) + r0[tx[x].hi] * fx;
          const T bot = r1[tx[x].lo] * (T{1} - fx) + r1[tx[x].hi] * fx;
          dst[y * out_w + x] = top * (T{1} - fy) + bot * fy;
        }
      }
    }
  }
  return out;
}

/// Adjoint of resize_bilinear: scatters output gradients back onto an `in_shape` grid.
template <typename T>
Tensor4<T> resize_bilinear_backward(const Tensor4<T>& grad_out, const Shape4& in_shape) {
  const Shape4& s = grad_out.shape();
  require(s.n == in_shape.n && s.c == in_shape.c, "resize backward batch/channel mismatch");
  if (s.h == in_shape.h && s.w == in_shape.w) return grad_out;
  const auto ty = detail::lerp_taps(in_shape.h, s.h);
  const auto tx = detail::lerp_taps(in_shape.w, s.w);
  Tensor4<T> grad_in(in_shape);
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t ch = 0; ch < s.c; ++ch) {
      const T* g = grad_out.plane(b, ch);
      T* dst = grad_in.plane(b, ch);
      for (std::size_t y = 0; y < s.h; ++y) {
        const T fy = static_cast<T>(ty[y].frac);
        T* r0 = dst + ty[y].lo * in_shape.w;
        T* r1 = dst + ty[y].hi * in_shape.w;
        for (std::size_t x = 0; x < s.w; ++x) {
          const T fx = static_cast<T>(tx[x].frac);
          const T v = g[y * s.w + x];
          r0[tx[x].lo] += v * (T{1} - fy) * (T{1} - fx);
          r0[tx[x].hi] += v * (T{1} - fy) * fx;
          r1[tx[x].lo] += v * fy * (T{1} - fx);
          r1[tx[x].hi] += v * fy * fx;
        }
      }
    }
  }
  return grad_in;
}

}  // namespace distillseg
