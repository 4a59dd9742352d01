// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "distillseg/core/error.hpp"
#include "distillseg/io/png.hpp"

namespace distillseg::plot {

using Color = std::array<std::uint8_t, 3>;

inline const std::vector<Color>& palette() {
  static const std::vector<Color> colors{{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                                         {214, 39, 40},  {148, 103, 189}, {140, 86, 75},
                                         {227, 119, 194}, {127, 127, 127}};
  return colors;
}

struct Series {
  std::string name;
  std::vector<double> values;
};

namespace detail {

inline void line(io::RgbImage& img, long x0, long y0, long x1, long y1, const Color& c) {
  const long dx = std::abs(x1 - x0);
  const long dy = -std::abs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1;
  const long sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  while (true) {
    img.set(x0, y0, c[0], c[1], c[2]);
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

inline void rect(io::RgbImage& img, long x0, long y0, long x1, long y1, const Color& c) {
  for (long y = std::min(y0, y1); y <= std::max(y0, y1); ++y) {
    for (long x = std::min(x0, x1); x <= std::max(x0, x1); ++x) img.set(x, y, c[0], c[1], c[2]);
  }
}

inline void axes(io::RgbImage& img, long left, long top, long right, long bottom) {
  const Color gray{200, 200, 200};
  for (int i = 1; i < 4; ++i) {
    const long y = top + (bottom - top) * i / 4;
    line(img, left, y, right, y, gray);
  }
  const Color black{0, 0, 0};
  line(img, left, top, left, bottom, black);
  line(img, left, bottom, right, bottom, black);
}

}  // namespace detail

/// Loss curves, one polyline per series, on a shared y range. Non-finite points are skipped.
inline void loss_curves_png(const std::string& path, const std::vector<Series>& series,
                            std::size_t width = 640, std::size_t height = 360) {
  require(!series.empty(), "loss_curves_png: no series");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  std::size_t len = 0;
  for (const auto& s : series) {
    len = std::max(len, s.values.size());
    for (double v : s.values) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  require(len >= 1 && std::isfinite(lo), "loss_curves_png: no finite values");
  if (hi - lo < 1e-12) hi = lo + 1.0;
  io::RgbImage img(width, height);
  const long left = 40, top = 20, right = static_cast<long>(width) - 20,
             bottom = static_cast<long>(height) - 30;
  detail::axes(img, left, top, right, bottom);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Color& c = palette()[k % palette().size()];
    long px = -1, py = -1;
    for (std::size_t i = 0; i < series[k].values.size(); ++i) {
      const double v = series[k].values[i];
      if (!std::isfinite(v)) {
        px = -1;
        continue;
      }
      const long x = left + (len == 1 ? 0 : static_cast<long>((right - left) * i / (len - 1)));
      const long y = bottom - static_cast<long>(std::lround((bottom - top) * (v - lo) / (hi - lo)));
      if (px >= 0) detail::line(img, px, py, x, y, c);
      px = x;
      py = y;
    }
    // Legend swatch, top right.
    detail::rect(img, right - 12, top + 4 + static_cast<long>(k) * 10, right - 4,
                 top + 10 + static_cast<long>(k) * 10, c);
  }
  io::write_rgb_png(path, img);
}

/// Grouped bars: groups along x, one bar per series within each group, y in [0, 1].
inline void grouped_bars_png(const std::string& path, const std::vector<std::string>& groups,
                             const std::vector<Series>& series, std::size_t width = 640,
                             std::size_t height = 360) {
  require(!groups.empty() && !series.empty(), "grouped_bars_png: nothing to draw");
  for (const auto& s : series) {
    require(s.values.size() == groups.size(), "grouped_bars_png: series " + s.name +
                                                  " has the wrong number of values");
  }
  io::RgbImage img(width, height);
  const long left = 40, top = 20, right = static_cast<long>(width) - 20,
             bottom = static_cast<long>(height) - 30;
  detail::axes(img, left, top, right, bottom);
  const long group_w = (right - left) / static_cast<long>(groups.size());
  const long bar_w = std::max(1L, (group_w - 8) / static_cast<long>(series.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t k = 0; k < series.size(); ++k) {
      const double v = std::clamp(series[k].values[g], 0.0, 1.0);
      if (!std::isfinite(series[k].values[g])) continue;
      const long x0 = left + 4 + static_cast<long>(g) * group_w + static_cast<long>(k) * bar_w;
      const long y = bottom - static_cast<long>(std::lround((bottom - top) * v));
      detail::rect(img, x0, y, x0 + bar_w - 2, bottom - 1, palette()[k % palette().size()]);
    }
  }
  io::write_rgb_png(path, img);
}

}  // namespace distillseg::plot
