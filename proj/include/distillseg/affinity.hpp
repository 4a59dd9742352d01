// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pixel-affinity distillation loss. Neighbouring pixel pairs are split by the teacher's
// predicted labels; same-label pairs pull the student's class distributions together and
// different-label pairs push them apart up to a margin.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "distillseg/core/error.hpp"
#include "distillseg/core/numeric.hpp"
#include "distillseg/core/tensor.hpp"

namespace distillseg::affinity {

struct Pixel {
  std::int32_t b = 0;
  std::int32_t y = 0;
  std::int32_t x = 0;
  bool operator==(const Pixel&) const = default;
};

/// `first` precedes `second` in raster order within one batch element.
struct PixelPair {
  Pixel first;
  Pixel second;
  bool operator==(const PixelPair&) const = default;
};

struct ImageShape {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const ImageShape&) const = default;
};

struct PixelPairSet {
  std::vector<PixelPair> plus_pairs;
  std::vector<PixelPair> minus_pairs;
  int radius = 1;
  ImageShape image_shape;
};

struct AffinityOptions {
  double margin = 3.0;
  double epsilon = kDefaultEpsilon;
  /// Compare per-class one-vs-rest distributions and average, instead of one KL over all
  /// classes. Identical for two classes.
  bool per_class_kl = false;
};

template <typename T>
struct AffinityLossOutput {
  T loss_plus = T{0};
  T loss_minus = T{0};
  T loss_total = T{0};
  std::size_t plus_count = 0;
  std::size_t minus_count = 0;
  /// d loss_total / d student_probs.
  Tensor4<T> grad;
};

/// Enumerates every in-bounds pair within Chebyshev distance `radius`, each unordered pair
/// once, in raster order of the first pixel.
inline PixelPairSet build_pixel_pairs(const LabelMap& teacher_labels, int radius) {
  require(radius >= 1, "neighborhood radius must be >= 1, got " + std::to_string(radius));
  const auto h = static_cast<int>(teacher_labels.height());
  const auto w = static_cast<int>(teacher_labels.width());
  // A radius spanning the whole image makes every pixel everyone's neighbour.
  if (radius >= std::max(h, w)) {
    throw ValidationError("neighborhood radius " + std::to_string(radius) +
                          " is degenerate for a " + std::to_string(h) + "x" + std::to_string(w) +
                          " label map");
  }
  teacher_labels.validate();

  PixelPairSet set;
  set.radius = radius;
  set.image_shape = {teacher_labels.batch(), teacher_labels.height(), teacher_labels.width()};
  const std::size_t side = static_cast<std::size_t>(2 * radius + 1);
  const std::size_t per_pixel = (side * side - 1) / 2;
  set.plus_pairs.reserve(teacher_labels.size() * per_pixel);
  set.minus_pairs.reserve(teacher_labels.size() / 8);

  for (std::size_t bi = 0; bi < teacher_labels.batch(); ++bi) {
    const auto b = static_cast<std::int32_t>(bi);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::int32_t li = teacher_labels(bi, y, x);
        for (int dy = 0; dy <= radius; ++dy) {
          const int ny = y + dy;
          if (ny >= h) break;
          for (int dx = -radius; dx <= radius; ++dx) {
            if (dy == 0 && dx <= 0) continue;
            const int nx = x + dx;
            if (nx < 0 || nx >= w) continue;
            const PixelPair pair{{b, y, x}, {b, ny, nx}};
            if (teacher_labels(bi, ny, nx) == li) {
              set.plus_pairs.push_back(pair);
            } else {
              set.minus_pairs.push_back(pair);
            }
          }
        }
      }
    }
  }
  return set;
}

namespace detail {

// W_ij and its gradient for one pair; gradient scaled by `scale` is accumulated into grad.
template <typename T>
T pair_divergence(const Tensor4<T>& probs, const PixelPair& pair, const AffinityOptions& opt,
                  T scale, Tensor4<T>* grad) {
  const Shape4& s = probs.shape();
  const std::size_t plane = s.plane();
  const std::size_t pi = static_cast<std::size_t>(pair.first.y) * s.w + pair.first.x;
  const std::size_t pj = static_cast<std::size_t>(pair.second.y) * s.w + pair.second.x;
  const T* base = probs.plane(static_cast<std::size_t>(pair.first.b), 0);
  const T eps = static_cast<T>(opt.epsilon);
  if (!opt.per_class_kl) {
    const T w = distillseg::detail::kl_strided(base + pi, base + pj, s.c, plane, eps);
    if (grad != nullptr && scale != T{0}) {
      T* g = grad->plane(static_cast<std::size_t>(pair.first.b), 0);
      distillseg::detail::kl_strided_grad(base + pi, base + pj, s.c, plane, eps, scale, g + pi,
                                          g + pj);
    }
    return w;
  }
  // Mean over classes of KL between (p_c, 1 - p_c) distributions.
  const T inv_c = T{1} / static_cast<T>(s.c);
  T total = T{0};
  for (std::size_t ch = 0; ch < s.c; ++ch) {
    const T p = base[ch * plane + pi];
    const T q = base[ch * plane + pj];
    const T pr = T{1} - p;
    const T qr = T{1} - q;
    total += p * std::log((p + eps) / (q + eps)) + pr * std::log((pr + eps) / (qr + eps));
    if (grad != nullptr && scale != T{0}) {
      T* g = grad->plane(static_cast<std::size_t>(pair.first.b), 0);
      const T dp = std::log((p + eps) / (q + eps)) + p / (p + eps) -
                   std::log((pr + eps) / (qr + eps)) - pr / (pr + eps);
      const T dq = -p / (q + eps) + pr / (qr + eps);
      g[ch * plane + pi] += scale * inv_c * dp;
      g[ch * plane + pj] += scale * inv_c * dq;
    }
  }
  return total * inv_c;
}

}  // namespace detail

/// Mean KL over same-label pairs plus mean hinge max(0, m - KL) over different-label pairs.
/// An empty pair subset contributes exactly zero.
template <typename T>
AffinityLossOutput<T> affinity_loss(const ProbMap<T>& student_probs, const PixelPairSet& pairs,
                                    const AffinityOptions& opt = {}) {
  const Tensor4<T>& probs = student_probs.tensor();
  const Shape4& s = probs.shape();
  if (s.n != pairs.image_shape.batch || s.h != pairs.image_shape.height ||
      s.w != pairs.image_shape.width) {
    throw ValidationError("affinity_loss: probability map " + s.str() +
                          " does not match pair image shape (" +
                          std::to_string(pairs.image_shape.batch) + "," +
                          std::to_string(pairs.image_shape.height) + "," +
                          std::to_string(pairs.image_shape.width) + ")");
  }
  require(opt.margin > 0.0, "affinity_loss: margin must be > 0");
  require(opt.epsilon > 0.0, "affinity_loss: epsilon must be > 0");

  AffinityLossOutput<T> out;
  out.grad = Tensor4<T>(s);
  out.plus_count = pairs.plus_pairs.size();
  out.minus_count = pairs.minus_pairs.size();

  if (!pairs.plus_pairs.empty()) {
    const T scale = T{1} / static_cast<T>(pairs.plus_pairs.size());
    T sum = T{0};
    for (const auto& pair : pairs.plus_pairs) {
      sum += detail::pair_divergence(probs, pair, opt, scale, &out.grad);
    }
    out.loss_plus = sum * scale;
  }
  if (!pairs.minus_pairs.empty()) {
    const T scale = T{1} / static_cast<T>(pairs.minus_pairs.size());
    const T margin = static_cast<T>(opt.margin);
    T sum = T{0};
    for (const auto& pair : pairs.minus_pairs) {
      const T w = detail::pair_divergence<T>(probs, pair, opt, T{0}, nullptr);
      if (w < margin) {
        sum += margin - w;
        detail::pair_divergence(probs, pair, opt, -scale, &out.grad);
      }
    }
    out.loss_minus = sum * scale;
  }
  out.loss_total = out.loss_plus + out.loss_minus;
  return out;
}

}  // namespace distillseg::affinity
