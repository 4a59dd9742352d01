// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "distillseg/core/config.hpp"
#include "distillseg/core/error.hpp"
#include "distillseg/core/tensor.hpp"

namespace distillseg::composer {

template <typename T>
struct LossWithGrad {
  T value = T{0};
  /// d value / d probs.
  Tensor4<T> grad;
};

namespace detail {

inline void require_compatible(const Shape4& s, const LabelMap& gt, const char* who) {
  if (s.n != gt.batch() || s.h != gt.height() || s.w != gt.width()) {
    throw ValidationError(std::string(who) + ": probabilities " + s.str() +
                          " do not match labels (" + std::to_string(gt.batch()) + "," +
                          std::to_string(gt.height()) + "," + std::to_string(gt.width()) + ")");
  }
  if (static_cast<int>(s.c) != gt.num_classes()) {
    throw ValidationError(std::string(who) + ": " + std::to_string(s.c) +
                          " probability channels for " + std::to_string(gt.num_classes()) +
                          " classes");
  }
}

// Floor for p_t inside the logarithm.
inline constexpr double kLogFloor = 1e-12;

}  // namespace detail

/// 1 - mean over foreground classes (1..C-1) of soft dice, sums taken over the whole batch.
template <typename T>
LossWithGrad<T> dice_loss(const ProbMap<T>& probs, const LabelMap& gt, double smooth = 1.0) {
  const Tensor4<T>& pr = probs.tensor();
  const Shape4& s = pr.shape();
  if (pr.empty() || gt.size() == 0) throw ValidationError("dice_loss: empty batch");
  detail::require_compatible(s, gt, "dice_loss");
  require(smooth > 0.0, "dice_loss: smooth must be > 0");
  require(s.c >= 2, "dice_loss: need a background and at least one foreground class");

  const T sm = static_cast<T>(smooth);
  const std::size_t plane = s.plane();
  const T inv_classes = T{1} / static_cast<T>(s.c - 1);
  LossWithGrad<T> out;
  out.grad = Tensor4<T>(s);
  T mean_dice = T{0};
  for (std::size_t ch = 1; ch < s.c; ++ch) {
    T inter = T{0};
    T psum = T{0};
    T gsum = T{0};
    for (std::size_t b = 0; b < s.n; ++b) {
      const T* p = pr.plane(b, ch);
      const auto labels = gt.sample(b);
      for (std::size_t i = 0; i < plane; ++i) {
        const T g = labels[i] == static_cast<std::int32_t>(ch) ? T{1} : T{0};
        inter += p[i] * g;
        psum += p[i];
        gsum += g;
      }
    }
    const T num = T{2} * inter + sm;
    const T den = psum + gsum + sm;
    mean_dice += num / den;
    for (std::size_t b = 0; b < s.n; ++b) {
      T* gp = out.grad.plane(b, ch);
      const auto labels = gt.sample(b);
      for (std::size_t i = 0; i < plane; ++i) {
        const T g = labels[i] == static_cast<std::int32_t>(ch) ? T{1} : T{0};
        gp[i] = -inv_classes * (T{2} * g * den - num) / (den * den);
      }
    }
  }
  out.value = T{1} - mean_dice * inv_classes;
  return out;
}

/// Mean over pixels of -(1 - p_t)^gamma * ln p_t.
template <typename T>
LossWithGrad<T> focal_loss(const ProbMap<T>& probs, const LabelMap& gt, double gamma = 2.0) {
  const Tensor4<T>& pr = probs.tensor();
  const Shape4& s = pr.shape();
  if (pr.empty() || gt.size() == 0) throw ValidationError("focal_loss: empty batch");
  detail::require_compatible(s, gt, "focal_loss");
  require(gamma >= 0.0, "focal_loss: gamma must be >= 0");

  const T gm = static_cast<T>(gamma);
  const T floor = static_cast<T>(detail::kLogFloor);
  const std::size_t plane = s.plane();
  const T inv_n = T{1} / static_cast<T>(s.n * plane);
  LossWithGrad<T> out;
  out.grad = Tensor4<T>(s);
  T total = T{0};
  for (std::size_t b = 0; b < s.n; ++b) {
    const auto labels = gt.sample(b);
    for (std::size_t i = 0; i < plane; ++i) {
      const auto cls = static_cast<std::size_t>(labels[i]);
      const T pt_raw = pr.plane(b, cls)[i];
      const bool floored = pt_raw < floor;
      const T pt = floored ? floor : pt_raw;
      const T rest = T{1} - pt;
      const T log_pt = std::log(pt);
      const T weight = gamma == 0.0 ? T{1} : std::pow(std::max(rest, T{0}), gm);
      total -= weight * log_pt;
      if (floored) continue;
      // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
      T dweight = T{0};
      if (gamma != 0.0 && rest > T{0}) dweight = gm * std::pow(rest, gm - T{1});
      out.grad.plane(b, cls)[i] = inv_n * (dweight * log_pt - weight / pt);
    }
  }
  out.value = total * inv_n;
  return out;
}

/// Mean pixel-wise cross-entropy; focal_loss with gamma = 0 equals this.
template <typename T>
T cross_entropy(const ProbMap<T>& probs, const LabelMap& gt) {
  const Tensor4<T>& pr = probs.tensor();
  const Shape4& s = pr.shape();
  detail::require_compatible(s, gt, "cross_entropy");
  const T floor = static_cast<T>(detail::kLogFloor);
  T total = T{0};
  for (std::size_t b = 0; b < s.n; ++b) {
    const auto labels = gt.sample(b);
    for (std::size_t i = 0; i < s.plane(); ++i) {
      total -= std::log(std::max(pr.plane(b, static_cast<std::size_t>(labels[i]))[i], floor));
    }
  }
  return total / static_cast<T>(s.n * s.plane());
}

/// Segmentation loss selected by `kind`; dice_focal is the plain sum of both.
template <typename T>
LossWithGrad<T> segmentation_loss(const ProbMap<T>& probs, const LabelMap& gt, SegLossKind kind,
                                  double gamma, double smooth) {
  switch (kind) {
    case SegLossKind::dice: return dice_loss(probs, gt, smooth);
    case SegLossKind::focal: return focal_loss(probs, gt, gamma);
    case SegLossKind::dice_focal: {
      auto d = dice_loss(probs, gt, smooth);
      auto f = focal_loss(probs, gt, gamma);
      d.value += f.value;
      d.grad += f.grad;
      return d;
    }
  }
  throw ValidationError("unknown segmentation loss");
}

struct LossBreakdown {
  double seg = 0.0;
  double logits = 0.0;
  double kernel = 0.0;
  double affinity = 0.0;
  double total = 0.0;
};

/// seg + lambda1*logits + lambda2*kernel + lambda3*affinity. Disabled modules are recorded
/// as exactly zero whatever value was passed in.
inline LossBreakdown total_loss(double seg, double logits, double kernel, double affinity,
                                const LossWeights& weights, const ModuleFlags& flags) {
  const std::pair<const char*, double> parts[] = {
      {"seg", seg}, {"logits", logits}, {"kernel", kernel}, {"affinity", affinity}};
  for (const auto& [name, value] : parts) {
    if (std::isnan(value)) throw NumericError(std::string("loss component '") + name + "' is NaN");
  }
  LossBreakdown out;
  out.seg = seg;
  out.logits = flags.use_lm ? logits : 0.0;
  out.kernel = flags.use_kmm ? kernel : 0.0;
  out.affinity = flags.use_aam ? affinity : 0.0;
  out.total = out.seg + weights.lambda1 * out.logits + weights.lambda2 * out.kernel +
              weights.lambda3 * out.affinity;
  if (!std::isfinite(out.total)) throw NumericError("total loss is not finite");
  return out;
}

/// Hard dice on the foreground (label != 0), per whole map. Both masks empty gives 1.
inline double dice_score(const LabelMap& pred, const LabelMap& gt) {
  require(pred.batch() == gt.batch() && pred.height() == gt.height() && pred.width() == gt.width(),
          "dice_score: shape mismatch");
  std::size_t a = 0;
  std::size_t b = 0;
  std::size_t both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

/// dice_score of one batch element.
inline double dice_score_sample(const LabelMap& pred, const LabelMap& gt, std::size_t index) {
  const auto p = pred.sample(index);
  const auto g = gt.sample(index);
  std::size_t a = 0;
  std::size_t b = 0;
  std::size_t both = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    a += p[i] != 0;
    b += g[i] != 0;
    both += (p[i] != 0) && (g[i] != 0);
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

}  // namespace distillseg::composer
