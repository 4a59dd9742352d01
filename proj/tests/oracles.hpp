// SPDX-License-Identifier: Apache-2.0
// Independent reference implementations and finite-difference helpers for the tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <vector>

#include "distillseg/distillseg.hpp"

namespace oracle {

using distillseg::LabelMap;
using distillseg::Rng;
using distillseg::Shape4;
using distillseg::Tensor4;

/// KL(p || q) over explicit vectors with the epsilon clamp, written out directly.
inline double kl(const std::vector<double>& p, const std::vector<double>& q, double eps) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log((p[i] + eps) / (q[i] + eps));
  return s;
}

inline std::vector<double> pixel(const Tensor4<double>& t, std::size_t b, std::size_t y,
                                 std::size_t x) {
  std::vector<double> v(t.shape().c);
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = t(b, c, y, x);
  return v;
}

struct AffinityResult {
  std::size_t plus = 0;
  std::size_t minus = 0;
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double total = 0.0;
};

/// Exhaustive double loop over every ordered pixel pair of each image; keeps pairs with
/// 1 <= Chebyshev distance <= radius whose first pixel precedes the second in raster order.
inline AffinityResult brute_affinity(const Tensor4<double>& probs, const LabelMap& labels,
                                     int radius, double margin, double eps) {
  AffinityResult r;
  const Shape4& s = probs.shape();
  const long h = static_cast<long>(s.h);
  const long w = static_cast<long>(s.w);
  double sum_plus = 0.0;
  double sum_minus = 0.0;
  for (std::size_t b = 0; b < s.n; ++b) {
    for (long a = 0; a < h * w; ++a) {
      for (long c = 0; c < h * w; ++c) {
        if (c <= a) continue;
        const long ay = a / w, ax = a % w, cy = c / w, cx = c % w;
        const long dist = std::max(std::labs(ay - cy), std::labs(ax - cx));
        if (dist < 1 || dist > radius) continue;
        const double wij = kl(pixel(probs, b, ay, ax), pixel(probs, b, cy, cx), eps);
        if (labels(b, ay, ax) == labels(b, cy, cx)) {
          ++r.plus;
          sum_plus += wij;
        } else {
          ++r.minus;
          sum_minus += std::max(0.0, margin - wij);
        }
      }
    }
  }
  r.loss_plus = r.plus == 0 ? 0.0 : sum_plus / static_cast<double>(r.plus);
  r.loss_minus = r.minus == 0 ? 0.0 : sum_minus / static_cast<double>(r.minus);
  r.total = r.loss_plus + r.loss_minus;
  return r;
}

inline Tensor4<double> random_tensor(Rng& rng, Shape4 s, double scale = 1.0) {
  Tensor4<double> t(s);
  for (auto& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

inline LabelMap random_labels(Rng& rng, std::size_t n, std::size_t h, std::size_t w, int classes) {
  LabelMap m(n, h, w, classes);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<std::int32_t>(rng.uniform_int(0, classes - 1));
  return m;
}

/// Probabilities kept away from 0 so the epsilon clamp does not dominate the check.
inline Tensor4<double> random_probs(Rng& rng, Shape4 s) {
  return distillseg::softmax_channels(random_tensor(rng, s, 1.0));
}

/// Max over coordinates of |analytic - fd| / max(|analytic|, |fd|, floor), central differences.
inline double fd_max_rel_error(Tensor4<double> x, const Tensor4<double>& analytic,
                               const std::function<double(const Tensor4<double>&)>& f,
                               double step = 1e-4, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = f(x);
    x[i] = orig - step;
    const double down = f(x);
    x[i] = orig;
    const double fd = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(fd), std::abs(analytic[i]), floor});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  return worst;
}

// --- Finite-difference suites shared by the unit tests and the acceptance binary. -----------
// Each returns the worst relative error over `instances` random draws. Losses are taken as
// functions of logits so perturbations stay on the simplex.

inline double fd_affinity(std::uint64_t seed, int instances) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    const Shape4 s{1, 3, 4, 4};
    const auto logits = random_tensor(rng, s, 1.0);
    const auto labels = random_labels(rng, 1, 4, 4, 3);
    const auto pairs = distillseg::affinity::build_pixel_pairs(labels, 1);
    distillseg::affinity::AffinityOptions opt;
    opt.margin = 3.0;
    auto f = [&](const Tensor4<double>& lg) {
      const auto p = distillseg::softmax_channels(lg);
      return distillseg::affinity::affinity_loss(distillseg::ProbMap<double>::unchecked(p), pairs, opt).loss_total;
    };
    const auto probs = distillseg::softmax_channels(logits);
    const auto out = distillseg::affinity::affinity_loss(distillseg::ProbMap<double>(probs), pairs, opt);
    const auto grad = distillseg::softmax_channels_backward(probs, out.grad);
    worst = std::max(worst, fd_max_rel_error(logits, grad, f));
  }
  return worst;
}

/// Kernel loss end to end through align_features and gram_matrix, w.r.t. student features.
inline double fd_kernel(std::uint64_t seed, int instances) {
  Rng rng(seed);
  double worst = 0.0;
  namespace kn = distillseg::kernel;
  for (int k = 0; k < instances; ++k) {
    const auto fs = random_tensor(rng, Shape4{2, 3, 4, 4});
    const auto ft = random_tensor(rng, Shape4{2, 5, 2, 2});
    const auto ps = kn::AlignmentProjector<double>::random(3, 4, rng);
    const auto pt = kn::AlignmentProjector<double>::random(5, 4, rng);
    const kn::HW hw{2, 2};
    const auto kt = kn::gram_matrix(kn::align_features(ft, pt, hw));
    auto f = [&](const Tensor4<double>& x) {
      return kn::kernel_loss(kn::gram_matrix(kn::align_features(x, ps, hw)), kt).value;
    };
    const auto as = kn::align_features(fs, ps, hw);
    const auto out = kn::kernel_loss(kn::gram_matrix(as), kt);
    auto proj = ps;
    const auto grad = kn::align_features_backward(fs, proj, kn::gram_matrix_backward(as, out.grad_student));
    worst = std::max(worst, fd_max_rel_error(fs, grad, f));
  }
  return worst;
}

inline double fd_logits(std::uint64_t seed, int instances) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    const Shape4 s{2, 3, 4, 4};
    const auto student = random_tensor(rng, s);
    const auto teacher = random_tensor(rng, s);
    auto f = [&](const Tensor4<double>& x) {
      return distillseg::logitskd::logits_loss(x, teacher).value;
    };
    const auto out = distillseg::logitskd::logits_loss(student, teacher);
    worst = std::max(worst, fd_max_rel_error(student, out.grad_student, f));
  }
  return worst;
}

inline double fd_seg(std::uint64_t seed, int instances, bool dice) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < instances; ++k) {
    const Shape4 s{2, 3, 4, 4};
    const auto logits = random_tensor(rng, s);
    const auto gt = random_labels(rng, 2, 4, 4, 3);
    auto loss = [&](const Tensor4<double>& p) {
      const auto pm = distillseg::ProbMap<double>::unchecked(p);
      return dice ? distillseg::composer::dice_loss(pm, gt, 1.0)
                  : distillseg::composer::focal_loss(pm, gt, 2.0);
    };
    auto f = [&](const Tensor4<double>& x) { return loss(distillseg::softmax_channels(x)).value; };
    const auto probs = distillseg::softmax_channels(logits);
    const auto grad = distillseg::softmax_channels_backward(probs, loss(probs).grad);
    worst = std::max(worst, fd_max_rel_error(logits, grad, f));
  }
  return worst;
}

/// Worst |loss_total| mismatch between the library and the exhaustive oracle on `maps`
/// random label maps of size up to 5x5 and radius up to 2. Pair counts must agree exactly;
/// a count mismatch returns infinity.
inline double affinity_brute_force_gap(std::uint64_t seed, int maps) {
  Rng rng(seed);
  double worst = 0.0;
  for (int k = 0; k < maps; ++k) {
    const std::size_t h = static_cast<std::size_t>(rng.uniform_int(1, 5));
    const std::size_t w = static_cast<std::size_t>(rng.uniform_int(h == 1 ? 2 : 1, 5));
    const int max_radius = static_cast<int>(std::min<std::size_t>(2, std::max(h, w) - 1));
    const int radius = rng.uniform_int(1, max_radius);
    const int classes = rng.uniform_int(2, 3);
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 2));
    const auto labels = random_labels(rng, n, h, w, classes);
    const auto probs = random_probs(rng, Shape4{n, static_cast<std::size_t>(classes), h, w});
    const double margin = rng.uniform(0.5, 4.0);
    const auto pairs = distillseg::affinity::build_pixel_pairs(labels, radius);
    distillseg::affinity::AffinityOptions opt;
    opt.margin = margin;
    const auto lib = distillseg::affinity::affinity_loss(distillseg::ProbMap<double>(probs), pairs, opt);
    const auto ref = brute_affinity(probs, labels, radius, margin, opt.epsilon);
    if (lib.plus_count != ref.plus || lib.minus_count != ref.minus) return INFINITY;
    worst = std::max({worst, std::abs(lib.loss_total - ref.total),
                      std::abs(lib.loss_plus - ref.loss_plus),
                      std::abs(lib.loss_minus - ref.loss_minus)});
  }
  return worst;
}

}  // namespace oracle
