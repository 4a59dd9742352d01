// SPDX-License-Identifier: Apache-2.0
#pragma once

// Batch gram-matrix distillation: both networks' features are projected by a 1x1 layer into a
// common channel space and resized to a common grid, then the n x n sample-similarity
// matrices are matched with an MSE + L1 penalty.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "distillseg/core/error.hpp"
#include "distillseg/core/resize.hpp"
#include "distillseg/core/rng.hpp"
#include "distillseg/core/tensor.hpp"

namespace distillseg::kernel {

/// Pixel-wise linear map from c_in to c_out channels (a bias-free 1x1 convolution).
/// `weights` is stored row-major as c_in x c_out.
template <typename T>
class AlignmentProjector {
 public:
  AlignmentProjector() = default;

  AlignmentProjector(std::size_t c_in, std::size_t c_out, std::vector<T> weights)
      : c_in_(c_in), c_out_(c_out), weights_(std::move(weights)) {
    require(c_in >= 1 && c_out >= 1, "projector dimensions must be >= 1");
    require(weights_.size() == c_in * c_out, "projector weight count mismatch");
    grad_.assign(weights_.size(), T{0});
  }

  /// Uniform(-1/sqrt(c_in), 1/sqrt(c_in)) initialisation.
  static AlignmentProjector random(std::size_t c_in, std::size_t c_out, Rng& rng) {
    std::vector<T> w(c_in * c_out);
    const double bound = 1.0 / std::sqrt(static_cast<double>(c_in));
    for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    return AlignmentProjector(c_in, c_out, std::move(w));
  }

  static AlignmentProjector identity(std::size_t channels) {
    std::vector<T> w(channels * channels, T{0});
    for (std::size_t i = 0; i < channels; ++i) w[i * channels + i] = T{1};
    return AlignmentProjector(channels, channels, std::move(w));
  }

  std::size_t in_channels() const { return c_in_; }
  std::size_t out_channels() const { return c_out_; }
  T weight(std::size_t in, std::size_t out) const { return weights_[in * c_out_ + out]; }
  std::vector<T>& weights() { return weights_; }
  const std::vector<T>& weights() const { return weights_; }
  std::vector<T>& grad() { return grad_; }
  const std::vector<T>& grad() const { return grad_; }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{0}); }

 private:
  std::size_t c_in_ = 0;
  std::size_t c_out_ = 0;
  std::vector<T> weights_;
  std::vector<T> grad_;
};

template <typename T>
Tensor4<T> project(const Tensor4<T>& features, const AlignmentProjector<T>& projector) {
  const Shape4& s = features.shape();
  if (s.c != projector.in_channels()) {
    throw ValidationError("align_features: feature channels " + std::to_string(s.c) +
                          " do not match projector input " +
                          std::to_string(projector.in_channels()));
  }
  const std::size_t c_out = projector.out_channels();
  Tensor4<T> out(Shape4{s.n, c_out, s.h, s.w});
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t ci = 0; ci < s.c; ++ci) {
      const T* src = features.plane(b, ci);
      for (std::size_t co = 0; co < c_out; ++co) {
        const T wgt = projector.weight(ci, co);
        T* dst = out.plane(b, co);
        for (std::size_t p = 0; p < s.plane(); ++p) dst[p] += wgt * src[p];
      }
    }
  }
  return out;
}

/// Returns d/d features and accumulates d/d weights into the projector.
template <typename T>
Tensor4<T> project_backward(const Tensor4<T>& features, AlignmentProjector<T>& projector,
                            const Tensor4<T>& grad_out) {
  const Shape4& s = features.shape();
  const std::size_t c_out = projector.out_channels();
  require(grad_out.shape() == Shape4{s.n, c_out, s.h, s.w}, "project backward shape mismatch");
  Tensor4<T> grad_in(s);
  auto& gw = projector.grad();
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t ci = 0; ci < s.c; ++ci) {
      const T* x = features.plane(b, ci);
      T* gx = grad_in.plane(b, ci);
      for (std::size_t co = 0; co < c_out; ++co) {
        const T* g = grad_out.plane(b, co);
        const T wgt = projector.weight(ci, co);
        T acc = T{0};
        for (std::size_t p = 0; p < s.plane(); ++p) {
          gx[p] += wgt * g[p];
          acc += x[p] * g[p];
        }
        gw[ci * c_out + co] += acc;
      }
    }
  }
  return grad_in;
}

struct HW {
  std::size_t h = 1;
  std::size_t w = 1;
};

/// 1x1 projection to the common channel space followed by bilinear resize to `target`.
template <typename T>
Tensor4<T> align_features(const Tensor4<T>& features, const AlignmentProjector<T>& projector,
                          HW target) {
  require(target.h >= 1 && target.w >= 1, "align_features: target size must be >= 1x1");
  return resize_bilinear(project(features, projector), target.h, target.w);
}

template <typename T>
Tensor4<T> align_features_backward(const Tensor4<T>& features, AlignmentProjector<T>& projector,
                                   const Tensor4<T>& grad_aligned) {
  const Shape4& s = features.shape();
  const Shape4 projected{s.n, projector.out_channels(), s.h, s.w};
  return project_backward(features, projector, resize_bilinear_backward(grad_aligned, projected));
}

/// n x n symmetric matrix, row-major.
template <typename T>
struct GramMatrix {
  std::size_t n = 0;
  std::vector<T> data;

  T operator()(std::size_t i, std::size_t j) const { return data[i * n + j]; }
  T& operator()(std::size_t i, std::size_t j) { return data[i * n + j]; }
};

/// Entry (i, j) is the dot product of flattened samples i and j, divided by c*h*w unless
/// `raw` is set.
template <typename T>
GramMatrix<T> gram_matrix(const Tensor4<T>& features, bool raw = false) {
  const Shape4& s = features.shape();
  const std::size_t len = s.c * s.plane();
  const T scale = raw ? T{1} : T{1} / static_cast<T>(len);
  GramMatrix<T> k{s.n, std::vector<T>(s.n * s.n, T{0})};
  for (std::size_t i = 0; i < s.n; ++i) {
    const auto xi = features.sample(i);
    for (std::size_t j = i; j < s.n; ++j) {
      const auto xj = features.sample(j);
      T dot = T{0};
      for (std::size_t p = 0; p < len; ++p) dot += xi[p] * xj[p];
      k(i, j) = dot * scale;
      k(j, i) = dot * scale;
    }
  }
  return k;
}

template <typename T>
Tensor4<T> gram_matrix_backward(const Tensor4<T>& features, const GramMatrix<T>& grad_k,
                                bool raw = false) {
  const Shape4& s = features.shape();
  require(grad_k.n == s.n, "gram backward batch mismatch");
  const std::size_t len = s.c * s.plane();
  const T scale = raw ? T{1} : T{1} / static_cast<T>(len);
  Tensor4<T> grad(s);
  for (std::size_t i = 0; i < s.n; ++i) {
    auto gi = grad.sample(i);
    for (std::size_t j = 0; j < s.n; ++j) {
      const T coeff = (grad_k(i, j) + grad_k(j, i)) * scale;
      if (coeff == T{0}) continue;
      const auto xj = features.sample(j);
      for (std::size_t p = 0; p < len; ++p) gi[p] += coeff * xj[p];
    }
  }
  return grad;
}

template <typename T>
struct KernelLossOutput {
  T value = T{0};
  GramMatrix<T> grad_student;
  /// Gradient w.r.t. the teacher matrix; only ever routed into the teacher-side projector.
  GramMatrix<T> grad_teacher;
};

/// mean((K_S - K_T)^2) + mean(|K_S - K_T|) over all n^2 entries.
template <typename T>
KernelLossOutput<T> kernel_loss(const GramMatrix<T>& student, const GramMatrix<T>& teacher) {
  if (student.n != teacher.n) {
    throw ValidationError("kernel_loss: gram sizes differ (" + std::to_string(student.n) +
                          " vs " + std::to_string(teacher.n) + ")");
  }
  const std::size_t count = student.n * student.n;
  const T inv = T{1} / static_cast<T>(count);
  KernelLossOutput<T> out;
  out.grad_student = {student.n, std::vector<T>(count, T{0})};
  out.grad_teacher = {student.n, std::vector<T>(count, T{0})};
  T squares = T{0};
  T absolutes = T{0};
  for (std::size_t i = 0; i < count; ++i) {
    const T d = student.data[i] - teacher.data[i];
    squares += d * d;
    absolutes += std::abs(d);
    const T sign = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
    out.grad_student.data[i] = (T{2} * d + sign) * inv;
    out.grad_teacher.data[i] = -out.grad_student.data[i];
  }
  out.value = squares * inv + absolutes * inv;
  return out;
}

}  // namespace distillseg::kernel
