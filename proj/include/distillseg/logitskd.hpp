// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>

#include "distillseg/core/error.hpp"
#include "distillseg/core/numeric.hpp"
#include "distillseg/core/tensor.hpp"

namespace distillseg::logitskd {

struct LogitsOptions {
  double epsilon = kDefaultEpsilon;
  double temperature = 1.0;
  /// Use KL(teacher || student) instead of KL(student || teacher).
  bool kl_reverse = false;
};

template <typename T>
struct LogitsLossOutput {
  T value = T{0};
  /// d value / d student logits. The teacher side receives no gradient.
  Tensor4<T> grad_student;
};

/// Mean over all batch*h*w pixels of KL(softmax(student) || softmax(teacher)).
template <typename T>
LogitsLossOutput<T> logits_loss(const Tensor4<T>& student_logits,
                                const Tensor4<T>& teacher_logits,
                                const LogitsOptions& opt = {}) {
  const Shape4& s = student_logits.shape();
  if (teacher_logits.shape() != s) {
    throw ValidationError("logits_loss: student " + s.str() + " vs teacher " +
                          teacher_logits.shape().str());
  }
  require(opt.temperature > 0.0, "logits_loss: temperature must be > 0");
  require(opt.epsilon > 0.0, "logits_loss: epsilon must be > 0");
  student_logits.require_finite("logits_loss student");
  teacher_logits.require_finite("logits_loss teacher");

  const T temp = static_cast<T>(opt.temperature);
  const T eps = static_cast<T>(opt.epsilon);
  const Tensor4<T> ps = softmax_channels(student_logits, temp);
  const Tensor4<T> pt = softmax_channels(teacher_logits, temp);
  const std::size_t plane = s.plane();
  const T inv_n = T{1} / static_cast<T>(s.n * plane);

  Tensor4<T> grad_ps(s);
  Tensor4<T> unused(s);
  T total = T{0};
  for (std::size_t b = 0; b < s.n; ++b) {
    const T* p_s = ps.plane(b, 0);
    const T* p_t = pt.plane(b, 0);
    T* g = grad_ps.plane(b, 0);
    T* sink = unused.plane(b, 0);
    for (std::size_t p = 0; p < plane; ++p) {
      if (!opt.kl_reverse) {
        total += distillseg::detail::kl_strided(p_s + p, p_t + p, s.c, plane, eps);
        distillseg::detail::kl_strided_grad(p_s + p, p_t + p, s.c, plane, eps, inv_n, g + p,
                                            sink + p);
      } else {
        total += distillseg::detail::kl_strided(p_t + p, p_s + p, s.c, plane, eps);
        distillseg::detail::kl_strided_grad(p_t + p, p_s + p, s.c, plane, eps, inv_n, sink + p,
                                            g + p);
      }
    }
  }
  LogitsLossOutput<T> out;
  out.value = total * inv_n;
  out.grad_student = softmax_channels_backward(ps, grad_ps, temp);
  return out;
}

}  // namespace distillseg::logitskd
