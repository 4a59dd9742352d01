// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "distillseg/core/error.hpp"
#include "distillseg/core/tensor.hpp"

namespace distillseg {

inline constexpr double kDefaultEpsilon = 1e-8;

/// Max-subtracted softmax of a logit vector.
template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  require(!logits.empty(), "softmax of an empty vector");
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(static_cast<double>(logits[i]))) {
      throw NumericError("softmax: non-finite logit at index " + std::to_string(i));
    }
  }
  const T peak = *std::max_element(logits.begin(), logits.end());
  std::vector<T> out(logits.size());
  T total = T{0};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& logits) {
  return softmax(std::span<const T>(logits));
}

namespace detail {

// KL(p || q) over k entries spaced `stride` apart, both arguments clamped by eps.
template <typename T>
T kl_strided(const T* p, const T* q, std::size_t k, std::size_t stride, T eps) {
  T total = T{0};
  for (std::size_t i = 0; i < k; ++i) {
    const T pi = p[i * stride];
    const T qi = q[i * stride];
    total += pi * std::log((pi + eps) / (qi + eps));
  }
  return total;
}

// Accumulates scale * dKL/dp and scale * dKL/dq into gp, gq.
template <typename T>
void kl_strided_grad(const T* p, const T* q, std::size_t k, std::size_t stride, T eps, T scale,
                     T* gp, T* gq) {
  for (std::size_t i = 0; i < k; ++i) {
    const T pi = p[i * stride];
    const T qi = q[i * stride];
    gp[i * stride] += scale * (std::log((pi + eps) / (qi + eps)) + pi / (pi + eps));
    gq[i * stride] -= scale * pi / (qi + eps);
  }
}

template <typename T>
void require_simplex(std::span<const T> v, const char* name, double tolerance = 1e-6) {
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = static_cast<double>(v[i]);
    if (!std::isfinite(x) || x < -tolerance || x > 1.0 + tolerance) {
      throw ValidationError(std::string("kl_div: ") + name + " entry " + std::to_string(i) +
                            " is not a probability");
    }
    total += x;
  }
  if (std::abs(total - 1.0) > tolerance) {
    throw ValidationError(std::string("kl_div: ") + name + " does not sum to 1");
  }
}

}  // namespace detail

/// sum_i p_i * ln((p_i + eps) / (q_i + eps)).
template <typename T>
T kl_div(std::span<const T> p, std::span<const T> q, T eps = static_cast<T>(kDefaultEpsilon)) {
  require(p.size() == q.size(), "kl_div: length mismatch " + std::to_string(p.size()) + " vs " +
                                    std::to_string(q.size()));
  require(eps > T{0}, "kl_div: epsilon must be positive");
  detail::require_simplex(p, "p");
  detail::require_simplex(q, "q");
  return detail::kl_strided(p.data(), q.data(), p.size(), 1, eps);
}

template <typename T>
T kl_div(const std::vector<T>& p, const std::vector<T>& q,
         T eps = static_cast<T>(kDefaultEpsilon)) {
  return kl_div(std::span<const T>(p), std::span<const T>(q), eps);
}

/// Channel-wise softmax of every pixel, logits divided by `temperature` first.
template <typename T>
Tensor4<T> softmax_channels(const Tensor4<T>& logits, T temperature = T{1}) {
  const Shape4& s = logits.shape();
  Tensor4<T> out(s);
  const std::size_t plane = s.plane();
  std::vector<T> buf(s.c);
  for (std::size_t b = 0; b < s.n; ++b) {
    const T* in = logits.plane(b, 0);
    T* dst = out.plane(b, 0);
    for (std::size_t p = 0; p < plane; ++p) {
      T peak = in[p];
      for (std::size_t ch = 1; ch < s.c; ++ch) peak = std::max(peak, in[ch * plane + p]);
      T total = T{0};
      for (std::size_t ch = 0; ch < s.c; ++ch) {
        buf[ch] = std::exp((in[ch * plane + p] - peak) / temperature);
        total += buf[ch];
      }
      for (std::size_t ch = 0; ch < s.c; ++ch) dst[ch * plane + p] = buf[ch] / total;
    }
  }
  return out;
}

/// Gradient w.r.t. logits given probs = softmax(logits / temperature) and dL/dprobs.
template <typename T>
Tensor4<T> softmax_channels_backward(const Tensor4<T>& probs, const Tensor4<T>& grad_probs,
                                     T temperature = T{1}) {
  const Shape4& s = probs.shape();
  require(grad_probs.shape() == s, "softmax backward shape mismatch");
  Tensor4<T> out(s);
  const std::size_t plane = s.plane();
  for (std::size_t b = 0; b < s.n; ++b) {
    const T* pr = probs.plane(b, 0);
    const T* g = grad_probs.plane(b, 0);
    T* dst = out.plane(b, 0);
    for (std::size_t p = 0; p < plane; ++p) {
      T dot = T{0};
      for (std::size_t ch = 0; ch < s.c; ++ch) dot += pr[ch * plane + p] * g[ch * plane + p];
      for (std::size_t ch = 0; ch < s.c; ++ch) {
        const std::size_t i = ch * plane + p;
        dst[i] = pr[i] * (g[i] - dot) / temperature;
      }
    }
  }
  return out;
}

}  // namespace distillseg
