// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "distillseg/core/error.hpp"

namespace distillseg {

struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense NCHW tensor. Every dimension is at least one.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T{0}) : shape_(shape) {
    require(shape.n >= 1 && shape.c >= 1 && shape.h >= 1 && shape.w >= 1,
            "tensor dimensions must all be >= 1, got " + shape.str());
    data_.assign(shape.size(), fill);
  }

  Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T{0})
      : Tensor4(Shape4{n, c, h, w}, fill) {}

  Tensor4(Shape4 shape, std::vector<T> values) : Tensor4(shape) {
    require(values.size() == shape.size(), "tensor value count " + std::to_string(values.size()) +
                                               " does not match shape " + shape.str());
    data_ = std::move(values);
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
    return ((b * shape_.c + ch) * shape_.h + y) * shape_.w + x;
  }

  T& operator()(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) {
    return data_[index(b, ch, y, x)];
  }
  const T& operator()(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
    return data_[index(b, ch, y, x)];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  /// Contiguous h*w plane of one (sample, channel).
  T* plane(std::size_t b, std::size_t ch) { return data_.data() + index(b, ch, 0, 0); }
  const T* plane(std::size_t b, std::size_t ch) const { return data_.data() + index(b, ch, 0, 0); }

  std::span<T> sample(std::size_t b) {
    const std::size_t len = shape_.c * shape_.plane();
    return {data_.data() + b * len, len};
  }
  std::span<const T> sample(std::size_t b) const {
    const std::size_t len = shape_.c * shape_.plane();
    return {data_.data() + b * len, len};
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  /// Throws NumericError on the first NaN or Inf entry.
  void require_finite(std::string_view what) const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(static_cast<double>(data_[i]))) {
        throw NumericError(std::string(what) + ": non-finite value at flat index " +
                           std::to_string(i));
      }
    }
  }

  Tensor4& operator+=(const Tensor4& other) {
    require(shape_ == other.shape_, "tensor add shape mismatch " + shape_.str() + " vs " +
                                        other.shape_.str());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor4& operator*=(T scale) {
    for (auto& v : data_) v *= scale;
    return *this;
  }

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

/// Per-pixel class probabilities. The channel axis of every pixel lies on the simplex.
template <typename T>
class ProbMap {
 public:
  ProbMap() = default;

  explicit ProbMap(Tensor4<T> probs, double tolerance = 1e-6) : probs_(std::move(probs)) {
    const Shape4& s = probs_.shape();
    probs_.require_finite("probability map");
    for (std::size_t b = 0; b < s.n; ++b) {
      for (std::size_t p = 0; p < s.plane(); ++p) {
        double total = 0.0;
        for (std::size_t ch = 0; ch < s.c; ++ch) {
          const double v = static_cast<double>(probs_.plane(b, ch)[p]);
          if (v < -tolerance || v > 1.0 + tolerance) {
            throw ValidationError("probability map entry outside [0,1] at sample " +
                                  std::to_string(b) + " pixel " + std::to_string(p));
          }
          total += v;
        }
        if (std::abs(total - 1.0) > tolerance) {
          throw ValidationError("probability map channels do not sum to 1 at sample " +
                                std::to_string(b) + " pixel " + std::to_string(p));
        }
      }
    }
  }

  /// Wraps a tensor without the simplex check. Used for finite-difference probing, where
  /// perturbed inputs leave the simplex by the step size.
  static ProbMap unchecked(Tensor4<T> probs) {
    ProbMap map;
    map.probs_ = std::move(probs);
    return map;
  }

  const Tensor4<T>& tensor() const { return probs_; }
  const Shape4& shape() const { return probs_.shape(); }

 private:
  Tensor4<T> probs_;
};

/// Integer class labels, shape (batch, h, w).
class LabelMap {
 public:
  LabelMap() = default;

  LabelMap(std::size_t n, std::size_t h, std::size_t w, int num_classes, int fill = 0)
      : n_(n), h_(h), w_(w), num_classes_(num_classes) {
    require(n >= 1 && h >= 1 && w >= 1, "label map dimensions must be >= 1");
    require(num_classes >= 1, "label map needs num_classes >= 1");
    require(fill >= 0 && fill < num_classes, "label fill value out of range");
    data_.assign(n * h * w, static_cast<std::int32_t>(fill));
  }

  LabelMap(std::size_t n, std::size_t h, std::size_t w, int num_classes,
           std::vector<std::int32_t> values)
      : LabelMap(n, h, w, num_classes) {
    require(values.size() == n * h * w, "label value count does not match shape");
    data_ = std::move(values);
    validate();
  }

  std::size_t batch() const { return n_; }
  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t plane() const { return h_ * w_; }
  std::size_t size() const { return data_.size(); }
  int num_classes() const { return num_classes_; }

  std::int32_t& operator()(std::size_t b, std::size_t y, std::size_t x) {
    return data_[(b * h_ + y) * w_ + x];
  }
  std::int32_t operator()(std::size_t b, std::size_t y, std::size_t x) const {
    return data_[(b * h_ + y) * w_ + x];
  }
  std::int32_t& operator[](std::size_t i) { return data_[i]; }
  std::int32_t operator[](std::size_t i) const { return data_[i]; }

  std::span<const std::int32_t> sample(std::size_t b) const {
    return {data_.data() + b * plane(), plane()};
  }
  std::span<std::int32_t> sample(std::size_t b) { return {data_.data() + b * plane(), plane()}; }
  const std::vector<std::int32_t>& storage() const { return data_; }

  void validate() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (data_[i] < 0 || data_[i] >= num_classes_) {
        throw ValidationError("label " + std::to_string(data_[i]) + " at flat index " +
                              std::to_string(i) + " outside [0, " + std::to_string(num_classes_) +
                              ")");
      }
    }
  }

  bool operator==(const LabelMap&) const = default;

 private:
  std::size_t n_ = 0;
  std::size_t h_ = 0;
  std::size_t w_ = 0;
  int num_classes_ = 0;
  std::vector<std::int32_t> data_;
};

/// Argmax over the channel axis. Ties resolve to the lower class index.
template <typename T>
LabelMap argmax_labels(const Tensor4<T>& scores) {
  const Shape4& s = scores.shape();
  LabelMap labels(s.n, s.h, s.w, static_cast<int>(s.c));
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t p = 0; p < s.plane(); ++p) {
      std::size_t best = 0;
      T best_value = scores.plane(b, 0)[p];
      for (std::size_t ch = 1; ch < s.c; ++ch) {
        const T v = scores.plane(b, ch)[p];
        if (v > best_value) {
          best_value = v;
          best = ch;
        }
      }
      labels[b * s.plane() + p] = static_cast<std::int32_t>(best);
    }
  }
  return labels;
}

}  // namespace distillseg
