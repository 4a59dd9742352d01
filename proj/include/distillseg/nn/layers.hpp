// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "distillseg/core/error.hpp"
#include "distillseg/core/resize.hpp"
#include "distillseg/core/rng.hpp"
#include "distillseg/core/tensor.hpp"

namespace distillseg::nn {

using Tensor = Tensor4<float>;

struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> value;
  std::vector<float> grad;
  /// Buffers (batch-norm running statistics) are saved but never optimised.
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::size_t> s, float fill = 0.0f, bool train = true)
      : name(std::move(n)), shape(std::move(s)), trainable(train) {
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    value.assign(count, fill);
    grad.assign(train ? count : 0, 0.0f);
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

struct ForwardMode {
  bool training = false;  // batch statistics in batch-norm
  bool record = false;    // keep activations for backward
};

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

/// Square-kernel, stride-1, same-padding convolution via im2col + GEMM.
class Conv2d {
 public:
  Conv2d() = default;

  Conv2d(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t kernel,
         bool bias, Rng& rng)
      : c_in_(c_in), c_out_(c_out), k_(kernel), pad_(kernel / 2), has_bias_(bias) {
    require(kernel % 2 == 1, "conv kernel size must be odd");
    weight_ = Parameter(name + ".weight", {c_out, c_in, kernel, kernel});
    const double stddev = std::sqrt(2.0 / static_cast<double>(c_in * kernel * kernel));
    for (auto& v : weight_.value) v = static_cast<float>(rng.normal(0.0, stddev));
    if (has_bias_) bias_ = Parameter(name + ".bias", {c_out});
  }

  std::size_t in_channels() const { return c_in_; }
  std::size_t out_channels() const { return c_out_; }
  std::size_t kernel() const { return k_; }

  Tensor forward(const Tensor& x, ForwardMode mode) {
    const Shape4& s = x.shape();
    require(s.c == c_in_, weight_.name + ": expected " + std::to_string(c_in_) +
                              " input channels, got " + std::to_string(s.c));
    const std::size_t hw = s.plane();
    const std::size_t kk = c_in_ * k_ * k_;
    Tensor out(Shape4{s.n, c_out_, s.h, s.w});
    in_shape_ = s;
    if (mode.record) {
      if (k_ == 1) {
        input_ = x;
      } else {
        cols_.resize(s.n * kk * hw);
      }
    }
    std::vector<float> scratch;
    const ConstMatMap w(weight_.value.data(), static_cast<Eigen::Index>(c_out_),
                        static_cast<Eigen::Index>(kk));
    for (std::size_t b = 0; b < s.n; ++b) {
      const float* col_ptr = nullptr;
      if (k_ == 1) {
        col_ptr = x.plane(b, 0);
      } else {
        float* dst = nullptr;
        if (mode.record) {
          dst = cols_.data() + b * kk * hw;
        } else {
          scratch.resize(kk * hw);
          dst = scratch.data();
        }
        im2col(x, b, dst);
        col_ptr = dst;
      }
      const ConstMatMap col(col_ptr, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(hw));
      MatMap y(out.plane(b, 0), static_cast<Eigen::Index>(c_out_), static_cast<Eigen::Index>(hw));
      y.noalias() = w * col;
      if (has_bias_) {
        for (std::size_t co = 0; co < c_out_; ++co) y.row(static_cast<Eigen::Index>(co)).array() += bias_.value[co];
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) {
    const Shape4& s = in_shape_;
    const std::size_t hw = s.plane();
    const std::size_t kk = c_in_ * k_ * k_;
    require(grad_out.shape() == Shape4{s.n, c_out_, s.h, s.w}, weight_.name + ": bad grad shape");
    Tensor grad_in(s);
    const ConstMatMap w(weight_.value.data(), static_cast<Eigen::Index>(c_out_),
                        static_cast<Eigen::Index>(kk));
    MatMap gw(weight_.grad.data(), static_cast<Eigen::Index>(c_out_), static_cast<Eigen::Index>(kk));
    std::vector<float> dcol(k_ == 1 ? 0 : kk * hw);
    for (std::size_t b = 0; b < s.n; ++b) {
      const ConstMatMap gy(grad_out.plane(b, 0), static_cast<Eigen::Index>(c_out_),
                           static_cast<Eigen::Index>(hw));
      const float* col_ptr = k_ == 1 ? input_.plane(b, 0) : cols_.data() + b * kk * hw;
      const ConstMatMap col(col_ptr, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(hw));
      gw.noalias() += gy * col.transpose();
      if (has_bias_) {
        // Scalar loop: Eigen's vectorised sum peels by address, so its order would follow the heap.
        for (std::size_t co = 0; co < c_out_; ++co) {
          const float* row = grad_out.plane(b, co);
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += row[i];
          bias_.grad[co] += static_cast<float>(acc);
        }
      }
      if (k_ == 1) {
        MatMap gx(grad_in.plane(b, 0), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(hw));
        gx.noalias() = w.transpose() * gy;
      } else {
        MatMap dc(dcol.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(hw));
        dc.noalias() = w.transpose() * gy;
        col2im(dcol.data(), grad_in, b);
      }
    }
    return grad_in;
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  std::size_t macs_per_pixel() const { return c_out_ * c_in_ * k_ * k_; }

 private:
  void im2col(const Tensor& x, std::size_t b, float* dst) const {
    const Shape4& s = x.shape();
    const auto h = static_cast<long>(s.h);
    const auto wd = static_cast<long>(s.w);
    const auto pad = static_cast<long>(pad_);
    for (std::size_t ci = 0; ci < c_in_; ++ci) {
      const float* src = x.plane(b, ci);
      for (std::size_t ky = 0; ky < k_; ++ky) {
        for (std::size_t kx = 0; kx < k_; ++kx) {
          const long oy = static_cast<long>(ky) - pad;
          const long ox = static_cast<long>(kx) - pad;
          for (long y = 0; y < h; ++y) {
            const long sy = y + oy;
            float* row = dst + y * wd;
            if (sy < 0 || sy >= h) {
              std::fill(row, row + wd, 0.0f);
              continue;
            }
            const float* srow = src + sy * wd;
            const long x0 = std::max(0L, -ox);
            const long x1 = std::min(wd, wd - ox);
            std::fill(row, row + x0, 0.0f);
            std::copy(srow + x0 + ox, srow + x1 + ox, row + x0);
            std::fill(row + x1, row + wd, 0.0f);
          }
          dst += s.plane();
        }
      }
    }
  }

  void col2im(const float* src, Tensor& grad_in, std::size_t b) const {
    const Shape4& s = grad_in.shape();
    const auto h = static_cast<long>(s.h);
    const auto wd = static_cast<long>(s.w);
    const auto pad = static_cast<long>(pad_);
    for (std::size_t ci = 0; ci < c_in_; ++ci) {
      float* dst = grad_in.plane(b, ci);
      for (std::size_t ky = 0; ky < k_; ++ky) {
        for (std::size_t kx = 0; kx < k_; ++kx) {
          const long oy = static_cast<long>(ky) - pad;
          const long ox = static_cast<long>(kx) - pad;
          for (long y = 0; y < h; ++y) {
            const long sy = y + oy;
            if (sy < 0 || sy >= h) continue;
            const float* row = src + y * wd;
            float* drow = dst + sy * wd;
            const long x0 = std::max(0L, -ox);
            const long x1 = std::min(wd, wd - ox);
            for (long x = x0; x < x1; ++x) drow[x + ox] += row[x];
          }
          src += s.plane();
        }
      }
    }
  }

  std::size_t c_in_ = 0;
  std::size_t c_out_ = 0;
  std::size_t k_ = 1;
  std::size_t pad_ = 0;
  bool has_bias_ = false;
  Parameter weight_;
  Parameter bias_;
  Shape4 in_shape_{};
  Tensor input_;
  std::vector<float> cols_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;

  BatchNorm2d(const std::string& name, std::size_t channels, double momentum = 0.1,
              double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps) {
    gamma_ = Parameter(name + ".gamma", {channels}, 1.0f);
    beta_ = Parameter(name + ".beta", {channels}, 0.0f);
    running_mean_ = Parameter(name + ".running_mean", {channels}, 0.0f, false);
    running_var_ = Parameter(name + ".running_var", {channels}, 1.0f, false);
  }

  Tensor forward(const Tensor& x, ForwardMode mode) {
    const Shape4& s = x.shape();
    require(s.c == channels_, gamma_.name + ": channel mismatch");
    const std::size_t hw = s.plane();
    const double count = static_cast<double>(s.n * hw);
    Tensor out(s);
    mean_.assign(channels_, 0.0);
    invstd_.assign(channels_, 0.0);
    for (std::size_t c = 0; c < channels_; ++c) {
      double mean = 0.0;
      double var = 0.0;
      if (mode.training) {
        for (std::size_t b = 0; b < s.n; ++b) {
          const float* p = x.plane(b, c);
          for (std::size_t i = 0; i < hw; ++i) mean += p[i];
        }
        mean /= count;
        for (std::size_t b = 0; b < s.n; ++b) {
          const float* p = x.plane(b, c);
          for (std::size_t i = 0; i < hw; ++i) {
            const double d = p[i] - mean;
            var += d * d;
          }
        }
        var /= count;
        const double unbiased = count > 1.0 ? var * count / (count - 1.0) : var;
        running_mean_.value[c] = static_cast<float>((1.0 - momentum_) * running_mean_.value[c] +
                                                    momentum_ * mean);
        running_var_.value[c] = static_cast<float>((1.0 - momentum_) * running_var_.value[c] +
                                                   momentum_ * unbiased);
      } else {
        mean = running_mean_.value[c];
        var = running_var_.value[c];
      }
      const double invstd = 1.0 / std::sqrt(var + eps_);
      mean_[c] = mean;
      invstd_[c] = invstd;
      const auto scale = static_cast<float>(gamma_.value[c] * invstd);
      const auto shift = static_cast<float>(beta_.value[c] - gamma_.value[c] * mean * invstd);
      for (std::size_t b = 0; b < s.n; ++b) {
        const float* p = x.plane(b, c);
        float* o = out.plane(b, c);
        for (std::size_t i = 0; i < hw; ++i) o[i] = p[i] * scale + shift;
      }
    }
    if (mode.record) {
      input_ = x;
      training_ = mode.training;
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) {
    const Shape4& s = input_.shape();
    const std::size_t hw = s.plane();
    const double count = static_cast<double>(s.n * hw);
    Tensor grad_in(s);
    for (std::size_t c = 0; c < channels_; ++c) {
      const double mean = mean_[c];
      const double invstd = invstd_[c];
      double sum_g = 0.0;
      double sum_gx = 0.0;
      for (std::size_t b = 0; b < s.n; ++b) {
        const float* g = grad_out.plane(b, c);
        const float* x = input_.plane(b, c);
        for (std::size_t i = 0; i < hw; ++i) {
          sum_g += g[i];
          sum_gx += g[i] * (x[i] - mean) * invstd;
        }
      }
      gamma_.grad[c] += static_cast<float>(sum_gx);
      beta_.grad[c] += static_cast<float>(sum_g);
      const double gam = gamma_.value[c];
      for (std::size_t b = 0; b < s.n; ++b) {
        const float* g = grad_out.plane(b, c);
        const float* x = input_.plane(b, c);
        float* gi = grad_in.plane(b, c);
        if (training_) {
          for (std::size_t i = 0; i < hw; ++i) {
            const double xhat = (x[i] - mean) * invstd;
            gi[i] = static_cast<float>(gam * invstd / count *
                                       (count * g[i] - sum_g - xhat * sum_gx));
          }
        } else {
          for (std::size_t i = 0; i < hw; ++i) gi[i] = static_cast<float>(gam * invstd * g[i]);
        }
      }
    }
    return grad_in;
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

 private:
  std::size_t channels_ = 0;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
  Parameter gamma_;
  Parameter beta_;
  Parameter running_mean_;
  Parameter running_var_;
  Tensor input_;
  bool training_ = false;
  std::vector<double> mean_;
  std::vector<double> invstd_;
};

inline void relu_inplace(Tensor& x) {
  for (auto& v : x.values()) v = v > 0.0f ? v : 0.0f;
}

/// Gradient through ReLU given its output.
inline void relu_backward_inplace(const Tensor& output, Tensor& grad) {
  const auto out = output.values();
  auto g = grad.values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (out[i] <= 0.0f) g[i] = 0.0f;
  }
}

/// 2x2 max pooling, stride 2.
class MaxPool2 {
 public:
  Tensor forward(const Tensor& x, ForwardMode mode) {
    const Shape4& s = x.shape();
    require(s.h % 2 == 0 && s.w % 2 == 0, "max pool needs even spatial size, got " + s.str());
    in_shape_ = s;
    Tensor out(Shape4{s.n, s.c, s.h / 2, s.w / 2});
    if (mode.record) argmax_.assign(out.size(), 0);
    std::size_t o = 0;
    for (std::size_t b = 0; b < s.n; ++b) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const float* p = x.plane(b, c);
        const std::size_t base = x.index(b, c, 0, 0);
        for (std::size_t y = 0; y < s.h / 2; ++y) {
          for (std::size_t xx = 0; xx < s.w / 2; ++xx, ++o) {
            std::size_t best = (2 * y) * s.w + 2 * xx;
            const std::size_t cand[3] = {best + 1, best + s.w, best + s.w + 1};
            for (std::size_t k : cand) {
              if (p[k] > p[best]) best = k;
            }
            out[o] = p[best];
            if (mode.record) argmax_[o] = base + best;
          }
        }
      }
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) const {
    Tensor grad_in(in_shape_);
    for (std::size_t o = 0; o < grad_out.size(); ++o) grad_in[argmax_[o]] += grad_out[o];
    return grad_in;
  }

 private:
  Shape4 in_shape_{};
  std::vector<std::size_t> argmax_;
};

/// Conv -> BatchNorm -> ReLU, repeated.
class ConvBlock {
 public:
  ConvBlock() = default;

  ConvBlock(const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t convs,
            Rng& rng) {
    require(convs >= 1, "conv block needs at least one conv");
    for (std::size_t i = 0; i < convs; ++i) {
      const std::string prefix = name + ".conv" + std::to_string(i);
      convs_.emplace_back(prefix, i == 0 ? c_in : c_out, c_out, 3, false, rng);
      norms_.emplace_back(prefix + ".bn", c_out);
    }
    outputs_.resize(convs);
  }

  Tensor forward(const Tensor& x, ForwardMode mode) {
    Tensor h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = norms_[i].forward(convs_[i].forward(h, mode), mode);
      relu_inplace(h);
      if (mode.record) outputs_[i] = h;
    }
    return h;
  }

  Tensor backward(Tensor grad) {
    for (std::size_t i = convs_.size(); i-- > 0;) {
      relu_backward_inplace(outputs_[i], grad);
      grad = convs_[i].backward(norms_[i].backward(grad));
    }
    return grad;
  }

  void collect(std::vector<Parameter*>& out) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect(out);
      norms_[i].collect(out);
    }
  }

  std::size_t macs_per_pixel() const {
    std::size_t total = 0;
    for (const auto& c : convs_) total += c.macs_per_pixel();
    return total;
  }

 private:
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> norms_;
  std::vector<Tensor> outputs_;
};

/// Adam with per-slot moment buffers. Slots are addressed by index so parameters of
/// different scalar types can share one optimiser.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void begin_step() { ++t_; }
  long steps() const { return t_; }

  template <typename T>
  void update(std::size_t slot, std::span<T> value, std::span<const T> grad, double lr) {
    if (slot >= m_.size()) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    auto& m = m_[slot];
    auto& v = v_[slot];
    if (m.size() != value.size()) {
      m.assign(value.size(), 0.0);
      v.assign(value.size(), 0.0);
    }
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double step = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      value[i] = static_cast<T>(static_cast<double>(value[i]) - step);
    }
  }

 private:
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Triangular cyclic schedule starting at the peak: falls linearly to the floor over
/// `step_size` iterations, climbs back over the next `step_size`, and repeats.
class CyclicLR {
 public:
  CyclicLR(double max_lr, double min_lr, double step_size)
      : max_lr_(max_lr), min_lr_(min_lr), step_size_(std::max(step_size, 1.0)) {}

  double at(long iteration) const {
    const double phase = std::fmod(static_cast<double>(iteration) / step_size_, 2.0);
    return min_lr_ + (max_lr_ - min_lr_) * std::abs(1.0 - phase);
  }

 private:
  double max_lr_;
  double min_lr_;
  double step_size_;
};

}  // namespace distillseg::nn
