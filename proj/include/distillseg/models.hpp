// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy encoder-decoder segmentation networks. Each encoder level halves the resolution with
// 2x2 max pooling; each decoder level projects the coarser map with a 1x1 conv, upsamples it
// bilinearly, adds the encoder skip and refines it with 3x3 conv blocks.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillseg/core/error.hpp"
#include "distillseg/core/resize.hpp"
#include "distillseg/core/rng.hpp"
#include "distillseg/core/tensor.hpp"
#include "distillseg/nn/layers.hpp"

namespace distillseg::models {

using nn::ForwardMode;
using nn::Parameter;
using nn::Tensor;
using FeatureTaps = std::map<std::string, Tensor>;

enum class Role { teacher, student };

struct SegNetworkSpec {
  std::string name;
  Role role = Role::student;
  /// Channel width of encoder levels 0..depth.
  std::vector<std::size_t> encoder_widths;
  /// 3x3 convs per encoder level (size depth + 1).
  std::vector<std::size_t> encoder_convs;
  /// 3x3 convs per decoder level 0..depth-1.
  std::vector<std::size_t> decoder_convs;
  int num_classes = 2;

  std::size_t depth() const { return encoder_widths.empty() ? 0 : encoder_widths.size() - 1; }
};

inline nlohmann::json to_json(const SegNetworkSpec& s) {
  return {{"name", s.name},
          {"role", s.role == Role::teacher ? "teacher" : "student"},
          {"encoder_widths", s.encoder_widths},
          {"encoder_convs", s.encoder_convs},
          {"decoder_convs", s.decoder_convs},
          {"num_classes", s.num_classes}};
}

inline SegNetworkSpec spec_from_json(const nlohmann::json& j) {
  SegNetworkSpec s;
  try {
    s.name = j.at("name").get<std::string>();
    s.role = j.at("role").get<std::string>() == "teacher" ? Role::teacher : Role::student;
    s.encoder_widths = j.at("encoder_widths").get<std::vector<std::size_t>>();
    s.encoder_convs = j.at("encoder_convs").get<std::vector<std::size_t>>();
    s.decoder_convs = j.at("decoder_convs").get<std::vector<std::size_t>>();
    s.num_classes = j.at("num_classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed network spec: ") + e.what());
  }
  return s;
}

/// Registered architectures. Teachers carry most of their parameters in the coarse levels,
/// which keeps them cheap to run at desk scale.
inline const std::vector<SegNetworkSpec>& registry() {
  static const std::vector<SegNetworkSpec> specs = {
      {"toy_teacher_large", Role::teacher, {8, 12, 24, 48, 128}, {1, 1, 1, 1, 2}, {1, 1, 1, 1}, 2},
      {"toy_teacher_deep", Role::teacher, {8, 16, 32, 64, 96, 192}, {1, 1, 1, 1, 1, 2},
       {1, 1, 1, 1, 1}, 2},
      {"toy_student_xs", Role::student, {4, 8, 12, 16}, {1, 1, 1, 1}, {1, 1, 1}, 2},
      {"toy_student_s", Role::student, {4, 8, 16, 32}, {1, 1, 1, 1}, {1, 1, 1}, 2},
      {"toy_student_m", Role::student, {8, 12, 16, 32}, {1, 1, 1, 1}, {1, 1, 1}, 2},
  };
  return specs;
}

inline std::vector<std::string> registry_names() {
  std::vector<std::string> names;
  for (const auto& s : registry()) names.push_back(s.name);
  return names;
}

inline SegNetworkSpec lookup_spec(const std::string& name, int num_classes = 2) {
  for (const auto& s : registry()) {
    if (s.name == name) {
      SegNetworkSpec out = s;
      out.num_classes = num_classes;
      return out;
    }
  }
  std::string known;
  for (const auto& n : registry_names()) known += (known.empty() ? "" : ", ") + n;
  throw ValidationError("unknown model \"" + name + "\"; registry keys: " + known);
}

struct ForwardResult {
  Tensor logits;
  FeatureTaps features;
};

class SegNet {
 public:
  SegNet(SegNetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    const std::size_t depth = spec_.depth();
    require(depth >= 1, spec_.name + ": need at least one downsampling level");
    require(spec_.encoder_convs.size() == depth + 1, spec_.name + ": encoder_convs size");
    require(spec_.decoder_convs.size() == depth, spec_.name + ": decoder_convs size");
    require(spec_.num_classes >= 2, spec_.name + ": num_classes must be >= 2");
    Rng rng(seed);
    const auto& w = spec_.encoder_widths;
    for (std::size_t d = 0; d <= depth; ++d) {
      encoder_.emplace_back("enc" + std::to_string(d), d == 0 ? 1 : w[d - 1], w[d],
                            spec_.encoder_convs[d], rng);
    }
    for (std::size_t d = 0; d < depth; ++d) {
      lateral_.emplace_back("lat" + std::to_string(d), w[d + 1], w[d], 1, false, rng);
      decoder_.emplace_back("dec" + std::to_string(d), w[d], w[d], spec_.decoder_convs[d], rng);
    }
    head_ = nn::Conv2d("head", w[0], static_cast<std::size_t>(spec_.num_classes), 1, true, rng);
    pools_.resize(depth);
    enc_out_.resize(depth + 1);
    dec_out_.resize(depth);
    lat_out_shape_.resize(depth);
  }

  SegNet(const SegNet&) = delete;
  SegNet& operator=(const SegNet&) = delete;

  const SegNetworkSpec& spec() const { return spec_; }
  std::size_t depth() const { return spec_.depth(); }

  std::vector<std::string> tap_names() const {
    std::vector<std::string> names{"enc_last"};
    for (std::size_t d = 0; d <= depth(); ++d) names.push_back("enc" + std::to_string(d));
    for (std::size_t d = 0; d < depth(); ++d) names.push_back("dec" + std::to_string(d));
    return names;
  }

  ForwardResult forward(const Tensor& batch, ForwardMode mode,
                        const std::vector<std::string>& taps = {}) {
    const Shape4& s = batch.shape();
    const std::size_t factor = std::size_t{1} << depth();
    require(s.c == 1, spec_.name + ": expected single-channel input, got " + s.str());
    require(s.h % factor == 0 && s.w % factor == 0,
            spec_.name + ": input " + s.str() + " not divisible by " + std::to_string(factor));
    for (const auto& t : taps) resolve_tap(t);

    Tensor h = encoder_[0].forward(batch, mode);
    enc_out_[0] = h;
    for (std::size_t d = 1; d <= depth(); ++d) {
      h = encoder_[d].forward(pools_[d - 1].forward(h, mode), mode);
      enc_out_[d] = h;
    }
    Tensor up = h;
    for (std::size_t d = depth(); d-- > 0;) {
      Tensor lat = lateral_[d].forward(up, mode);
      lat_out_shape_[d] = lat.shape();
      Tensor merged = resize_bilinear(lat, enc_out_[d].shape().h, enc_out_[d].shape().w);
      merged += enc_out_[d];
      up = decoder_[d].forward(merged, mode);
      dec_out_[d] = up;
    }
    ForwardResult result;
    result.logits = head_.forward(up, mode);
    for (const auto& t : taps) result.features.emplace(t, *resolve_tap(t));
    if (!mode.record) {
      // Drop activations that are only needed for backward or tap lookup.
      for (auto& e : enc_out_) e = Tensor();
      for (auto& e : dec_out_) e = Tensor();
    }
    return result;
  }

  /// Backpropagates logits gradients plus extra gradients injected at named taps.
  void backward(const Tensor& grad_logits, const FeatureTaps& tap_grads = {}) {
    std::vector<Tensor> g_enc(depth() + 1);
    std::vector<Tensor> g_dec(depth());
    for (std::size_t d = 0; d <= depth(); ++d) g_enc[d] = Tensor(enc_out_[d].shape());
    for (std::size_t d = 0; d < depth(); ++d) g_dec[d] = Tensor(dec_out_[d].shape());
    for (const auto& [name, grad] : tap_grads) {
      Tensor* target = tap_slot(name, g_enc, g_dec);
      require(target->shape() == grad.shape(), spec_.name + ": tap gradient shape mismatch for " +
                                                   name);
      *target += grad;
    }

    g_dec[0] += head_.backward(grad_logits);
    for (std::size_t d = 0; d < depth(); ++d) {
      Tensor g_merged = decoder_[d].backward(g_dec[d]);
      g_enc[d] += g_merged;
      Tensor g_lat = resize_bilinear_backward(g_merged, lat_out_shape_[d]);
      Tensor g_up = lateral_[d].backward(g_lat);
      if (d + 1 < depth()) {
        g_dec[d + 1] += g_up;
      } else {
        g_enc[depth()] += g_up;
      }
    }
    for (std::size_t d = depth(); d >= 1; --d) {
      Tensor g_in = encoder_[d].backward(g_enc[d]);
      g_enc[d - 1] += pools_[d - 1].backward(g_in);
    }
    encoder_[0].backward(g_enc[0]);
  }

  /// Every tensor including batch-norm buffers, in a stable order.
  std::vector<Parameter*> state() {
    std::vector<Parameter*> out;
    for (auto& e : encoder_) e.collect(out);
    for (std::size_t d = 0; d < depth(); ++d) {
      lateral_[d].collect(out);
      decoder_[d].collect(out);
    }
    head_.collect(out);
    return out;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto* p : state()) {
      if (p->trainable) out.push_back(p);
    }
    return out;
  }

  std::size_t param_count() {
    std::size_t total = 0;
    for (auto* p : parameters()) total += p->size();
    return total;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Analytic multiply-accumulate count of one forward pass on an h x w input.
  std::size_t estimate_macs(std::size_t h, std::size_t w) const {
    std::size_t total = 0;
    for (std::size_t d = 0; d <= depth(); ++d) {
      const std::size_t pixels = (h >> d) * (w >> d);
      total += pixels * encoder_[d].macs_per_pixel();
      if (d < depth()) {
        total += pixels * decoder_[d].macs_per_pixel();
        total += (pixels / 4) * lateral_[d].macs_per_pixel();
      }
    }
    return total + h * w * head_.macs_per_pixel();
  }

 private:
  const Tensor* resolve_tap(const std::string& name) const {
    if (name == "enc_last") return &enc_out_[depth()];
    for (std::size_t d = 0; d <= depth(); ++d) {
      if (name == "enc" + std::to_string(d)) return &enc_out_[d];
    }
    for (std::size_t d = 0; d < depth(); ++d) {
      if (name == "dec" + std::to_string(d)) return &dec_out_[d];
    }
    std::string known;
    for (const auto& n : tap_names()) known += (known.empty() ? "" : ", ") + n;
    throw ValidationError(spec_.name + ": unknown tap \"" + name + "\"; available: " + known);
  }

  Tensor* tap_slot(const std::string& name, std::vector<Tensor>& g_enc, std::vector<Tensor>& g_dec) {
    if (name == "enc_last") return &g_enc[depth()];
    for (std::size_t d = 0; d <= depth(); ++d) {
      if (name == "enc" + std::to_string(d)) return &g_enc[d];
    }
    for (std::size_t d = 0; d < depth(); ++d) {
      if (name == "dec" + std::to_string(d)) return &g_dec[d];
    }
    resolve_tap(name);
    return nullptr;
  }

  SegNetworkSpec spec_;
  std::vector<nn::ConvBlock> encoder_;
  std::vector<nn::MaxPool2> pools_;
  std::vector<nn::Conv2d> lateral_;
  std::vector<nn::ConvBlock> decoder_;
  nn::Conv2d head_;
  std::vector<Tensor> enc_out_;
  std::vector<Tensor> dec_out_;
  std::vector<Shape4> lat_out_shape_;
};

inline std::unique_ptr<SegNet> build_model(const std::string& name, int num_classes,
                                           std::uint64_t seed) {
  return std::make_unique<SegNet>(lookup_spec(name, num_classes), seed);
}

inline std::size_t registry_param_count(const std::string& name) {
  return build_model(name, 2, 0)->param_count();
}

// Checkpoint archive layout (all integers little-endian):
//   "DSEGCKPT" | u32 version | u64 header bytes | header JSON | float32 payload
// The header holds the network spec and, per tensor, its name, shape and trainable flag,
// listed in payload order.
inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(SegNet& net, const std::string& path,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header;
  header["spec"] = to_json(net.spec());
  header["extra"] = extra;
  header["tensors"] = nlohmann::json::array();
  for (auto* p : net.state()) {
    header["tensors"].push_back({{"name", p->name}, {"shape", p->shape}, {"trainable", p->trainable}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  const std::uint64_t len = text.size();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto* p : net.state()) {
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed while writing checkpoint " + path);
}

struct LoadedCheckpoint {
  std::unique_ptr<SegNet> net;
  nlohmann::json extra;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw IoError(path + " is not a checkpoint archive");
  }
  if (version != kCheckpointVersion) {
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw IoError(path + ": corrupt checkpoint header");
  }
  LoadedCheckpoint loaded;
  loaded.net = std::make_unique<SegNet>(spec_from_json(header.at("spec")), 0);
  loaded.extra = header.value("extra", nlohmann::json::object());
  const auto& listed = header.at("tensors");
  auto state = loaded.net->state();
  if (listed.size() != state.size()) throw IoError(path + ": tensor count does not match spec");
  for (std::size_t i = 0; i < state.size(); ++i) {
    Parameter* p = state[i];
    if (listed[i].at("name") != p->name ||
        listed[i].at("shape").get<std::vector<std::size_t>>() != p->shape) {
      throw IoError(path + ": tensor " + std::to_string(i) + " does not match " + p->name);
    }
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(float)));
  }
  if (!in) throw IoError(path + ": truncated checkpoint payload");
  return loaded;
}

/// Copies every tensor (including buffers) from `src` into `dst`; both must share a spec.
inline void copy_state(SegNet& src, SegNet& dst) {
  auto a = src.state();
  auto b = dst.state();
  require(a.size() == b.size(), "copy_state: architecture mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i]->shape == b[i]->shape, "copy_state: shape mismatch at " + a[i]->name);
    b[i]->value = a[i]->value;
  }
}

}  // namespace distillseg::models
