// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic multi-site segmentation data. Foreground geometry and base texture are drawn from
// (seed, sample index) alone; each site then applies its own acquisition transform, so all
// sites share identical masks and differ only in appearance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillseg/core/error.hpp"
#include "distillseg/core/rng.hpp"
#include "distillseg/core/tensor.hpp"
#include "distillseg/io/png.hpp"

namespace distillseg::data {

struct SiteSpec {
  std::string site_id;
  double intensity_bias = 0.0;
  double contrast_gamma = 1.0;
  double noise_sigma = 0.0;
  double blur_sigma = 0.0;
  double field_inhomogeneity_amp = 0.0;
};

/// Six graded acquisition profiles. S3 has the largest gamma and bias.
inline const std::vector<SiteSpec>& default_sites() {
  static const std::vector<SiteSpec> sites = {
      {"S1", 0.10, 0.75, 0.03, 0.5, 0.06},
      {"S2", -0.08, 1.50, 0.04, 0.8, 0.10},
      {"S3", 0.22, 2.40, 0.08, 1.2, 0.20},
      {"S4", 0.06, 1.10, 0.05, 0.3, 0.08},
      {"S5", 0.05, 0.95, 0.03, 1.0, 0.12},
      {"S6", -0.02, 1.20, 0.06, 0.6, 0.10},
  };
  return sites;
}

inline SiteSpec default_site(const std::string& id) {
  for (const auto& s : default_sites()) {
    if (s.site_id == id) return s;
  }
  throw ValidationError("unknown site \"" + id + "\"; default sites are S1..S6");
}

struct SiteDataset {
  std::string site_id;
  Tensor4<float> images;  // (n, 1, h, w), values in [0, 1]
  LabelMap masks;         // binary
  std::uint64_t seed = 0;

  std::size_t size() const { return masks.batch(); }
};

inline constexpr double kMinForeground = 0.05;
inline constexpr double kMaxForeground = 0.5;
inline constexpr int kMaxResamples = 100;

namespace detail {

struct Ellipse {
  double cx, cy, a, b, angle;
  double harmonics[3];
  double phases[3];
};

inline double foreground_fraction(const std::vector<std::int32_t>& mask) {
  std::size_t fg = 0;
  for (auto v : mask) fg += v != 0;
  return static_cast<double>(fg) / static_cast<double>(mask.size());
}

// One to three perturbed ellipses.
inline std::vector<std::int32_t> draw_mask(Rng& rng, std::size_t h, std::size_t w) {
  const double side = static_cast<double>(std::min(h, w));
  const int count = rng.uniform_int(1, 3);
  std::vector<Ellipse> shapes(static_cast<std::size_t>(count));
  for (auto& e : shapes) {
    e.cx = rng.uniform(0.25, 0.75) * static_cast<double>(w);
    e.cy = rng.uniform(0.25, 0.75) * static_cast<double>(h);
    e.a = rng.uniform(0.08, 0.25) * side;
    e.b = rng.uniform(0.08, 0.25) * side;
    e.angle = rng.uniform(0.0, std::numbers::pi);
    for (int k = 0; k < 3; ++k) {
      e.harmonics[k] = rng.uniform(0.0, 0.12);
      e.phases[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }
  std::vector<std::int32_t> mask(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (const auto& e : shapes) {
        const double dx = static_cast<double>(x) + 0.5 - e.cx;
        const double dy = static_cast<double>(y) + 0.5 - e.cy;
        const double u = (dx * std::cos(e.angle) + dy * std::sin(e.angle)) / e.a;
        const double v = (-dx * std::sin(e.angle) + dy * std::cos(e.angle)) / e.b;
        const double phi = std::atan2(v, u);
        double radius = 1.0;
        for (int k = 0; k < 3; ++k) radius += e.harmonics[k] * std::sin((k + 2) * phi + e.phases[k]);
        if (u * u + v * v <= radius * radius) {
          mask[y * w + x] = 1;
          break;
        }
      }
    }
  }
  return mask;
}

// Smooth random field in [-1, 1] from a few low-frequency sinusoids.
inline std::vector<double> smooth_field(Rng& rng, std::size_t h, std::size_t w, int terms,
                                        double max_freq) {
  std::vector<double> field(h * w, 0.0);
  for (int t = 0; t < terms; ++t) {
    const double fx = rng.uniform(0.3, max_freq);
    const double fy = rng.uniform(0.3, max_freq);
    const double px = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double py = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t y = 0; y < h; ++y) {
      const double sy = std::cos(2.0 * std::numbers::pi * fy * static_cast<double>(y) /
                                     static_cast<double>(h) + py);
      for (std::size_t x = 0; x < w; ++x) {
        const double sx = std::sin(2.0 * std::numbers::pi * fx * static_cast<double>(x) /
                                       static_cast<double>(w) + px);
        field[y * w + x] += sx * sy / static_cast<double>(terms);
      }
    }
  }
  return field;
}

// Background around 0.25 and foreground around 0.6, each with its own smooth texture.
inline std::vector<double> base_texture(Rng& rng, const std::vector<std::int32_t>& mask,
                                        std::size_t h, std::size_t w) {
  const double bg_level = rng.uniform(0.20, 0.30);
  const double fg_level = rng.uniform(0.55, 0.65);
  const auto bg_tex = smooth_field(rng, h, w, 3, 3.0);
  const auto fg_tex = smooth_field(rng, h, w, 3, 4.0);
  std::vector<double> img(h * w);
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = mask[i] != 0 ? fg_level + 0.08 * fg_tex[i] : bg_level + 0.08 * bg_tex[i];
  }
  return img;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= total;
  return k;
}

inline long reflect(long i, long n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

// Separable Gaussian blur with symmetric border reflection.
inline void gaussian_blur(std::vector<double>& img, std::size_t h, std::size_t w, double sigma) {
  if (sigma <= 0.0) return;
  const auto k = gaussian_kernel(sigma);
  const long radius = static_cast<long>(k.size() / 2);
  std::vector<double> tmp(img.size(), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long t = -radius; t <= radius; ++t) {
        acc += k[static_cast<std::size_t>(t + radius)] *
               img[y * w + static_cast<std::size_t>(reflect(static_cast<long>(x) + t, static_cast<long>(w)))];
      }
      tmp[y * w + x] = acc;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long t = -radius; t <= radius; ++t) {
        acc += k[static_cast<std::size_t>(t + radius)] *
               tmp[static_cast<std::size_t>(reflect(static_cast<long>(y) + t, static_cast<long>(h))) * w + x];
      }
      img[y * w + x] = acc;
    }
  }
}

}  // namespace detail

struct BaseSample {
  std::vector<std::int32_t> mask;
  std::vector<double> texture;
};

/// Site-independent part of sample `index`: mask geometry and base texture.
inline BaseSample base_sample(std::uint64_t seed, std::size_t index, std::size_t h, std::size_t w) {
  Rng geometry = Rng(seed).child("geometry").child(index);
  BaseSample out;
  int attempt = 0;
  for (;; ++attempt) {
    if (attempt >= kMaxResamples) {
      throw ValidationError("sample " + std::to_string(index) +
                            ": foreground fraction outside [0.05, 0.5] after " +
                            std::to_string(kMaxResamples) + " resamples");
    }
    out.mask = detail::draw_mask(geometry, h, w);
    const double frac = detail::foreground_fraction(out.mask);
    if (frac >= kMinForeground && frac <= kMaxForeground) break;
  }
  Rng texture = Rng(seed).child("texture").child(index);
  out.texture = detail::base_texture(texture, out.mask, h, w);
  return out;
}

/// Gamma contrast, additive bias plus low-frequency field, blur, noise, clamp to [0, 1].
inline std::vector<double> apply_site(const SiteSpec& site, std::vector<double> img, Rng& rng,
                                      std::size_t h, std::size_t w) {
  if (site.contrast_gamma != 1.0) {
    for (auto& v : img) v = std::pow(std::clamp(v, 0.0, 1.0), site.contrast_gamma);
  }
  if (site.intensity_bias != 0.0 || site.field_inhomogeneity_amp != 0.0) {
    const auto field = detail::smooth_field(rng, h, w, 2, 1.2);
    for (std::size_t i = 0; i < img.size(); ++i) {
      img[i] += site.intensity_bias + site.field_inhomogeneity_amp * field[i];
    }
  }
  detail::gaussian_blur(img, h, w, site.blur_sigma);
  if (site.noise_sigma > 0.0) {
    for (auto& v : img) v += rng.normal(0.0, site.noise_sigma);
  }
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
  return img;
}

inline SiteDataset generate_site(const SiteSpec& site, std::size_t n, std::size_t h,
                                 std::size_t w, std::uint64_t seed) {
  require(n >= 1, "generate_site: need at least one sample");
  require(h >= 32 && w >= 32, "generate_site: images must be at least 32x32");
  require(site.contrast_gamma > 0.0, "site " + site.site_id + ": contrast_gamma must be > 0");
  require(site.noise_sigma >= 0.0 && site.blur_sigma >= 0.0 && site.field_inhomogeneity_amp >= 0.0,
          "site " + site.site_id + ": noise, blur and field amplitude must be >= 0");
  SiteDataset ds;
  ds.site_id = site.site_id;
  ds.seed = seed;
  ds.images = Tensor4<float>(Shape4{n, 1, h, w});
  ds.masks = LabelMap(n, h, w, 2);
  const Rng site_rng = Rng(seed).child("site:" + site.site_id);
  for (std::size_t i = 0; i < n; ++i) {
    BaseSample base = base_sample(seed, i, h, w);
    Rng rng = site_rng.child(i);
    const auto img = apply_site(site, std::move(base.texture), rng, h, w);
    float* dst = ds.images.plane(i, 0);
    for (std::size_t p = 0; p < h * w; ++p) dst[p] = static_cast<float>(img[p]);
    std::copy(base.mask.begin(), base.mask.end(), ds.masks.sample(i).begin());
  }
  return ds;
}

/// Mean pixel intensity over the whole dataset.
inline double intensity_mean(const SiteDataset& ds) {
  double total = 0.0;
  for (float v : ds.images.values()) total += v;
  return total / static_cast<double>(ds.images.size());
}

/// Concatenates datasets of equal image size; the site id becomes "A+B+...".
inline SiteDataset concat(const std::vector<SiteDataset>& parts) {
  require(!parts.empty(), "concat: no datasets");
  const Shape4 first = parts.front().images.shape();
  std::size_t total = 0;
  std::string id;
  for (const auto& p : parts) {
    require(p.images.shape().h == first.h && p.images.shape().w == first.w,
            "concat: image sizes differ");
    total += p.size();
    id += (id.empty() ? "" : "+") + p.site_id;
  }
  SiteDataset out;
  out.site_id = id;
  out.seed = parts.front().seed;
  out.images = Tensor4<float>(Shape4{total, 1, first.h, first.w});
  out.masks = LabelMap(total, first.h, first.w, 2);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.size(); ++i, ++offset) {
      const auto src = p.images.sample(i);
      std::copy(src.begin(), src.end(), out.images.sample(offset).begin());
      const auto m = p.masks.sample(i);
      std::copy(m.begin(), m.end(), out.masks.sample(offset).begin());
    }
  }
  return out;
}

// On-disk layout: DIR/manifest.json, DIR/images/NNNN.png (16-bit), DIR/masks/NNNN.png (8-bit).
inline void save_dataset(const SiteDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());
  const Shape4& s = ds.images.shape();
  nlohmann::json manifest;
  manifest["version"] = "v1";
  manifest["site_id"] = ds.site_id;
  manifest["seed"] = ds.seed;
  manifest["height"] = s.h;
  manifest["width"] = s.w;
  manifest["pairs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i);
    const std::string image_rel = std::string("images/") + name;
    const std::string mask_rel = std::string("masks/") + name;
    io::GrayImage img{s.w, s.h, 16, std::vector<std::uint16_t>(s.plane())};
    const float* src = ds.images.plane(i, 0);
    for (std::size_t p = 0; p < s.plane(); ++p) {
      img.pixels[p] = static_cast<std::uint16_t>(std::lround(std::clamp(src[p], 0.0f, 1.0f) * 65535.0f));
    }
    io::write_gray_png((fs::path(dir) / image_rel).string(), img);
    io::GrayImage mask{s.w, s.h, 8, std::vector<std::uint16_t>(s.plane())};
    const auto labels = ds.masks.sample(i);
    for (std::size_t p = 0; p < s.plane(); ++p) mask.pixels[p] = labels[p] != 0 ? 255 : 0;
    io::write_gray_png((fs::path(dir) / mask_rel).string(), mask);
    manifest["pairs"].push_back({{"image", image_rel}, {"mask", mask_rel}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

inline SiteDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("missing manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(manifest_path.string() + " is not valid JSON: " + e.what());
  }
  if (!manifest.contains("pairs") || !manifest["pairs"].is_array()) {
    throw ValidationError(manifest_path.string() + ": missing pairs list");
  }
  const auto& pairs = manifest["pairs"];
  if (pairs.empty()) throw ValidationError("empty dataset: " + manifest_path.string());

  SiteDataset ds;
  ds.site_id = manifest.value("site_id", fs::path(dir).filename().string());
  ds.seed = manifest.value("seed", std::uint64_t{0});
  std::size_t h = 0;
  std::size_t w = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::string image_rel = pairs[i].value("image", "");
    const std::string mask_rel = pairs[i].value("mask", "");
    const std::string label = "pair " + std::to_string(i) + " (" + image_rel + ", " + mask_rel + ")";
    const fs::path image_path = fs::path(dir) / image_rel;
    const fs::path mask_path = fs::path(dir) / mask_rel;
    if (image_rel.empty() || !fs::exists(image_path)) {
      throw IoError(label + ": missing image file " + image_path.string());
    }
    if (mask_rel.empty() || !fs::exists(mask_path)) {
      throw IoError(label + ": missing mask file " + mask_path.string());
    }
    io::GrayImage img;
    io::GrayImage mask;
    try {
      img = io::read_gray_png(image_path.string());
      mask = io::read_gray_png(mask_path.string());
    } catch (const Error& e) {
      throw ValidationError(label + ": " + e.what());
    }
    if (img.width != mask.width || img.height != mask.height) {
      throw ValidationError(label + ": image and mask sizes differ");
    }
    if (i == 0) {
      h = img.height;
      w = img.width;
      ds.images = Tensor4<float>(Shape4{pairs.size(), 1, h, w});
      ds.masks = LabelMap(pairs.size(), h, w, 2);
    } else if (img.height != h || img.width != w) {
      throw ValidationError(label + ": size differs from the first pair");
    }
    float* dst = ds.images.plane(i, 0);
    const float scale = 1.0f / static_cast<float>(img.max_value());
    for (std::size_t p = 0; p < h * w; ++p) dst[p] = static_cast<float>(img.pixels[p]) * scale;
    auto labels = ds.masks.sample(i);
    for (std::size_t p = 0; p < h * w; ++p) labels[p] = mask.pixels[p] > 0 ? 1 : 0;
  }
  return ds;
}

struct SiteSplit {
  std::vector<SiteDataset> teacher_train;
  std::vector<SiteDataset> student_train;
  SiteDataset eval_set;
};

/// Holds out `target`; the first floor(fraction * rest) remaining sites (at least one, at most
/// all but one) train the teacher and the others train the student.
inline SiteSplit leave_one_site_out(const std::vector<SiteDataset>& all, const std::string& target,
                                    double teacher_fraction) {
  require(all.size() >= 3, "leave_one_site_out needs at least 3 sites, got " +
                               std::to_string(all.size()));
  require(teacher_fraction > 0.0 && teacher_fraction < 1.0,
          "teacher_fraction must be in (0, 1)");
  SiteSplit split;
  std::vector<const SiteDataset*> rest;
  bool found = false;
  for (const auto& ds : all) {
    if (ds.site_id == target) {
      require(!found, "site " + target + " listed twice");
      split.eval_set = ds;
      found = true;
    } else {
      rest.push_back(&ds);
    }
  }
  if (!found) throw ValidationError("target site \"" + target + "\" not among the datasets");
  const auto m = static_cast<long>(rest.size());
  long k = static_cast<long>(std::floor(teacher_fraction * static_cast<double>(m)));
  k = std::clamp(k, 1L, m - 1);
  for (long i = 0; i < m; ++i) {
    (i < k ? split.teacher_train : split.student_train).push_back(*rest[static_cast<std::size_t>(i)]);
  }
  return split;
}

}  // namespace distillseg::data
