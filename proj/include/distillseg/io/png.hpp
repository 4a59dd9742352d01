// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "distillseg/core/error.hpp"

namespace distillseg::io {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> pixels;

  std::uint16_t max_value() const { return bit_depth == 16 ? 65535 : 255; }
};

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 255)
      : width(w), height(h), pixels(w * h * 3, fill) {}

  void set(long x, long y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= static_cast<long>(width) || y >= static_cast<long>(height)) return;
    const std::size_t i = (static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * 3;
    pixels[i] = r;
    pixels[i + 1] = g;
    pixels[i + 2] = b;
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_rows(const std::string& path, std::size_t width, std::size_t height,
                       int bit_depth, int color_type,
                       const std::vector<std::vector<png_byte>>& rows) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write PNG " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed while writing " + path);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& row : rows) png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Writes an 8- or 16-bit grayscale PNG (16-bit samples are stored big-endian per the format).
inline void write_gray_png(const std::string& path, const GrayImage& img) {
  require(img.bit_depth == 8 || img.bit_depth == 16, "PNG bit depth must be 8 or 16");
  require(img.pixels.size() == img.width * img.height, "PNG pixel count mismatch");
  const std::size_t bytes = img.bit_depth == 16 ? 2 : 1;
  std::vector<std::vector<png_byte>> rows(img.height, std::vector<png_byte>(img.width * bytes));
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::uint16_t v = img.pixels[y * img.width + x];
      if (bytes == 2) {
        rows[y][2 * x] = static_cast<png_byte>(v >> 8);
        rows[y][2 * x + 1] = static_cast<png_byte>(v & 0xFF);
      } else {
        rows[y][x] = static_cast<png_byte>(v);
      }
    }
  }
  detail::write_rows(path, img.width, img.height, img.bit_depth, PNG_COLOR_TYPE_GRAY, rows);
}

inline void write_rgb_png(const std::string& path, const RgbImage& img) {
  std::vector<std::vector<png_byte>> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    rows[y].assign(img.pixels.begin() + static_cast<long>(y * img.width * 3),
                   img.pixels.begin() + static_cast<long>((y + 1) * img.width * 3));
  }
  detail::write_rows(path, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

/// Reads a grayscale PNG of bit depth 8 or 16. Colour, palette and alpha images are rejected.
inline GrayImage read_gray_png(const std::string& path) {
  detail::FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open PNG " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError(path + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed for " + path);
  }
  GrayImage img;
  std::vector<std::vector<png_byte>> rows;
  bool not_gray = false;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failed while reading " + path);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    not_gray = true;
  } else {
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.bit_depth = depth == 16 ? 16 : 8;
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    rows.assign(img.height, std::vector<png_byte>(rowbytes));
    for (auto& row : rows) png_read_row(png, row.data(), nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (not_gray) throw ValidationError(path + " is not a grayscale PNG");

  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      img.pixels[y * img.width + x] =
          img.bit_depth == 16
              ? static_cast<std::uint16_t>((rows[y][2 * x] << 8) | rows[y][2 * x + 1])
              : rows[y][x];
    }
  }
  return img;
}

}  // namespace distillseg::io
