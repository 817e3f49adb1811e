#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "lowlight/tensor.hpp"

namespace lowlight {

// Three-channel image as [1,3,H,W]. Values live in [0,1]; sRGB-encoded unless
// `linear` says otherwise. Export clamps.
struct RgbImage {
  Tensor tensor;
  bool linear = false;

  int height() const { return tensor.dim(2); }
  int width() const { return tensor.dim(3); }

  void validate() const {
    check_shape(tensor.ndim() == 4 && tensor.dim(0) == 1 && tensor.dim(1) == 3,
                "RgbImage tensor must be [1,3,H,W]");
  }
};

inline RgbImage make_rgb(Tensor t, bool linear = false) {
  RgbImage img{std::move(t), linear};
  img.validate();
  return img;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline std::uint8_t quant8(double v) {
  return static_cast<std::uint8_t>(clamp01(v) * 255.0 + 0.5);
}
inline std::uint16_t quant16(double v) {
  return static_cast<std::uint16_t>(clamp01(v) * 65535.0 + 0.5);
}

}  // namespace detail

/// Writes 8-bit (default) or 16-bit RGB PNG.
inline void write_png(const std::filesystem::path& path, const RgbImage& img,
                      int bit_depth = 8) {
  img.validate();
  check_arg(bit_depth == 8 || bit_depth == 16, "PNG bit depth must be 8 or 16");
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  check_arg(static_cast<bool>(fp), "cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  check_state(png != nullptr, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw StateError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failure while writing " + path.string());
  }
  png_init_io(png, fp.get());

  const int h = img.height(), w = img.width();
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
               bit_depth, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  const auto& d = img.tensor.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3 * (bit_depth / 8));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = d[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x];
        if (bit_depth == 8) {
          row[static_cast<std::size_t>(x) * 3 + c] = detail::quant8(v);
        } else {
          const std::uint16_t q = detail::quant16(v);
          row[(static_cast<std::size_t>(x) * 3 + c) * 2] = static_cast<unsigned char>(q >> 8);
          row[(static_cast<std::size_t>(x) * 3 + c) * 2 + 1] = static_cast<unsigned char>(q & 0xFF);
        }
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads any libpng-supported image as 8-bit sRGB.
inline RgbImage read_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  check_arg(static_cast<bool>(fp), "cannot open " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  check_state(png != nullptr, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw StateError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng failure while reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_set_strip_16(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);

  Tensor t({1, 3, h, w});
  auto& d = t.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        d[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
            row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return make_rgb(std::move(t));
}

/// Binary PPM (P6), 8-bit.
inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  img.validate();
  std::ofstream os(path, std::ios::binary);
  check_arg(os.good(), "cannot open " + path.string() + " for writing");
  const int h = img.height(), w = img.width();
  os << "P6\n" << w << ' ' << h << "\n255\n";
  const auto& d = img.tensor.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      os.put(static_cast<char>(detail::quant8(d[static_cast<std::size_t>(c) * plane + i])));
  check_arg(os.good(), "failed writing " + path.string());
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  check_arg(is.good(), "cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P6") throw std::runtime_error(path.string() + " is not a binary PPM");
  int w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("unsupported PPM header in " + path.string());
  is.get();  // single whitespace after header
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  read_exact(is, buf.data(), buf.size(), "PPM pixels");
  Tensor t({1, 3, h, w});
  auto& d = t.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      d[static_cast<std::size_t>(c) * plane + i] = buf[i * 3 + c] / 255.0;
  return make_rgb(std::move(t));
}

/// Dispatch by extension: .png or .ppm.
inline RgbImage read_image(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".png" || ext == ".PNG") return read_png(path);
  if (ext == ".ppm" || ext == ".PPM") return read_ppm(path);
  throw std::invalid_argument("unsupported image extension: " + path.string());
}

inline void write_image(const std::filesystem::path& path, const RgbImage& img) {
  const std::string ext = path.extension().string();
  if (ext == ".png" || ext == ".PNG") return write_png(path, img);
  if (ext == ".ppm" || ext == ".PPM") return write_ppm(path, img);
  throw std::invalid_argument("unsupported image extension: " + path.string());
}

}  // namespace lowlight
