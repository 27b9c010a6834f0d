#include "lomt/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>

namespace lomt {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void write_gray(const std::string& path, int width, int height, int bit_depth,
                const void* data) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng write error for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, (png_uint_32)width, (png_uint_32)height, bit_depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);  // samples are host little-endian

  std::vector<png_bytep> rows((size_t)height);
  const size_t stride = (size_t)width * (bit_depth / 8);
  auto* bytes = (png_bytep)data;
  for (int y = 0; y < height; ++y) rows[(size_t)y] = bytes + (size_t)y * stride;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<uint8_t>& px) {
  if ((int)px.size() != width * height) throw std::invalid_argument("write_png_gray8: size mismatch");
  write_gray(path, width, height, 8, px.data());
}

void write_png_gray16(const std::string& path, int width, int height,
                      const std::vector<uint16_t>& px) {
  if ((int)px.size() != width * height)
    throw std::invalid_argument("write_png_gray16: size mismatch");
  write_gray(path, width, height, 16, px.data());
}

GrayImage read_png_gray(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("missing file: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng read error for " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY)
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    depth = 8;
  }
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);

  GrayImage img;
  img.width = (int)png_get_image_width(png, info);
  img.height = (int)png_get_image_height(png, info);
  img.bit_depth = depth;
  img.px.resize((size_t)img.width * img.height);

  std::vector<png_bytep> rows((size_t)img.height);
  std::vector<uint8_t> raw;
  if (depth == 16) {
    for (int y = 0; y < img.height; ++y)
      rows[(size_t)y] = (png_bytep)(img.px.data() + (size_t)y * img.width);
  } else {
    raw.resize((size_t)img.width * img.height);
    for (int y = 0; y < img.height; ++y) rows[(size_t)y] = raw.data() + (size_t)y * img.width;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (depth != 16)
    for (size_t i = 0; i < raw.size(); ++i) img.px[i] = raw[i];
  return img;
}

}  // namespace lomt
