#include "ltxb/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

namespace ltxb {

namespace {

unsigned char to_byte(float v) {
  float c = std::min(1.f, std::max(-1.f, v));
  float scaled = (c + 1.f) * 127.5f;
  int b = (int)std::lround(scaled);
  return (unsigned char)std::min(255, std::max(0, b));
}

float from_byte(unsigned char b) { return (float)b / 127.5f - 1.f; }

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.px) v = from_byte(to_byte(v));
  return out;
}

void write_png(const std::string& path, const Image& img) {
  require(img.w > 0 && img.h > 0 && img.px.size() == (size_t)3 * img.w * img.h,
          ErrorKind::contract, "write_png: malformed image");
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  require(fp != nullptr, ErrorKind::io, "cannot open '" + path + "' for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorKind::io, "png writer allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(ErrorKind::io, "png info allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::io, "png write failed for '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row((size_t)img.w * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) row[(size_t)x * 3 + c] = to_byte(img.at(c, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  require(fp != nullptr, ErrorKind::io, "cannot open '" + path + "' for reading");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, ErrorKind::io, "png reader allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(ErrorKind::io, "png info allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, "png read failed for '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);
  if (depth != 8 || color != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, "'" + path + "': only 8-bit RGB PNGs are supported");
  }

  Image img((int)w, (int)h);
  std::vector<unsigned char> row((size_t)w * 3);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, (int)y, (int)x) = from_byte(row[(size_t)x * 3 + c]);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

std::vector<float> to_gray(const Image& img) {
  std::vector<float> g((size_t)img.h * img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      g[(size_t)y * img.w + x] =
          0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
  return g;
}

std::vector<float> downsample_gray(const std::vector<float>& gray, int w, int h, int gw, int gh) {
  require(w % gw == 0 && h % gh == 0, ErrorKind::contract,
          "downsample_gray: target must divide source size");
  int bx = w / gw, by = h / gh;
  std::vector<float> out((size_t)gw * gh, 0.f);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      double acc = 0.0;
      for (int y = gy * by; y < (gy + 1) * by; ++y)
        for (int x = gx * bx; x < (gx + 1) * bx; ++x) acc += gray[(size_t)y * w + x];
      out[(size_t)gy * gw + gx] = (float)(acc / (bx * by));
    }
  return out;
}

Image hflip(const Image& img) {
  Image out(img.w, img.h);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) out.at(c, y, x) = img.at(c, y, img.w - 1 - x);
  return out;
}

Image upscale2x_crop(const Image& img, int x0, int y0) {
  int hw = img.w / 2, hh = img.h / 2;
  require(x0 >= 0 && y0 >= 0 && x0 + hw <= img.w && y0 + hh <= img.h, ErrorKind::range,
          "upscale2x_crop: crop outside the image");
  Image out(img.w, img.h);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) out.at(c, y, x) = img.at(c, y0 + y / 2, x0 + x / 2);
  return out;
}

}  // namespace ltxb
