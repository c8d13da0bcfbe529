#pragma once

#include <string>
#include <vector>

#include "ltxb/error.hpp"

namespace ltxb {

// Float RGB image, values in [-1, 1], plane order (channel, row, column).
struct Image {
  int w = 0, h = 0;
  std::vector<float> px;  // 3 * h * w

  Image() = default;
  Image(int width, int height) : w(width), h(height), px((size_t)3 * width * height, 0.f) {}

  float& at(int c, int y, int x) { return px[((size_t)c * h + y) * w + x]; }
  float at(int c, int y, int x) const { return px[((size_t)c * h + y) * w + x]; }
};

// 8-bit RGB PNG, no alpha, no interlace. Values are clamped to [-1, 1] and
// quantized; writing an already-quantized image round-trips exactly.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Snaps every value to the nearest 8-bit representable level.
Image quantize8(const Image& img);

// Rec.601 luminance, values in [-1, 1], row-major h*w.
std::vector<float> to_gray(const Image& img);

// Box-downsample to exactly (gw x gh); both must divide the source size.
std::vector<float> downsample_gray(const std::vector<float>& gray, int w, int h, int gw, int gh);

Image hflip(const Image& img);

// 2x nearest-neighbour upscale of the half-size crop whose top-left corner
// is (x0, y0). The result has the source dimensions.
Image upscale2x_crop(const Image& img, int x0, int y0);

}  // namespace ltxb
