#pragma once

// 8-bit PNG/PPM image I/O and pixel-domain helpers. Images travel through
// the codebase as float NCHW tensors with values in [0,1].

#include <string>
#include <utility>
#include <vector>

#include "nzc/tensor.hpp"

namespace nzc {

// Loads an 8-bit PNG or PPM into a (1,3,H,W) tensor in [0,1]. Palette and
// grayscale PNGs are expanded to RGB, alpha is dropped; anything deeper than
// 8 bits is rejected with a conversion hint.
Tensor load_image(const std::string& path);

// Writes a (1,3,H,W) tensor as PNG or PPM depending on the file extension.
void save_image(const Tensor& image, const std::string& path);

Tensor image_from_rgb8(const std::vector<uint8_t>& rgb, int h, int w);
// clamps to [0,1] and rounds to 8 bits
std::vector<uint8_t> image_to_rgb8(const Tensor& image);

struct PaddedImage {
  Tensor padded;
  int orig_h = 0;
  int orig_w = 0;
};

// Reflection padding (without edge repetition) on the bottom/right up to the
// next multiple. A multiple the image already satisfies is a no-op.
PaddedImage pad_reflect(const Tensor& image, int multiple);

// top-left crop
Tensor crop_image(const Tensor& image, int h, int w);

Tensor clamp01(const Tensor& image);

// BT.601 full-range conversions used by yuv444-8 codec adapters; planar
// Y, Cb, Cr order.
std::vector<uint8_t> rgb8_to_yuv444(const std::vector<uint8_t>& rgb, int h, int w);
std::vector<uint8_t> yuv444_to_rgb8(const std::vector<uint8_t>& yuv, int h, int w);

}  // namespace nzc
