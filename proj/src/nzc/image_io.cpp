#include "nzc/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace nzc {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

bool has_suffix(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  std::string tail = s.substr(s.size() - suffix.size());
  std::transform(tail.begin(), tail.end(), tail.begin(), ::tolower);
  return tail == suffix;
}

Tensor load_png(FILE* f, const std::string& path) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::Io, "libpng initialization failed");
  }
  std::vector<std::vector<uint8_t>> row_storage;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::Format, "failed to decode PNG: " + path);
  }
  png_init_io(png, f);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (bit_depth > 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::Format,
         path + " uses " + std::to_string(bit_depth) +
             "-bit samples; convert it to an 8-bit PNG or PPM first");
  }
  const int color_type = png_get_color_type(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (bit_depth < 8) png_set_expand(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  row_storage.assign(size_t(h), std::vector<uint8_t>(size_t(w) * 3));
  std::vector<png_bytep> rows(size_t(h));
  for (int i = 0; i < h; ++i) rows[size_t(i)] = row_storage[size_t(i)].data();
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::vector<uint8_t> rgb(size_t(h) * w * 3);
  for (int i = 0; i < h; ++i)
    std::memcpy(rgb.data() + size_t(i) * w * 3, row_storage[size_t(i)].data(), size_t(w) * 3);
  return image_from_rgb8(rgb, h, w);
}

Tensor load_ppm(FILE* f, const std::string& path) {
  auto next_token = [&]() -> std::string {
    std::string tok;
    int c;
    while ((c = std::fgetc(f)) != EOF) {
      if (c == '#') {
        while ((c = std::fgetc(f)) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P6") fail(ErrorCode::Format, path + " is not a binary (P6) PPM");
  const std::string ws = next_token(), hs = next_token(), maxs = next_token();
  if (ws.empty() || hs.empty() || maxs.empty())
    fail(ErrorCode::Format, path + ": truncated PPM header");
  const int w = std::stoi(ws), h = std::stoi(hs), maxval = std::stoi(maxs);
  if (maxval != 255)
    fail(ErrorCode::Format,
         path + " has maxval " + std::to_string(maxval) + "; convert it to 8-bit (maxval 255)");
  std::vector<uint8_t> rgb(size_t(h) * w * 3);
  if (std::fread(rgb.data(), 1, rgb.size(), f) != rgb.size())
    fail(ErrorCode::Format, path + ": truncated PPM pixel data");
  return image_from_rgb8(rgb, h, w);
}

void save_png(const Tensor& image, const std::string& path) {
  const int h = image.dim(2), w = image.dim(3);
  const std::vector<uint8_t> rgb = image_to_rgb8(image);
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) fail(ErrorCode::Io, "cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorCode::Io, "libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorCode::Io, "failed to write PNG: " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(size_t(h));
  for (int i = 0; i < h; ++i) rows[size_t(i)] = const_cast<uint8_t*>(rgb.data()) + size_t(i) * w * 3;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void save_ppm(const Tensor& image, const std::string& path) {
  const int h = image.dim(2), w = image.dim(3);
  const std::vector<uint8_t> rgb = image_to_rgb8(image);
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) fail(ErrorCode::Io, "cannot open " + path + " for writing");
  std::fprintf(f.get(), "P6\n%d %d\n255\n", w, h);
  if (std::fwrite(rgb.data(), 1, rgb.size(), f.get()) != rgb.size())
    fail(ErrorCode::Io, "short write to " + path);
}

void check_image_tensor(const Tensor& image, const char* who) {
  if (!image.defined() || image.ndim() != 4 || image.dim(0) != 1 || image.dim(1) != 3)
    fail(ErrorCode::Dimension, std::string(who) + " expects a (1,3,H,W) image tensor");
}

uint8_t clamp_byte(double v) {
  return static_cast<uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
}

}  // namespace

Tensor load_image(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) fail(ErrorCode::Io, "cannot open image: " + path);
  unsigned char sig[2] = {0, 0};
  if (std::fread(sig, 1, 2, f.get()) != 2) fail(ErrorCode::Format, path + " is not an image");
  std::rewind(f.get());
  if (sig[0] == 0x89 && sig[1] == 'P') return load_png(f.get(), path);
  if (sig[0] == 'P' && sig[1] == '6') return load_ppm(f.get(), path);
  fail(ErrorCode::Format,
       path + ": unsupported image format (only 8-bit PNG and P6 PPM are read; convert first)");
}

void save_image(const Tensor& image, const std::string& path) {
  check_image_tensor(image, "save_image");
  if (has_suffix(path, ".png"))
    save_png(image, path);
  else if (has_suffix(path, ".ppm"))
    save_ppm(image, path);
  else
    fail(ErrorCode::InvalidArgument, path + ": output extension must be .png or .ppm");
}

Tensor image_from_rgb8(const std::vector<uint8_t>& rgb, int h, int w) {
  if (rgb.size() != size_t(h) * w * 3)
    fail(ErrorCode::Dimension, "rgb buffer does not match dimensions");
  Tensor out(Shape{1, 3, h, w});
  constexpr float kInv = 1.0f / 255.0f;
  for (int c = 0; c < 3; ++c) {
    float* plane = out.data() + size_t(c) * h * w;
    for (int i = 0; i < h * w; ++i) plane[i] = float(rgb[size_t(i) * 3 + c]) * kInv;
  }
  return out;
}

std::vector<uint8_t> image_to_rgb8(const Tensor& image) {
  check_image_tensor(image, "image_to_rgb8");
  const int h = image.dim(2), w = image.dim(3);
  std::vector<uint8_t> rgb(size_t(h) * w * 3);
  for (int c = 0; c < 3; ++c) {
    const float* plane = image.data() + size_t(c) * h * w;
    for (int i = 0; i < h * w; ++i) rgb[size_t(i) * 3 + c] = clamp_byte(double(plane[i]) * 255.0);
  }
  return rgb;
}

PaddedImage pad_reflect(const Tensor& image, int multiple) {
  check_image_tensor(image, "pad_reflect");
  const int h = image.dim(2), w = image.dim(3);
  const int hp = (h + multiple - 1) / multiple * multiple;
  const int wp = (w + multiple - 1) / multiple * multiple;
  if (hp - h >= h || wp - w >= w)
    fail(ErrorCode::Dimension, "pad_reflect: image too small to reflect-pad");
  PaddedImage out;
  out.orig_h = h;
  out.orig_w = w;
  if (hp == h && wp == w) {
    out.padded = image.clone();
    return out;
  }
  out.padded = Tensor(Shape{1, 3, hp, wp});
  for (int c = 0; c < 3; ++c) {
    const float* src = image.data() + size_t(c) * h * w;
    float* dst = out.padded.data() + size_t(c) * hp * wp;
    for (int i = 0; i < hp; ++i) {
      const int si = i < h ? i : 2 * h - 2 - i;
      for (int j = 0; j < wp; ++j) {
        const int sj = j < w ? j : 2 * w - 2 - j;
        dst[size_t(i) * wp + j] = src[size_t(si) * w + sj];
      }
    }
  }
  return out;
}

Tensor crop_image(const Tensor& image, int h, int w) {
  check_image_tensor(image, "crop_image");
  const int hp = image.dim(2), wp = image.dim(3);
  if (h > hp || w > wp) fail(ErrorCode::Dimension, "crop_image: crop larger than image");
  if (h == hp && w == wp) return image;
  Tensor out(Shape{1, 3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      std::memcpy(out.data() + (size_t(c) * h + i) * w,
                  image.data() + (size_t(c) * hp + i) * wp, sizeof(float) * w);
  return out;
}

Tensor clamp01(const Tensor& image) {
  Tensor out = image.detached();
  for (auto& v : out.vec()) v = std::min(1.0f, std::max(0.0f, v));
  return out;
}

std::vector<uint8_t> rgb8_to_yuv444(const std::vector<uint8_t>& rgb, int h, int w) {
  if (rgb.size() != size_t(h) * w * 3) fail(ErrorCode::Dimension, "rgb size mismatch");
  std::vector<uint8_t> yuv(rgb.size());
  const size_t n = size_t(h) * w;
  for (size_t i = 0; i < n; ++i) {
    const double r = rgb[i * 3], g = rgb[i * 3 + 1], b = rgb[i * 3 + 2];
    yuv[i] = clamp_byte(0.299 * r + 0.587 * g + 0.114 * b);
    yuv[n + i] = clamp_byte(-0.168736 * r - 0.331264 * g + 0.5 * b + 128.0);
    yuv[2 * n + i] = clamp_byte(0.5 * r - 0.418688 * g - 0.081312 * b + 128.0);
  }
  return yuv;
}

std::vector<uint8_t> yuv444_to_rgb8(const std::vector<uint8_t>& yuv, int h, int w) {
  if (yuv.size() != size_t(h) * w * 3) fail(ErrorCode::Dimension, "yuv size mismatch");
  std::vector<uint8_t> rgb(yuv.size());
  const size_t n = size_t(h) * w;
  for (size_t i = 0; i < n; ++i) {
    const double y = yuv[i], cb = double(yuv[n + i]) - 128.0, cr = double(yuv[2 * n + i]) - 128.0;
    rgb[i * 3] = clamp_byte(y + 1.402 * cr);
    rgb[i * 3 + 1] = clamp_byte(y - 0.344136 * cb - 0.714136 * cr);
    rgb[i * 3 + 2] = clamp_byte(y + 1.772 * cb);
  }
  return rgb;
}

}  // namespace nzc
