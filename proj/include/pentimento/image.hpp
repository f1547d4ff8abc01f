#pragma once

#include <png.h>
// jpeglib.h expects size_t and FILE to be declared already.
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "io.hpp"
#include "tensor.hpp"

namespace pentimento {

/// Planar float image with values in [0, 1]; 1 channel (gray) or 3 (RGB).
struct Image {
  std::size_t channels = 1;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<float> pixels;  // (channel, y, x) order

  Image() = default;
  Image(std::size_t c, std::size_t height, std::size_t width, float fill = 0.0f)
      : channels(c), h(height), w(width), pixels(c * height * width, fill) {}

  std::size_t plane() const noexcept { return h * w; }
  float& at(std::size_t c, std::size_t y, std::size_t x) noexcept { return pixels[(c * h + y) * w + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return pixels[(c * h + y) * w + x];
  }
  std::string dims_str() const {
    return std::to_string(channels) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Per-pixel removal flags (true = remove).
struct Mask {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> flags;

  Mask() = default;
  Mask(std::size_t height, std::size_t width, bool fill = false)
      : h(height), w(width), flags(height * width, fill ? 1 : 0) {}

  bool at(std::size_t y, std::size_t x) const noexcept { return flags[y * w + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v) noexcept { flags[y * w + x] = v ? 1 : 0; }
  std::size_t count() const noexcept { return std::size_t(std::count(flags.begin(), flags.end(), 1)); }

  friend bool operator==(const Mask&, const Mask&) = default;
};

inline std::uint8_t to_byte(float v) noexcept {
  return std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace detail {

inline bool is_png(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  return b.size() >= 8 && std::memcmp(b.data(), sig, 8) == 0;
}

inline bool is_jpeg(std::span<const std::uint8_t> b) {
  return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF;
}

inline Image from_interleaved(const std::vector<std::uint8_t>& bytes, std::size_t channels,
                              std::size_t h, std::size_t w) {
  Image img(channels, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        img.at(c, y, x) = float(bytes[(y * w + x) * channels + c]) / 255.0f;
  return img;
}

inline Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw DecodeError(std::string("PNG: ") + png.message);
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw DecodeError("PNG: " + msg);
  }
  return from_interleaved(buffer, color ? 3 : 1, png.height, png.width);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

extern "C" inline void pentimento_jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

extern "C" inline void pentimento_jpeg_silent(j_common_ptr, int) {}

inline Image decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  std::vector<std::uint8_t> buffer;
  std::size_t channels = 0, h = 0, w = 0;

  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = pentimento_jpeg_error_exit;
  err.base.emit_message = pentimento_jpeg_silent;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DecodeError(std::string("JPEG: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.jpeg_color_space == JCS_GRAYSCALE ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  channels = std::size_t(cinfo.output_components);
  h = cinfo.output_height;
  w = cinfo.output_width;
  buffer.resize(channels * h * w);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buffer.data() + std::size_t(cinfo.output_scanline) * w * channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(buffer, channels, h, w);
}

}  // namespace detail

/// Decodes PNG or JPEG bytes; 8-bit samples map to v / 255.
inline Image decode_image(std::span<const std::uint8_t> bytes) {
  if (detail::is_png(bytes)) return detail::decode_png(bytes);
  if (detail::is_jpeg(bytes)) return detail::decode_jpeg(bytes);
  throw DecodeError("unsupported image format (expected PNG or JPEG signature)");
}

inline Image load_image(const std::filesystem::path& path) {
  try {
    return decode_image(read_file_bytes(path));
  } catch (const DecodeError& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

/// 8-bit PNG, gray for one channel and RGB for three.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ShapeError("PNG export needs 1 or 3 channels, got " + img.dims_str());
  std::vector<std::uint8_t> interleaved(img.pixels.size());
  for (std::size_t y = 0; y < img.h; ++y)
    for (std::size_t x = 0; x < img.w; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        interleaved[(y * img.w + x) * img.channels + c] = to_byte(img.at(c, y, x));

  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = png_uint_32(img.w);
  png.height = png_uint_32(img.h);
  png.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, interleaved.data(), 0, nullptr))
    throw DecodeError(std::string("PNG encode: ") + png.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, interleaved.data(), 0, nullptr))
    throw DecodeError(std::string("PNG encode: ") + png.message);
  out.resize(size);
  return out;
}

inline void save_png(const Image& img, const std::filesystem::path& path) {
  write_file_atomic(path, encode_png(img));
}

/// Byte value >= 128 marks a pixel for removal. Color masks use their mean.
inline Mask mask_from_image(const Image& img) {
  Mask m(img.h, img.w);
  for (std::size_t y = 0; y < img.h; ++y)
    for (std::size_t x = 0; x < img.w; ++x) {
      float v = 0.0f;
      for (std::size_t c = 0; c < img.channels; ++c) v += img.at(c, y, x);
      m.set(y, x, to_byte(v / float(img.channels)) >= 128);
    }
  return m;
}

inline Mask load_mask(const std::filesystem::path& path) { return mask_from_image(load_image(path)); }

inline Image mask_to_image(const Mask& mask) {
  Image img(1, mask.h, mask.w);
  for (std::size_t i = 0; i < mask.flags.size(); ++i) img.pixels[i] = mask.flags[i] ? 1.0f : 0.0f;
  return img;
}

/// (1, 3, h, w) network input; gray images are replicated across channels.
inline Tensor to_tensor(const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ShapeError("expected 1 or 3 channels, got " + img.dims_str());
  Tensor t(Dims{1, 3, img.h, img.w});
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t src = img.channels == 1 ? 0 : c;
    std::copy_n(img.pixels.begin() + std::ptrdiff_t(src * img.plane()), img.plane(),
                t.plane(0, c).begin());
  }
  return t;
}

inline Image from_tensor(const Tensor& t) {
  const Dims& d = t.dims();
  if (d.n != 1) throw ShapeError("image tensor must have batch 1, got " + d.str());
  Image img(d.c, d.h, d.w);
  std::copy(t.data().begin(), t.data().end(), img.pixels.begin());
  return img;
}

}  // namespace pentimento
