#pragma once

// Straight-line reference computations and fixture builders used by the
// tests. Nothing here calls into the library's numeric code.

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "pentimento/tensor.hpp"

namespace oracle {

using pentimento::Dims;
using pentimento::Tensor;

inline Tensor random_tensor(const Dims& d, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(d);
  for (auto& v : t.data()) v = float(u(rng));
  return t;
}

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i)
    worst = std::max(worst, std::abs(got[i] - want[i]) / std::max({std::abs(want[i]), std::abs(got[i]), floor}));
  return worst;
}

inline std::vector<double> doubles(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline long reflect(long i, long n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

/// Six nested loops over (n, co, oy, ox, ci, ky, kx); stride 1, pad (k-1)/2.
inline std::vector<double> direct_conv(const Tensor& x, const Tensor& kernel, const std::vector<float>& bias,
                                       bool reflect_pad) {
  const Dims d = x.dims(), kd = kernel.dims();
  const long k = long(kd.h), p = (k - 1) / 2;
  const long oh = reflect_pad ? long(d.h) : long(d.h) + 2 * p - k + 1;
  const long ow = reflect_pad ? long(d.w) : long(d.w) + 2 * p - k + 1;
  std::vector<double> out;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < kd.n; ++co)
      for (long oy = 0; oy < oh; ++oy)
        for (long ox = 0; ox < ow; ++ox) {
          double s = bias[co];
          for (std::size_t ci = 0; ci < d.c; ++ci)
            for (long ky = 0; ky < k; ++ky)
              for (long kx = 0; kx < k; ++kx) {
                long iy = oy + ky - p, ix = ox + kx - p;
                if (reflect_pad) {
                  iy = reflect(iy, long(d.h));
                  ix = reflect(ix, long(d.w));
                } else if (iy < 0 || ix < 0 || iy >= long(d.h) || ix >= long(d.w)) {
                  continue;
                }
                s += double(kernel.at(co, ci, std::size_t(ky), std::size_t(kx))) *
                     double(x.at(n, ci, std::size_t(iy), std::size_t(ix)));
              }
          out.push_back(s);
        }
  return out;
}

/// G[i][j] = sum_p F[i][p] F[j][p] / (c h w), double loop.
inline std::vector<double> brute_gram(const Tensor& f) {
  const Dims d = f.dims();
  std::vector<double> g(d.c * d.c, 0.0);
  for (std::size_t i = 0; i < d.c; ++i)
    for (std::size_t j = 0; j < d.c; ++j) {
      double s = 0.0;
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t x = 0; x < d.w; ++x) s += double(f.at(0, i, y, x)) * double(f.at(0, j, y, x));
      g[i * d.c + j] = s / double(d.c * d.h * d.w);
    }
  return g;
}

/// Cholesky of (A + jitter I); false if a pivot is not positive.
inline bool cholesky_ok(std::vector<double> a, std::size_t n, double jitter = 1e-8) {
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] += jitter;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0)) return false;
    a[j * n + j] = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / a[j * n + j];
    }
  }
  return true;
}

// PNG writer assembled by hand from chunks (filter 0 rows, zlib IDAT), so the
// decoder under test never sees bytes produced by its own encoder.
inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(std::uint8_t(v >> s));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put_be32(out, std::uint32_t(data.size()));
  std::vector<std::uint8_t> body(type, type + 4);
  body.insert(body.end(), data.begin(), data.end());
  out.insert(out.end(), body.begin(), body.end());
  put_be32(out, std::uint32_t(crc32(0, body.data(), uInt(body.size()))));
}

/// 8-bit PNG, color type 0 (gray) for channels 1, 2 (RGB) for channels 3.
/// `samples` interleaved, row-major.
inline std::vector<std::uint8_t> make_png(std::size_t w, std::size_t h, int channels,
                                          const std::vector<std::uint8_t>& samples) {
  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  std::vector<std::uint8_t> ihdr;
  put_be32(ihdr, std::uint32_t(w));
  put_be32(ihdr, std::uint32_t(h));
  ihdr.insert(ihdr.end(), {8, std::uint8_t(channels == 1 ? 0 : 2), 0, 0, 0});
  put_chunk(out, "IHDR", ihdr);
  std::vector<std::uint8_t> raw;
  for (std::size_t y = 0; y < h; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), samples.begin() + long(y * w * channels), samples.begin() + long((y + 1) * w * channels));
  }
  uLongf len = compressBound(uLong(raw.size()));
  std::vector<std::uint8_t> idat(len);
  compress(idat.data(), &len, raw.data(), uLong(raw.size()));
  idat.resize(len);
  put_chunk(out, "IDAT", idat);
  put_chunk(out, "IEND", {});
  return out;
}

inline std::vector<std::uint8_t> make_jpeg(std::size_t w, std::size_t h, int channels,
                                           const std::vector<std::uint8_t>& samples, int quality = 100) {
  jpeg_compress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  jpeg_mem_dest(&cinfo, &buf, &size);
  cinfo.image_width = JDIMENSION(w);
  cinfo.image_height = JDIMENSION(h);
  cinfo.input_components = channels;
  cinfo.in_color_space = channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(samples.data() + cinfo.next_scanline * w * channels);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(buf, buf + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buf);
  return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("pentimento_" + tag + "_" + std::to_string(rng() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// 64x64 fixtures: a gray ramp with a darker disc, and an RGB interference pattern.
inline std::vector<std::uint8_t> content_fixture_png(std::size_t n = 64) {
  std::vector<std::uint8_t> s(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = double(x) - n / 2.0, dy = double(y) - n / 2.0;
      double v = 0.2 + 0.6 * double(x) / double(n - 1);
      if (dx * dx + dy * dy < double(n * n) / 20.0) v *= 0.5;
      s[y * n + x] = std::uint8_t(std::lround(v * 255));
    }
  return make_png(n, n, 1, s);
}

inline std::vector<std::uint8_t> style_fixture_png(std::size_t n = 64) {
  std::vector<std::uint8_t> s(n * n * 3);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double v[3] = {0.5 + 0.4 * std::sin(x / 3.0), 0.5 + 0.4 * std::cos(y / 2.0),
                           0.5 + 0.4 * std::sin((double(x) + double(y)) / 4.0)};
      for (int c = 0; c < 3; ++c) s[(y * n + x) * 3 + c] = std::uint8_t(std::lround(v[c] * 255));
    }
  return make_png(n, n, 3, s);
}

}  // namespace oracle
