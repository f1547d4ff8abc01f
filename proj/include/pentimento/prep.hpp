#pragma once

// Radiograph preparation: contrast stretch, curator masks, harmonic inpainting
// and resampling to the working resolution.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <utility>
#include <vector>

#include "error.hpp"
#include "image.hpp"

namespace pentimento {

namespace detail {

inline float clamp01(double v) noexcept {
  if (!(v >= 0.0)) return 0.0f;  // also maps NaN to 0
  return v > 1.0 ? 1.0f : float(v);
}

/// Linear-interpolated percentile of sorted values, pct in [0, 100].
inline double percentile_sorted(const std::vector<float>& sorted, double pct) {
  if (sorted.empty()) return 0.0;
  const double pos = std::clamp(pct, 0.0, 100.0) / 100.0 * double(sorted.size() - 1);
  const auto lo = std::size_t(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - double(lo);
  return double(sorted[lo]) + frac * (double(sorted[hi]) - double(sorted[lo]));
}

inline void require_same_dims(const Image& img, const Mask& mask) {
  if (img.h != mask.h || img.w != mask.w)
    throw ShapeError("mask " + std::to_string(mask.h) + "x" + std::to_string(mask.w) +
                     " does not match image " + img.dims_str());
}

}  // namespace detail

/// Maps the lo_pct / hi_pct percentiles (taken over all channels together) to
/// 0 and 1 and clamps. When the two percentiles coincide, values below map to
/// 0, above to 1 and equal to 0.5, so constant images become 0.5.
inline Image normalize_contrast(const Image& img, double lo_pct = 1.0, double hi_pct = 99.0) {
  if (!(lo_pct < hi_pct)) throw ConfigError("normalize_contrast needs lo_pct < hi_pct");
  std::vector<float> sorted = img.pixels;
  std::sort(sorted.begin(), sorted.end());
  const double lo = detail::percentile_sorted(sorted, lo_pct);
  const double hi = detail::percentile_sorted(sorted, hi_pct);
  Image out = img;
  for (auto& v : out.pixels) {
    const double x = v;
    if (hi > lo) v = detail::clamp01((x - lo) / (hi - lo));
    else v = x < lo ? 0.0f : (x > lo ? 1.0f : 0.5f);
  }
  return out;
}

struct InpaintResult {
  Image image;
  std::size_t iterations = 0;
  bool converged = false;  // false when max_iters stopped the solver
};

/// Fills masked pixels with a discrete harmonic function: Jacobi iteration of
/// the 5-point Laplace equation, unmasked pixels held fixed, image borders
/// reflecting (only in-bounds neighbors are averaged). Stops once the largest
/// per-pixel update falls below `tol`.
///
/// Each connected masked region starts from the mean of the unmasked pixels
/// bordering it, so the result depends only on unmasked pixels.
inline InpaintResult inpaint_diffusion(const Image& img, const Mask& mask, double tol = 1e-4,
                                       std::size_t max_iters = 5000) {
  detail::require_same_dims(img, mask);
  const std::size_t h = img.h, w = img.w, plane = img.plane();
  InpaintResult result{img, 0, true};

  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < plane; ++i)
    if (mask.flags[i]) masked.push_back(i);
  if (masked.empty()) return result;

  auto neighbors = [&](std::size_t i, auto&& fn) {
    const std::size_t y = i / w, x = i % w;
    if (y > 0) fn(i - w);
    if (y + 1 < h) fn(i + w);
    if (x > 0) fn(i - 1);
    if (x + 1 < w) fn(i + 1);
  };

  // Label 4-connected masked regions and collect their unmasked borders.
  constexpr std::size_t kNone = std::size_t(-1);
  std::vector<std::size_t> label(plane, kNone);
  std::vector<std::vector<std::size_t>> regions, borders;
  for (std::size_t seed : masked) {
    if (label[seed] != kNone) continue;
    const std::size_t id = regions.size();
    regions.emplace_back();
    borders.emplace_back();
    std::deque<std::size_t> queue{seed};
    label[seed] = id;
    while (!queue.empty()) {
      const std::size_t p = queue.front();
      queue.pop_front();
      regions[id].push_back(p);
      neighbors(p, [&](std::size_t q) {
        if (mask.flags[q]) {
          if (label[q] == kNone) {
            label[q] = id;
            queue.push_back(q);
          }
        } else {
          borders[id].push_back(q);
        }
      });
    }
    std::sort(borders[id].begin(), borders[id].end());
    borders[id].erase(std::unique(borders[id].begin(), borders[id].end()), borders[id].end());
  }

  std::vector<double> cur(plane), next(plane);
  bool converged_all = true;
  std::size_t max_used = 0;
  for (std::size_t c = 0; c < img.channels; ++c) {
    const std::size_t base = c * plane;
    for (std::size_t i = 0; i < plane; ++i) cur[i] = img.pixels[base + i];
    for (std::size_t r = 0; r < regions.size(); ++r) {
      double init = 0.5;
      if (!borders[r].empty()) {
        double sum = 0.0;
        for (std::size_t q : borders[r]) sum += cur[q];
        init = sum / double(borders[r].size());
      }
      for (std::size_t p : regions[r]) cur[p] = init;
    }
    next = cur;

    bool converged = false;
    std::size_t iter = 0;
    while (iter < max_iters) {
      ++iter;
      double max_update = 0.0;
      for (std::size_t p : masked) {
        double sum = 0.0;
        int count = 0;
        neighbors(p, [&](std::size_t q) {
          sum += cur[q];
          ++count;
        });
        next[p] = count ? sum / count : cur[p];
        max_update = std::max(max_update, std::abs(next[p] - cur[p]));
      }
      for (std::size_t p : masked) cur[p] = next[p];
      if (max_update < tol) {
        converged = true;
        break;
      }
    }
    converged_all = converged_all && converged;
    max_used = std::max(max_used, iter);
    for (std::size_t p : masked) result.image.pixels[base + p] = detail::clamp01(cur[p]);
  }
  result.iterations = max_used;
  result.converged = converged_all;
  return result;
}

struct MaskFill {
  enum class Mode { constant, diffusion };
  Mode mode = Mode::diffusion;
  float value = 0.5f;  // constant mode
  double tol = 1e-4;   // diffusion mode
  std::size_t max_iters = 5000;

  static MaskFill constant(float v) { return {Mode::constant, v}; }
  static MaskFill diffusion(double tol = 1e-4, std::size_t max_iters = 5000) {
    return {Mode::diffusion, 0.5f, tol, max_iters};
  }
};

/// Replaces masked pixels; unmasked pixels are copied bit for bit.
inline Image apply_mask(const Image& img, const Mask& mask, const MaskFill& fill = {}) {
  detail::require_same_dims(img, mask);
  if (fill.mode == MaskFill::Mode::diffusion)
    return inpaint_diffusion(img, mask, fill.tol, fill.max_iters).image;
  Image out = img;
  const float v = detail::clamp01(fill.value);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < img.plane(); ++i)
      if (mask.flags[i]) out.pixels[c * img.plane() + i] = v;
  return out;
}

/// Bilinear resampling with pixel centers at (i + 0.5) (corners not aligned);
/// samples outside the source clamp to the edge.
inline Image resize_bilinear(const Image& img, std::size_t new_h, std::size_t new_w) {
  if (new_h == 0 || new_w == 0) throw ShapeError("resize target must be at least 1x1");
  if (img.h == 0 || img.w == 0) throw ShapeError("cannot resize an empty image");
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = double(in) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (double(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, double(in - 1));
      const auto i0 = std::size_t(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, in - 1), src - double(i0)};
    }
    return t;
  };
  const auto ty = taps(img.h, new_h), tx = taps(img.w, new_w);
  Image out(img.channels, new_h, new_w);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < new_h; ++y)
      for (std::size_t x = 0; x < new_w; ++x) {
        const double a = img.at(c, ty[y].i0, tx[x].i0), b = img.at(c, ty[y].i0, tx[x].i1);
        const double p = img.at(c, ty[y].i1, tx[x].i0), q = img.at(c, ty[y].i1, tx[x].i1);
        const double top = a + tx[x].f * (b - a);
        const double bottom = p + tx[x].f * (q - p);
        out.at(c, y, x) = detail::clamp01(top + ty[y].f * (bottom - top));
      }
  return out;
}

/// Dims with the longer side equal to `long_side`, aspect preserved.
inline std::pair<std::size_t, std::size_t> fit_long_side(std::size_t h, std::size_t w,
                                                         std::size_t long_side) {
  if (h == 0 || w == 0) throw ShapeError("cannot fit an empty image");
  if (h >= w)
    return {long_side, std::max<std::size_t>(1, std::size_t(std::lround(double(w) * double(long_side) / double(h))))};
  return {std::max<std::size_t>(1, std::size_t(std::lround(double(h) * double(long_side) / double(w)))), long_side};
}

inline Image resize_long_side(const Image& img, std::size_t long_side) {
  const auto [h, w] = fit_long_side(img.h, img.w, long_side);
  if (h == img.h && w == img.w) return img;
  return resize_bilinear(img, h, w);
}

}  // namespace pentimento
