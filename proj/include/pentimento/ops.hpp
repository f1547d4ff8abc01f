#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "parallel.hpp"
#include "tensor.hpp"

namespace pentimento {

enum class Padding { zero, reflect };

/// Square convolution kernel of shape (c_out, c_in, k, k) with odd k. The
/// input is padded by (k - 1) / 2 on every side, so stride 1 keeps h and w.
template <typename T>
struct ConvParams {
  BasicTensor<T> kernel;
  std::vector<T> bias;
  std::size_t stride = 1;
  Padding padding = Padding::reflect;

  std::size_t c_out() const noexcept { return kernel.dims().n; }
  std::size_t c_in() const noexcept { return kernel.dims().c; }
  std::size_t k() const noexcept { return kernel.dims().h; }
  std::size_t pad() const noexcept { return (k() - 1) / 2; }

  void validate() const {
    const Dims& d = kernel.dims();
    if (d.h != d.w || d.h % 2 == 0 || d.h == 0)
      throw ShapeError("conv kernel must be square with odd size, got " + d.str());
    if (bias.size() != d.n)
      throw ShapeError("conv bias length " + std::to_string(bias.size()) + " does not match c_out " +
                       std::to_string(d.n));
    if (stride == 0) throw ShapeError("conv stride must be positive");
  }

  template <typename U>
  ConvParams<U> cast() const {
    return {kernel.template cast<U>(), std::vector<U>(bias.begin(), bias.end()), stride, padding};
  }
};

namespace detail {

// Maps a padded coordinate onto the input; -1 means "outside, reads zero".
inline long pad_index(long i, long size, Padding padding) noexcept {
  if (i >= 0 && i < size) return i;
  if (padding == Padding::zero) return -1;
  if (i < 0) return -i;
  return 2 * (size - 1) - i;
}

inline std::vector<long> pad_map(std::size_t out, std::size_t in, std::size_t stride,
                                 std::size_t pad, std::size_t offset, Padding padding) {
  std::vector<long> map(out);
  for (std::size_t o = 0; o < out; ++o)
    map[o] = pad_index(long(o * stride + offset) - long(pad), long(in), padding);
  return map;
}

}  // namespace detail

/// Output dims of a convolution, validating the input against `params`.
template <typename T>
Dims conv2d_output_dims(const Dims& input, const ConvParams<T>& params) {
  params.validate();
  if (input.c != params.c_in())
    throw ShapeError("conv input " + input.str() + " does not match kernel " +
                     params.kernel.dims().str());
  const std::size_t k = params.k(), p = params.pad();
  if (params.padding == Padding::zero && (input.h < k || input.w < k))
    throw ShapeError("conv input " + input.str() + " smaller than kernel " +
                     params.kernel.dims().str());
  if (params.padding == Padding::reflect && (input.h <= p || input.w <= p))
    throw ShapeError("reflect padding of " + std::to_string(p) + " needs input larger than " +
                     input.str());
  return {input.n, params.c_out(), (input.h + 2 * p - k) / params.stride + 1,
          (input.w + 2 * p - k) / params.stride + 1};
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const ConvParams<T>& params) {
  const Dims od = conv2d_output_dims(input.dims(), params);
  require_finite(input, "conv2d_forward");
  const Dims& id = input.dims();
  const std::size_t k = params.k(), p = params.pad(), s = params.stride;

  std::vector<std::vector<long>> ymap(k), xmap(k);
  for (std::size_t t = 0; t < k; ++t) {
    ymap[t] = detail::pad_map(od.h, id.h, s, p, t, params.padding);
    xmap[t] = detail::pad_map(od.w, id.w, s, p, t, params.padding);
  }

  BasicTensor<T> out(od);
  detail::parallel_for(od.n * od.c, od.count() * id.c * k * k, [&](std::size_t job) {
    const std::size_t n = job / od.c, co = job % od.c;
    std::vector<double> acc(od.plane(), double(params.bias[co]));
    for (std::size_t ci = 0; ci < id.c; ++ci) {
      const auto src = input.plane(n, ci);
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double kv = params.kernel.at(co, ci, ky, kx);
          const auto& xm = xmap[kx];
          for (std::size_t oy = 0; oy < od.h; ++oy) {
            const long iy = ymap[ky][oy];
            if (iy < 0) continue;
            const T* row = src.data() + iy * id.w;
            double* dst = acc.data() + oy * od.w;
            for (std::size_t ox = 0; ox < od.w; ++ox)
              if (xm[ox] >= 0) dst[ox] += kv * double(row[xm[ox]]);
          }
        }
      }
    }
    auto dst = out.plane(n, co);
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = T(acc[i]);
  });
  return out;
}

/// Gradient of a scalar loss with respect to the convolution input, given its
/// gradient with respect to the output. Bias does not enter.
template <typename T>
BasicTensor<T> conv2d_backward_input(const BasicTensor<T>& grad_out, const ConvParams<T>& params,
                                     const Dims& input_dims) {
  const Dims od = conv2d_output_dims(input_dims, params);
  if (grad_out.dims() != od)
    throw ShapeError("conv grad_out " + grad_out.dims().str() + " does not match output " +
                     od.str());
  const Dims& id = input_dims;
  const std::size_t k = params.k(), p = params.pad(), s = params.stride;

  std::vector<std::vector<long>> ymap(k), xmap(k);
  for (std::size_t t = 0; t < k; ++t) {
    ymap[t] = detail::pad_map(od.h, id.h, s, p, t, params.padding);
    xmap[t] = detail::pad_map(od.w, id.w, s, p, t, params.padding);
  }

  BasicTensor<T> grad_in(id);
  detail::parallel_for(id.n * id.c, od.count() * id.c * k * k, [&](std::size_t job) {
    const std::size_t n = job / id.c, ci = job % id.c;
    std::vector<double> acc(id.plane(), 0.0);
    for (std::size_t co = 0; co < od.c; ++co) {
      const auto g = grad_out.plane(n, co);
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double kv = params.kernel.at(co, ci, ky, kx);
          const auto& xm = xmap[kx];
          for (std::size_t oy = 0; oy < od.h; ++oy) {
            const long iy = ymap[ky][oy];
            if (iy < 0) continue;
            double* dst = acc.data() + iy * id.w;
            const T* row = g.data() + oy * od.w;
            for (std::size_t ox = 0; ox < od.w; ++ox)
              if (xm[ox] >= 0) dst[xm[ox]] += kv * double(row[ox]);
          }
        }
      }
    }
    auto dst = grad_in.plane(n, ci);
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = T(acc[i]);
  });
  return grad_in;
}

inline Dims avg_pool_output_dims(const Dims& input, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ShapeError("pool window and stride must be positive");
  if (input.h < window || input.w < window || (input.h - window) % stride != 0 ||
      (input.w - window) % stride != 0)
    throw ShapeError("pool input " + input.str() + " not divisible by window " +
                     std::to_string(window) + " / stride " + std::to_string(stride));
  return {input.n, input.c, (input.h - window) / stride + 1, (input.w - window) / stride + 1};
}

template <typename T>
BasicTensor<T> avg_pool_forward(const BasicTensor<T>& input, std::size_t window,
                                std::size_t stride) {
  const Dims od = avg_pool_output_dims(input.dims(), window, stride);
  const double inv = 1.0 / double(window * window);
  BasicTensor<T> out(od);
  for (std::size_t n = 0; n < od.n; ++n)
    for (std::size_t c = 0; c < od.c; ++c)
      for (std::size_t oy = 0; oy < od.h; ++oy)
        for (std::size_t ox = 0; ox < od.w; ++ox) {
          double acc = 0.0;
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx)
              acc += input.at(n, c, oy * stride + dy, ox * stride + dx);
          out.at(n, c, oy, ox) = T(acc * inv);
        }
  return out;
}

template <typename T>
BasicTensor<T> avg_pool_backward(const BasicTensor<T>& grad_out, const Dims& input_dims,
                                 std::size_t window, std::size_t stride) {
  const Dims od = avg_pool_output_dims(input_dims, window, stride);
  if (grad_out.dims() != od)
    throw ShapeError("pool grad_out " + grad_out.dims().str() + " does not match output " +
                     od.str());
  const double inv = 1.0 / double(window * window);
  std::vector<double> acc(input_dims.count(), 0.0);
  BasicTensor<T> grad_in(input_dims);
  for (std::size_t n = 0; n < od.n; ++n)
    for (std::size_t c = 0; c < od.c; ++c)
      for (std::size_t oy = 0; oy < od.h; ++oy)
        for (std::size_t ox = 0; ox < od.w; ++ox) {
          const double g = double(grad_out.at(n, c, oy, ox)) * inv;
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx)
              acc[grad_in.index(n, c, oy * stride + dy, ox * stride + dx)] += g;
        }
  for (std::size_t i = 0; i < acc.size(); ++i) grad_in[i] = T(acc[i]);
  return grad_in;
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

/// Passes grad_out where input > 0; the subgradient at exactly 0 is 0.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input) {
  grad_out.require_same_dims(input, "relu_backward");
  BasicTensor<T> out(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? grad_out[i] : T(0);
  return out;
}

}  // namespace pentimento
