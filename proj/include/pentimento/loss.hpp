#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "network.hpp"
#include "tensor.hpp"

namespace pentimento {

/// Channel inner products of a (1, c, h, w) feature map, normalized by c*h*w.
template <typename T>
struct BasicGramMatrix {
  std::string layer;
  std::size_t channels = 0;
  std::vector<T> values;  // row-major c x c

  T at(std::size_t i, std::size_t j) const noexcept { return values[i * channels + j]; }
  friend bool operator==(const BasicGramMatrix&, const BasicGramMatrix&) = default;
};

using GramMatrix = BasicGramMatrix<float>;

template <typename T>
using GramSet = std::map<std::string, BasicGramMatrix<T>, std::less<>>;

template <typename T>
BasicGramMatrix<T> gram(const BasicTensor<T>& feature, std::string layer = {}) {
  const Dims& d = feature.dims();
  if (d.n != 1) throw ShapeError("gram needs batch 1, got " + d.str());
  const double norm = 1.0 / double(d.c * d.h * d.w);
  BasicGramMatrix<T> g{std::move(layer), d.c, std::vector<T>(d.c * d.c, T(0))};
  for (std::size_t i = 0; i < d.c; ++i) {
    const auto fi = feature.plane(0, i);
    for (std::size_t j = i; j < d.c; ++j) {
      const auto fj = feature.plane(0, j);
      double acc = 0.0;
      for (std::size_t p = 0; p < fi.size(); ++p) acc += double(fi[p]) * double(fj[p]);
      g.values[i * d.c + j] = g.values[j * d.c + i] = T(acc * norm);
    }
  }
  return g;
}

/// dL/dF given dL/dG for G = gram(F); `grad_gram` need not be symmetric.
template <typename T>
BasicTensor<T> gram_backward(const BasicTensor<T>& feature, const std::vector<double>& grad_gram) {
  const Dims& d = feature.dims();
  if (grad_gram.size() != d.c * d.c)
    throw ShapeError("gram gradient size does not match feature " + d.str());
  const double norm = 1.0 / double(d.c * d.h * d.w);
  BasicTensor<T> out(d);
  std::vector<double> acc(d.plane());
  for (std::size_t i = 0; i < d.c; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j = 0; j < d.c; ++j) {
      const double coef = (grad_gram[i * d.c + j] + grad_gram[j * d.c + i]) * norm;
      if (coef == 0.0) continue;
      const auto fj = feature.plane(0, j);
      for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += coef * double(fj[p]);
    }
    auto dst = out.plane(0, i);
    for (std::size_t p = 0; p < acc.size(); ++p) dst[p] = T(acc[p]);
  }
  return out;
}

template <typename T>
struct LossGrad {
  double loss = 0.0;
  BasicTensor<T> grad;
};

/// 1/2 * sum (gen - target)^2 / (c*h*w).
template <typename T>
LossGrad<T> content_loss(const BasicTensor<T>& gen, const BasicTensor<T>& target) {
  gen.require_same_dims(target, "content_loss");
  const Dims& d = gen.dims();
  const double norm = 1.0 / double(d.c * d.h * d.w);
  LossGrad<T> out{0.0, BasicTensor<T>(d)};
  for (std::size_t i = 0; i < gen.size(); ++i) {
    const double diff = double(gen[i]) - double(target[i]);
    out.loss += diff * diff;
    out.grad[i] = T(diff * norm);
  }
  out.loss *= 0.5 * norm;
  return out;
}

struct StyleTap {
  std::string layer;
  double weight = 0.0;
  friend bool operator==(const StyleTap&, const StyleTap&) = default;
};

template <typename T>
struct StyleLoss {
  double loss = 0.0;
  BasicTapSet<T> grads;
};

/// sum_l w_l * 1/4 * ||G_gen^l - G_style^l||_F^2, with gradients at each
/// tapped activation.
template <typename T>
StyleLoss<T> style_loss(const BasicTapSet<T>& gen_taps, const GramSet<T>& targets,
                        const std::vector<StyleTap>& layers) {
  StyleLoss<T> out;
  for (const auto& [layer, weight] : layers) {
    const BasicTensor<T>* feature = gen_taps.find(layer);
    if (!feature) throw ConfigError("style layer '" + layer + "' missing from generated taps");
    auto target = targets.find(layer);
    if (target == targets.end())
      throw ConfigError("style layer '" + layer + "' has no target Gram matrix");
    const auto g = gram(*feature, layer);
    if (g.channels != target->second.channels)
      throw ShapeError("style layer '" + layer + "' has " + std::to_string(g.channels) +
                       " channels, target Gram has " + std::to_string(target->second.channels));
    std::vector<double> grad_gram(g.values.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < g.values.size(); ++i) {
      const double diff = double(g.values[i]) - double(target->second.values[i]);
      sq += diff * diff;
      grad_gram[i] = 0.5 * weight * diff;
    }
    out.loss += 0.25 * weight * sq;
    out.grads.set(layer, gram_backward(*feature, grad_gram));
  }
  return out;
}

/// Anisotropic total variation summed over channels; subgradient 0 at ties.
template <typename T>
LossGrad<T> tv_loss(const BasicTensor<T>& image) {
  const Dims& d = image.dims();
  if (d.n != 1) throw ShapeError("tv_loss needs batch 1, got " + d.str());
  std::vector<double> grad(image.size(), 0.0);
  double loss = 0.0;
  auto visit = [&](std::size_t a, std::size_t b) {
    const double diff = double(image[b]) - double(image[a]);
    loss += std::abs(diff);
    const double s = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    grad[b] += s;
    grad[a] -= s;
  };
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const std::size_t i = image.index(0, c, y, x);
        if (y + 1 < d.h) visit(i, image.index(0, c, y + 1, x));
        if (x + 1 < d.w) visit(i, image.index(0, c, y, x + 1));
      }
  LossGrad<T> out{loss, BasicTensor<T>(d)};
  for (std::size_t i = 0; i < grad.size(); ++i) out.grad[i] = T(grad[i]);
  return out;
}

/// Weights of the reconstruction objective
/// alpha * content + beta * style + tv_weight * tv.
struct LossConfig {
  double alpha = 1.0;
  double beta = 1e3;
  double tv_weight = 1e-3;
  std::vector<std::string> content_taps{"conv4_2"};
  std::vector<StyleTap> style_taps{
      {"conv1_1", 0.2}, {"conv2_1", 0.2}, {"conv3_1", 0.2}, {"conv4_1", 0.2}, {"conv5_1", 0.2}};

  /// (field, message) for every violated constraint; empty when valid.
  std::vector<std::pair<std::string, std::string>> issues(const std::string& prefix = "loss.") const {
    std::vector<std::pair<std::string, std::string>> out;
    auto check_weight = [&](const char* field, double v) {
      if (!(v >= 0.0) || !std::isfinite(v)) out.emplace_back(prefix + field, "must be finite and >= 0");
    };
    check_weight("alpha", alpha);
    check_weight("beta", beta);
    check_weight("tv_weight", tv_weight);
    double sum = 0.0;
    std::set<std::string, std::less<>> seen;
    for (std::size_t i = 0; i < style_taps.size(); ++i) {
      const auto& tap = style_taps[i];
      const std::string field = prefix + "style_taps[" + std::to_string(i) + "]";
      if (!(tap.weight >= 0.0) || !std::isfinite(tap.weight))
        out.emplace_back(field + ".weight", "must be finite and >= 0");
      if (!seen.insert(tap.layer).second) out.emplace_back(field + ".layer", "duplicate layer");
      sum += tap.weight;
    }
    if (!style_taps.empty() && std::abs(sum - 1.0) > 1e-6)
      out.emplace_back(prefix + "style_taps", "layer weights must sum to 1, got " + std::to_string(sum));
    return out;
  }

  void validate() const {
    const auto found = issues();
    if (!found.empty()) throw ConfigError(found.front().first + ": " + found.front().second);
  }

  std::vector<std::string> style_layers() const {
    std::vector<std::string> out;
    for (const auto& t : style_taps) out.push_back(t.layer);
    return out;
  }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

/// Weighted terms; `total` is their sum.
struct LossBreakdown {
  double total = 0.0;
  double content = 0.0;
  double style = 0.0;
  double tv = 0.0;
  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

template <typename T>
struct TotalLoss {
  double loss = 0.0;
  BasicTensor<T> pixel_grad;
  LossBreakdown breakdown;
};

/// Activations of `image` at the content layers.
template <typename T>
BasicTapSet<T> content_targets(const BasicFeatureNet<T>& net, const BasicTensor<T>& image,
                               const LossConfig& config) {
  return net.forward_with_taps(image, config.content_taps);
}

/// Gram matrices of `image` at the style layers.
template <typename T>
GramSet<T> style_targets(const BasicFeatureNet<T>& net, const BasicTensor<T>& image,
                         const LossConfig& config) {
  GramSet<T> out;
  for (const auto& [name, act] : net.forward_with_taps(image, config.style_layers()))
    out.emplace(name, gram(act, name));
  return out;
}

template <typename T>
TotalLoss<T> total_loss(const BasicTensor<T>& gen_image, const BasicTapSet<T>& content,
                        const GramSet<T>& style, const LossConfig& config,
                        const BasicFeatureNet<T>& net) {
  config.validate();
  std::vector<std::string> taps = config.content_taps;
  for (const auto& t : config.style_taps) taps.push_back(t.layer);
  std::size_t depth = 0;
  for (const auto& t : taps) depth = std::max(depth, net.tap_index(t) + 1);

  const ForwardTrace<T> trace = net.trace(gen_image, depth);
  const BasicTapSet<T> gen_taps = net.taps_from(trace, taps);

  TotalLoss<T> out;
  BasicTapSet<T> tap_grads;
  auto accumulate = [&](const std::string& name, BasicTensor<T> g, double weight) {
    g *= T(weight);
    if (const auto* prev = tap_grads.find(name)) g += *prev;
    tap_grads.set(name, std::move(g));
  };

  double content_sum = 0.0;
  for (const auto& name : config.content_taps) {
    const BasicTensor<T>* target = content.find(name);
    if (!target) throw ConfigError("content layer '" + name + "' has no target activation");
    auto [loss, grad] = content_loss(gen_taps.at(name), *target);
    content_sum += loss;
    if (config.alpha != 0.0) accumulate(name, std::move(grad), config.alpha);
  }

  auto style_part = style_loss(gen_taps, style, config.style_taps);
  if (config.beta != 0.0)
    for (const auto& [name, grad] : style_part.grads) accumulate(name, grad, config.beta);

  out.pixel_grad = net.backward(trace, tap_grads);

  auto tv_part = tv_loss(gen_image);
  if (config.tv_weight != 0.0)
    for (std::size_t i = 0; i < out.pixel_grad.size(); ++i)
      out.pixel_grad[i] += T(config.tv_weight * double(tv_part.grad[i]));

  out.breakdown.content = config.alpha * content_sum;
  out.breakdown.style = config.beta * style_part.loss;
  out.breakdown.tv = config.tv_weight * tv_part.loss;
  out.breakdown.total = out.breakdown.content + out.breakdown.style + out.breakdown.tv;
  out.loss = out.breakdown.total;
  return out;
}

}  // namespace pentimento
