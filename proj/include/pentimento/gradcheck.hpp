#pragma once

// Central finite-difference checks of every analytic gradient in the engine.
// Analytic gradients come from the single-precision path; the differences are
// taken on the double-precision instantiation of the forward computation so
// that float round-off does not swamp the step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "loss.hpp"
#include "network.hpp"
#include "ops.hpp"
#include "random_net.hpp"

namespace pentimento {

struct GradCheckResult {
  std::string name;
  std::size_t checked = 0;
  std::size_t passed = 0;
  double max_rel_err = 0.0;
  double required_fraction = 1.0;
  double tolerance = 1e-3;

  double pass_fraction() const { return checked ? double(passed) / double(checked) : 1.0; }
  bool ok() const { return checked > 0 && pass_fraction() >= required_fraction; }
};

/// |a - n| / max(|a|, |n|, 1e-8).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares `analytic` against central differences of `f` around `x0` at every
/// coordinate for which `include(i)` holds.
inline GradCheckResult compare_with_finite_differences(
    std::string name, const BasicTensor<double>& x0, const std::vector<double>& analytic,
    const std::function<double(const BasicTensor<double>&)>& f, double eps, double tol,
    double required_fraction = 1.0, const std::function<bool(std::size_t)>& include = {}) {
  GradCheckResult r{std::move(name), 0, 0, 0.0, required_fraction, tol};
  BasicTensor<double> x = x0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (include && !include(i)) continue;
    x[i] = x0[i] + eps;
    const double up = f(x);
    x[i] = x0[i] - eps;
    const double down = f(x);
    x[i] = x0[i];
    const double err = relative_error(analytic[i], (up - down) / (2.0 * eps));
    ++r.checked;
    if (err <= tol) ++r.passed;
    r.max_rel_err = std::max(r.max_rel_err, err);
  }
  return r;
}

namespace detail {

inline Tensor random_tensor(const Dims& d, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(d);
  for (auto& v : t.data()) v = float(u(rng));
  return t;
}

template <typename T>
std::vector<double> as_doubles(const BasicTensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace detail

/// Pixel gradient of total_loss against finite differences.
inline GradCheckResult check_total_loss_gradient(const WeightStore& weights, const LossConfig& config,
                                                 const Tensor& gen, const Tensor& content_image,
                                                 const Tensor& style_image, double eps = 1e-3,
                                                 double tol = 1e-3, double required_fraction = 0.99) {
  const FeatureNet net(weights);
  const auto analytic = total_loss(gen, content_targets(net, content_image, config),
                                   style_targets(net, style_image, config), config, net);

  const BasicFeatureNet<double> net64(weights);
  const auto content64 = content_targets(net64, content_image.cast<double>(), config);
  const auto style64 = style_targets(net64, style_image.cast<double>(), config);
  return compare_with_finite_differences(
      "total_loss pixel gradient", gen.cast<double>(), detail::as_doubles(analytic.pixel_grad),
      [&](const BasicTensor<double>& x) { return total_loss(x, content64, style64, config, net64).loss; }, eps,
      tol, required_fraction);
}

/// The loss configuration used with make_random_weights() networks.
inline LossConfig random_net_loss_config() {
  LossConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 1e3;
  cfg.tv_weight = 1e-3;
  cfg.content_taps = {"conv2"};
  cfg.style_taps = {{"conv1", 0.25}, {"conv2", 0.25}, {"conv3", 0.5}};
  return cfg;
}

/// Every gradient check, on small random instances drawn from `seed`.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 7, double eps = 1e-3) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;

  // conv2d_backward_input: L = <conv(x), r>.
  for (Padding padding : {Padding::reflect, Padding::zero}) {
    ConvParams<float> p{detail::random_tensor({4, 3, 3, 3}, rng), std::vector<float>(4, 0.1f), 1, padding};
    const Tensor x = detail::random_tensor({2, 3, 6, 6}, rng);
    const Tensor r = detail::random_tensor(conv2d_output_dims(x.dims(), p), rng);
    const auto p64 = p.cast<double>();
    const auto r64 = r.cast<double>();
    out.push_back(compare_with_finite_differences(
        padding == Padding::reflect ? "conv2d_backward_input (reflect)" : "conv2d_backward_input (zero)",
        x.cast<double>(), detail::as_doubles(conv2d_backward_input(r, p, x.dims())),
        [&](const BasicTensor<double>& v) { return dot(conv2d_forward(v, p64), r64); }, eps, 1e-3));
  }

  {
    const Tensor x = detail::random_tensor({1, 2, 4, 6}, rng);
    const Tensor r = detail::random_tensor({1, 2, 2, 3}, rng);
    const auto r64 = r.cast<double>();
    out.push_back(compare_with_finite_differences(
        "avg_pool_backward", x.cast<double>(), detail::as_doubles(avg_pool_backward(r, x.dims(), 2, 2)),
        [&](const BasicTensor<double>& v) { return dot(avg_pool_forward(v, 2, 2), r64); }, eps, 1e-3));
  }

  {
    // Magnitudes kept >= 0.1 so no step crosses the kink.
    Tensor x = detail::random_tensor({1, 2, 4, 4}, rng);
    for (auto& v : x.data()) v = v < 0 ? std::min(v, -0.1f) : std::max(v, 0.1f);
    const Tensor r = detail::random_tensor(x.dims(), rng);
    const auto r64 = r.cast<double>();
    out.push_back(compare_with_finite_differences(
        "relu_backward", x.cast<double>(), detail::as_doubles(relu_backward(r, x)),
        [&](const BasicTensor<double>& v) { return dot(relu_forward(v), r64); }, eps, 1e-3));
  }

  {
    const Tensor gen = detail::random_tensor({1, 3, 4, 4}, rng);
    const Tensor target = detail::random_tensor({1, 3, 4, 4}, rng);
    const auto t64 = target.cast<double>();
    out.push_back(compare_with_finite_differences(
        "content_loss", gen.cast<double>(), detail::as_doubles(content_loss(gen, target).grad),
        [&](const BasicTensor<double>& v) { return content_loss(v, t64).loss; }, eps, 1e-3));
  }

  {
    const Tensor gen = detail::random_tensor({1, 3, 4, 4}, rng);
    const Tensor style = detail::random_tensor({1, 3, 5, 5}, rng);
    const std::vector<StyleTap> layers{{"f", 1.0}};
    TapSet taps;
    taps.set("f", gen);
    GramSet<float> grams{{"f", gram(style, "f")}};
    GramSet<double> grams64{{"f", gram(style.cast<double>(), "f")}};
    out.push_back(compare_with_finite_differences(
        "style_loss", gen.cast<double>(), detail::as_doubles(style_loss(taps, grams, layers).grads.at("f")),
        [&](const BasicTensor<double>& v) {
          BasicTapSet<double> t;
          t.set("f", v);
          return style_loss(t, grams64, layers).loss;
        },
        eps, 1e-3));
  }

  {
    const Tensor img = detail::random_tensor({1, 2, 5, 5}, rng, 0.0, 1.0);
    const Dims d = img.dims();
    // Skip pixels with a neighbor difference within 2 eps of a tie.
    auto away_from_ties = [&](std::size_t i) {
      const std::size_t x = i % d.w, y = (i / d.w) % d.h;
      auto far = [&](std::size_t j) { return std::abs(double(img[i]) - double(img[j])) > 2 * eps; };
      if (x > 0 && !far(i - 1)) return false;
      if (x + 1 < d.w && !far(i + 1)) return false;
      if (y > 0 && !far(i - d.w)) return false;
      if (y + 1 < d.h && !far(i + d.w)) return false;
      return true;
    };
    out.push_back(compare_with_finite_differences(
        "tv_loss", img.cast<double>(), detail::as_doubles(tv_loss(img).grad),
        [&](const BasicTensor<double>& v) { return tv_loss(v).loss; }, eps, 1e-2, 1.0, away_from_ties));
  }

  const WeightStore weights = make_random_weights({{8, 8, 16}, 3, 2, seed});
  {
    // backward_to_input with L = sum of squared activations at two taps.
    const FeatureNet net(weights);
    const BasicFeatureNet<double> net64(weights);
    const Tensor img = detail::random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
    const std::vector<std::string> taps{"conv1", "conv3"};
    TapSet grads;
    for (const auto& [name, act] : net.forward_with_taps(img, taps)) {
      Tensor g = act;
      g *= 2.0f;
      grads.set(name, std::move(g));
    }
    // Skip pixels whose +-eps probes flip the sign of any pre-activation.
    const auto x64 = img.cast<double>();
    const std::vector<std::string> convs{"conv1", "conv2", "conv3"};
    auto signs = [&](const BasicTensor<double>& v) {
      std::vector<bool> out;
      for (const auto& [name, act] : net64.forward_with_taps(v, convs))
        for (double a : act.vec()) out.push_back(a > 0.0);
      return out;
    };
    const auto base = signs(x64);
    auto smooth = [&](std::size_t i) {
      BasicTensor<double> v = x64;
      v[i] = x64[i] + eps;
      if (signs(v) != base) return false;
      v[i] = x64[i] - eps;
      return signs(v) == base;
    };
    out.push_back(compare_with_finite_differences(
        "backward_to_input", x64, detail::as_doubles(net.backward_to_input(img, grads)),
        [&](const BasicTensor<double>& v) {
          double s = 0.0;
          for (const auto& [name, act] : net64.forward_with_taps(v, taps)) s += dot(act, act);
          return s;
        },
        eps, 1e-3, 0.99, smooth));
  }

  {
    const Tensor content = detail::random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
    const Tensor style = detail::random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
    const Tensor gen = detail::random_tensor({1, 3, 8, 8}, rng, 0.0, 1.0);
    out.push_back(check_total_loss_gradient(weights, random_net_loss_config(), gen, content, style, eps));
  }
  return out;
}

}  // namespace pentimento
