#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "tensor.hpp"

namespace pentimento {

struct AdamParams {
  double lr = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool clamp = true;  // project pixels onto [0, 1] after the update
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update of `x` in place.
template <typename T>
void adam_step(BasicTensor<T>& x, const BasicTensor<T>& grad, AdamState& state,
               const AdamParams& p = {}) {
  x.require_same_dims(grad, "adam_step");
  if (state.m.empty()) {
    state.m.assign(x.size(), 0.0);
    state.v.assign(x.size(), 0.0);
  }
  if (state.m.size() != x.size()) throw ShapeError("adam_step: state size does not match image");
  ++state.t;
  const double c1 = 1.0 - std::pow(p.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(p.beta2, double(state.t));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double g = grad[i];
    state.m[i] = p.beta1 * state.m[i] + (1.0 - p.beta1) * g;
    state.v[i] = p.beta2 * state.v[i] + (1.0 - p.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    double next = double(x[i]) - p.lr * mhat / (std::sqrt(vhat) + p.eps);
    if (p.clamp) next = std::clamp(next, 0.0, 1.0);
    x[i] = T(next);
  }
}

/// Loss value and gradient at a point, plus whatever the caller wants to keep.
template <typename T, typename Extra>
struct Evaluation {
  double loss = 0.0;
  BasicTensor<T> grad;
  Extra extra{};
};

struct LbfgsParams {
  double lr = 1.0;             // first trial step moves the largest pixel by lr
  std::size_t history = 10;
  double armijo_c1 = 1e-4;
  std::size_t max_backtracks = 20;
  bool clamp = true;
};

/// Limited-memory BFGS with Armijo backtracking, projected onto [0, 1].
template <typename T, typename Extra>
class Lbfgs {
 public:
  using Eval = Evaluation<T, Extra>;
  using Objective = std::function<Eval(const BasicTensor<T>&)>;

  explicit Lbfgs(LbfgsParams params = {}) : p_(params) {}

  /// Moves `x` along the quasi-Newton direction. Returns the evaluation at the
  /// accepted point, or nullopt (x unchanged, memory reset) when no trial step
  /// decreased the loss enough.
  std::optional<Eval> step(BasicTensor<T>& x, const Eval& at_x, const Objective& objective) {
    const std::size_t n = x.size();
    std::vector<double> g(n), d(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = at_x.grad[i];
    // Coordinates held at a bound by the gradient do not move.
    std::vector<bool> active(n, false);
    if (p_.clamp)
      for (std::size_t i = 0; i < n; ++i)
        active[i] = (x[i] <= T(0) && g[i] > 0.0) || (x[i] >= T(1) && g[i] < 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (active[i]) g[i] = 0.0;
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    if (gmax == 0.0) return std::nullopt;

    direction(g, d, gmax);
    for (std::size_t i = 0; i < n; ++i)
      if (active[i]) d[i] = 0.0;
    if (!(dot(g, d) < 0.0)) {
      memory_.clear();
      direction(g, d, gmax);
    }

    double t = 1.0;
    BasicTensor<T> trial(x.dims());
    for (std::size_t k = 0; k <= p_.max_backtracks; ++k, t *= 0.5) {
      double moved = 0.0;  // g . (trial - x), the projected directional change
      for (std::size_t i = 0; i < n; ++i) {
        double v = double(x[i]) + t * d[i];
        if (p_.clamp) v = std::clamp(v, 0.0, 1.0);
        trial[i] = T(v);
        moved += g[i] * (double(trial[i]) - double(x[i]));
      }
      if (moved >= 0.0) continue;
      Eval next = objective(trial);
      if (next.loss <= at_x.loss + p_.armijo_c1 * moved) {
        remember(x, trial, at_x.grad, next.grad);
        x = trial;
        return next;
      }
    }
    memory_.clear();
    return std::nullopt;
  }

 private:
  struct Pair {
    std::vector<double> s, y;
    double rho;
  };

  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
  }

  // Two-loop recursion: d = -H g.
  void direction(const std::vector<double>& g, std::vector<double>& d, double gmax) const {
    d = g;
    if (memory_.empty()) {
      for (auto& v : d) v *= -p_.lr / gmax;
      return;
    }
    std::vector<double> alpha(memory_.size());
    for (std::size_t k = memory_.size(); k-- > 0;) {
      alpha[k] = memory_[k].rho * dot(memory_[k].s, d);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= alpha[k] * memory_[k].y[i];
    }
    const auto& last = memory_.back();
    const double gamma = dot(last.s, last.y) / dot(last.y, last.y);
    for (auto& v : d) v *= gamma;
    for (std::size_t k = 0; k < memory_.size(); ++k) {
      const double beta = memory_[k].rho * dot(memory_[k].y, d);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += (alpha[k] - beta) * memory_[k].s[i];
    }
    for (auto& v : d) v = -v;
  }

  void remember(const BasicTensor<T>& x, const BasicTensor<T>& x_new, const BasicTensor<T>& g,
                const BasicTensor<T>& g_new) {
    Pair pair{std::vector<double>(x.size()), std::vector<double>(x.size()), 0.0};
    for (std::size_t i = 0; i < x.size(); ++i) {
      pair.s[i] = double(x_new[i]) - double(x[i]);
      pair.y[i] = double(g_new[i]) - double(g[i]);
    }
    const double sy = dot(pair.s, pair.y);
    if (!(sy > 1e-12)) return;  // curvature condition fails; keep the old memory
    pair.rho = 1.0 / sy;
    memory_.push_back(std::move(pair));
    if (memory_.size() > p_.history) memory_.pop_front();
  }

  LbfgsParams p_;
  std::deque<Pair> memory_;
};

}  // namespace pentimento
