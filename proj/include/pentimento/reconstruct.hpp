#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <stop_token>
#include <string>
#include <vector>

#include "config.hpp"
#include "image.hpp"
#include "loss.hpp"
#include "network.hpp"
#include "optim.hpp"
#include "prep.hpp"
#include "weights.hpp"

namespace pentimento {

/// Starting point of the optimization: a copy of the content image, or
/// uniform [0, 1) noise drawn deterministically from `seed`.
inline Tensor init_image(const ReconstructionConfig& cfg, const Tensor& content) {
  if (cfg.init == InitMode::content) return content;
  std::mt19937_64 rng(cfg.seed);
  Tensor out(content.dims());
  for (auto& v : out.data()) v = float(double(rng() >> 40) * 0x1p-24);
  return out;
}

struct Snapshot {
  std::size_t iteration = 0;  // optimizer steps completed
  std::filesystem::path path;
};

struct RunReport {
  std::vector<LossBreakdown> history;  // loss before each executed step
  double wall_time_s = 0.0;
  std::filesystem::path content_image;
  std::filesystem::path final_image;
  std::vector<Snapshot> snapshots;
  bool converged = false;
  bool cancelled = false;

  double best_loss() const {
    double best = history.empty() ? 0.0 : history.front().total;
    for (const auto& b : history) best = std::min(best, b.total);
    return best;
  }

  /// Running minimum of the total loss.
  std::vector<double> best_so_far() const {
    std::vector<double> out;
    for (const auto& b : history) out.push_back(out.empty() ? b.total : std::min(out.back(), b.total));
    return out;
  }
};

struct RunObserver {
  std::function<void(std::size_t iteration, const LossBreakdown&)> on_iteration;
  std::function<void(const Snapshot&)> on_snapshot;
};

/// The edited content radiograph and the style painting at working size.
struct PreparedInputs {
  Image content;
  Image style;
};

inline PreparedInputs prepare_inputs(const ReconstructionConfig& cfg) {
  Image radiograph, style;
  std::optional<Mask> mask;
  try {
    radiograph = load_image(cfg.content_path);
    style = load_image(cfg.style_path);
    if (cfg.mask_path) mask = load_mask(*cfg.mask_path);
  } catch (const Error& e) {
    throw StageError("load", e.what());
  }
  try {
    Image content = radiograph;
    if (cfg.prep.normalize) content = normalize_contrast(content, cfg.prep.lo_pct, cfg.prep.hi_pct);
    if (mask) content = apply_mask(content, *mask, cfg.prep.mask_fill());
    const auto size = std::size_t(cfg.size);
    return {resize_long_side(content, size), resize_long_side(style, size)};
  } catch (const Error& e) {
    throw StageError("prep", e.what());
  }
}

namespace detail {

inline std::string exact_decimal(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline bool plateaued(const std::vector<LossBreakdown>& history) {
  if (history.size() < 2) return false;
  const std::size_t window = std::max<std::size_t>(1, history.size() / 10);
  double best_before = history.front().total;
  for (std::size_t i = 0; i + window < history.size(); ++i)
    best_before = std::min(best_before, history[i].total);
  double best_after = best_before;
  for (std::size_t i = history.size() - window; i < history.size(); ++i)
    best_after = std::min(best_after, history[i].total);
  return best_before - best_after <= 1e-4 * std::max(1e-12, std::abs(best_before));
}

}  // namespace detail

inline Json to_json(const LossBreakdown& b) {
  return {{"total", b.total}, {"content", b.content}, {"style", b.style}, {"tv", b.tv}};
}

inline Json to_json(const RunReport& r) {
  Json history = Json::array(), snapshots = Json::array();
  for (const auto& b : r.history) history.push_back(to_json(b));
  for (const auto& s : r.snapshots) snapshots.push_back({{"iteration", s.iteration}, {"path", s.path.string()}});
  return {{"steps_executed", r.history.size()},
          {"wall_time_s", r.wall_time_s},
          {"content_image", r.content_image.string()},
          {"final_image", r.final_image.string()},
          {"snapshots", snapshots},
          {"converged", r.converged},
          {"cancelled", r.cancelled},
          {"initial_loss", r.history.empty() ? 0.0 : r.history.front().total},
          {"best_loss", r.best_loss()},
          {"history", history}};
}

/// iteration,total,content,style,tv with shortest round-trip decimals.
inline std::string loss_csv(const RunReport& r) {
  std::string out = "iteration,total,content,style,tv\n";
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    const auto& b = r.history[i];
    out += std::to_string(i) + "," + detail::exact_decimal(b.total) + "," +
           detail::exact_decimal(b.content) + "," + detail::exact_decimal(b.style) + "," +
           detail::exact_decimal(b.tv) + "\n";
  }
  return out;
}

/// Optimizes pixels of the generated image against the content radiograph and
/// the style painting. Writes content.png, snapshot_<k>.png, final.png,
/// report.json and loss.csv into the output directory.
///
/// Cancellation is checked before each step.
inline RunReport run(const ReconstructionConfig& cfg, const RunObserver& observer = {},
                     std::stop_token stop = {}) {
  const auto started = std::chrono::steady_clock::now();
  if (auto issues = validate(cfg); !issues.empty()) throw StageError("config", InvalidConfig(issues).what());

  const PreparedInputs inputs = prepare_inputs(cfg);

  WeightStore weights;
  try {
    weights = load_weights(cfg.weights_path);
  } catch (const Error& e) {
    throw StageError("weights", e.what());
  }

  RunReport report;
  const auto& dir = cfg.output_dir;
  try {
    std::filesystem::create_directories(dir);
    report.content_image = dir / "content.png";
    save_png(inputs.content, report.content_image);
  } catch (const std::exception& e) {
    throw StageError("output", e.what());
  }

  std::optional<FeatureNet> net;
  Tensor content, style;
  TapSet content_taps;
  GramSet<float> style_grams;
  try {
    net.emplace(weights);
    content = to_tensor(inputs.content);
    style = to_tensor(inputs.style);
    content_taps = content_targets(*net, content, cfg.loss);
    style_grams = style_targets(*net, style, cfg.loss);
  } catch (const Error& e) {
    throw StageError("network", e.what());
  }

  using Eval = Evaluation<float, LossBreakdown>;
  auto objective = [&](const Tensor& x) -> Eval {
    auto t = total_loss(x, content_taps, style_grams, cfg.loss, *net);
    return {t.loss, std::move(t.pixel_grad), t.breakdown};
  };

  auto snapshot = [&](const Tensor& x, std::size_t iteration) {
    char name[32];
    std::snprintf(name, sizeof name, "snapshot_%05zu.png", iteration);
    Snapshot snap{iteration, dir / name};
    save_png(from_tensor(x), snap.path);
    report.snapshots.push_back(snap);
    if (observer.on_snapshot) observer.on_snapshot(snap);
  };

  Tensor x = init_image(cfg, content);
  const auto steps = std::size_t(cfg.optimizer.steps);
  const auto every = std::size_t(cfg.optimizer.snapshot_every);
  try {
    Eval eval = objective(x);
    AdamState adam;
    const AdamParams adam_params{cfg.optimizer.lr};
    Lbfgs<float, LossBreakdown> lbfgs(LbfgsParams{cfg.optimizer.lr});
    std::size_t failed_searches = 0;

    for (std::size_t k = 0; k < steps; ++k) {
      if (stop.stop_requested()) {
        report.cancelled = true;
        break;
      }
      report.history.push_back(eval.extra);
      if (observer.on_iteration) observer.on_iteration(k + 1, eval.extra);

      if (cfg.optimizer.kind == OptimizerKind::adam) {
        adam_step(x, eval.grad, adam, adam_params);
        if (k + 1 < steps) eval = objective(x);
      } else if (auto next = lbfgs.step(x, eval, objective)) {
        eval = std::move(*next);
        failed_searches = 0;
      } else if (++failed_searches >= 2) {
        // Two failed line searches in a row, the second from a reset memory:
        // no descent direction makes progress any more.
        report.converged = true;
        snapshot(x, k + 1);
        break;
      }
      if ((k + 1) % every == 0 || k + 1 == steps) snapshot(x, k + 1);
    }
  } catch (const Error& e) {
    throw StageError("optimize", e.what());
  }

  try {
    report.final_image = dir / "final.png";
    save_png(from_tensor(x), report.final_image);
    report.converged = report.converged || detail::plateaued(report.history);
    report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    Json j = to_json(report);
    j["config"] = to_json(cfg);
    write_file_atomic(dir / "report.json", j.dump(2));
    write_file_atomic(dir / "loss.csv", loss_csv(report));
  } catch (const std::exception& e) {
    throw StageError("output", e.what());
  }
  return report;
}

}  // namespace pentimento
