#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "loss.hpp"
#include "prep.hpp"

namespace pentimento {

using Json = nlohmann::json;

enum class OptimizerKind { adam, lbfgs };
enum class InitMode { content, noise };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.02;
  std::int64_t steps = 500;
  std::int64_t snapshot_every = 25;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// How the content radiograph is cleaned up before optimization.
struct PrepConfig {
  bool normalize = true;
  double lo_pct = 1.0;
  double hi_pct = 99.0;
  MaskFill::Mode fill = MaskFill::Mode::diffusion;
  double fill_value = 0.5;
  double tol = 1e-4;
  std::int64_t max_iters = 5000;
  friend bool operator==(const PrepConfig&, const PrepConfig&) = default;

  MaskFill mask_fill() const {
    return {fill, float(fill_value), tol, std::size_t(max_iters)};
  }
};

struct ReconstructionConfig {
  std::filesystem::path content_path;
  std::filesystem::path style_path;
  std::optional<std::filesystem::path> mask_path;
  std::filesystem::path weights_path;
  std::filesystem::path output_dir;
  std::int64_t size = 512;
  LossConfig loss;
  OptimizerConfig optimizer;
  InitMode init = InitMode::content;
  std::uint64_t seed = 0;
  PrepConfig prep;

  friend bool operator==(const ReconstructionConfig&, const ReconstructionConfig&) = default;
};

struct FieldIssue {
  std::string field;
  std::string message;
};

/// A configuration with one or more field-level problems.
class InvalidConfig : public ConfigError {
 public:
  explicit InvalidConfig(std::vector<FieldIssue> issues)
      : ConfigError(summary(issues)), issues_(std::move(issues)) {}
  const std::vector<FieldIssue>& issues() const noexcept { return issues_; }

 private:
  static std::string summary(const std::vector<FieldIssue>& issues) {
    std::string out = "invalid config";
    for (const auto& i : issues) out += "; " + i.field + ": " + i.message;
    return out;
  }
  std::vector<FieldIssue> issues_;
};

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "lbfgs"; }
inline const char* to_string(InitMode m) { return m == InitMode::content ? "content" : "noise"; }
inline const char* to_string(MaskFill::Mode m) {
  return m == MaskFill::Mode::diffusion ? "diffusion" : "constant";
}

/// Field-level validation; empty when the config can run.
inline std::vector<FieldIssue> validate(const ReconstructionConfig& cfg, bool require_paths = true) {
  std::vector<FieldIssue> out;
  if (require_paths) {
    if (cfg.content_path.empty()) out.push_back({"content_path", "required"});
    if (cfg.style_path.empty()) out.push_back({"style_path", "required"});
    if (cfg.weights_path.empty()) out.push_back({"weights_path", "required"});
    if (cfg.output_dir.empty()) out.push_back({"output_dir", "required"});
  }
  if (cfg.size < 64) out.push_back({"size", "must be >= 64"});
  if (cfg.optimizer.steps < 1) out.push_back({"optimizer.steps", "must be >= 1"});
  if (!(cfg.optimizer.lr > 0.0) || !std::isfinite(cfg.optimizer.lr))
    out.push_back({"optimizer.lr", "must be > 0"});
  if (cfg.optimizer.snapshot_every < 1) out.push_back({"optimizer.snapshot_every", "must be >= 1"});
  for (auto& [field, msg] : cfg.loss.issues()) out.push_back({field, msg});
  if (!(cfg.prep.lo_pct < cfg.prep.hi_pct) || cfg.prep.lo_pct < 0 || cfg.prep.hi_pct > 100)
    out.push_back({"prep.lo_pct", "need 0 <= lo_pct < hi_pct <= 100"});
  if (!(cfg.prep.tol > 0.0)) out.push_back({"prep.tol", "must be > 0"});
  if (cfg.prep.max_iters < 1) out.push_back({"prep.max_iters", "must be >= 1"});
  return out;
}

namespace detail {

/// Reads JSON fields while collecting issues instead of throwing on the first.
class FieldReader {
 public:
  FieldReader(const Json& obj, std::string prefix, std::vector<FieldIssue>& issues)
      : obj_(obj), prefix_(std::move(prefix)), issues_(issues) {
    if (!obj_.is_object()) issues_.push_back({prefix_.empty() ? "<root>" : prefix_, "must be an object"});
  }

  bool has(const char* key) const { return obj_.is_object() && obj_.contains(key) && !obj_[key].is_null(); }
  std::string field(const char* key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  template <typename U>
  void get(const char* key, U& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const Json& v = obj_[key];
    try {
      if constexpr (std::is_same_v<U, double>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
        out = v.get<double>();
      } else if constexpr (std::is_same_v<U, std::int64_t>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
        out = v.get<std::int64_t>();
      } else if constexpr (std::is_same_v<U, std::uint64_t>) {
        if (!v.is_number_unsigned()) throw std::invalid_argument("expected a non-negative integer");
        out = v.get<std::uint64_t>();
      } else if constexpr (std::is_same_v<U, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
        out = v.get<bool>();
      } else {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
        out = v.get<std::string>();
      }
    } catch (const std::exception& e) {
      issues_.push_back({field(key), e.what()});
    }
  }

  const Json* object(const char* key) {
    seen_.insert(key);
    if (!has(key)) return nullptr;
    return &obj_[key];
  }

  void reject_unknown() {
    if (!obj_.is_object()) return;
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) issues_.push_back({field(k.c_str()), "unknown field"});
  }

 private:
  const Json& obj_;
  std::string prefix_;
  std::vector<FieldIssue>& issues_;
  std::set<std::string, std::less<>> seen_;
};

}  // namespace detail

/// Parses a config from JSON mirroring ReconstructionConfig field for field.
/// Absent fields keep their defaults; every problem found is reported.
inline ReconstructionConfig config_from_json(const Json& j, bool require_paths = true) {
  ReconstructionConfig cfg;
  std::vector<FieldIssue> issues;
  detail::FieldReader root(j, "", issues);

  std::string s;
  auto path = [&](const char* key, std::filesystem::path& out) {
    s.clear();
    root.get(key, s);
    if (!s.empty()) out = s;
  };
  path("content_path", cfg.content_path);
  path("style_path", cfg.style_path);
  path("weights_path", cfg.weights_path);
  path("output_dir", cfg.output_dir);
  s.clear();
  root.get("mask_path", s);
  if (!s.empty()) cfg.mask_path = s;
  root.get("size", cfg.size);
  root.get("seed", cfg.seed);

  std::string init = to_string(cfg.init);
  root.get("init", init);
  if (init == "content") cfg.init = InitMode::content;
  else if (init == "noise") cfg.init = InitMode::noise;
  else issues.push_back({"init", "must be 'content' or 'noise'"});

  if (const Json* loss = root.object("loss")) {
    detail::FieldReader r(*loss, "loss", issues);
    r.get("alpha", cfg.loss.alpha);
    r.get("beta", cfg.loss.beta);
    r.get("tv_weight", cfg.loss.tv_weight);
    if (const Json* taps = r.object("content_taps")) {
      if (taps->is_array() && std::all_of(taps->begin(), taps->end(), [](const Json& t) { return t.is_string(); }))
        cfg.loss.content_taps = taps->get<std::vector<std::string>>();
      else
        issues.push_back({"loss.content_taps", "expected an array of layer names"});
    }
    if (const Json* taps = r.object("style_taps")) {
      if (!taps->is_array()) {
        issues.push_back({"loss.style_taps", "expected an array of {layer, weight}"});
      } else {
        cfg.loss.style_taps.clear();
        for (std::size_t i = 0; i < taps->size(); ++i) {
          StyleTap tap;
          detail::FieldReader t((*taps)[i], "loss.style_taps[" + std::to_string(i) + "]", issues);
          t.get("layer", tap.layer);
          t.get("weight", tap.weight);
          if (tap.layer.empty()) issues.push_back({t.field("layer"), "required"});
          t.reject_unknown();
          cfg.loss.style_taps.push_back(std::move(tap));
        }
      }
    }
    r.reject_unknown();
  }

  if (const Json* opt = root.object("optimizer")) {
    detail::FieldReader r(*opt, "optimizer", issues);
    std::string kind = to_string(cfg.optimizer.kind);
    r.get("kind", kind);
    if (kind == "adam") cfg.optimizer.kind = OptimizerKind::adam;
    else if (kind == "lbfgs") cfg.optimizer.kind = OptimizerKind::lbfgs;
    else issues.push_back({"optimizer.kind", "must be 'adam' or 'lbfgs'"});
    r.get("lr", cfg.optimizer.lr);
    r.get("steps", cfg.optimizer.steps);
    r.get("snapshot_every", cfg.optimizer.snapshot_every);
    r.reject_unknown();
  }

  if (const Json* prep = root.object("prep")) {
    detail::FieldReader r(*prep, "prep", issues);
    r.get("normalize", cfg.prep.normalize);
    r.get("lo_pct", cfg.prep.lo_pct);
    r.get("hi_pct", cfg.prep.hi_pct);
    std::string fill = to_string(cfg.prep.fill);
    r.get("fill", fill);
    if (fill == "diffusion") cfg.prep.fill = MaskFill::Mode::diffusion;
    else if (fill == "constant") cfg.prep.fill = MaskFill::Mode::constant;
    else issues.push_back({"prep.fill", "must be 'diffusion' or 'constant'"});
    r.get("fill_value", cfg.prep.fill_value);
    r.get("tol", cfg.prep.tol);
    r.get("max_iters", cfg.prep.max_iters);
    r.reject_unknown();
  }
  root.reject_unknown();

  if (issues.empty())
    for (auto& issue : validate(cfg, require_paths)) issues.push_back(std::move(issue));
  if (!issues.empty()) throw InvalidConfig(std::move(issues));
  return cfg;
}

inline Json to_json(const ReconstructionConfig& cfg) {
  Json style = Json::array();
  for (const auto& t : cfg.loss.style_taps) style.push_back({{"layer", t.layer}, {"weight", t.weight}});
  Json j = {
      {"content_path", cfg.content_path.string()},
      {"style_path", cfg.style_path.string()},
      {"mask_path", cfg.mask_path ? Json(cfg.mask_path->string()) : Json(nullptr)},
      {"weights_path", cfg.weights_path.string()},
      {"output_dir", cfg.output_dir.string()},
      {"size", cfg.size},
      {"loss",
       {{"alpha", cfg.loss.alpha},
        {"beta", cfg.loss.beta},
        {"tv_weight", cfg.loss.tv_weight},
        {"content_taps", cfg.loss.content_taps},
        {"style_taps", style}}},
      {"optimizer",
       {{"kind", to_string(cfg.optimizer.kind)},
        {"lr", cfg.optimizer.lr},
        {"steps", cfg.optimizer.steps},
        {"snapshot_every", cfg.optimizer.snapshot_every}}},
      {"init", to_string(cfg.init)},
      {"seed", cfg.seed},
      {"prep",
       {{"normalize", cfg.prep.normalize},
        {"lo_pct", cfg.prep.lo_pct},
        {"hi_pct", cfg.prep.hi_pct},
        {"fill", to_string(cfg.prep.fill)},
        {"fill_value", cfg.prep.fill_value},
        {"tol", cfg.prep.tol},
        {"max_iters", cfg.prep.max_iters}}},
  };
  return j;
}

inline ReconstructionConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  Json j = Json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string() + ": not valid JSON");
  ReconstructionConfig cfg = config_from_json(j);
  // Relative paths are taken from the config file's directory.
  const auto base = path.parent_path();
  for (auto* p : {&cfg.content_path, &cfg.style_path, &cfg.weights_path, &cfg.output_dir})
    if (p->is_relative()) *p = base / *p;
  if (cfg.mask_path && cfg.mask_path->is_relative()) cfg.mask_path = base / *cfg.mask_path;
  return cfg;
}

}  // namespace pentimento
