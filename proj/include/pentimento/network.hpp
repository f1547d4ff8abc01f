#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "error.hpp"
#include "ops.hpp"
#include "tensor.hpp"
#include "weights.hpp"

namespace pentimento {

enum class LayerKind { conv, relu, pool };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::size_t window = 2;  // pool only; stride equals window

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Ordered layer list of a feed-forward feature extractor. Conv layers take
/// their weights from the record of the same name.
struct NetworkSpec {
  std::vector<LayerSpec> layers;
  Padding padding = Padding::reflect;

  static constexpr std::size_t kInputChannels = 3;

  /// VGG-16 convolutional prefix: conv1_1 .. conv5_3, each followed by a ReLU
  /// (relu{b}_{i}) and each of the first four blocks closed by a 2x2 average
  /// pool (pool{b}).
  static NetworkSpec vgg16() {
    constexpr std::array<int, 5> convs_per_block{2, 2, 3, 3, 3};
    NetworkSpec spec;
    for (int b = 1; b <= 5; ++b) {
      for (int i = 1; i <= convs_per_block[b - 1]; ++i) {
        const std::string suffix = std::to_string(b) + "_" + std::to_string(i);
        spec.layers.push_back({"conv" + suffix, LayerKind::conv});
        spec.layers.push_back({"relu" + suffix, LayerKind::relu});
      }
      if (b < 5) spec.layers.push_back({"pool" + std::to_string(b), LayerKind::pool, 2});
    }
    return spec;
  }

  /// Comma-separated `kind:name` tokens, pools as `pool<window>:name`, e.g.
  /// "conv:c1,relu:r1,pool2:p1". Used for the `layers` weight-file metadata key.
  std::string serialize() const {
    std::string out;
    for (const auto& l : layers) {
      if (!out.empty()) out += ',';
      switch (l.kind) {
        case LayerKind::conv: out += "conv:"; break;
        case LayerKind::relu: out += "relu:"; break;
        case LayerKind::pool: out += "pool" + std::to_string(l.window) + ":"; break;
      }
      out += l.name;
    }
    if (padding == Padding::zero) out += ",padding:zero";
    return out;
  }

  static NetworkSpec parse(std::string_view text) {
    NetworkSpec spec;
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find(',', start);
      if (end == std::string_view::npos) end = text.size();
      const std::string_view token = text.substr(start, end - start);
      start = end + 1;
      if (token.empty()) continue;
      const auto colon = token.find(':');
      if (colon == std::string_view::npos)
        throw ConfigError("layer token '" + std::string(token) + "' is not kind:name");
      const std::string_view kind = token.substr(0, colon);
      const std::string name(token.substr(colon + 1));
      if (kind == "padding") {
        if (name == "zero") spec.padding = Padding::zero;
        else if (name == "reflect") spec.padding = Padding::reflect;
        else throw ConfigError("unknown padding '" + name + "'");
      } else if (kind == "conv") {
        spec.layers.push_back({name, LayerKind::conv});
      } else if (kind == "relu") {
        spec.layers.push_back({name, LayerKind::relu});
      } else if (kind.starts_with("pool")) {
        std::size_t window = 2;
        const auto digits = kind.substr(4);
        if (!digits.empty()) {
          auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), window);
          if (ec != std::errc() || ptr != digits.data() + digits.size() || window == 0)
            throw ConfigError("bad pool window in '" + std::string(token) + "'");
        }
        spec.layers.push_back({name, LayerKind::pool, window});
      } else {
        throw ConfigError("unknown layer kind '" + std::string(kind) + "'");
      }
    }
    return spec;
  }

  /// The spec named by the store's `layers` metadata, else VGG-16.
  static NetworkSpec for_weights(const WeightStore& weights) {
    if (auto text = weights.metadata_value("layers")) return parse(*text);
    return vgg16();
  }

  std::optional<std::size_t> index_of(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return i;
    return std::nullopt;
  }

  std::string names() const {
    std::string out;
    for (const auto& l : layers) out += (out.empty() ? "" : ", ") + l.name;
    return out;
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Maps [0, 1] pixels to the value range the weights were trained on:
/// x * scale - mean[channel].
struct InputTransform {
  double scale = 1.0;
  std::array<double, 3> mean{0.0, 0.0, 0.0};

  /// Reads `input_scale` and `mean_r`/`mean_g`/`mean_b`. When means are given
  /// without a scale, pixels are taken to the [0, 255] range.
  static InputTransform from_metadata(const WeightStore& weights) {
    InputTransform t;
    auto number = [&](const char* key) -> std::optional<double> {
      auto v = weights.metadata_value(key);
      if (!v) return std::nullopt;
      try {
        std::size_t used = 0;
        double d = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument(key);
        return d;
      } catch (const std::exception&) {
        throw ConfigError(std::string("metadata '") + key + "' is not a number: " + *v);
      }
    };
    const std::array<const char*, 3> keys{"mean_r", "mean_g", "mean_b"};
    bool any_mean = false;
    for (std::size_t c = 0; c < 3; ++c)
      if (auto m = number(keys[c])) {
        t.mean[c] = *m;
        any_mean = true;
      }
    if (auto s = number("input_scale")) t.scale = *s;
    else if (any_mean) t.scale = 255.0;
    return t;
  }
};

/// Named activations captured from one forward pass, in request order.
template <typename T>
class BasicTapSet {
 public:
  using Entry = std::pair<std::string, BasicTensor<T>>;

  void set(std::string name, BasicTensor<T> value) {
    for (auto& [n, v] : entries_)
      if (n == name) {
        v = std::move(value);
        return;
      }
    entries_.emplace_back(std::move(name), std::move(value));
  }
  const BasicTensor<T>* find(std::string_view name) const {
    for (const auto& [n, v] : entries_)
      if (n == name) return &v;
    return nullptr;
  }
  const BasicTensor<T>& at(std::string_view name) const {
    if (auto* v = find(name)) return *v;
    throw ConfigError("no tap named '" + std::string(name) + "'");
  }
  bool contains(std::string_view name) const { return find(name) != nullptr; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  friend bool operator==(const BasicTapSet&, const BasicTapSet&) = default;

 private:
  std::vector<Entry> entries_;
};

using TapSet = BasicTapSet<float>;

/// Network input and every layer output up to some depth.
template <typename T>
struct ForwardTrace {
  Dims image_dims;
  BasicTensor<T> input;                   // after InputTransform
  std::vector<BasicTensor<T>> outputs;    // outputs[i] is layer i's output
};

/// A validated network with weights converted to T. Immutable after
/// construction; forward and backward calls are reentrant.
template <typename T>
class BasicFeatureNet {
 public:
  BasicFeatureNet(NetworkSpec spec, const WeightStore& weights)
      : spec_(std::move(spec)), transform_(InputTransform::from_metadata(weights)) {
    std::size_t channels = NetworkSpec::kInputChannels;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& layer = spec_.layers[i];
      if (layer.name.empty()) throw ConfigError("layer " + std::to_string(i) + " has no name");
      if (spec_.index_of(layer.name) != i)
        throw ConfigError("duplicate layer name '" + layer.name + "'");
      if (layer.kind == LayerKind::pool && layer.window == 0)
        throw ConfigError("pool layer '" + layer.name + "' has zero window");
      if (layer.kind != LayerKind::conv) {
        params_.emplace_back();
        continue;
      }
      auto params = weights.conv(layer.name, spec_.padding);
      if (params.c_in() != channels)
        throw ConfigError("layer '" + layer.name + "' expects " + std::to_string(params.c_in()) +
                          " input channels but receives " + std::to_string(channels));
      channels = params.c_out();
      params_.push_back(params.template cast<T>());
    }
  }

  /// Network spec taken from the weights' metadata (VGG-16 by default).
  explicit BasicFeatureNet(const WeightStore& weights)
      : BasicFeatureNet(NetworkSpec::for_weights(weights), weights) {}

  const NetworkSpec& spec() const noexcept { return spec_; }
  const InputTransform& transform() const noexcept { return transform_; }

  /// Layer output dims for an image of the given dims; throws ShapeError when
  /// some layer cannot accept its input.
  std::vector<Dims> layer_dims(const Dims& image) const {
    check_image(image);
    std::vector<Dims> dims;
    Dims d = image;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const auto& layer = spec_.layers[i];
      try {
        if (layer.kind == LayerKind::conv) d = conv2d_output_dims(d, params_[i]);
        else if (layer.kind == LayerKind::pool) d = avg_pool_output_dims(d, layer.window, layer.window);
      } catch (const ShapeError& e) {
        throw ShapeError("layer '" + layer.name + "': " + e.what());
      }
      dims.push_back(d);
    }
    return dims;
  }

  std::size_t tap_index(std::string_view name) const {
    auto idx = spec_.index_of(name);
    if (!idx)
      throw ConfigError("unknown tap '" + std::string(name) + "'; valid layers: " + spec_.names());
    return *idx;
  }

  /// Runs layers [0, depth).
  ForwardTrace<T> trace(const BasicTensor<T>& image, std::size_t depth) const {
    layer_dims(image.dims());
    depth = std::min(depth, spec_.layers.size());
    ForwardTrace<T> tr{image.dims(), preprocess(image), {}};
    tr.outputs.reserve(depth);
    for (std::size_t i = 0; i < depth; ++i) {
      const BasicTensor<T>& in = i == 0 ? tr.input : tr.outputs.back();
      tr.outputs.push_back(apply(i, in));
    }
    return tr;
  }

  BasicTapSet<T> forward_with_taps(const BasicTensor<T>& image,
                                   const std::vector<std::string>& taps) const {
    std::size_t depth = 0;
    for (const auto& t : taps) depth = std::max(depth, tap_index(t) + 1);
    const auto tr = trace(image, depth);
    return taps_from(tr, taps);
  }

  BasicTapSet<T> taps_from(const ForwardTrace<T>& tr, const std::vector<std::string>& taps) const {
    BasicTapSet<T> out;
    for (const auto& t : taps) {
      const std::size_t idx = tap_index(t);
      if (idx >= tr.outputs.size()) throw ConfigError("tap '" + t + "' beyond traced depth");
      out.set(t, tr.outputs[idx]);
    }
    return out;
  }

  /// Gradient at the image of a scalar whose gradients at the tapped layers
  /// are `tap_grads`. Contributions from several taps add.
  BasicTensor<T> backward(const ForwardTrace<T>& tr, const BasicTapSet<T>& tap_grads) const {
    std::size_t depth = 0;
    for (const auto& [name, g] : tap_grads) {
      const std::size_t idx = tap_index(name);
      if (idx >= tr.outputs.size()) throw ConfigError("tap '" + name + "' beyond traced depth");
      if (g.dims() != tr.outputs[idx].dims())
        throw ShapeError("gradient for tap '" + name + "' has dims " + g.dims().str() +
                         ", activation has " + tr.outputs[idx].dims().str());
      depth = std::max(depth, idx + 1);
    }
    if (depth == 0) return BasicTensor<T>(tr.image_dims);

    std::optional<BasicTensor<T>> grad;
    for (std::size_t i = depth; i-- > 0;) {
      if (auto* g = tap_grads.find(spec_.layers[i].name)) {
        if (grad) *grad += *g;
        else grad = *g;
      }
      if (!grad) continue;
      const BasicTensor<T>& in = i == 0 ? tr.input : tr.outputs[i - 1];
      grad = apply_backward(i, *grad, in);
    }
    BasicTensor<T> out = std::move(*grad);
    out *= T(transform_.scale);
    return out;
  }

  BasicTensor<T> backward_to_input(const BasicTensor<T>& image,
                                   const BasicTapSet<T>& tap_grads) const {
    std::size_t depth = 0;
    for (const auto& [name, g] : tap_grads) depth = std::max(depth, tap_index(name) + 1);
    return backward(trace(image, depth), tap_grads);
  }

 private:
  void check_image(const Dims& image) const {
    if (image.n != 1 || image.c != NetworkSpec::kInputChannels)
      throw ShapeError("network input must be (1, 3, h, w), got " + image.str());
  }

  BasicTensor<T> preprocess(const BasicTensor<T>& image) const {
    BasicTensor<T> out(image.dims());
    for (std::size_t c = 0; c < image.dims().c; ++c) {
      const auto src = image.plane(0, c);
      auto dst = out.plane(0, c);
      for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = T(double(src[i]) * transform_.scale - transform_.mean[c]);
    }
    return out;
  }

  BasicTensor<T> apply(std::size_t i, const BasicTensor<T>& in) const {
    const auto& layer = spec_.layers[i];
    switch (layer.kind) {
      case LayerKind::conv: return conv2d_forward(in, params_[i]);
      case LayerKind::relu: return relu_forward(in);
      case LayerKind::pool: return avg_pool_forward(in, layer.window, layer.window);
    }
    return in;
  }

  BasicTensor<T> apply_backward(std::size_t i, const BasicTensor<T>& grad,
                                const BasicTensor<T>& in) const {
    const auto& layer = spec_.layers[i];
    switch (layer.kind) {
      case LayerKind::conv: return conv2d_backward_input(grad, params_[i], in.dims());
      case LayerKind::relu: return relu_backward(grad, in);
      case LayerKind::pool: return avg_pool_backward(grad, in.dims(), layer.window, layer.window);
    }
    return grad;
  }

  NetworkSpec spec_;
  InputTransform transform_;
  std::vector<ConvParams<T>> params_;  // empty entries for non-conv layers
};

using FeatureNet = BasicFeatureNet<float>;

inline TapSet forward_with_taps(const NetworkSpec& spec, const WeightStore& weights,
                                const Tensor& image, const std::vector<std::string>& taps) {
  return FeatureNet(spec, weights).forward_with_taps(image, taps);
}

inline Tensor backward_to_input(const NetworkSpec& spec, const WeightStore& weights,
                                const Tensor& image, const TapSet& tap_grads) {
  return FeatureNet(spec, weights).backward_to_input(image, tap_grads);
}

}  // namespace pentimento
