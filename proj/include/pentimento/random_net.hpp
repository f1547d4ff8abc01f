#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "network.hpp"
#include "weights.hpp"

namespace pentimento {

struct RandomNetOptions {
  std::vector<std::size_t> channels{8, 8, 16};  // c_out of each conv
  std::size_t kernel = 3;
  std::size_t pool_after = 2;  // insert a 2x2 pool after this many convs; 0 = never
  std::uint64_t seed = 1;
};

/// He-initialized conv stack conv1, relu1, conv2, relu2, [pool1], conv3, ...
/// with its layer list stored in the `layers` metadata, so the network can
/// be rebuilt from the weights alone. Intended for tests and demos where no
/// pretrained weights are available.
inline WeightStore make_random_weights(const RandomNetOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  WeightStore store;
  NetworkSpec spec;
  std::size_t c_in = NetworkSpec::kInputChannels;
  for (std::size_t i = 0; i < opt.channels.size(); ++i) {
    const std::string idx = std::to_string(i + 1);
    const std::size_t c_out = opt.channels[i];
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / double(c_in * opt.kernel * opt.kernel)));
    Tensor kernel(Dims{c_out, c_in, opt.kernel, opt.kernel});
    for (auto& v : kernel.data()) v = float(normal(rng));
    std::vector<float> bias(c_out);
    std::uniform_real_distribution<double> small(-0.05, 0.05);
    for (auto& b : bias) b = float(small(rng));
    store.add_conv("conv" + idx, kernel, bias);
    spec.layers.push_back({"conv" + idx, LayerKind::conv});
    spec.layers.push_back({"relu" + idx, LayerKind::relu});
    if (opt.pool_after && i + 1 == opt.pool_after && i + 1 < opt.channels.size())
      spec.layers.push_back({"pool1", LayerKind::pool, 2});
    c_in = c_out;
  }
  store.set_metadata("source", "random:" + std::to_string(opt.seed));
  store.set_metadata("layers", spec.serialize());
  return store;
}

}  // namespace pentimento
