// pentimento: command-line front end.
//
//   pentimento reconstruct --config cfg.json
//   pentimento prep --in xray.png [--mask mask.png] --out content.png
//   pentimento gradcheck [--seed N]
//   pentimento gram --image img.png --layer conv3_1 [--weights vgg16.nstw]
//   pentimento serve [--port 8712] [--store store] [--weights w.nstw]
//   pentimento random-weights --out tiny.nstw [--seed N]

#include <csignal>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pentimento/pentimento.hpp"
#include "pentimento/service.hpp"

namespace {

using namespace pentimento;

int cmd_reconstruct(const std::string& config_path) {
  const ReconstructionConfig cfg = load_config(config_path);
  RunObserver observer;
  const auto steps = cfg.optimizer.steps;
  observer.on_iteration = [steps](std::size_t k, const LossBreakdown& b) {
    if (k == 1 || k % 25 == 0 || std::int64_t(k) == steps)
      std::printf("step %5zu  total %.6g  content %.6g  style %.6g  tv %.6g\n", k, b.total, b.content,
                  b.style, b.tv);
  };
  const RunReport report = run(cfg, observer);
  std::printf("final image: %s\nreport: %s\n", report.final_image.c_str(),
              (cfg.output_dir / "report.json").c_str());
  return 0;
}

int cmd_prep(const std::string& in, const std::string& mask_path, const std::string& out, bool normalize,
             const std::string& fill, double fill_value, std::size_t size) {
  Image img = load_image(in);
  if (normalize) img = normalize_contrast(img);
  if (!mask_path.empty()) {
    const Mask mask = load_mask(mask_path);
    if (fill == "constant") {
      img = apply_mask(img, mask, MaskFill::constant(float(fill_value)));
    } else {
      const auto result = inpaint_diffusion(img, mask);
      if (!result.converged)
        std::fprintf(stderr, "warning: inpainting stopped at %zu iterations before converging\n",
                     result.iterations);
      img = result.image;
    }
  }
  if (size > 0) img = resize_long_side(img, size);
  save_png(img, out);
  std::printf("wrote %s (%s)\n", out.c_str(), img.dims_str().c_str());
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  bool all_ok = true;
  for (const auto& r : run_gradcheck_suite(seed)) {
    std::printf("%-4s %-34s %4zu/%-4zu within %.0e  max rel err %.3e\n", r.ok() ? "PASS" : "FAIL",
                r.name.c_str(), r.passed, r.checked, r.tolerance, r.max_rel_err);
    all_ok = all_ok && r.ok();
  }
  return all_ok ? 0 : 1;
}

int cmd_gram(const std::string& image_path, const std::string& layer, const std::string& weights_path,
             std::size_t size) {
  const WeightStore weights = load_weights(weights_path);
  const FeatureNet net(weights);
  Image img = load_image(image_path);
  if (size > 0) img = resize_long_side(img, size);
  const auto taps = net.forward_with_taps(to_tensor(img), {layer});
  const GramMatrix g = gram(taps.at(layer), layer);
  Json rows = Json::array();
  for (std::size_t i = 0; i < g.channels; ++i) {
    Json row = Json::array();
    for (std::size_t j = 0; j < g.channels; ++j) row.push_back(g.at(i, j));
    rows.push_back(row);
  }
  std::cout << Json{{"layer", layer}, {"channels", g.channels}, {"gram", rows}}.dump() << "\n";
  return 0;
}

StudioService* g_service = nullptr;

int cmd_serve(ServiceOptions options, int port) {
  StudioService service(std::move(options));
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->http().stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->http().stop();
  });
  const int bound = service.bind("0.0.0.0", port);
  std::printf("pentimento service on :%d (store %s, %zu workers)\n", bound,
              service.options().store.c_str(), service.options().workers);
  std::fflush(stdout);
  service.serve();
  service.shutdown();
  g_service = nullptr;
  return 0;
}

int cmd_random_weights(const std::string& out, std::uint64_t seed, const std::vector<std::size_t>& channels) {
  RandomNetOptions opt;
  opt.seed = seed;
  if (!channels.empty()) opt.channels = channels;
  const WeightStore store = make_random_weights(opt);
  save_weights(store, out);
  std::printf("wrote %s (%zu conv layers, layers=%s)\n", out.c_str(), store.size(),
              store.metadata_value("layers")->c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reconstruct hidden paintings from x-radiographs with neural style transfer"};
  app.require_subcommand(1);

  std::string config_path;
  auto* reconstruct = app.add_subcommand("reconstruct", "run a reconstruction from a JSON config");
  reconstruct->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);

  std::string prep_in, prep_mask, prep_out, prep_fill = "diffusion";
  bool no_normalize = false;
  double fill_value = 0.5;
  std::size_t prep_size = 0;
  auto* prep = app.add_subcommand("prep", "normalize, mask and inpaint a radiograph");
  prep->add_option("--in", prep_in, "radiograph (PNG/JPEG)")->required()->check(CLI::ExistingFile);
  prep->add_option("--mask", prep_mask, "mask PNG, >= 128 marks removal")->check(CLI::ExistingFile);
  prep->add_option("--out", prep_out, "output PNG")->required();
  prep->add_flag("--no-normalize", no_normalize, "skip the 1-99 percentile contrast stretch");
  prep->add_option("--fill", prep_fill, "masked-region fill")->check(CLI::IsMember({"diffusion", "constant"}));
  prep->add_option("--fill-value", fill_value, "value for --fill constant");
  prep->add_option("--size", prep_size, "resize so the long side has this many pixels");

  std::uint64_t seed = 7;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  gradcheck->add_option("--seed", seed, "random instance seed");

  std::string gram_image, gram_layer, gram_weights = "vgg16.nstw";
  std::size_t gram_size = 0;
  auto* gram_cmd = app.add_subcommand("gram", "print the Gram matrix of an image at one layer");
  gram_cmd->add_option("--image", gram_image)->required()->check(CLI::ExistingFile);
  gram_cmd->add_option("--layer", gram_layer)->required();
  gram_cmd->add_option("--weights", gram_weights, "weight file")->check(CLI::ExistingFile);
  gram_cmd->add_option("--size", gram_size, "resize so the long side has this many pixels");

  ServiceOptions service_options = ServiceOptions::from_env();
  int port = default_port();
  std::string static_dir;
  auto* serve = app.add_subcommand("serve", "run the HTTP job service");
  serve->add_option("--port", port, "listen port (PENTIMENTO_PORT)");
  serve->add_option("--store", service_options.store, "store root (PENTIMENTO_STORE)");
  serve->add_option("--weights", service_options.weights_path, "weight file (PENTIMENTO_WEIGHTS)");
  serve->add_option("--workers", service_options.workers, "worker threads (PENTIMENTO_WORKERS)");
  serve->add_option("--static", static_dir, "directory of UI assets to serve at /");

  std::string weights_out;
  std::vector<std::size_t> channels;
  auto* random_weights = app.add_subcommand("random-weights", "write a random-weight test network");
  random_weights->add_option("--out", weights_out)->required();
  random_weights->add_option("--seed", seed);
  random_weights->add_option("--channels", channels, "output channels of each conv")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (*reconstruct) return cmd_reconstruct(config_path);
    if (*prep) return cmd_prep(prep_in, prep_mask, prep_out, !no_normalize, prep_fill, fill_value, prep_size);
    if (*gradcheck) return cmd_gradcheck(seed);
    if (*gram_cmd) return cmd_gram(gram_image, gram_layer, gram_weights, gram_size);
    if (*serve) {
      if (!static_dir.empty()) service_options.static_dir = static_dir;
      return cmd_serve(std::move(service_options), port);
    }
    if (*random_weights) return cmd_random_weights(weights_out, seed, channels);
  } catch (const pentimento::InvalidConfig& e) {
    for (const auto& issue : e.issues()) std::fprintf(stderr, "config: %s: %s\n", issue.field.c_str(), issue.message.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
