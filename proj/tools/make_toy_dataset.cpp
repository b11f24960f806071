#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "flowdiff/errors.hpp"
#include "flowdiff/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"make_toy_dataset: deterministic glyph corpus for small experiments"};

  std::string out = "toy_dataset";
  flowdiff::ToyDatasetConfig cfg;
  std::int64_t size = 0;
  app.add_option("--out", out, "output directory");
  app.add_option("--count", cfg.count, "number of images");
  app.add_option("--size", size, "square image side (overrides height/width)");
  app.add_option("--height", cfg.height, "image height");
  app.add_option("--width", cfg.width, "image width");
  app.add_option("--seed", cfg.seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  if (size > 0) cfg.height = cfg.width = size;
  try {
    const auto ids = flowdiff::write_toy_dataset(cfg, out);
    std::printf("wrote %zu images (%lldx%lld) to %s\n", ids.size(),
                static_cast<long long>(cfg.height), static_cast<long long>(cfg.width),
                out.c_str());
    return 0;
  } catch (const flowdiff::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const flowdiff::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
