#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flowdiff/rng.hpp"
#include "flowdiff/tensor.hpp"

namespace flowdiff {

// Deterministic generator of small digit-like glyphs: near-saturated strokes
// (bars, crosses, boxes, diagonals) on a near-black background with jittered
// placement and intensity. Meant as a stand-in corpus for denoising and
// deblurring experiments at sizes around 8x8.
struct ToyDatasetConfig {
  std::int64_t count = 256;
  std::int64_t height = 8;
  std::int64_t width = 8;
  std::uint64_t seed = 0;
};

// One glyph as a (1, H, W) image in [0,1]. Consumes only `rng`.
Tensor toy_glyph(std::int64_t height, std::int64_t width, RngStream& rng);

// Writes cfg.count glyphs as PGM files (ids "toy0000", ...) into out_dir,
// one rng stream per id keyed by (seed, id). Returns the ids in order.
// Identical configs reproduce identical bytes.
std::vector<std::string> write_toy_dataset(const ToyDatasetConfig& cfg,
                                           const std::filesystem::path& out_dir);

}  // namespace flowdiff
