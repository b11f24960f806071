#pragma once

#include <filesystem>

#include "flowdiff/tensor.hpp"

namespace flowdiff {

// Images are rank-3 tensors (channels, height, width), channels 1 or 3,
// values in [0,1] after loading.

// Reads binary PGM (P5) or PPM (P6), maxval 255 or 65535 (two-byte samples
// are big-endian per the netpbm convention). Values are divided by maxval.
Tensor load_image(const std::filesystem::path& path);

// Writes P5 (1 channel) or P6 (3 channels) with maxval 255, each value
// stored as round(v*255). Out-of-range pixels are an error, never clamped.
void save_image(const Tensor& img, const std::filesystem::path& path);

}  // namespace flowdiff
