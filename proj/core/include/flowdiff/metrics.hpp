#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdiff/tensor.hpp"

namespace flowdiff {

// 10 log10(peak^2 / MSE); +inf for identical inputs. Inputs are images or
// batches of equal shape.
double psnr(const Tensor& x, const Tensor& ref, double peak = 1.0);

// Mean local SSIM over valid (fully interior) 7x7 windows with uniform
// weights, C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, channels averaged.
// Inputs are (C, H, W) images; H and W must be >= 7.
double ssim(const Tensor& x, const Tensor& ref, double peak = 1.0);

// Maps a (C, H, W) image to a feature vector. The default embedding
// average-pools to 8x8 and flattens.
using EmbeddingFn = std::function<std::vector<double>(const Tensor&)>;
EmbeddingFn default_embedding();

// Frechet distance between Gaussians moment-fitted to the embedded sample
// sets: ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)), the matrix square
// root taken by symmetric eigendecomposition with negative eigenvalues
// clamped to zero. Covariances are the unbiased sample estimates.
double frechet_gaussian(const std::vector<Tensor>& samples_a, const std::vector<Tensor>& samples_b,
                        const EmbeddingFn& embed = default_embedding());

struct MetricReport {
  struct PerImage {
    std::string id;
    double psnr_db = 0.0;
    double ssim = 0.0;
  };
  std::vector<PerImage> per_image;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double stderr_psnr = 0.0;
  double stderr_ssim = 0.0;
  std::optional<double> frechet;
  std::int64_t sample_count = 0;
};

// Fills mean/stderr/sample_count from per_image. Entries at the +inf PSNR
// sentinel are excluded from the PSNR aggregates (the sentinel is reported
// only when every entry sits there).
void compute_aggregates(MetricReport& report);

// PSNR values serialize as numbers, the +inf sentinel as the string "+inf".
nlohmann::json metric_report_to_json(const MetricReport& report);

}  // namespace flowdiff
