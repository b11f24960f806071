#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdiff/rng.hpp"
#include "flowdiff/tensor.hpp"

namespace flowdiff {

enum class ForwardKind {
  identity,
  gaussian_noise_only,
  gaussian_blur,
  inpainting,
  composite,
};

std::string to_string(ForwardKind k);
ForwardKind forward_kind_from_string(const std::string& s);

// Gaussian blur kernel, normalized to sum 1. Weights are (size, size).
Tensor make_gaussian_kernel(std::int64_t size, double sigma);

// Per-channel 2D correlation with reflect padding (border samples are not
// repeated: index -1 maps to 1, index N maps to N-2). Output shape equals
// input shape. x is (B, C, H, W), kernel (kh, kw).
Tensor convolve2d(const Tensor& x, const Tensor& kernel);
// Adjoint of convolve2d with respect to x under the same padding; this is
// what exact gradients of blur likelihoods flow through.
Tensor convolve2d_adjoint(const Tensor& g, const Tensor& kernel);

// Declarative corruption model: y = f(x) + sigma_n * eps. The deterministic
// part f is linear for every kind; exact adjoints back the likelihood
// gradients. Composite applies its parts' mean maps in order and noise only
// once, at its own level.
struct ForwardModel {
  ForwardKind kind = ForwardKind::identity;
  double sigma_n = 0.0;
  // gaussian_blur
  std::int64_t kernel_size = 0;
  double kernel_sigma = 0.0;
  Tensor kernel;  // derived from (kernel_size, kernel_sigma) at validation
  // inpainting: (C, H, W) or (1, H, W) mask of {0,1}
  Tensor mask;
  // composite
  std::vector<ForwardModel> parts;

  static ForwardModel identity_model(double sigma_n);
  static ForwardModel noise_only(double sigma_n);
  static ForwardModel blur(std::int64_t kernel_size, double kernel_sigma, double sigma_n);
  static ForwardModel inpaint(Tensor mask, double sigma_n);
  static ForwardModel composite_of(std::vector<ForwardModel> parts, double sigma_n);

  // Checks invariants and materializes derived fields (blur kernel). Called
  // by the factory functions and after JSON parsing.
  void validate();
};

// f(x), no noise. x is (B, C, H, W).
Tensor mean_map(const ForwardModel& fm, const Tensor& x);
// Adjoint of the linear map x -> mean_map(fm, x).
Tensor mean_map_adjoint(const ForwardModel& fm, const Tensor& g);
// f(x) + sigma_n * eps, eps drawn from rng in batch order.
Tensor observe(const ForwardModel& fm, const Tensor& x, RngStream& rng);

// -||y - f(x)||^2 / (2 sigma_n^2) per batch element, normalization constant
// omitted. For inpainting the residual is mask-weighted (unobserved pixels
// carry no term). Requires sigma_n > 0.
std::vector<double> log_likelihood(const ForwardModel& fm, const Tensor& x, const Tensor& y);
// d log_likelihood / dx, exact (via the adjoint of f).
Tensor log_likelihood_grad(const ForwardModel& fm, const Tensor& x, const Tensor& y);

// JSON round trip: {"kind": ..., "sigma_n": ..., kind-specific params}.
nlohmann::json forward_model_to_json(const ForwardModel& fm);
ForwardModel forward_model_from_json(const nlohmann::json& j);

}  // namespace flowdiff
