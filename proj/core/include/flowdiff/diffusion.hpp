#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "flowdiff/rng.hpp"
#include "flowdiff/tensor.hpp"

namespace flowdiff {

// Variance-preserving SDE with the linear schedule beta(t) = beta_min +
// (beta_max - beta_min) t on t in [0,1]. Marginals: x_t = sqrt(alpha) x0 +
// sqrt(1-alpha) eps with alpha(t) = exp(-int_0^t beta).
//
// All diffusion-side tensors live in [-1,1] space; the [0,1] <-> [-1,1]
// affine map happens at this module's boundary and its constant Jacobian is
// dropped consistently from every reported value.
struct DiffusionSpec {
  double beta_min = 0.1;
  double beta_max = 20.0;
  std::int64_t n_steps = 1000;  // sampler discretization
  double t_min = 1e-3;

  double beta(double t) const { return beta_min + (beta_max - beta_min) * t; }
  double alpha(double t) const;
  void validate() const;
};

// Score function abstraction: either the trainable network (see
// score_network.hpp) or an analytic reference. t has one entry per batch
// element, or a single broadcast entry.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;
  virtual Tensor score(const DiffusionSpec& spec, const Tensor& x,
                       std::span<const double> t) const = 0;
  // v -> J^T v where J = d score / d x, per batch element.
  virtual Tensor score_vjp(const DiffusionSpec& spec, const Tensor& x, std::span<const double> t,
                           const Tensor& v) const = 0;
};

// x_t = sqrt(alpha) x0 + sqrt(1-alpha) eps. Every t must lie in (0, 1].
std::pair<Tensor, Tensor> perturb(const DiffusionSpec& spec, const Tensor& x0,
                                  std::span<const double> t, RngStream& rng);

enum class SMWeighting { g_squared, unweighted };

// Denoising score matching with t ~ U[t_min, 1] per batch element.
// g_squared: mean over the batch of (1/2) beta(t)/(1-alpha(t)) * sum_i
// (eps_hat - eps)_i^2 — the per-image ELBO bound used as the prior loss.
// unweighted: the plain eps mean squared error (mean over batch and
// elements) used for diffusion parameter updates.
double dsm_loss(const ScoreModel& model, const DiffusionSpec& spec, const Tensor& x0,
                SMWeighting weighting, RngStream& rng);

// Optional additive score correction evaluated each integrator step;
// posterior sampling injects its measurement gradient through this hook.
// Returning a tensor of x's shape adds it to the model score.
using ScoreGuide = std::function<Tensor(const Tensor& x, double t)>;

// Euler-Maruyama integration of the reverse SDE from t=1 down to t_min,
// starting from the standard normal prior. Conditional sampling shares this
// exact loop (same rng consumption, same arithmetic) via `guide`; passing
// nullptr reproduces the unconditional path bit for bit.
Tensor reverse_sde_integrate(const ScoreModel& model, const DiffusionSpec& spec,
                             std::vector<std::int64_t> shape, RngStream& rng,
                             const ScoreGuide* guide);

// Unconditional sampling. _raw returns the diffusion-space state; the
// unsuffixed form maps to [0,1] (no clamping).
Tensor sample_unconditional_raw(const ScoreModel& model, const DiffusionSpec& spec,
                                std::vector<std::int64_t> shape, RngStream& rng);
Tensor sample_unconditional(const ScoreModel& model, const DiffusionSpec& spec,
                            std::vector<std::int64_t> shape, RngStream& rng);

struct TraceEstimator {
  enum class Kind { exact, hutchinson };
  Kind kind = Kind::exact;
  int probes = 1;

  static TraceEstimator exact() { return {Kind::exact, 0}; }
  static TraceEstimator hutchinson(int k) { return {Kind::hutchinson, k}; }
};

// Probability-flow ODE log-likelihood, integrated with RK4 from t_min to 1:
// log p(x) = log pi(x(1)) + int div[f - (1/2) g^2 s] dt. x is in diffusion
// space. Exact trace assembles the divergence from per-coordinate VJPs and
// requires flattened dim <= 64; hutchinson(k) uses k Rademacher probes per
// stage. Returns one value per batch element.
std::vector<double> ode_log_likelihood(const ScoreModel& model, const DiffusionSpec& spec,
                                       const Tensor& x, std::int64_t n_steps,
                                       TraceEstimator trace, RngStream& rng);

// Posterior mean of x0 given x_t: (x_t + (1-alpha) s(x_t, t)) / sqrt(alpha).
Tensor tweedie_x0(const ScoreModel& model, const DiffusionSpec& spec, const Tensor& x_t,
                  std::span<const double> t);

// Per-sample dot product of two equally shaped batches.
std::vector<double> per_sample_dot(const Tensor& a, const Tensor& b);

// [0,1] <-> [-1,1] maps used at the module boundary.
Tensor to_diffusion_space(const Tensor& x01);
Tensor from_diffusion_space(const Tensor& xd);

}  // namespace flowdiff
