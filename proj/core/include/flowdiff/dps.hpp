#pragma once

#include <span>
#include <string>
#include <vector>

#include "flowdiff/dataset.hpp"
#include "flowdiff/diffusion.hpp"
#include "flowdiff/forward_model.hpp"
#include "flowdiff/metrics.hpp"

namespace flowdiff {

enum class ZetaMode { fixed, residual_normalized };

std::string to_string(ZetaMode m);
ZetaMode zeta_mode_from_string(const std::string& s);

struct DPSConfig {
  std::int64_t n_steps = 200;
  // Measurement step size. Positive for posterior sampling; exactly 0 is
  // the documented diagnostic that reduces to unconditional sampling.
  double zeta = 1.0;
  ZetaMode zeta_mode = ZetaMode::residual_normalized;
  std::uint64_t seed = 0;

  void validate() const;  // n_steps >= 10, zeta >= 0
};

// d/dx_t log p(y | x0_hat(x_t)): the measurement gradient taken through the
// full Tweedie chain (score Jacobian included), in diffusion-space units.
// x_t is (B, C, H, W); t has B entries or one broadcast entry; y01 is the
// observation batch in [0,1].
Tensor measurement_log_likelihood_grad(const ScoreModel& model, const DiffusionSpec& spec,
                                       const Tensor& x_t, std::span<const double> t,
                                       const Tensor& y01, const ForwardModel& fm);

struct DpsResult {
  Tensor x_raw;           // final integrator state, diffusion space
  Tensor image01;         // mapped to [0,1] and clamped
  double clamp_fraction;  // fraction of elements clamped by the mapping
};

// Conditional reverse-SDE sampling: the unconditional integrator plus a
// per-step additive score correction zeta * grad log p(y | x0_hat). With
// zeta = 0 the call is bitwise identical to sample_unconditional under the
// same rng.
DpsResult dps_sample(const ScoreModel& model, const DiffusionSpec& spec, const Tensor& y01,
                     const ForwardModel& fm, const DPSConfig& cfg, RngStream& rng);

struct Reconstruction {
  std::string id;
  Tensor image01;  // (C, H, W)
  double clamp_fraction = 0.0;
};

struct ReconstructionReport {
  std::vector<Reconstruction> images;
  MetricReport metrics;  // per-image entries only when references exist
};

// One DPS chain per dataset entry, rng stream keyed by (cfg.seed, id).
// Metrics are computed against references when the dataset has them.
ReconstructionReport reconstruct_batch(const ScoreModel& model, const DiffusionSpec& spec,
                                       const Dataset& dataset, const ForwardModel& fm,
                                       const DPSConfig& cfg);

}  // namespace flowdiff
