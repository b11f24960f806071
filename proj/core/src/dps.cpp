#include "flowdiff/dps.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "flowdiff/errors.hpp"

namespace flowdiff {

std::string to_string(ZetaMode m) {
  return m == ZetaMode::fixed ? "fixed" : "residual_normalized";
}

ZetaMode zeta_mode_from_string(const std::string& s) {
  if (s == "fixed") return ZetaMode::fixed;
  if (s == "residual_normalized") return ZetaMode::residual_normalized;
  throw ConfigError("unknown zeta_mode '" + s + "' (expected fixed or residual_normalized)");
}

void DPSConfig::validate() const {
  if (n_steps < 10) throw ConfigError("dps.n_steps must be >= 10");
  if (!(zeta >= 0.0)) throw ConfigError("dps.zeta must be >= 0");
}

namespace {

// Measurement gradient plus, optionally, the per-sample residual norms
// ||y - f(x0_hat)|| recovered from the log-likelihood values.
Tensor guidance_grad(const ScoreModel& model, const DiffusionSpec& spec, const Tensor& x_t,
                     std::span<const double> t, const Tensor& y01, const ForwardModel& fm,
                     std::vector<double>* residual_norms) {
  require_rank(x_t, 4, "measurement gradient");
  const std::int64_t b = x_t.dim(0);
  if (!(t.size() == 1 || t.size() == static_cast<std::size_t>(b)))
    throw ShapeError("measurement gradient: t must have batch size or 1 entries");

  Tensor x0_d = tweedie_x0(model, spec, x_t, t);
  Tensor x0_img = from_diffusion_space(x0_d);
  Tensor v_img = log_likelihood_grad(fm, x0_img, y01);
  if (residual_norms) {
    const auto ll = log_likelihood(fm, x0_img, y01);
    residual_norms->resize(ll.size());
    for (std::size_t i = 0; i < ll.size(); ++i)
      (*residual_norms)[i] = fm.sigma_n * std::sqrt(std::max(0.0, -2.0 * ll[i]));
  }

  // Chain rule through x0_img = (x0_d + 1)/2 and the Tweedie map
  // x0_d = (x_t + (1-alpha) s)/sqrt(alpha): the VJP of the latter is
  // (v + (1-alpha) J_s^T v)/sqrt(alpha).
  Tensor v_d = v_img;
  v_d *= 0.5;
  Tensor jv = model.score_vjp(spec, x_t, t, v_d);

  Tensor out(x_t.shape());
  const std::int64_t stride = x_t.numel() / b;
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const double ti = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(bi)];
    const double alpha = spec.alpha(ti);
    const double one_minus = 1.0 - alpha;
    const double inv_sqrt = 1.0 / std::sqrt(alpha);
    for (std::int64_t i = 0; i < stride; ++i) {
      const std::int64_t k = bi * stride + i;
      out[k] = (v_d[k] + one_minus * jv[k]) * inv_sqrt;
    }
  }
  return out;
}

}  // namespace

Tensor measurement_log_likelihood_grad(const ScoreModel& model, const DiffusionSpec& spec,
                                       const Tensor& x_t, std::span<const double> t,
                                       const Tensor& y01, const ForwardModel& fm) {
  return guidance_grad(model, spec, x_t, t, y01, fm, nullptr);
}

DpsResult dps_sample(const ScoreModel& model, const DiffusionSpec& spec, const Tensor& y01,
                     const ForwardModel& fm, const DPSConfig& cfg, RngStream& rng) {
  cfg.validate();
  require_rank(y01, 4, "dps_sample observation");
  if (!y01.all_finite()) throw NonFiniteError("dps_sample: observation contains non-finite values");

  DiffusionSpec run_spec = spec;
  run_spec.n_steps = cfg.n_steps;
  run_spec.validate();

  DpsResult res;
  if (cfg.zeta == 0.0) {
    // The zeta = 0 diagnostic must match unconditional sampling bit for bit,
    // so it takes the literal null-guide path rather than adding zeros.
    res.x_raw = reverse_sde_integrate(model, run_spec, y01.shape(), rng, nullptr);
  } else {
    const bool normalized = cfg.zeta_mode == ZetaMode::residual_normalized;
    ScoreGuide guide = [&](const Tensor& x, double t) -> Tensor {
      const std::array<double, 1> ts{t};
      std::vector<double> rnorm;
      Tensor g = guidance_grad(model, run_spec, x, ts, y01, fm, normalized ? &rnorm : nullptr);
      const std::int64_t b = x.dim(0);
      const std::int64_t stride = x.numel() / b;
      for (std::int64_t bi = 0; bi < b; ++bi) {
        double scale = cfg.zeta;
        if (normalized) scale = cfg.zeta / std::max(rnorm[static_cast<std::size_t>(bi)], 1e-12);
        for (std::int64_t i = 0; i < stride; ++i) g[bi * stride + i] *= scale;
      }
      return g;
    };
    res.x_raw = reverse_sde_integrate(model, run_spec, y01.shape(), rng, &guide);
  }

  res.image01 = from_diffusion_space(res.x_raw);
  std::int64_t clamped = 0;
  for (auto& v : res.image01.vec()) {
    if (v < 0.0) {
      v = 0.0;
      ++clamped;
    } else if (v > 1.0) {
      v = 1.0;
      ++clamped;
    }
  }
  res.clamp_fraction =
      static_cast<double>(clamped) / static_cast<double>(res.image01.numel());
  return res;
}

ReconstructionReport reconstruct_batch(const ScoreModel& model, const DiffusionSpec& spec,
                                       const Dataset& dataset, const ForwardModel& fm,
                                       const DPSConfig& cfg) {
  cfg.validate();
  ReconstructionReport rep;
  const auto& shape = dataset.image_shape();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const std::string& id = dataset.id(i);
    Tensor y = dataset.observation(i).reshaped({1, shape[0], shape[1], shape[2]});
    RngStream rng(cfg.seed, fnv1a(id));
    DpsResult r = dps_sample(model, spec, y, fm, cfg, rng);

    Reconstruction rec;
    rec.id = id;
    rec.image01 = r.image01.reshaped(shape);
    rec.clamp_fraction = r.clamp_fraction;

    if (dataset.has_references()) {
      MetricReport::PerImage pi;
      pi.id = id;
      pi.psnr_db = psnr(rec.image01, dataset.reference(i));
      // SSIM needs a full 7x7 window; smaller images report 0.
      pi.ssim = (shape[1] >= 7 && shape[2] >= 7) ? ssim(rec.image01, dataset.reference(i)) : 0.0;
      rep.metrics.per_image.push_back(std::move(pi));
    }
    rep.images.push_back(std::move(rec));
  }
  compute_aggregates(rep.metrics);
  return rep;
}

}  // namespace flowdiff
