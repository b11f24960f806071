#include "flowdiff/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "flowdiff/errors.hpp"

namespace flowdiff {

double DiffusionSpec::alpha(double t) const {
  return std::exp(-(beta_min * t + 0.5 * (beta_max - beta_min) * t * t));
}

void DiffusionSpec::validate() const {
  if (!(beta_min > 0.0) || !(beta_max > beta_min)) {
    throw PreconditionError("diffusion schedule requires 0 < beta_min < beta_max");
  }
  if (n_steps < 2) throw PreconditionError("diffusion n_steps must be >= 2");
  if (!(t_min > 0.0) || !(t_min < 1.0)) throw PreconditionError("t_min must lie in (0,1)");
}

namespace {

// Expands a broadcast or per-sample t span to per-sample values, range checked.
std::vector<double> expand_t(std::span<const double> t, std::int64_t batch,
                             const char* what) {
  if (t.size() != 1 && t.size() != static_cast<std::size_t>(batch)) {
    throw ShapeError(std::string(what) + ": t must have 1 or batch entries");
  }
  std::vector<double> out(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    const double tv = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(b)];
    if (!(tv > 0.0) || !(tv <= 1.0)) {
      throw PreconditionError(std::string(what) + ": t must lie in (0,1], got " +
                              std::to_string(tv));
    }
    out[static_cast<std::size_t>(b)] = tv;
  }
  return out;
}

}  // namespace

std::pair<Tensor, Tensor> perturb(const DiffusionSpec& spec, const Tensor& x0,
                                  std::span<const double> t, RngStream& rng) {
  require_rank(x0, 4, "perturb");
  const std::int64_t B = x0.dim(0);
  const auto ts = expand_t(t, B, "perturb");
  Tensor eps(x0.shape());
  rng.fill_normal(eps);
  Tensor x_t(x0.shape());
  const std::int64_t per = x0.numel() / B;
  for (std::int64_t b = 0; b < B; ++b) {
    const double a = spec.alpha(ts[static_cast<std::size_t>(b)]);
    const double sa = std::sqrt(a);
    const double sm = std::sqrt(1.0 - a);
    for (std::int64_t i = 0; i < per; ++i) {
      x_t[b * per + i] = sa * x0[b * per + i] + sm * eps[b * per + i];
    }
  }
  return {std::move(x_t), std::move(eps)};
}

double dsm_loss(const ScoreModel& model, const DiffusionSpec& spec, const Tensor& x0,
                SMWeighting weighting, RngStream& rng) {
  require_rank(x0, 4, "dsm_loss");
  const std::int64_t B = x0.dim(0);
  if (B < 1) throw PreconditionError("dsm_loss: empty batch");
  std::vector<double> ts(static_cast<std::size_t>(B));
  for (auto& tv : ts) tv = rng.next_uniform(spec.t_min, 1.0);
  auto [x_t, eps] = perturb(spec, x0, ts, rng);
  // eps_hat = -sqrt(1-alpha) * s(x_t, t).
  Tensor s = model.score(spec, x_t, ts);
  const std::int64_t per = x0.numel() / B;
  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double a = spec.alpha(ts[static_cast<std::size_t>(b)]);
    const double sm = std::sqrt(1.0 - a);
    double e2 = 0.0;
    for (std::int64_t i = 0; i < per; ++i) {
      const double d = -sm * s[b * per + i] - eps[b * per + i];
      e2 += d * d;
    }
    if (weighting == SMWeighting::g_squared) {
      total += 0.5 * spec.beta(ts[static_cast<std::size_t>(b)]) / (1.0 - a) * e2;
    } else {
      total += e2 / static_cast<double>(per);
    }
  }
  const double loss = total / static_cast<double>(B);
  if (!std::isfinite(loss)) throw NonFiniteError("dsm_loss produced a non-finite value");
  return loss;
}

Tensor reverse_sde_integrate(const ScoreModel& model, const DiffusionSpec& spec,
                             std::vector<std::int64_t> shape, RngStream& rng,
                             const ScoreGuide* guide) {
  if (shape.size() != 4) throw ShapeError("sampler shape must be rank 4");
  spec.validate();
  Tensor x(shape);
  rng.fill_normal(x);
  const std::int64_t N = spec.n_steps;
  const double dt = -(1.0 - spec.t_min) / static_cast<double>(N);
  Tensor noise(shape);
  for (std::int64_t k = 0; k < N; ++k) {
    const double t = 1.0 + dt * static_cast<double>(k);
    const double b = spec.beta(t);
    const double tt[1] = {t};
    Tensor s = model.score(spec, x, tt);
    if (guide) {
      Tensor g = (*guide)(x, t);
      s += g;
    }
    rng.fill_normal(noise);
    const double gdt = std::sqrt(b) * std::sqrt(-dt);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double drift = -0.5 * b * x[i] - b * s[i];
      x[i] += drift * dt + gdt * noise[i];
    }
    if (!x.all_finite()) {
      throw NonFiniteError("reverse SDE diverged at step " + std::to_string(k));
    }
  }
  return x;
}

Tensor sample_unconditional_raw(const ScoreModel& model, const DiffusionSpec& spec,
                                std::vector<std::int64_t> shape, RngStream& rng) {
  return reverse_sde_integrate(model, spec, std::move(shape), rng, nullptr);
}

Tensor sample_unconditional(const ScoreModel& model, const DiffusionSpec& spec,
                            std::vector<std::int64_t> shape, RngStream& rng) {
  return from_diffusion_space(
      reverse_sde_integrate(model, spec, std::move(shape), rng, nullptr));
}

std::vector<double> per_sample_dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "per_sample_dot");
  const std::int64_t B = a.dim(0);
  const std::int64_t per = a.numel() / B;
  std::vector<double> out(static_cast<std::size_t>(B), 0.0);
  for (std::int64_t i = 0; i < B; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < per; ++j) acc += a[i * per + j] * b[i * per + j];
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

namespace {

// Per-sample trace of d score / d x at (x, t).
std::vector<double> score_trace(const ScoreModel& model, const DiffusionSpec& spec,
                                const Tensor& x, std::span<const double> t,
                                const TraceEstimator& trace, RngStream& rng) {
  const std::int64_t B = x.dim(0);
  const std::int64_t per = x.numel() / B;
  std::vector<double> tr(static_cast<std::size_t>(B), 0.0);
  if (trace.kind == TraceEstimator::Kind::exact) {
    if (per > 64) {
      throw PreconditionError("exact trace limited to flattened dim <= 64; use hutchinson");
    }
    Tensor v(x.shape());
    for (std::int64_t i = 0; i < per; ++i) {
      std::fill(v.vec().begin(), v.vec().end(), 0.0);
      for (std::int64_t b = 0; b < B; ++b) v[b * per + i] = 1.0;
      Tensor jv = model.score_vjp(spec, x, t, v);
      for (std::int64_t b = 0; b < B; ++b) tr[static_cast<std::size_t>(b)] += jv[b * per + i];
    }
  } else {
    if (trace.probes < 1) throw PreconditionError("hutchinson needs >= 1 probe");
    Tensor v(x.shape());
    for (int j = 0; j < trace.probes; ++j) {
      for (std::int64_t i = 0; i < v.numel(); ++i) {
        v[i] = (rng.next_u64() & 1) ? 1.0 : -1.0;
      }
      Tensor jv = model.score_vjp(spec, x, t, v);
      const auto dots = per_sample_dot(v, jv);
      for (std::int64_t b = 0; b < B; ++b) {
        tr[static_cast<std::size_t>(b)] += dots[static_cast<std::size_t>(b)] /
                                           static_cast<double>(trace.probes);
      }
    }
  }
  return tr;
}

}  // namespace

std::vector<double> ode_log_likelihood(const ScoreModel& model, const DiffusionSpec& spec,
                                       const Tensor& x, std::int64_t n_steps,
                                       TraceEstimator trace, RngStream& rng) {
  require_rank(x, 4, "ode_log_likelihood");
  if (!x.all_finite()) throw PreconditionError("ode_log_likelihood: non-finite input");
  if (n_steps < 1) throw PreconditionError("ode_log_likelihood: n_steps >= 1");
  const std::int64_t B = x.dim(0);
  const std::int64_t per = x.numel() / B;
  const double h = (1.0 - spec.t_min) / static_cast<double>(n_steps);

  Tensor state = x;
  std::vector<double> ell(static_cast<std::size_t>(B), 0.0);

  // Joint vector field of (x, ell): dx/dt = -beta/2 (x + s),
  // d ell/dt = -beta/2 (d + tr ds/dx).
  auto eval = [&](const Tensor& xs, double t, Tensor& dx, std::vector<double>& dl) {
    const double b = spec.beta(t);
    const double tt[1] = {t};
    Tensor s = model.score(spec, xs, tt);
    dx = Tensor(xs.shape());
    for (std::int64_t i = 0; i < xs.numel(); ++i) dx[i] = -0.5 * b * (xs[i] + s[i]);
    const auto tr = score_trace(model, spec, xs, tt, trace, rng);
    dl.assign(static_cast<std::size_t>(B), 0.0);
    for (std::int64_t bb = 0; bb < B; ++bb) {
      dl[static_cast<std::size_t>(bb)] =
          -0.5 * b * (static_cast<double>(per) + tr[static_cast<std::size_t>(bb)]);
    }
  };

  Tensor k1x, k2x, k3x, k4x, tmp;
  std::vector<double> k1l, k2l, k3l, k4l;
  for (std::int64_t k = 0; k < n_steps; ++k) {
    const double t = spec.t_min + h * static_cast<double>(k);
    eval(state, t, k1x, k1l);
    tmp = state;
    for (std::int64_t i = 0; i < tmp.numel(); ++i) tmp[i] += 0.5 * h * k1x[i];
    eval(tmp, t + 0.5 * h, k2x, k2l);
    tmp = state;
    for (std::int64_t i = 0; i < tmp.numel(); ++i) tmp[i] += 0.5 * h * k2x[i];
    eval(tmp, t + 0.5 * h, k3x, k3l);
    tmp = state;
    for (std::int64_t i = 0; i < tmp.numel(); ++i) tmp[i] += h * k3x[i];
    eval(tmp, t + h, k4x, k4l);
    for (std::int64_t i = 0; i < state.numel(); ++i) {
      state[i] += h / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]);
    }
    for (std::int64_t bb = 0; bb < B; ++bb) {
      const auto ib = static_cast<std::size_t>(bb);
      ell[ib] += h / 6.0 * (k1l[ib] + 2.0 * k2l[ib] + 2.0 * k3l[ib] + k4l[ib]);
    }
    if (!state.all_finite()) {
      throw NonFiniteError("ODE integration diverged at step " + std::to_string(k));
    }
  }

  // log pi(x(1)) for the standard normal prior.
  std::vector<double> out(static_cast<std::size_t>(B), 0.0);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (std::int64_t b = 0; b < B; ++b) {
    double sq = 0.0;
    for (std::int64_t i = 0; i < per; ++i) {
      const double v = state[b * per + i];
      sq += v * v;
    }
    out[static_cast<std::size_t>(b)] =
        -0.5 * sq - 0.5 * static_cast<double>(per) * log2pi + ell[static_cast<std::size_t>(b)];
  }
  return out;
}

Tensor tweedie_x0(const ScoreModel& model, const DiffusionSpec& spec, const Tensor& x_t,
                  std::span<const double> t) {
  require_rank(x_t, 4, "tweedie_x0");
  const std::int64_t B = x_t.dim(0);
  const auto ts = expand_t(t, B, "tweedie_x0");
  Tensor s = model.score(spec, x_t, ts);
  Tensor out(x_t.shape());
  const std::int64_t per = x_t.numel() / B;
  for (std::int64_t b = 0; b < B; ++b) {
    const double a = spec.alpha(ts[static_cast<std::size_t>(b)]);
    if (!(a > 0.0)) {
      throw PreconditionError("tweedie_x0: alpha(t) underflowed; increase t_min");
    }
    const double sa = std::sqrt(a);
    for (std::int64_t i = 0; i < per; ++i) {
      out[b * per + i] = (x_t[b * per + i] + (1.0 - a) * s[b * per + i]) / sa;
    }
  }
  return out;
}

Tensor to_diffusion_space(const Tensor& x01) {
  Tensor out = x01;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 2.0 * out[i] - 1.0;
  return out;
}

Tensor from_diffusion_space(const Tensor& xd) {
  Tensor out = xd;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 0.5 * (out[i] + 1.0);
  return out;
}

}  // namespace flowdiff
