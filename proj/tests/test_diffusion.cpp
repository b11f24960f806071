#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "flowdiff/diffusion.hpp"
#include "flowdiff/errors.hpp"
#include "flowdiff/rng.hpp"
#include "flowdiff/score_network.hpp"
#include "flowdiff/tensor.hpp"
#include "test_support.hpp"

using flowdiff::DiffusionSpec;
using flowdiff::dsm_loss;
using flowdiff::ode_log_likelihood;
using flowdiff::perturb;
using flowdiff::RngStream;
using flowdiff::SMWeighting;
using flowdiff::Tensor;
using flowdiff::TraceEstimator;
using flowdiff_test::GaussianScoreModel;
using flowdiff_test::ZeroScoreModel;

namespace {

// Score of the VP marginal for correlated 2-d data x0 ~ N(0, [[1, rho],
// [rho, 1]]): the marginal keeps a unit diagonal, Sigma_t = [[1, rho a],
// [rho a, 1]], so the Jacobian of the score picks up off-diagonal terms and
// stochastic trace estimates carry real variance.
class CorrelatedScoreModel : public flowdiff::ScoreModel {
 public:
  explicit CorrelatedScoreModel(double rho) : rho_(rho) {}

  Tensor score(const DiffusionSpec& spec, const Tensor& x,
               std::span<const double> t) const override {
    const std::int64_t B = x.dim(0);
    Tensor out = x;
    for (std::int64_t b = 0; b < B; ++b) {
      const double tb = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(b)];
      const double r = rho_ * spec.alpha(tb);
      const double det = 1.0 - r * r;
      const double x0 = x[2 * b], x1 = x[2 * b + 1];
      out[2 * b] = -(x0 - r * x1) / det;
      out[2 * b + 1] = -(x1 - r * x0) / det;
    }
    return out;
  }

  Tensor score_vjp(const DiffusionSpec& spec, const Tensor& x, std::span<const double> t,
                   const Tensor& v) const override {
    const std::int64_t B = x.dim(0);
    Tensor out = v;
    for (std::int64_t b = 0; b < B; ++b) {
      const double tb = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(b)];
      const double r = rho_ * spec.alpha(tb);
      const double det = 1.0 - r * r;
      const double v0 = v[2 * b], v1 = v[2 * b + 1];
      out[2 * b] = -(v0 - r * v1) / det;
      out[2 * b + 1] = -(v1 - r * v0) / det;
    }
    return out;
  }

  double log_density(const DiffusionSpec& spec, double t, double x0, double x1) const {
    const double r = rho_ * spec.alpha(t);
    const double det = 1.0 - r * r;
    const double quad = (x0 * x0 - 2.0 * r * x0 * x1 + x1 * x1) / det;
    return -0.5 * quad - 0.5 * std::log(det) - std::log(2.0 * std::numbers::pi);
  }

 private:
  double rho_;
};

double simpson(const std::function<double(double)>& f, double lo, double hi, int n) {
  double acc = f(lo) + f(hi);
  const double h = (hi - lo) / n;
  for (int i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

Tensor randn(std::vector<std::int64_t> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  RngStream rng(seed);
  rng.fill_normal(t);
  return t;
}

}  // namespace

TEST_CASE("alpha matches direct quadrature of the schedule") {
  DiffusionSpec spec;
  for (double t : {0.05, 0.1, 0.33, 0.5, 0.77, 1.0}) {
    const double integral = simpson([&](double u) { return spec.beta(u); }, 0.0, t, 20000);
    CHECK(spec.alpha(t) == doctest::Approx(std::exp(-integral)).epsilon(1e-8));
  }
}

TEST_CASE("alpha at the endpoint is exp(-10.05)") {
  DiffusionSpec spec;
  CHECK(spec.alpha(1.0) == doctest::Approx(std::exp(-10.05)).epsilon(1e-12));
  CHECK(spec.beta(0.0) == 0.1);
  CHECK(spec.beta(1.0) == 20.0);
}

TEST_CASE("perturbation shrinks to the clean sample as t approaches zero") {
  DiffusionSpec spec;
  const Tensor x0 = randn({2, 1, 2, 2}, 1);
  RngStream rng(2);
  const std::vector<double> ts = {1e-9, 1e-9};
  const auto [x_t, eps] = perturb(spec, x0, ts, rng);
  REQUIRE(x_t.shape() == x0.shape());
  REQUIRE(eps.shape() == x0.shape());
  for (std::int64_t i = 0; i < x0.numel(); ++i) CHECK(std::abs(x_t[i] - x0[i]) < 1e-4);
}

TEST_CASE("perturbation applies the closed-form marginal arithmetic") {
  DiffusionSpec spec;
  const Tensor x0 = randn({3, 1, 2, 2}, 3);
  const std::vector<double> ts = {0.2, 0.5, 0.9};
  RngStream rng(4), replay(4);
  const auto [x_t, eps] = perturb(spec, x0, ts, rng);
  Tensor expected_eps(x0.shape());
  replay.fill_normal(expected_eps);
  const std::int64_t per = x0.numel() / 3;
  for (std::int64_t b = 0; b < 3; ++b) {
    const double a = spec.alpha(ts[static_cast<std::size_t>(b)]);
    for (std::int64_t i = 0; i < per; ++i) {
      const std::int64_t j = b * per + i;
      CHECK(eps[j] == expected_eps[j]);
      CHECK(x_t[j] == std::sqrt(a) * x0[j] + std::sqrt(1.0 - a) * expected_eps[j]);
    }
  }
  CHECK_THROWS_AS((void)perturb(spec, x0, std::vector<double>{0.0, 0.5, 0.5}, rng),
                  flowdiff::PreconditionError);
}

TEST_CASE("a replayed stream predicts the score matching loss exactly") {
  DiffusionSpec spec;
  const GaussianScoreModel model(0.3, 0.8);
  const Tensor x0 = randn({2, 1, 1, 3}, 5);

  for (auto weighting : {SMWeighting::unweighted, SMWeighting::g_squared}) {
    RngStream rng(6), replay(6);
    const double loss = dsm_loss(model, spec, x0, weighting, rng);

    std::vector<double> ts(2);
    for (auto& tv : ts) tv = replay.next_uniform(spec.t_min, 1.0);
    Tensor eps(x0.shape());
    replay.fill_normal(eps);
    double total = 0.0;
    const std::int64_t per = x0.numel() / 2;
    for (std::int64_t b = 0; b < 2; ++b) {
      const double a = spec.alpha(ts[static_cast<std::size_t>(b)]);
      const double mean = std::sqrt(a) * 0.3;
      const double var = 0.8 * 0.8 * a + 1.0 - a;
      double e2 = 0.0;
      for (std::int64_t i = 0; i < per; ++i) {
        const std::int64_t j = b * per + i;
        const double xt = std::sqrt(a) * x0[j] + std::sqrt(1.0 - a) * eps[j];
        const double eps_hat = std::sqrt(1.0 - a) * (xt - mean) / var;
        e2 += (eps_hat - eps[j]) * (eps_hat - eps[j]);
      }
      total += weighting == SMWeighting::g_squared
                   ? 0.5 * spec.beta(ts[static_cast<std::size_t>(b)]) / (1.0 - a) * e2
                   : e2 / static_cast<double>(per);
    }
    CHECK(loss == doctest::Approx(total / 2.0).epsilon(1e-12));
  }
}

TEST_CASE("the analytic score attains the irreducible loss") {
  // For unit-normal data the optimal unweighted loss at time t is alpha(t),
  // so the expectation over t ~ U[t_min, 1] follows by quadrature.
  DiffusionSpec spec;
  const GaussianScoreModel model(0.0, 1.0);
  const double expected =
      simpson([&](double t) { return spec.alpha(t); }, spec.t_min, 1.0, 4000) /
      (1.0 - spec.t_min);

  RngStream data_rng(7), loss_rng(8);
  const int trials = 30;
  std::vector<double> losses;
  for (int k = 0; k < trials; ++k) {
    Tensor x0({256, 1, 1, 4});
    data_rng.fill_normal(x0);
    losses.push_back(dsm_loss(model, spec, x0, SMWeighting::unweighted, loss_rng));
  }
  double mean = 0.0;
  for (double v : losses) mean += v;
  mean /= trials;
  double var = 0.0;
  for (double v : losses) var += (v - mean) * (v - mean);
  var /= trials - 1;
  const double se = std::sqrt(var / trials);
  CHECK(std::abs(mean - expected) <= std::max(4.0 * se, 0.01));
}

TEST_CASE("unconditional samples from the unit-normal score match its moments") {
  DiffusionSpec spec;
  const GaussianScoreModel model(0.0, 1.0);
  RngStream rng(9);
  const Tensor x = flowdiff::sample_unconditional_raw(model, spec, {2500, 1, 2, 2}, rng);
  const auto n = static_cast<double>(x.numel());
  double sum = 0.0, sumsq = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    sum += x[i];
    sumsq += x[i] * x[i];
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 3.0 / std::sqrt(n));
  CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n) + 0.02);
}

TEST_CASE("the [0,1] sampler is the raw sampler pushed through the affine map") {
  DiffusionSpec spec;
  spec.n_steps = 50;
  const GaussianScoreModel model(0.0, 1.0);
  RngStream a(10), b(10);
  const Tensor raw = flowdiff::sample_unconditional_raw(model, spec, {2, 1, 2, 2}, a);
  const Tensor mapped = flowdiff::sample_unconditional(model, spec, {2, 1, 2, 2}, b);
  for (std::int64_t i = 0; i < raw.numel(); ++i)
    CHECK(mapped[i] == doctest::Approx((raw[i] + 1.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("a two-step discretization still runs to completion") {
  DiffusionSpec spec;
  spec.n_steps = 2;
  const GaussianScoreModel model(0.0, 1.0);
  RngStream rng(11);
  const Tensor x = flowdiff::sample_unconditional_raw(model, spec, {4, 1, 1, 2}, rng);
  CHECK(x.all_finite());
}

TEST_CASE("ODE likelihood is exact for unit-normal data") {
  // With beta weighting the probability-flow field of the N(0, I) model
  // vanishes identically, so the integrator must return the standard normal
  // density itself.
  DiffusionSpec spec;
  const GaussianScoreModel model(0.0, 1.0);
  RngStream point_rng(12);
  Tensor x({10, 1, 1, 2});
  for (auto& v : x.vec()) v = point_rng.next_uniform(-2.0, 2.0);
  RngStream rng(13);
  const auto ll = ode_log_likelihood(model, spec, x, 500, TraceEstimator::exact(), rng);
  REQUIRE(ll.size() == 10);
  for (std::size_t b = 0; b < 10; ++b) {
    const double x0 = x[static_cast<std::int64_t>(2 * b)];
    const double x1 = x[static_cast<std::int64_t>(2 * b + 1)];
    const double expected = -0.5 * (x0 * x0 + x1 * x1) - std::log(2.0 * std::numbers::pi);
    CHECK(ll[b] == doctest::Approx(expected).epsilon(1e-2));
  }
}

TEST_CASE("ODE likelihood recovers a correlated Gaussian density") {
  DiffusionSpec spec;
  const CorrelatedScoreModel model(0.8);
  RngStream point_rng(14);
  Tensor x({8, 1, 1, 2});
  for (auto& v : x.vec()) v = point_rng.next_uniform(-1.5, 1.5);
  RngStream rng(15);
  const auto ll = ode_log_likelihood(model, spec, x, 500, TraceEstimator::exact(), rng);
  for (std::size_t b = 0; b < 8; ++b) {
    const double expected = model.log_density(spec, spec.t_min, x[static_cast<std::int64_t>(2 * b)],
                                              x[static_cast<std::int64_t>(2 * b + 1)]);
    CHECK(ll[b] == doctest::Approx(expected).epsilon(1e-2));
  }
}

TEST_CASE("more Hutchinson probes shrink the estimator variance") {
  DiffusionSpec spec;
  const CorrelatedScoreModel model(0.8);
  Tensor x({1, 1, 1, 2});
  x[0] = 0.9;
  x[1] = -0.6;
  const double exact = [&] {
    RngStream rng(16);
    return ode_log_likelihood(model, spec, x, 200, TraceEstimator::exact(), rng)[0];
  }();

  auto collect = [&](int probes, std::uint64_t seed_base) {
    std::vector<double> vals;
    for (int k = 0; k < 40; ++k) {
      RngStream rng(seed_base + static_cast<std::uint64_t>(k));
      vals.push_back(
          ode_log_likelihood(model, spec, x, 200, TraceEstimator::hutchinson(probes), rng)[0]);
    }
    return vals;
  };
  auto variance_about = [&](const std::vector<double>& vals, double center) {
    double acc = 0.0;
    for (double v : vals) acc += (v - center) * (v - center);
    return acc / static_cast<double>(vals.size());
  };

  const auto v1 = collect(1, 1000);
  const auto v8 = collect(8, 2000);
  const double var1 = variance_about(v1, exact);
  const double var8 = variance_about(v8, exact);
  CHECK(var1 > 0.0);
  CHECK(var8 < var1);

  double mean8 = 0.0;
  for (double v : v8) mean8 += v;
  mean8 /= static_cast<double>(v8.size());
  CHECK(mean8 == doctest::Approx(exact).epsilon(0.05));
}

TEST_CASE("the likelihood tail keeps falling far from the data") {
  DiffusionSpec spec;
  const GaussianScoreModel model(0.0, 1.0);
  Tensor near = Tensor::zeros({1, 1, 1, 2});
  Tensor far = Tensor::full({1, 1, 1, 2}, 8.0);
  RngStream rng(17);
  const double ll_near = ode_log_likelihood(model, spec, near, 200, TraceEstimator::exact(), rng)[0];
  const double ll_far = ode_log_likelihood(model, spec, far, 200, TraceEstimator::exact(), rng)[0];
  CHECK(ll_far < ll_near - 30.0);
}

TEST_CASE("Tweedie denoising matches the conjugate posterior mean") {
  DiffusionSpec spec;
  const double sigma0 = 0.7;
  const GaussianScoreModel model(0.0, sigma0);
  const Tensor x_t = randn({2, 1, 1, 3}, 18);
  for (double t : {0.3, 0.8}) {
    const std::vector<double> ts = {t, t};
    const Tensor x0_hat = flowdiff::tweedie_x0(model, spec, x_t, ts);
    const double a = spec.alpha(t);
    const double factor = sigma0 * sigma0 * std::sqrt(a) / (sigma0 * sigma0 * a + 1.0 - a);
    for (std::int64_t i = 0; i < x_t.numel(); ++i)
      CHECK(x0_hat[i] == doctest::Approx(factor * x_t[i]).epsilon(1e-10));
  }

  // t -> 0: the estimate collapses onto the observation.
  const std::vector<double> t0 = {1e-8, 1e-8};
  const Tensor near = flowdiff::tweedie_x0(model, spec, x_t, t0);
  for (std::int64_t i = 0; i < x_t.numel(); ++i)
    CHECK(near[i] == doctest::Approx(x_t[i]).epsilon(1e-5));

  const ZeroScoreModel zero;
  const std::vector<double> th = {0.5, 0.5};
  const Tensor scaled = flowdiff::tweedie_x0(zero, spec, x_t, th);
  const double inv_sqrt_a = 1.0 / std::sqrt(spec.alpha(0.5));
  for (std::int64_t i = 0; i < x_t.numel(); ++i)
    CHECK(scaled[i] == doctest::Approx(inv_sqrt_a * x_t[i]).epsilon(1e-12));
}

TEST_CASE("diffusion-space maps are inverse affine bijections") {
  Tensor x({1, 1, 1, 3});
  x[0] = 0.0;
  x[1] = 0.5;
  x[2] = 1.0;
  const Tensor d = flowdiff::to_diffusion_space(x);
  CHECK(d[0] == -1.0);
  CHECK(d[1] == 0.0);
  CHECK(d[2] == 1.0);
  const Tensor back = flowdiff::from_diffusion_space(d);
  for (std::int64_t i = 0; i < 3; ++i) CHECK(back[i] == x[i]);
}

TEST_CASE("per-sample dot products reduce each batch row") {
  Tensor a({2, 1, 1, 2}), b({2, 1, 1, 2});
  a[0] = 1.0; a[1] = 2.0; a[2] = 3.0; a[3] = 4.0;
  b[0] = 5.0; b[1] = 6.0; b[2] = 7.0; b[3] = 8.0;
  const auto d = flowdiff::per_sample_dot(a, b);
  REQUIRE(d.size() == 2);
  CHECK(d[0] == 17.0);
  CHECK(d[1] == 53.0);
}

TEST_CASE("invalid schedules are rejected") {
  DiffusionSpec bad;
  bad.beta_max = 0.05;  // below beta_min
  CHECK_THROWS_AS(bad.validate(), flowdiff::Error);
  DiffusionSpec steps;
  steps.n_steps = 0;
  CHECK_THROWS_AS(steps.validate(), flowdiff::Error);
  DiffusionSpec tmin;
  tmin.t_min = 0.0;
  CHECK_THROWS_AS(tmin.validate(), flowdiff::Error);
}

TEST_CASE("prior loss routes gradients only to its declared target") {
  flowdiff::ScoreNetworkConfig cfg;
  cfg.channels = 1;
  cfg.height = 4;
  cfg.width = 4;
  cfg.base_channels = 8;
  cfg.emb_dim = 8;
  flowdiff::ScoreNetwork net(cfg);
  RngStream init(19);
  net.init_params(init);
  DiffusionSpec spec;

  Tensor x_hat({2, 1, 4, 4});
  RngStream xr(20);
  for (auto& v : x_hat.vec()) v = xr.next_uniform(0.05, 0.95);

  auto params = net.params();
  flowdiff::nn::zero_grads(params);
  RngStream r1(21);
  const auto res_flow = flowdiff::prior_loss(net, spec, x_hat, flowdiff::GradTarget::flow_input, r1);
  for (auto* p : params)
    for (std::int64_t i = 0; i < p->grad.numel(); ++i) CHECK(p->grad[i] == 0.0);
  CHECK(res_flow.gx_hat.numel() == x_hat.numel());
  CHECK(res_flow.gx_hat.squared_norm() > 0.0);

  RngStream r2(21);
  const auto res_score =
      flowdiff::prior_loss(net, spec, x_hat, flowdiff::GradTarget::score_params, r2);
  CHECK(res_score.loss == res_flow.loss);
  REQUIRE(res_score.gx_hat.shape() == x_hat.shape());
  for (std::int64_t i = 0; i < res_score.gx_hat.numel(); ++i) CHECK(res_score.gx_hat[i] == 0.0);
  double gnorm = 0.0;
  for (auto* p : params) gnorm += p->grad.squared_norm();
  CHECK(gnorm > 0.0);
  flowdiff::nn::zero_grads(params);
}

TEST_CASE("prior loss input gradients match replayed finite differences") {
  flowdiff::ScoreNetworkConfig cfg;
  cfg.channels = 1;
  cfg.height = 1;
  cfg.width = 2;
  cfg.base_channels = 6;
  cfg.emb_dim = 8;
  flowdiff::ScoreNetwork net(cfg);
  RngStream init(22);
  net.init_params(init);
  DiffusionSpec spec;

  Tensor x_hat({2, 1, 1, 2});
  RngStream xr(23);
  for (auto& v : x_hat.vec()) v = xr.next_uniform(0.2, 0.8);

  RngStream g(24);
  const auto res = flowdiff::prior_loss(net, spec, x_hat, flowdiff::GradTarget::flow_input, g);
  double num = 0.0, den = 0.0;
  for (std::int64_t i = 0; i < x_hat.numel(); ++i) {
    Tensor hi = x_hat, lo = x_hat;
    hi[i] += 1e-5;
    lo[i] -= 1e-5;
    RngStream ra(24), rb(24);
    const double fh = flowdiff::prior_loss(net, spec, hi, flowdiff::GradTarget::flow_input, ra).loss;
    const double fl = flowdiff::prior_loss(net, spec, lo, flowdiff::GradTarget::flow_input, rb).loss;
    const double fd = (fh - fl) / 2e-5;
    num += (fd - res.gx_hat[i]) * (fd - res.gx_hat[i]);
    den += fd * fd;
  }
  CHECK(std::sqrt(num) <= 1e-3 * std::sqrt(den));
}

TEST_CASE("dsm_loss_grad reproduces dsm_loss and differentiates its parameters") {
  flowdiff::ScoreNetworkConfig cfg;
  cfg.channels = 1;
  cfg.height = 1;
  cfg.width = 2;
  cfg.base_channels = 6;
  cfg.emb_dim = 8;
  flowdiff::ScoreNetwork net(cfg);
  RngStream init(25);
  net.init_params(init);
  DiffusionSpec spec;
  const Tensor x0 = randn({3, 1, 1, 2}, 26);

  auto params = net.params();
  flowdiff::nn::zero_grads(params);
  RngStream ga(27), gb(27);
  const double with_grad =
      flowdiff::dsm_loss_grad(net, spec, x0, SMWeighting::unweighted, ga);
  const flowdiff::NetworkScoreModel model(net);
  const double plain = dsm_loss(model, spec, x0, SMWeighting::unweighted, gb);
  CHECK(with_grad == doctest::Approx(plain).epsilon(1e-12));

  // Spot-check two parameter coordinates against replayed finite differences.
  int checked = 0;
  for (auto* p : params) {
    if (p->value.numel() == 0 || checked >= 2) continue;
    const std::int64_t idx = p->value.numel() / 3;
    const double saved = p->value[idx];
    p->value[idx] = saved + 1e-5;
    RngStream rh(27);
    const double fh = dsm_loss(model, spec, x0, SMWeighting::unweighted, rh);
    p->value[idx] = saved - 1e-5;
    RngStream rl(27);
    const double fl = dsm_loss(model, spec, x0, SMWeighting::unweighted, rl);
    p->value[idx] = saved;
    const double fd = (fh - fl) / 2e-5;
    if (std::abs(fd) < 1e-8) continue;
    CHECK(p->grad[idx] == doctest::Approx(fd).epsilon(1e-3));
    ++checked;
  }
  CHECK(checked == 2);
}

TEST_CASE("the network adapter exposes a consistent score and VJP") {
  flowdiff::ScoreNetworkConfig cfg;
  cfg.channels = 1;
  cfg.height = 2;
  cfg.width = 2;
  cfg.base_channels = 6;
  cfg.emb_dim = 8;
  flowdiff::ScoreNetwork net(cfg);
  RngStream init(28);
  net.init_params(init);
  RngStream jit(29);
  flowdiff_test::jitter_params(net.params(), 0.1, jit);
  const flowdiff::NetworkScoreModel model(net);
  DiffusionSpec spec;

  const Tensor x = randn({1, 1, 2, 2}, 30);
  const std::vector<double> ts = {0.4};

  // score = -eps / sqrt(1 - alpha)
  const Tensor s = model.score(spec, x, ts);
  const Tensor eps = net.eps_forward(x, ts);
  const double sm = std::sqrt(1.0 - spec.alpha(0.4));
  for (std::int64_t i = 0; i < x.numel(); ++i)
    CHECK(s[i] == doctest::Approx(-eps[i] / sm).epsilon(1e-12));

  // <u, J^T v> along a random direction matches the directional derivative.
  const Tensor u = randn({1, 1, 2, 2}, 31);
  const Tensor v = randn({1, 1, 2, 2}, 32);
  const Tensor jtv = model.score_vjp(spec, x, ts, v);
  const double h = 1e-5;
  Tensor hi = x, lo = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    hi[i] += h * u[i];
    lo[i] -= h * u[i];
  }
  const Tensor shi = model.score(spec, hi, ts);
  const Tensor slo = model.score(spec, lo, ts);
  double dir = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) dir += (shi[i] - slo[i]) / (2.0 * h) * v[i];
  CHECK(u.dot(jtv) == doctest::Approx(dir).epsilon(1e-4));

  // The VJP path must not touch parameter gradients.
  auto params = net.params();
  flowdiff::nn::zero_grads(params);
  (void)model.score_vjp(spec, x, ts, v);
  for (auto* p : params)
    for (std::int64_t i = 0; i < p->grad.numel(); ++i) CHECK(p->grad[i] == 0.0);
}
