#include "flowdiff/score_network.hpp"

#include <cmath>

#include "flowdiff/errors.hpp"

namespace flowdiff {

ScoreNetwork::ScoreNetwork(ScoreNetworkConfig cfg) : cfg_(cfg) {
  if (cfg_.channels < 1 || cfg_.height < 1 || cfg_.width < 1) {
    throw PreconditionError("score network: bad image shape");
  }
  if (cfg_.base_channels < 1) throw PreconditionError("score network: base_channels >= 1");
  const std::int64_t C = cfg_.channels, F = cfg_.base_channels, K = cfg_.kernel;
  conv_in_ = nn::Conv2d("score.conv_in", C, F, K);
  enc1_ = nn::Conv2d("score.enc1", F, F, K);
  enc2_ = nn::Conv2d("score.enc2", F, 2 * F, K);
  mid_ = nn::Conv2d("score.mid", 2 * F, 2 * F, K);
  dec1_ = nn::Conv2d("score.dec1", 3 * F, F, K);
  conv_out_ = nn::Conv2d("score.conv_out", F, C, K);
  if (cfg_.temb_mlp) temb_mlp_ = nn::Dense("score.temb_mlp", cfg_.emb_dim, cfg_.emb_dim);
  d1_ = nn::Dense("score.d1", cfg_.emb_dim, F);
  d2_ = nn::Dense("score.d2", cfg_.emb_dim, 2 * F);
  d3_ = nn::Dense("score.d3", cfg_.emb_dim, 2 * F);
  d4_ = nn::Dense("score.d4", cfg_.emb_dim, F);
}

void ScoreNetwork::init_params(RngStream& rng) {
  conv_in_.init_random(rng);
  enc1_.init_random(rng);
  enc2_.init_random(rng);
  mid_.init_random(rng);
  dec1_.init_random(rng);
  // Zero-initialized head: the network starts by predicting eps = 0.
  conv_out_.zero_init();
  if (cfg_.temb_mlp) temb_mlp_.init_random(rng);
  d1_.init_random(rng);
  d2_.init_random(rng);
  d3_.init_random(rng);
  d4_.init_random(rng);
}

Tensor ScoreNetwork::eps_forward(const Tensor& x, std::span<const double> t) const {
  return eps_forward(x, t, nullptr);
}

Tensor ScoreNetwork::eps_forward(const Tensor& x, std::span<const double> t,
                                 ScoreActs* acts) const {
  require_rank(x, 4, "eps_forward");
  const std::int64_t B = x.dim(0);
  if (x.dim(1) != cfg_.channels || x.dim(2) != cfg_.height || x.dim(3) != cfg_.width) {
    throw ShapeError("eps_forward: input " + x.shape_str() + " does not match configured shape");
  }
  std::vector<double> ts(static_cast<std::size_t>(B));
  if (t.size() == 1) {
    std::fill(ts.begin(), ts.end(), t[0]);
  } else if (t.size() == static_cast<std::size_t>(B)) {
    std::copy(t.begin(), t.end(), ts.begin());
  } else {
    throw ShapeError("eps_forward: t must have 1 or batch entries");
  }

  Tensor temb0 = nn::time_embedding(ts, cfg_.emb_dim);
  Tensor temb_z, temb;
  if (cfg_.temb_mlp) {
    temb_z = temb_mlp_.forward(temb0);
    temb = nn::silu(temb_z);
  } else {
    temb = temb0;
  }

  const bool down = cfg_.with_down();
  Tensor h_in = conv_in_.forward(x);
  Tensor z1 = nn::add_channel_bias(enc1_.forward(h_in), d1_.forward(temb));
  Tensor e1 = nn::silu(z1);
  Tensor pooled = down ? nn::avg_pool2(e1) : e1;
  Tensor z2 = nn::add_channel_bias(enc2_.forward(pooled), d2_.forward(temb));
  Tensor e2 = nn::silu(z2);
  Tensor z3 = nn::add_channel_bias(mid_.forward(e2), d3_.forward(temb));
  Tensor m = nn::silu(z3);
  Tensor up = down ? nn::upsample2(m) : m;
  Tensor cat = nn::concat_channels(up, e1);
  Tensor z4 = nn::add_channel_bias(dec1_.forward(cat), d4_.forward(temb));
  Tensor dc = nn::silu(z4);
  Tensor eps = conv_out_.forward(dc);
  if (!eps.all_finite()) throw NonFiniteError("score network produced non-finite output");

  if (acts) {
    acts->x = x;
    acts->temb0 = std::move(temb0);
    acts->temb_z = std::move(temb_z);
    acts->temb = std::move(temb);
    acts->h_in = std::move(h_in);
    acts->z1 = std::move(z1);
    acts->e1 = std::move(e1);
    acts->pooled = std::move(pooled);
    acts->z2 = std::move(z2);
    acts->e2 = std::move(e2);
    acts->z3 = std::move(z3);
    acts->m = std::move(m);
    acts->cat = std::move(cat);
    acts->z4 = std::move(z4);
    acts->dc = std::move(dc);
  }
  return eps;
}

Tensor ScoreNetwork::eps_backward(const ScoreActs& acts, const Tensor& g_eps,
                                  bool accumulate_params) {
  const bool down = cfg_.with_down();
  const std::int64_t F = cfg_.base_channels;

  // Input-only mode snapshots nothing: layer backward calls simply skip the
  // parameter accumulations.
  auto conv_bwd = [&](nn::Conv2d& conv, const Tensor& in, const Tensor& gout) {
    if (accumulate_params) return conv.backward(in, gout);
    Tensor wsave = conv.w.grad, bsave = conv.b.grad;
    Tensor gx = conv.backward(in, gout);
    conv.w.grad = std::move(wsave);
    conv.b.grad = std::move(bsave);
    return gx;
  };
  auto dense_bwd = [&](nn::Dense& dense, const Tensor& in, const Tensor& gout) {
    if (accumulate_params) return dense.backward(in, gout);
    Tensor wsave = dense.w.grad, bsave = dense.b.grad;
    Tensor gx = dense.backward(in, gout);
    dense.w.grad = std::move(wsave);
    dense.b.grad = std::move(bsave);
    return gx;
  };

  Tensor gdc = conv_bwd(conv_out_, acts.dc, g_eps);
  Tensor gz4 = nn::silu_backward(acts.z4, gdc);
  Tensor gtemb = dense_bwd(d4_, acts.temb, nn::channel_bias_backward(gz4));
  Tensor gcat = conv_bwd(dec1_, acts.cat, gz4);
  Tensor gup, ge1_skip;
  nn::split_channels(gcat, 2 * F, gup, ge1_skip);
  Tensor gm = down ? nn::upsample2_backward(acts.m, gup) : std::move(gup);
  Tensor gz3 = nn::silu_backward(acts.z3, gm);
  gtemb += dense_bwd(d3_, acts.temb, nn::channel_bias_backward(gz3));
  Tensor ge2 = conv_bwd(mid_, acts.e2, gz3);
  Tensor gz2 = nn::silu_backward(acts.z2, ge2);
  gtemb += dense_bwd(d2_, acts.temb, nn::channel_bias_backward(gz2));
  Tensor gpooled = conv_bwd(enc2_, acts.pooled, gz2);
  Tensor ge1 = down ? nn::avg_pool2_backward(acts.e1, gpooled) : std::move(gpooled);
  ge1 += ge1_skip;
  Tensor gz1 = nn::silu_backward(acts.z1, ge1);
  gtemb += dense_bwd(d1_, acts.temb, nn::channel_bias_backward(gz1));
  Tensor gh_in = conv_bwd(enc1_, acts.h_in, gz1);
  Tensor gx = conv_bwd(conv_in_, acts.x, gh_in);
  if (cfg_.temb_mlp && accumulate_params) {
    Tensor gtz = nn::silu_backward(acts.temb_z, gtemb);
    temb_mlp_.backward(acts.temb0, gtz);
  }
  return gx;
}

std::vector<nn::Param*> ScoreNetwork::params() {
  std::vector<nn::Param*> ps;
  auto push = [&](std::vector<nn::Param*> v) {
    for (nn::Param* p : v) ps.push_back(p);
  };
  push(conv_in_.params());
  push(enc1_.params());
  push(enc2_.params());
  push(mid_.params());
  push(dec1_.params());
  push(conv_out_.params());
  if (cfg_.temb_mlp) push(temb_mlp_.params());
  push(d1_.params());
  push(d2_.params());
  push(d3_.params());
  push(d4_.params());
  return ps;
}

namespace {

std::vector<double> expand_times(std::span<const double> t, std::int64_t B) {
  std::vector<double> ts(static_cast<std::size_t>(B));
  if (t.size() == 1) {
    std::fill(ts.begin(), ts.end(), t[0]);
  } else if (t.size() == static_cast<std::size_t>(B)) {
    std::copy(t.begin(), t.end(), ts.begin());
  } else {
    throw ShapeError("score model: t must have 1 or batch entries");
  }
  return ts;
}

}  // namespace

Tensor NetworkScoreModel::score(const DiffusionSpec& spec, const Tensor& x,
                                std::span<const double> t) const {
  const std::int64_t B = x.dim(0);
  const auto ts = expand_times(t, B);
  Tensor eps = net_.eps_forward(x, ts);
  const std::int64_t per = x.numel() / B;
  for (std::int64_t b = 0; b < B; ++b) {
    const double sm = std::sqrt(1.0 - spec.alpha(ts[static_cast<std::size_t>(b)]));
    for (std::int64_t i = 0; i < per; ++i) eps[b * per + i] /= -sm;
  }
  return eps;
}

Tensor NetworkScoreModel::score_vjp(const DiffusionSpec& spec, const Tensor& x,
                                    std::span<const double> t, const Tensor& v) const {
  const std::int64_t B = x.dim(0);
  const auto ts = expand_times(t, B);
  ScoreActs acts;
  net_.eps_forward(x, ts, &acts);
  Tensor geps = v;
  const std::int64_t per = x.numel() / B;
  for (std::int64_t b = 0; b < B; ++b) {
    const double sm = std::sqrt(1.0 - spec.alpha(ts[static_cast<std::size_t>(b)]));
    for (std::int64_t i = 0; i < per; ++i) geps[b * per + i] /= -sm;
  }
  return net_.eps_backward(acts, geps, /*accumulate_params=*/false);
}

double dsm_loss_grad(ScoreNetwork& net, const DiffusionSpec& spec, const Tensor& x0,
                     SMWeighting weighting, RngStream& rng) {
  require_rank(x0, 4, "dsm_loss_grad");
  const std::int64_t B = x0.dim(0);
  if (B < 1) throw PreconditionError("dsm_loss_grad: empty batch");
  std::vector<double> ts(static_cast<std::size_t>(B));
  for (auto& tv : ts) tv = rng.next_uniform(spec.t_min, 1.0);
  auto [x_t, eps] = perturb(spec, x0, ts, rng);
  ScoreActs acts;
  Tensor eps_hat = net.eps_forward(x_t, ts, &acts);
  const std::int64_t per = x0.numel() / B;
  double total = 0.0;
  Tensor g_eps(x0.shape());
  for (std::int64_t b = 0; b < B; ++b) {
    const double a = spec.alpha(ts[static_cast<std::size_t>(b)]);
    double e2 = 0.0;
    for (std::int64_t i = 0; i < per; ++i) {
      const double d = eps_hat[b * per + i] - eps[b * per + i];
      e2 += d * d;
    }
    double w;
    if (weighting == SMWeighting::g_squared) {
      w = 0.5 * spec.beta(ts[static_cast<std::size_t>(b)]) / (1.0 - a);
      total += w * e2;
      // dL/d eps_hat = (2w/B)(eps_hat - eps)
      for (std::int64_t i = 0; i < per; ++i) {
        g_eps[b * per + i] = 2.0 * w / static_cast<double>(B) *
                             (eps_hat[b * per + i] - eps[b * per + i]);
      }
    } else {
      total += e2 / static_cast<double>(per);
      for (std::int64_t i = 0; i < per; ++i) {
        g_eps[b * per + i] = 2.0 / static_cast<double>(B * per) *
                             (eps_hat[b * per + i] - eps[b * per + i]);
      }
    }
  }
  const double loss = total / static_cast<double>(B);
  if (!std::isfinite(loss)) throw NonFiniteError("dsm_loss_grad produced a non-finite value");
  net.eps_backward(acts, g_eps, /*accumulate_params=*/true);
  return loss;
}

PriorLossResult prior_loss(ScoreNetwork& net, const DiffusionSpec& spec, const Tensor& x_hat,
                           GradTarget target, RngStream& rng) {
  require_rank(x_hat, 4, "prior_loss");
  const std::int64_t B = x_hat.dim(0);
  if (B < 1) throw PreconditionError("prior_loss: empty batch");
  Tensor x0 = to_diffusion_space(x_hat);
  std::vector<double> ts(static_cast<std::size_t>(B));
  for (auto& tv : ts) tv = rng.next_uniform(spec.t_min, 1.0);
  auto [x_t, eps] = perturb(spec, x0, ts, rng);
  ScoreActs acts;
  Tensor eps_hat = net.eps_forward(x_t, ts, &acts);
  const std::int64_t per = x0.numel() / B;
  double total = 0.0;
  Tensor g_eps(x0.shape());
  std::vector<double> ws(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    const double a = spec.alpha(ts[static_cast<std::size_t>(b)]);
    const double w = 0.5 * spec.beta(ts[static_cast<std::size_t>(b)]) / (1.0 - a);
    ws[static_cast<std::size_t>(b)] = w;
    double e2 = 0.0;
    for (std::int64_t i = 0; i < per; ++i) {
      const double d = eps_hat[b * per + i] - eps[b * per + i];
      e2 += d * d;
      g_eps[b * per + i] = 2.0 * w / static_cast<double>(B) * d;
    }
    total += w * e2;
  }
  PriorLossResult res;
  res.loss = total / static_cast<double>(B);
  if (!std::isfinite(res.loss)) throw NonFiniteError("prior_loss produced a non-finite value");
  if (target == GradTarget::score_params) {
    net.eps_backward(acts, g_eps, /*accumulate_params=*/true);
    res.gx_hat = Tensor(x_hat.shape());
  } else {
    // d x_t / d x0 = sqrt(alpha); d x0 / d x_hat = 2.
    Tensor gx_t = net.eps_backward(acts, g_eps, /*accumulate_params=*/false);
    res.gx_hat = Tensor(x_hat.shape());
    for (std::int64_t b = 0; b < B; ++b) {
      const double sa = std::sqrt(spec.alpha(ts[static_cast<std::size_t>(b)]));
      for (std::int64_t i = 0; i < per; ++i) {
        res.gx_hat[b * per + i] = 2.0 * sa * gx_t[b * per + i];
      }
    }
  }
  return res;
}

}  // namespace flowdiff
