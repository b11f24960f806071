#include "flowdiff/flow.hpp"

#include <cmath>

#include "flowdiff/errors.hpp"

namespace flowdiff {

namespace {

// 1.0 where the element is passive (conditioner input, left unchanged).
double passive_mask(CouplingMask m, std::int64_t c, std::int64_t h, std::int64_t w,
                    std::int64_t C) {
  switch (m) {
    case CouplingMask::checkerboard_even: return (h + w) % 2 == 0 ? 1.0 : 0.0;
    case CouplingMask::checkerboard_odd: return (h + w) % 2 == 1 ? 1.0 : 0.0;
    case CouplingMask::channel_first: return c < C / 2 ? 1.0 : 0.0;
    case CouplingMask::channel_second: return c >= C / 2 ? 1.0 : 0.0;
  }
  throw PreconditionError("unknown coupling mask");
}

Tensor reverse_channels(const Tensor& x) {
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({B, C, H, W});
  const std::int64_t plane = H * W;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      std::copy_n(x.data() + (b * C + c) * plane, plane,
                  out.data() + (b * C + (C - 1 - c)) * plane);
  return out;
}

// Gauss-Jordan with partial pivoting on a small square matrix. Returns
// log|det W| and fills Winv.
double mat_inv_logabsdet(const Tensor& W, Tensor& Winv) {
  const std::int64_t n = W.dim(0);
  std::vector<double> a(W.vec());
  Winv = Tensor({n, n});
  for (std::int64_t i = 0; i < n; ++i) Winv[i * n + i] = 1.0;
  double logabsdet = 0.0;
  for (std::int64_t col = 0; col < n; ++col) {
    std::int64_t piv = col;
    for (std::int64_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (a[piv * n + col] == 0.0) throw NonFiniteError("singular 1x1 mixing matrix");
    if (piv != col) {
      for (std::int64_t k = 0; k < n; ++k) {
        std::swap(a[col * n + k], a[piv * n + k]);
        std::swap(Winv[col * n + k], Winv[piv * n + k]);
      }
    }
    const double d = a[col * n + col];
    logabsdet += std::log(std::abs(d));
    for (std::int64_t k = 0; k < n; ++k) {
      a[col * n + k] /= d;
      Winv[col * n + k] /= d;
    }
    for (std::int64_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r * n + col];
      if (f == 0.0) continue;
      for (std::int64_t k = 0; k < n; ++k) {
        a[r * n + k] -= f * a[col * n + k];
        Winv[r * n + k] -= f * Winv[col * n + k];
      }
    }
  }
  return logabsdet;
}

}  // namespace

Tensor squeeze2(const Tensor& x) {
  require_rank(x, 4, "squeeze2");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("squeeze2: spatial dims must be even");
  Tensor out({B, 4 * C, H / 2, W / 2});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t dy = 0; dy < 2; ++dy)
        for (std::int64_t dx = 0; dx < 2; ++dx)
          for (std::int64_t i = 0; i < H / 2; ++i)
            for (std::int64_t j = 0; j < W / 2; ++j)
              out.at4(b, c * 4 + dy * 2 + dx, i, j) = x.at4(b, c, 2 * i + dy, 2 * j + dx);
  return out;
}

Tensor unsqueeze2(const Tensor& x) {
  require_rank(x, 4, "unsqueeze2");
  const std::int64_t B = x.dim(0), C4 = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C4 % 4 != 0) throw ShapeError("unsqueeze2: channels must be divisible by 4");
  const std::int64_t C = C4 / 4;
  Tensor out({B, C, 2 * H, 2 * W});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t dy = 0; dy < 2; ++dy)
        for (std::int64_t dx = 0; dx < 2; ++dx)
          for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j)
              out.at4(b, c, 2 * i + dy, 2 * j + dx) = x.at4(b, c * 4 + dy * 2 + dx, i, j);
  return out;
}

bool FlowConfig::multiscale_effective() const {
  if (multiscale.has_value()) return *multiscale;
  return std::min(height, width) >= 16 && height % 2 == 0 && width % 2 == 0;
}

double entropy_loss(const FlowOutput& out) {
  double acc = 0.0;
  for (double v : out.logdet) acc += v;
  return -acc / static_cast<double>(out.logdet.size());
}

ConditionalFlow::ConditionalFlow(FlowConfig cfg) : cfg_(cfg) {
  const std::int64_t C = cfg_.channels, H = cfg_.height, W = cfg_.width;
  if (C < 1 || H < 1 || W < 1) throw PreconditionError("flow: bad image shape");
  if (H * W < 2 && C < 2) {
    throw PreconditionError("flow needs at least 2 elements per image to form couplings");
  }
  if (cfg_.couplings_per_scale < 1) throw PreconditionError("flow: couplings_per_scale >= 1");
  const bool ms = cfg_.multiscale_effective();
  if (ms && (H % 2 != 0 || W % 2 != 0)) {
    throw PreconditionError("flow: multiscale requires even spatial dims");
  }
  const std::int64_t E = cfg_.embed_channels;
  enc1_ = nn::Conv2d("flow.enc1", C, E, 3);
  enc2_ = nn::Conv2d("flow.enc2", E, E, 3);

  auto add_coupling = [&](CouplingMask m, std::int64_t state_c, std::int64_t emb_c) {
    Block b;
    b.kind = FlowBlockKind::coupling;
    b.mask = m;
    const std::string nm = "flow.block" + std::to_string(blocks_.size());
    b.conv1 = nn::Conv2d(nm + ".conv1", state_c + emb_c, cfg_.hidden_channels, 3);
    b.conv2 = nn::Conv2d(nm + ".conv2", cfg_.hidden_channels, cfg_.hidden_channels, 3);
    b.conv3 = nn::Conv2d(nm + ".conv3", cfg_.hidden_channels, 2 * state_c, 3);
    blocks_.push_back(std::move(b));
  };

  // Spatial parity masks need 2+ positions; degenerate 1x1 images fall back
  // to channel splits at the top scale.
  const bool spatial = H * W >= 2;
  for (std::int64_t i = 0; i < cfg_.couplings_per_scale; ++i) {
    CouplingMask m;
    if (spatial) {
      m = i % 2 == 0 ? CouplingMask::checkerboard_even : CouplingMask::checkerboard_odd;
    } else {
      m = i % 2 == 0 ? CouplingMask::channel_first : CouplingMask::channel_second;
    }
    add_coupling(m, C, E);
  }
  if (ms) {
    blocks_.push_back(Block{.kind = FlowBlockKind::squeeze});
    const std::int64_t C4 = 4 * C, E4 = 4 * E;
    for (std::int64_t i = 0; i < cfg_.couplings_per_scale; ++i) {
      if (i % 2 == 0) {
        if (cfg_.use_1x1) {
          Block b;
          b.kind = FlowBlockKind::invertible_1x1;
          b.w1x1 = nn::Param("flow.block" + std::to_string(blocks_.size()) + ".w1x1");
          b.w1x1.init({C4, C4});
          blocks_.push_back(std::move(b));
        } else {
          blocks_.push_back(Block{.kind = FlowBlockKind::channel_permute});
        }
      }
      add_coupling(i % 2 == 0 ? CouplingMask::channel_first : CouplingMask::channel_second, C4, E4);
    }
    blocks_.push_back(Block{.kind = FlowBlockKind::unsqueeze});
  }
}

void ConditionalFlow::init_params(RngStream& rng) {
  enc1_.init_random(rng);
  enc2_.init_random(rng);
  for (auto& b : blocks_) {
    switch (b.kind) {
      case FlowBlockKind::coupling:
        b.conv1.init_random(rng);
        b.conv2.init_random(rng);
        // Zero final layer: coupling starts as identity, logdet 0.
        b.conv3.zero_init();
        break;
      case FlowBlockKind::invertible_1x1: {
        const std::int64_t n = b.w1x1.value.dim(0);
        std::fill(b.w1x1.value.vec().begin(), b.w1x1.value.vec().end(), 0.0);
        for (std::int64_t i = 0; i < n; ++i) b.w1x1.value[i * n + i] = 1.0;
        std::fill(b.w1x1.m.vec().begin(), b.w1x1.m.vec().end(), 0.0);
        std::fill(b.w1x1.v.vec().begin(), b.w1x1.v.vec().end(), 0.0);
        std::fill(b.w1x1.grad.vec().begin(), b.w1x1.grad.vec().end(), 0.0);
        break;
      }
      default:
        break;
    }
  }
}

Tensor ConditionalFlow::encode_y(const Tensor& y, FlowActs* acts) const {
  Tensor h1 = enc1_.forward(y);
  Tensor a1 = nn::silu(h1);
  Tensor emb = enc2_.forward(a1);
  if (acts) {
    acts->y = y;
    acts->enc_h1 = std::move(h1);
    acts->enc_a1 = std::move(a1);
  }
  return emb;
}

FlowOutput ConditionalFlow::forward(const Tensor& z, const Tensor& y) const {
  return run_forward(z, y, nullptr);
}

FlowOutput ConditionalFlow::forward(const Tensor& z, const Tensor& y, FlowActs* acts) const {
  return run_forward(z, y, acts);
}

FlowOutput ConditionalFlow::run_forward(const Tensor& z, const Tensor& y, FlowActs* acts) const {
  require_rank(z, 4, "flow_forward z");
  require_rank(y, 4, "flow_forward y");
  if (z.dim(0) != y.dim(0)) throw ShapeError("flow_forward: z/y batch size mismatch");
  const std::int64_t B = z.dim(0);
  Tensor state = z;
  Tensor emb = encode_y(y, acts);
  std::vector<double> logdet(static_cast<std::size_t>(B), 0.0);

  for (std::size_t idx = 0; idx < blocks_.size(); ++idx) {
    const Block& blk = blocks_[idx];
    if (acts) acts->block_in.push_back(state);
    switch (blk.kind) {
      case FlowBlockKind::coupling: {
        const std::int64_t C = state.dim(1), H = state.dim(2), W = state.dim(3);
        Tensor xm = state;
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w = 0; w < W; ++w)
                xm.at4(b, c, h, w) *= passive_mask(blk.mask, c, h, w, C);
        Tensor cond_in = nn::concat_channels(xm, emb);
        Tensor h1 = blk.conv1.forward(cond_in);
        Tensor a1 = nn::silu(h1);
        Tensor h2 = blk.conv2.forward(a1);
        Tensor a2 = nn::silu(h2);
        Tensor raw_sb = blk.conv3.forward(a2);
        Tensor out = state;
        for (std::int64_t b = 0; b < B; ++b) {
          double ld = 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w = 0; w < W; ++w) {
                if (passive_mask(blk.mask, c, h, w, C) != 0.0) continue;
                const double s = cfg_.s_max * std::tanh(raw_sb.at4(b, c, h, w));
                const double shift = raw_sb.at4(b, C + c, h, w);
                out.at4(b, c, h, w) = state.at4(b, c, h, w) * std::exp(s) + shift;
                ld += s;
              }
          logdet[static_cast<std::size_t>(b)] += ld;
        }
        if (acts) {
          CouplingActs ca;
          ca.x_in = state;
          ca.cond_in = std::move(cond_in);
          ca.h1 = std::move(h1);
          ca.a1 = std::move(a1);
          ca.h2 = std::move(h2);
          ca.a2 = std::move(a2);
          ca.raw_sb = std::move(raw_sb);
          acts->couplings.push_back(std::move(ca));
        }
        state = std::move(out);
        break;
      }
      case FlowBlockKind::channel_permute:
        state = reverse_channels(state);
        break;
      case FlowBlockKind::invertible_1x1: {
        const std::int64_t C = state.dim(1), H = state.dim(2), W = state.dim(3);
        Tensor winv;
        const double lad = mat_inv_logabsdet(blk.w1x1.value, winv);
        Tensor out({B, C, H, W});
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
              for (std::int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < C; ++k)
                  acc += blk.w1x1.value[c * C + k] * state.at4(b, k, h, w);
                out.at4(b, c, h, w) = acc;
              }
        const double per_sample = static_cast<double>(H * W) * lad;
        for (auto& v : logdet) v += per_sample;
        state = std::move(out);
        break;
      }
      case FlowBlockKind::squeeze:
        state = squeeze2(state);
        emb = squeeze2(emb);
        break;
      case FlowBlockKind::unsqueeze:
        state = unsqueeze2(state);
        emb = unsqueeze2(emb);
        break;
    }
    if (!state.all_finite()) {
      throw NonFiniteError("non-finite activations in flow block " + std::to_string(idx));
    }
  }
  if (acts) acts->out_emb_shape = emb.shape();
  FlowOutput out;
  out.x_hat = std::move(state);
  out.logdet = std::move(logdet);
  return out;
}

std::pair<Tensor, std::vector<double>> ConditionalFlow::inverse(const Tensor& x,
                                                                const Tensor& y) const {
  require_rank(x, 4, "flow_inverse x");
  const std::int64_t B = x.dim(0);
  // y embeddings per block, tracked through scale changes.
  std::vector<Tensor> embs(blocks_.size());
  {
    Tensor cur = encode_y(y, nullptr);
    for (std::size_t idx = 0; idx < blocks_.size(); ++idx) {
      embs[idx] = cur;
      if (blocks_[idx].kind == FlowBlockKind::squeeze) cur = squeeze2(cur);
      if (blocks_[idx].kind == FlowBlockKind::unsqueeze) cur = unsqueeze2(cur);
    }
  }
  Tensor state = x;
  std::vector<double> logdet_inv(static_cast<std::size_t>(B), 0.0);
  for (std::size_t ridx = blocks_.size(); ridx > 0; --ridx) {
    const std::size_t idx = ridx - 1;
    const Block& blk = blocks_[idx];
    switch (blk.kind) {
      case FlowBlockKind::coupling: {
        const std::int64_t C = state.dim(1), H = state.dim(2), W = state.dim(3);
        // Passive positions of the output equal those of the input, so the
        // conditioner input is reconstructible from the output alone.
        Tensor xm = state;
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w = 0; w < W; ++w)
                xm.at4(b, c, h, w) *= passive_mask(blk.mask, c, h, w, C);
        Tensor cond_in = nn::concat_channels(xm, embs[idx]);
        Tensor a1 = nn::silu(blk.conv1.forward(cond_in));
        Tensor a2 = nn::silu(blk.conv2.forward(a1));
        Tensor raw_sb = blk.conv3.forward(a2);
        for (std::int64_t b = 0; b < B; ++b) {
          double ld = 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w = 0; w < W; ++w) {
                if (passive_mask(blk.mask, c, h, w, C) != 0.0) continue;
                const double s = cfg_.s_max * std::tanh(raw_sb.at4(b, c, h, w));
                const double shift = raw_sb.at4(b, C + c, h, w);
                state.at4(b, c, h, w) = (state.at4(b, c, h, w) - shift) * std::exp(-s);
                ld += s;
              }
          logdet_inv[static_cast<std::size_t>(b)] -= ld;
        }
        break;
      }
      case FlowBlockKind::channel_permute:
        state = reverse_channels(state);
        break;
      case FlowBlockKind::invertible_1x1: {
        const std::int64_t C = state.dim(1), H = state.dim(2), W = state.dim(3);
        Tensor winv;
        const double lad = mat_inv_logabsdet(blk.w1x1.value, winv);
        Tensor out({B, C, H, W});
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
              for (std::int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < C; ++k)
                  acc += winv[c * C + k] * state.at4(b, k, h, w);
                out.at4(b, c, h, w) = acc;
              }
        const double per_sample = static_cast<double>(H * W) * lad;
        for (auto& v : logdet_inv) v -= per_sample;
        state = std::move(out);
        break;
      }
      case FlowBlockKind::squeeze:
        state = unsqueeze2(state);
        break;
      case FlowBlockKind::unsqueeze:
        state = squeeze2(state);
        break;
    }
    if (!state.all_finite()) {
      throw NonFiniteError("non-finite activations in flow block " + std::to_string(idx));
    }
  }
  return {std::move(state), std::move(logdet_inv)};
}

Tensor ConditionalFlow::backward(const FlowActs& acts, const Tensor& gx_hat,
                                 std::span<const double> glogdet) {
  Tensor g = gx_hat;
  const std::int64_t B = g.dim(0);
  auto gld = [&](std::int64_t b) {
    return glogdet.empty() ? 0.0 : glogdet[static_cast<std::size_t>(b)];
  };
  Tensor gemb(acts.out_emb_shape);
  std::size_t cidx = acts.couplings.size();
  for (std::size_t ridx = blocks_.size(); ridx > 0; --ridx) {
    const std::size_t idx = ridx - 1;
    Block& blk = blocks_[idx];
    switch (blk.kind) {
      case FlowBlockKind::coupling: {
        const CouplingActs& ca = acts.couplings[--cidx];
        const std::int64_t C = ca.x_in.dim(1), H = ca.x_in.dim(2), W = ca.x_in.dim(3);
        Tensor gcond_out({B, 2 * C, H, W});
        Tensor gx_direct({B, C, H, W});
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w = 0; w < W; ++w) {
                if (passive_mask(blk.mask, c, h, w, C) != 0.0) continue;
                const double th = std::tanh(ca.raw_sb.at4(b, c, h, w));
                const double s = cfg_.s_max * th;
                const double es = std::exp(s);
                const double go = g.at4(b, c, h, w);
                const double gs = go * ca.x_in.at4(b, c, h, w) * es + gld(b);
                gcond_out.at4(b, c, h, w) = gs * cfg_.s_max * (1.0 - th * th);
                gcond_out.at4(b, C + c, h, w) = go;
                gx_direct.at4(b, c, h, w) = go * es;
              }
        Tensor ga2 = blk.conv3.backward(ca.a2, gcond_out);
        Tensor gh2 = nn::silu_backward(ca.h2, ga2);
        Tensor ga1 = blk.conv2.backward(ca.a1, gh2);
        Tensor gh1 = nn::silu_backward(ca.h1, ga1);
        Tensor gcond_in = blk.conv1.backward(ca.cond_in, gh1);
        Tensor gxm, gy_part;
        nn::split_channels(gcond_in, C, gxm, gy_part);
        gemb += gy_part;
        Tensor gx({B, C, H, W});
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w = 0; w < W; ++w) {
                const double m = passive_mask(blk.mask, c, h, w, C);
                gx.at4(b, c, h, w) = m != 0.0 ? g.at4(b, c, h, w) + gxm.at4(b, c, h, w)
                                              : gx_direct.at4(b, c, h, w);
              }
        g = std::move(gx);
        break;
      }
      case FlowBlockKind::channel_permute:
        g = reverse_channels(g);
        break;
      case FlowBlockKind::invertible_1x1: {
        const Tensor& x = acts.block_in[idx];
        const std::int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
        Tensor winv;
        mat_inv_logabsdet(blk.w1x1.value, winv);
        double gld_sum = 0.0;
        for (std::int64_t b = 0; b < B; ++b) gld_sum += gld(b);
        // d(H*W*log|det W|)/dW = H*W * W^{-T}.
        const double scale = gld_sum * static_cast<double>(H * W);
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t k = 0; k < C; ++k)
            blk.w1x1.grad[c * C + k] += scale * winv[k * C + c];
        Tensor gx({B, C, H, W});
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
              for (std::int64_t c = 0; c < C; ++c) {
                const double gv = g.at4(b, c, h, w);
                if (gv == 0.0) continue;
                for (std::int64_t k = 0; k < C; ++k) {
                  blk.w1x1.grad[c * C + k] += gv * x.at4(b, k, h, w);
                  gx.at4(b, k, h, w) += blk.w1x1.value[c * C + k] * gv;
                }
              }
        g = std::move(gx);
        break;
      }
      case FlowBlockKind::squeeze:
        g = unsqueeze2(g);
        gemb = unsqueeze2(gemb);
        break;
      case FlowBlockKind::unsqueeze:
        g = squeeze2(g);
        gemb = squeeze2(gemb);
        break;
    }
  }
  // Encoder backward; the gradient with respect to y itself is discarded.
  Tensor ga1 = enc2_.backward(acts.enc_a1, gemb);
  Tensor gh1 = nn::silu_backward(acts.enc_h1, ga1);
  enc1_.backward(acts.y, gh1);
  return g;
}

std::vector<Tensor> ConditionalFlow::sample_posterior(const Tensor& y, int n_samples,
                                                      RngStream& rng) const {
  if (n_samples < 1) throw PreconditionError("sample_posterior: n_samples >= 1");
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  Tensor z({y.dim(0), cfg_.channels, cfg_.height, cfg_.width});
  for (int i = 0; i < n_samples; ++i) {
    rng.fill_normal(z);
    out.push_back(forward(z, y).x_hat);
  }
  return out;
}

std::vector<nn::Param*> ConditionalFlow::params() {
  std::vector<nn::Param*> ps;
  for (nn::Param* p : enc1_.params()) ps.push_back(p);
  for (nn::Param* p : enc2_.params()) ps.push_back(p);
  for (auto& b : blocks_) {
    switch (b.kind) {
      case FlowBlockKind::coupling:
        for (nn::Param* p : b.conv1.params()) ps.push_back(p);
        for (nn::Param* p : b.conv2.params()) ps.push_back(p);
        for (nn::Param* p : b.conv3.params()) ps.push_back(p);
        break;
      case FlowBlockKind::invertible_1x1:
        ps.push_back(&b.w1x1);
        break;
      default:
        break;
    }
  }
  return ps;
}

}  // namespace flowdiff
