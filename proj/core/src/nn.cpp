#include "flowdiff/nn.hpp"

#include <cmath>

#include "flowdiff/errors.hpp"

namespace flowdiff::nn {

void zero_grads(std::span<Param* const> params) {
  for (Param* p : params) {
    std::fill(p->grad.vec().begin(), p->grad.vec().end(), 0.0);
  }
}

void Adam::step(std::span<Param* const> params) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (Param* p : params) {
    for (std::int64_t i = 0; i < p->value.numel(); ++i) {
      const double g = p->grad[i];
      p->m[i] = beta1 * p->m[i] + (1.0 - beta1) * g;
      p->v[i] = beta2 * p->v[i] + (1.0 - beta2) * g * g;
      const double mhat = p->m[i] / bc1;
      const double vhat = p->v[i] / bc2;
      p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void Adam::reset(std::span<Param* const> params) {
  step_count = 0;
  for (Param* p : params) {
    std::fill(p->m.vec().begin(), p->m.vec().end(), 0.0);
    std::fill(p->v.vec().begin(), p->v.vec().end(), 0.0);
    std::fill(p->grad.vec().begin(), p->grad.vec().end(), 0.0);
  }
}

Conv2d::Conv2d(std::string name, std::int64_t c_in, std::int64_t c_out, std::int64_t k)
    : w(name + ".w"), b(name + ".b") {
  if (k < 1 || k % 2 == 0) throw PreconditionError("conv kernel size must be odd");
  w.init({c_out, c_in, k, k});
  b.init({c_out});
}

void Conv2d::init_random(RngStream& rng) {
  const std::int64_t fan_in = w.value.dim(1) * w.value.dim(2) * w.value.dim(3);
  const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.value.numel(); ++i) w.value[i] = scale * rng.next_normal();
  std::fill(b.value.vec().begin(), b.value.vec().end(), 0.0);
}

void Conv2d::zero_init() {
  std::fill(w.value.vec().begin(), w.value.vec().end(), 0.0);
  std::fill(b.value.vec().begin(), b.value.vec().end(), 0.0);
}

Tensor Conv2d::forward(const Tensor& x) const {
  require_rank(x, 4, "Conv2d::forward");
  const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.value.dim(0), K = w.value.dim(2);
  if (Cin != w.value.dim(1)) {
    throw ShapeError("Conv2d: input channels " + std::to_string(Cin) + " != weight channels " +
                     std::to_string(w.value.dim(1)));
  }
  const std::int64_t c = (K - 1) / 2;
  Tensor out({B, Cout, H, W});
  for (std::int64_t bb = 0; bb < B; ++bb) {
    for (std::int64_t co = 0; co < Cout; ++co) {
      const double bias = b.value[co];
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t ww = 0; ww < W; ++ww) {
          double acc = bias;
          for (std::int64_t ci = 0; ci < Cin; ++ci) {
            for (std::int64_t i = 0; i < K; ++i) {
              const std::int64_t hh = h + i - c;
              if (hh < 0 || hh >= H) continue;
              for (std::int64_t j = 0; j < K; ++j) {
                const std::int64_t wcol = ww + j - c;
                if (wcol < 0 || wcol >= W) continue;
                acc += w.value[((co * Cin + ci) * K + i) * K + j] * x.at4(bb, ci, hh, wcol);
              }
            }
          }
          out.at4(bb, co, h, ww) = acc;
        }
      }
    }
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& gout) {
  const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = w.value.dim(0), K = w.value.dim(2);
  const std::int64_t c = (K - 1) / 2;
  Tensor gx({B, Cin, H, W});
  for (std::int64_t bb = 0; bb < B; ++bb) {
    for (std::int64_t co = 0; co < Cout; ++co) {
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t ww = 0; ww < W; ++ww) {
          const double g = gout.at4(bb, co, h, ww);
          if (g == 0.0) continue;
          b.grad[co] += g;
          for (std::int64_t ci = 0; ci < Cin; ++ci) {
            for (std::int64_t i = 0; i < K; ++i) {
              const std::int64_t hh = h + i - c;
              if (hh < 0 || hh >= H) continue;
              for (std::int64_t j = 0; j < K; ++j) {
                const std::int64_t wcol = ww + j - c;
                if (wcol < 0 || wcol >= W) continue;
                const std::int64_t wi = ((co * Cin + ci) * K + i) * K + j;
                w.grad[wi] += g * x.at4(bb, ci, hh, wcol);
                gx.at4(bb, ci, hh, wcol) += g * w.value[wi];
              }
            }
          }
        }
      }
    }
  }
  // b.grad skipped zero gout entries above; g==0 contributes nothing anyway.
  return gx;
}

Dense::Dense(std::string name, std::int64_t f_in, std::int64_t f_out)
    : w(name + ".w"), b(name + ".b") {
  w.init({f_out, f_in});
  b.init({f_out});
}

void Dense::init_random(RngStream& rng) {
  const std::int64_t fan_in = w.value.dim(1);
  const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < w.value.numel(); ++i) w.value[i] = scale * rng.next_normal();
  std::fill(b.value.vec().begin(), b.value.vec().end(), 0.0);
}

void Dense::zero_init() {
  std::fill(w.value.vec().begin(), w.value.vec().end(), 0.0);
  std::fill(b.value.vec().begin(), b.value.vec().end(), 0.0);
}

Tensor Dense::forward(const Tensor& x) const {
  require_rank(x, 2, "Dense::forward");
  const std::int64_t B = x.dim(0), Fin = x.dim(1), Fout = w.value.dim(0);
  if (Fin != w.value.dim(1)) {
    throw ShapeError("Dense: input features " + std::to_string(Fin) + " != weight features " +
                     std::to_string(w.value.dim(1)));
  }
  Tensor out({B, Fout});
  for (std::int64_t bb = 0; bb < B; ++bb) {
    for (std::int64_t o = 0; o < Fout; ++o) {
      double acc = b.value[o];
      for (std::int64_t i = 0; i < Fin; ++i) acc += w.value[o * Fin + i] * x[bb * Fin + i];
      out[bb * Fout + o] = acc;
    }
  }
  return out;
}

Tensor Dense::backward(const Tensor& x, const Tensor& gout) {
  const std::int64_t B = x.dim(0), Fin = x.dim(1), Fout = w.value.dim(0);
  Tensor gx({B, Fin});
  for (std::int64_t bb = 0; bb < B; ++bb) {
    for (std::int64_t o = 0; o < Fout; ++o) {
      const double g = gout[bb * Fout + o];
      b.grad[o] += g;
      for (std::int64_t i = 0; i < Fin; ++i) {
        w.grad[o * Fin + i] += g * x[bb * Fin + i];
        gx[bb * Fin + i] += g * w.value[o * Fin + i];
      }
    }
  }
  return gx;
}

Tensor silu(const Tensor& x) {
  Tensor out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    out[i] = x[i] * s;
  }
  return out;
}

Tensor silu_backward(const Tensor& x, const Tensor& gout) {
  Tensor gx = x;
  for (std::int64_t i = 0; i < gx.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    gx[i] = gout[i] * s * (1.0 + x[i] * (1.0 - s));
  }
  return gx;
}

Tensor avg_pool2(const Tensor& x) {
  require_rank(x, 4, "avg_pool2");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("avg_pool2: spatial dims must be even");
  Tensor out({B, C, H / 2, W / 2});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H / 2; ++h)
        for (std::int64_t w = 0; w < W / 2; ++w)
          out.at4(b, c, h, w) = 0.25 * (x.at4(b, c, 2 * h, 2 * w) + x.at4(b, c, 2 * h, 2 * w + 1) +
                                        x.at4(b, c, 2 * h + 1, 2 * w) + x.at4(b, c, 2 * h + 1, 2 * w + 1));
  return out;
}

Tensor avg_pool2_backward(const Tensor& x, const Tensor& gout) {
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor gx({B, C, H, W});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H / 2; ++h)
        for (std::int64_t w = 0; w < W / 2; ++w) {
          const double g = 0.25 * gout.at4(b, c, h, w);
          gx.at4(b, c, 2 * h, 2 * w) = g;
          gx.at4(b, c, 2 * h, 2 * w + 1) = g;
          gx.at4(b, c, 2 * h + 1, 2 * w) = g;
          gx.at4(b, c, 2 * h + 1, 2 * w + 1) = g;
        }
  return gx;
}

Tensor upsample2(const Tensor& x) {
  require_rank(x, 4, "upsample2");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({B, C, 2 * H, 2 * W});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const double v = x.at4(b, c, h, w);
          out.at4(b, c, 2 * h, 2 * w) = v;
          out.at4(b, c, 2 * h, 2 * w + 1) = v;
          out.at4(b, c, 2 * h + 1, 2 * w) = v;
          out.at4(b, c, 2 * h + 1, 2 * w + 1) = v;
        }
  return out;
}

Tensor upsample2_backward(const Tensor& x, const Tensor& gout) {
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor gx({B, C, H, W});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
          gx.at4(b, c, h, w) = gout.at4(b, c, 2 * h, 2 * w) + gout.at4(b, c, 2 * h, 2 * w + 1) +
                               gout.at4(b, c, 2 * h + 1, 2 * w) + gout.at4(b, c, 2 * h + 1, 2 * w + 1);
  return gx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: incompatible " + a.shape_str() + " vs " + b.shape_str());
  }
  const std::int64_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  Tensor out({B, Ca + Cb, H, W});
  const std::int64_t plane = H * W;
  for (std::int64_t bb = 0; bb < B; ++bb) {
    std::copy_n(a.data() + bb * Ca * plane, Ca * plane, out.data() + bb * (Ca + Cb) * plane);
    std::copy_n(b.data() + bb * Cb * plane, Cb * plane, out.data() + (bb * (Ca + Cb) + Ca) * plane);
  }
  return out;
}

void split_channels(const Tensor& x, std::int64_t c_first, Tensor& a, Tensor& b) {
  require_rank(x, 4, "split_channels");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c_first < 0 || c_first > C) throw ShapeError("split_channels: bad split point");
  a = Tensor({B, c_first, H, W});
  b = Tensor({B, C - c_first, H, W});
  const std::int64_t plane = H * W;
  for (std::int64_t bb = 0; bb < B; ++bb) {
    std::copy_n(x.data() + bb * C * plane, c_first * plane, a.data() + bb * c_first * plane);
    std::copy_n(x.data() + (bb * C + c_first) * plane, (C - c_first) * plane,
                b.data() + bb * (C - c_first) * plane);
  }
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 4, "add_channel_bias");
  require_rank(bias, 2, "add_channel_bias bias");
  if (bias.dim(0) != x.dim(0) || bias.dim(1) != x.dim(1)) {
    throw ShapeError("add_channel_bias: bias " + bias.shape_str() + " vs " + x.shape_str());
  }
  Tensor out = x;
  const std::int64_t plane = x.dim(2) * x.dim(3);
  for (std::int64_t b = 0; b < x.dim(0); ++b)
    for (std::int64_t c = 0; c < x.dim(1); ++c) {
      const double v = bias[b * x.dim(1) + c];
      double* p = out.data() + (b * x.dim(1) + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) p[i] += v;
    }
  return out;
}

Tensor channel_bias_backward(const Tensor& gout) {
  require_rank(gout, 4, "channel_bias_backward");
  Tensor g({gout.dim(0), gout.dim(1)});
  const std::int64_t plane = gout.dim(2) * gout.dim(3);
  for (std::int64_t b = 0; b < gout.dim(0); ++b)
    for (std::int64_t c = 0; c < gout.dim(1); ++c) {
      const double* p = gout.data() + (b * gout.dim(1) + c) * plane;
      double acc = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      g[b * gout.dim(1) + c] = acc;
    }
  return g;
}

Tensor time_embedding(std::span<const double> t, std::int64_t dim) {
  if (dim < 2 || dim % 2 != 0) throw PreconditionError("time embedding dim must be even and >= 2");
  const std::int64_t half = dim / 2;
  Tensor out({static_cast<std::int64_t>(t.size()), dim});
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double tv = t[b] * 1000.0;
    for (std::int64_t i = 0; i < half; ++i) {
      // Frequency ladder 10000^{-i/(half-1)}; degenerate half==1 uses f=1.
      const double f = half > 1
          ? std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half - 1))
          : 1.0;
      out[static_cast<std::int64_t>(b) * dim + i] = std::sin(tv * f);
      out[static_cast<std::int64_t>(b) * dim + half + i] = std::cos(tv * f);
    }
  }
  return out;
}

}  // namespace flowdiff::nn
