#include "flowdiff/forward_model.hpp"

#include <cmath>

#include "flowdiff/errors.hpp"

namespace flowdiff {

std::string to_string(ForwardKind k) {
  switch (k) {
    case ForwardKind::identity: return "identity";
    case ForwardKind::gaussian_noise_only: return "gaussian_noise_only";
    case ForwardKind::gaussian_blur: return "gaussian_blur";
    case ForwardKind::inpainting: return "inpainting";
    case ForwardKind::composite: return "composite";
  }
  throw PreconditionError("unknown forward kind");
}

ForwardKind forward_kind_from_string(const std::string& s) {
  if (s == "identity") return ForwardKind::identity;
  if (s == "gaussian_noise_only") return ForwardKind::gaussian_noise_only;
  if (s == "gaussian_blur") return ForwardKind::gaussian_blur;
  if (s == "inpainting") return ForwardKind::inpainting;
  if (s == "composite") return ForwardKind::composite;
  throw PreconditionError("unknown forward model kind \"" + s + "\"");
}

Tensor make_gaussian_kernel(std::int64_t size, double sigma) {
  if (size < 1 || size % 2 == 0) {
    throw PreconditionError("kernel size must be odd and >= 1, got " + std::to_string(size));
  }
  if (!(sigma > 0.0)) throw PreconditionError("kernel sigma must be positive");
  Tensor k({size, size});
  const double c = static_cast<double>(size - 1) / 2.0;
  double total = 0.0;
  for (std::int64_t i = 0; i < size; ++i) {
    for (std::int64_t j = 0; j < size; ++j) {
      const double di = static_cast<double>(i) - c;
      const double dj = static_cast<double>(j) - c;
      const double w = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
      k[i * size + j] = w;
      total += w;
    }
  }
  for (std::int64_t i = 0; i < k.numel(); ++i) k[i] /= total;
  return k;
}

namespace {

// Reflect without repeating the border sample: -1 -> 1, N -> N-2.
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i = i % period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

void require_batch(const Tensor& x, const std::string& what) {
  require_rank(x, 4, what);
  if (x.dim(2) < 1 || x.dim(3) < 1) throw ShapeError(what + ": empty spatial dims");
}

}  // namespace

Tensor convolve2d(const Tensor& x, const Tensor& kernel) {
  require_batch(x, "convolve2d");
  require_rank(kernel, 2, "convolve2d kernel");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (kh > H || kw > W) {
    throw ShapeError("convolve2d: kernel " + kernel.shape_str() + " larger than image " +
                     x.shape_str());
  }
  const std::int64_t ch = (kh - 1) / 2, cw = (kw - 1) / 2;
  Tensor out({B, C, H, W});
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t w = 0; w < W; ++w) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < kh; ++i) {
            const std::int64_t hh = reflect_index(h + i - ch, H);
            for (std::int64_t j = 0; j < kw; ++j) {
              const std::int64_t ww = reflect_index(w + j - cw, W);
              acc += kernel[i * kw + j] * x.at4(b, c, hh, ww);
            }
          }
          out.at4(b, c, h, w) = acc;
        }
      }
    }
  }
  return out;
}

Tensor convolve2d_adjoint(const Tensor& g, const Tensor& kernel) {
  require_batch(g, "convolve2d_adjoint");
  require_rank(kernel, 2, "convolve2d_adjoint kernel");
  const std::int64_t B = g.dim(0), C = g.dim(1), H = g.dim(2), W = g.dim(3);
  const std::int64_t kh = kernel.dim(0), kw = kernel.dim(1);
  const std::int64_t ch = (kh - 1) / 2, cw = (kw - 1) / 2;
  Tensor out({B, C, H, W});
  // Scatter along the same index map the forward pass gathers through, so
  // the pair is an exact transpose including boundary folds.
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t w = 0; w < W; ++w) {
          const double gv = g.at4(b, c, h, w);
          for (std::int64_t i = 0; i < kh; ++i) {
            const std::int64_t hh = reflect_index(h + i - ch, H);
            for (std::int64_t j = 0; j < kw; ++j) {
              const std::int64_t ww = reflect_index(w + j - cw, W);
              out.at4(b, c, hh, ww) += kernel[i * kw + j] * gv;
            }
          }
        }
      }
    }
  }
  return out;
}

ForwardModel ForwardModel::identity_model(double sigma_n) {
  ForwardModel fm;
  fm.kind = ForwardKind::identity;
  fm.sigma_n = sigma_n;
  fm.validate();
  return fm;
}

ForwardModel ForwardModel::noise_only(double sigma_n) {
  ForwardModel fm;
  fm.kind = ForwardKind::gaussian_noise_only;
  fm.sigma_n = sigma_n;
  fm.validate();
  return fm;
}

ForwardModel ForwardModel::blur(std::int64_t kernel_size, double kernel_sigma, double sigma_n) {
  ForwardModel fm;
  fm.kind = ForwardKind::gaussian_blur;
  fm.kernel_size = kernel_size;
  fm.kernel_sigma = kernel_sigma;
  fm.sigma_n = sigma_n;
  fm.validate();
  return fm;
}

ForwardModel ForwardModel::inpaint(Tensor mask, double sigma_n) {
  ForwardModel fm;
  fm.kind = ForwardKind::inpainting;
  fm.mask = std::move(mask);
  fm.sigma_n = sigma_n;
  fm.validate();
  return fm;
}

ForwardModel ForwardModel::composite_of(std::vector<ForwardModel> parts, double sigma_n) {
  ForwardModel fm;
  fm.kind = ForwardKind::composite;
  fm.parts = std::move(parts);
  fm.sigma_n = sigma_n;
  fm.validate();
  return fm;
}

void ForwardModel::validate() {
  if (!(sigma_n >= 0.0) || !std::isfinite(sigma_n)) {
    throw PreconditionError("sigma_n must be finite and >= 0");
  }
  switch (kind) {
    case ForwardKind::identity:
    case ForwardKind::gaussian_noise_only:
      break;
    case ForwardKind::gaussian_blur:
      kernel = make_gaussian_kernel(kernel_size, kernel_sigma);
      break;
    case ForwardKind::inpainting: {
      require_rank(mask, 3, "inpainting mask");
      for (std::int64_t i = 0; i < mask.numel(); ++i) {
        if (mask[i] != 0.0 && mask[i] != 1.0) {
          throw PreconditionError("inpainting mask values must be 0 or 1");
        }
      }
      break;
    }
    case ForwardKind::composite: {
      if (parts.empty()) throw PreconditionError("composite forward model needs parts");
      for (auto& p : parts) {
        if (p.sigma_n != 0.0) {
          throw PreconditionError("composite parts must be noiseless; noise applies once at the outer level");
        }
        p.validate();
      }
      break;
    }
  }
}

namespace {

// Mask is (C,H,W) or (1,H,W) broadcast over channels; batch broadcast always.
void require_mask_compat(const Tensor& mask, const Tensor& x) {
  if (mask.dim(1) != x.dim(2) || mask.dim(2) != x.dim(3) ||
      (mask.dim(0) != x.dim(1) && mask.dim(0) != 1)) {
    throw ShapeError("inpainting mask " + mask.shape_str() + " incompatible with batch " +
                     x.shape_str());
  }
}

double mask_at(const Tensor& mask, std::int64_t c, std::int64_t h, std::int64_t w) {
  const std::int64_t mc = mask.dim(0) == 1 ? 0 : c;
  return mask[(mc * mask.dim(1) + h) * mask.dim(2) + w];
}

}  // namespace

Tensor mean_map(const ForwardModel& fm, const Tensor& x) {
  require_batch(x, "mean_map");
  switch (fm.kind) {
    case ForwardKind::identity:
    case ForwardKind::gaussian_noise_only:
      return x;
    case ForwardKind::gaussian_blur:
      return convolve2d(x, fm.kernel);
    case ForwardKind::inpainting: {
      require_mask_compat(fm.mask, x);
      Tensor out = x;
      for (std::int64_t b = 0; b < x.dim(0); ++b)
        for (std::int64_t c = 0; c < x.dim(1); ++c)
          for (std::int64_t h = 0; h < x.dim(2); ++h)
            for (std::int64_t w = 0; w < x.dim(3); ++w)
              out.at4(b, c, h, w) *= mask_at(fm.mask, c, h, w);
      return out;
    }
    case ForwardKind::composite: {
      Tensor out = x;
      for (const auto& p : fm.parts) out = mean_map(p, out);
      return out;
    }
  }
  throw PreconditionError("unknown forward kind");
}

Tensor mean_map_adjoint(const ForwardModel& fm, const Tensor& g) {
  require_batch(g, "mean_map_adjoint");
  switch (fm.kind) {
    case ForwardKind::identity:
    case ForwardKind::gaussian_noise_only:
      return g;
    case ForwardKind::gaussian_blur:
      return convolve2d_adjoint(g, fm.kernel);
    case ForwardKind::inpainting:
      // Mask is its own adjoint.
      return mean_map(fm, g);
    case ForwardKind::composite: {
      Tensor out = g;
      for (auto it = fm.parts.rbegin(); it != fm.parts.rend(); ++it) {
        out = mean_map_adjoint(*it, out);
      }
      return out;
    }
  }
  throw PreconditionError("unknown forward kind");
}

Tensor observe(const ForwardModel& fm, const Tensor& x, RngStream& rng) {
  Tensor y = mean_map(fm, x);
  if (fm.sigma_n > 0.0) {
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += fm.sigma_n * rng.next_normal();
  }
  return y;
}

namespace {

const Tensor* find_mask(const ForwardModel& fm) {
  if (fm.kind == ForwardKind::inpainting) return &fm.mask;
  if (fm.kind == ForwardKind::composite) {
    for (const auto& p : fm.parts) {
      if (const Tensor* m = find_mask(p)) return m;
    }
  }
  return nullptr;
}

}  // namespace

std::vector<double> log_likelihood(const ForwardModel& fm, const Tensor& x, const Tensor& y) {
  if (!(fm.sigma_n > 0.0)) {
    throw PreconditionError("log_likelihood requires sigma_n > 0");
  }
  require_same_shape(x, y, "log_likelihood");
  Tensor r = mean_map(fm, x);
  r -= y;
  // Masked kinds contribute no term at unobserved pixels. mean_map already
  // zeroes f(x) there, but y may carry noise samples outside the support.
  if (const Tensor* m = find_mask(fm)) {
    require_mask_compat(*m, x);
    for (std::int64_t b = 0; b < r.dim(0); ++b)
      for (std::int64_t c = 0; c < r.dim(1); ++c)
        for (std::int64_t h = 0; h < r.dim(2); ++h)
          for (std::int64_t w = 0; w < r.dim(3); ++w)
            r.at4(b, c, h, w) *= mask_at(*m, c, h, w);
  }
  const double inv = 1.0 / (2.0 * fm.sigma_n * fm.sigma_n);
  std::vector<double> out(static_cast<std::size_t>(r.dim(0)), 0.0);
  const std::int64_t per = r.numel() / r.dim(0);
  for (std::int64_t b = 0; b < r.dim(0); ++b) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < per; ++i) {
      const double v = r[b * per + i];
      acc += v * v;
    }
    out[static_cast<std::size_t>(b)] = -acc * inv;
  }
  return out;
}

Tensor log_likelihood_grad(const ForwardModel& fm, const Tensor& x, const Tensor& y) {
  if (!(fm.sigma_n > 0.0)) {
    throw PreconditionError("log_likelihood requires sigma_n > 0");
  }
  require_same_shape(x, y, "log_likelihood_grad");
  Tensor r = mean_map(fm, x);
  r -= y;
  if (const Tensor* m = find_mask(fm)) {
    for (std::int64_t b = 0; b < r.dim(0); ++b)
      for (std::int64_t c = 0; c < r.dim(1); ++c)
        for (std::int64_t h = 0; h < r.dim(2); ++h)
          for (std::int64_t w = 0; w < r.dim(3); ++w)
            r.at4(b, c, h, w) *= mask_at(*m, c, h, w);
  }
  // d/dx [-||r||^2/(2s^2)] = -A^T r / s^2 with r = Ax - y.
  Tensor g = mean_map_adjoint(fm, r);
  g *= -1.0 / (fm.sigma_n * fm.sigma_n);
  return g;
}

nlohmann::json forward_model_to_json(const ForwardModel& fm) {
  nlohmann::json j;
  j["kind"] = to_string(fm.kind);
  j["sigma_n"] = fm.sigma_n;
  switch (fm.kind) {
    case ForwardKind::gaussian_blur:
      j["kernel_size"] = fm.kernel_size;
      j["kernel_sigma"] = fm.kernel_sigma;
      break;
    case ForwardKind::inpainting: {
      j["mask_shape"] = fm.mask.shape();
      std::vector<int> flat(static_cast<std::size_t>(fm.mask.numel()));
      for (std::int64_t i = 0; i < fm.mask.numel(); ++i) flat[static_cast<std::size_t>(i)] = fm.mask[i] != 0.0;
      j["mask"] = flat;
      break;
    }
    case ForwardKind::composite: {
      nlohmann::json parts = nlohmann::json::array();
      for (const auto& p : fm.parts) parts.push_back(forward_model_to_json(p));
      j["parts"] = parts;
      break;
    }
    default:
      break;
  }
  return j;
}

ForwardModel forward_model_from_json(const nlohmann::json& j) {
  ForwardModel fm;
  try {
    fm.kind = forward_kind_from_string(j.at("kind").get<std::string>());
    fm.sigma_n = j.at("sigma_n").get<double>();
    switch (fm.kind) {
      case ForwardKind::gaussian_blur:
        fm.kernel_size = j.at("kernel_size").get<std::int64_t>();
        fm.kernel_sigma = j.at("kernel_sigma").get<double>();
        break;
      case ForwardKind::inpainting: {
        const auto shape = j.at("mask_shape").get<std::vector<std::int64_t>>();
        const auto flat = j.at("mask").get<std::vector<int>>();
        std::vector<double> vals(flat.size());
        for (std::size_t i = 0; i < flat.size(); ++i) vals[i] = flat[i] ? 1.0 : 0.0;
        fm.mask = Tensor::from_vector(shape, std::move(vals));
        break;
      }
      case ForwardKind::composite:
        for (const auto& p : j.at("parts")) fm.parts.push_back(forward_model_from_json(p));
        break;
      default:
        break;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("forward model JSON: ") + e.what());
  }
  fm.validate();
  return fm;
}

}  // namespace flowdiff
