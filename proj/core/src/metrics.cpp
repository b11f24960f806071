#include "flowdiff/metrics.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "flowdiff/errors.hpp"

namespace flowdiff {

double psnr(const Tensor& x, const Tensor& ref, double peak) {
  require_same_shape(x, ref, "psnr");
  if (!(peak > 0.0)) throw PreconditionError("psnr: peak must be positive");
  double mse = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double d = x[i] - ref[i];
    mse += d * d;
  }
  mse /= static_cast<double>(x.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Tensor& x, const Tensor& ref, double peak) {
  require_same_shape(x, ref, "ssim");
  require_rank(x, 3, "ssim");
  const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  constexpr std::int64_t kWin = 7;
  if (H < kWin || W < kWin) {
    throw PreconditionError("ssim: image smaller than the 7x7 window");
  }
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const double n = static_cast<double>(kWin * kWin);
  double total = 0.0;
  for (std::int64_t c = 0; c < C; ++c) {
    double acc = 0.0;
    std::int64_t count = 0;
    for (std::int64_t i = 0; i + kWin <= H; ++i) {
      for (std::int64_t j = 0; j + kWin <= W; ++j) {
        double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
        for (std::int64_t di = 0; di < kWin; ++di) {
          for (std::int64_t dj = 0; dj < kWin; ++dj) {
            const double a = x[(c * H + i + di) * W + j + dj];
            const double b = ref[(c * H + i + di) * W + j + dj];
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
          }
        }
        const double mx = sx / n, my = sy / n;
        const double vx = sxx / n - mx * mx;
        const double vy = syy / n - my * my;
        const double cov = sxy / n - mx * my;
        acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
    total += acc / static_cast<double>(count);
  }
  return total / static_cast<double>(C);
}

EmbeddingFn default_embedding() {
  return [](const Tensor& img) {
    require_rank(img, 3, "default_embedding");
    const std::int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    constexpr std::int64_t kGrid = 8;
    std::vector<double> out(static_cast<std::size_t>(C * kGrid * kGrid), 0.0);
    // Average pooling over a kGrid x kGrid partition; cells cover
    // near-equal index ranges so any H, W >= 1 works.
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t gi = 0; gi < kGrid; ++gi) {
        const std::int64_t h0 = gi * H / kGrid, h1 = std::max(h0 + 1, (gi + 1) * H / kGrid);
        for (std::int64_t gj = 0; gj < kGrid; ++gj) {
          const std::int64_t w0 = gj * W / kGrid, w1 = std::max(w0 + 1, (gj + 1) * W / kGrid);
          double acc = 0.0;
          std::int64_t cnt = 0;
          for (std::int64_t h = std::min(h0, H - 1); h < std::min(h1, H); ++h) {
            for (std::int64_t w = std::min(w0, W - 1); w < std::min(w1, W); ++w) {
              acc += img[(c * H + h) * W + w];
              ++cnt;
            }
          }
          if (cnt == 0) {
            acc = img[(c * H + std::min(h0, H - 1)) * W + std::min(w0, W - 1)];
            cnt = 1;
          }
          out[static_cast<std::size_t>((c * kGrid + gi) * kGrid + gj)] =
              acc / static_cast<double>(cnt);
        }
      }
    }
    return out;
  };
}

namespace {

void fit_gaussian(const std::vector<Tensor>& samples, const EmbeddingFn& embed,
                  Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  const auto n = static_cast<std::int64_t>(samples.size());
  if (n < 2) throw PreconditionError("frechet_gaussian needs at least 2 samples per side");
  std::vector<std::vector<double>> feats;
  feats.reserve(samples.size());
  for (const auto& s : samples) feats.push_back(embed(s));
  const auto d = static_cast<std::int64_t>(feats.front().size());
  for (const auto& f : feats) {
    if (static_cast<std::int64_t>(f.size()) != d) {
      throw ShapeError("frechet_gaussian: embedding dimension mismatch");
    }
  }
  mu = Eigen::VectorXd::Zero(d);
  for (const auto& f : feats) {
    for (std::int64_t i = 0; i < d; ++i) mu[i] += f[static_cast<std::size_t>(i)];
  }
  mu /= static_cast<double>(n);
  cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& f : feats) {
    Eigen::VectorXd v(d);
    for (std::int64_t i = 0; i < d; ++i) v[i] = f[static_cast<std::size_t>(i)] - mu[i];
    cov += v * v.transpose();
  }
  cov /= static_cast<double>(n - 1);
}

// Symmetric PSD square root with eigenvalue clamping at zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = ev[i] > 0.0 ? std::sqrt(ev[i]) : 0.0;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_gaussian(const std::vector<Tensor>& samples_a, const std::vector<Tensor>& samples_b,
                        const EmbeddingFn& embed) {
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  fit_gaussian(samples_a, embed, mu_a, cov_a);
  fit_gaussian(samples_b, embed, mu_b, cov_b);
  if (mu_a.size() != mu_b.size()) {
    throw ShapeError("frechet_gaussian: embedding dimension mismatch between sides");
  }
  // tr((Sa Sb)^(1/2)) computed symmetrically as tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)).
  const Eigen::MatrixXd ra = psd_sqrt(cov_a);
  const Eigen::MatrixXd inner = psd_sqrt(ra * cov_b * ra);
  const double mean_term = (mu_a - mu_b).squaredNorm();
  const double trace_term = cov_a.trace() + cov_b.trace() - 2.0 * inner.trace();
  return mean_term + trace_term;
}

void compute_aggregates(MetricReport& report) {
  report.sample_count = static_cast<std::int64_t>(report.per_image.size());
  auto mean_stderr = [](const std::vector<double>& vals, double& mean, double& se) {
    if (vals.empty()) {
      mean = 0.0;
      se = 0.0;
      return;
    }
    double acc = 0.0;
    for (double v : vals) acc += v;
    mean = acc / static_cast<double>(vals.size());
    if (vals.size() < 2) {
      se = 0.0;
      return;
    }
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    se = std::sqrt(ss / static_cast<double>(vals.size() - 1)) /
         std::sqrt(static_cast<double>(vals.size()));
  };

  // The +inf PSNR sentinel would poison the mean, so those entries are left
  // out; an all-identical set reports the sentinel itself.
  std::vector<double> psnrs;
  std::vector<double> ssims;
  bool saw_inf = false;
  for (const auto& p : report.per_image) {
    if (std::isinf(p.psnr_db)) {
      saw_inf = true;
    } else {
      psnrs.push_back(p.psnr_db);
    }
    ssims.push_back(p.ssim);
  }
  mean_stderr(psnrs, report.mean_psnr, report.stderr_psnr);
  if (psnrs.empty() && saw_inf) {
    report.mean_psnr = std::numeric_limits<double>::infinity();
    report.stderr_psnr = 0.0;
  }
  mean_stderr(ssims, report.mean_ssim, report.stderr_ssim);
}

nlohmann::json metric_report_to_json(const MetricReport& report) {
  auto psnr_field = [](double v) -> nlohmann::json {
    if (std::isinf(v) && v > 0.0) return "+inf";
    return v;
  };
  nlohmann::json j;
  j["per_image"] = nlohmann::json::array();
  for (const auto& p : report.per_image) {
    j["per_image"].push_back({{"id", p.id}, {"psnr_db", psnr_field(p.psnr_db)}, {"ssim", p.ssim}});
  }
  j["aggregate"] = {
      {"mean_psnr_db", psnr_field(report.mean_psnr)},
      {"mean_ssim", report.mean_ssim},
      {"stderr_psnr_db", report.stderr_psnr},
      {"stderr_ssim", report.stderr_ssim},
  };
  if (report.frechet) j["frechet"] = *report.frechet;
  j["sample_count"] = report.sample_count;
  return j;
}

}  // namespace flowdiff
