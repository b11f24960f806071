#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowdiff/config.hpp"
#include "flowdiff/dataset.hpp"
#include "flowdiff/dps.hpp"
#include "flowdiff/errors.hpp"
#include "flowdiff/image_io.hpp"
#include "flowdiff/metrics.hpp"
#include "flowdiff/synthetic.hpp"
#include "flowdiff/train.hpp"

namespace fs = std::filesystem;
using namespace flowdiff;
using nlohmann::json;

namespace {

struct LoadedConfig {
  ExperimentConfig cfg;
  json doc;
  std::uint64_t digest = 0;
  fs::path base_dir;
};

LoadedConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  LoadedConfig lc;
  lc.doc = load_config_document(path, overrides);
  lc.cfg = experiment_config_from_json(lc.doc);
  lc.base_dir = fs::absolute(fs::path(path)).parent_path();
  lc.cfg.validate(lc.base_dir);
  for (const auto& w : lc.cfg.train.validate()) std::cerr << "warning: " << w << "\n";
  lc.digest = config_digest(lc.doc);
  return lc;
}

const ForwardModel& require_fm(const LoadedConfig& lc, const char* why) {
  if (!lc.cfg.dataset.forward_model)
    throw ConfigError(std::string("dataset.forward_model is required ") + why);
  return *lc.cfg.dataset.forward_model;
}

double clamp01(Tensor& t) {
  std::int64_t clamped = 0;
  for (auto& v : t.vec()) {
    if (v < 0.0) {
      v = 0.0;
      ++clamped;
    } else if (v > 1.0) {
      v = 1.0;
      ++clamped;
    }
  }
  return t.numel() == 0 ? 0.0
                        : static_cast<double>(clamped) / static_cast<double>(t.numel());
}

std::string image_ext(std::int64_t channels) { return channels == 3 ? ".ppm" : ".pgm"; }

// Square-ish grid of equally sized images with 1px mid-gray separators.
Tensor contact_sheet(const std::vector<Tensor>& images) {
  if (images.empty()) throw PreconditionError("contact sheet needs at least one image");
  const auto& sh = images.front().shape();
  const std::int64_t c = sh[0], h = sh[1], w = sh[2];
  std::int64_t cols = 1;
  while (cols * cols < static_cast<std::int64_t>(images.size())) ++cols;
  const std::int64_t rows = (static_cast<std::int64_t>(images.size()) + cols - 1) / cols;

  Tensor sheet = Tensor::full({c, rows * (h + 1) + 1, cols * (w + 1) + 1}, 0.5);
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_same_shape(images[i], images.front(), "contact sheet");
    const std::int64_t r0 = 1 + (static_cast<std::int64_t>(i) / cols) * (h + 1);
    const std::int64_t c0 = 1 + (static_cast<std::int64_t>(i) % cols) * (w + 1);
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          sheet[(ch * sheet.dim(1) + r0 + y) * sheet.dim(2) + c0 + x] =
              images[i][(ch * h + y) * w + x];
  }
  return sheet;
}

// The checkpoint with the largest recorded step among the standard names.
std::optional<fs::path> find_latest_checkpoint(const fs::path& dir) {
  std::optional<fs::path> best;
  std::int64_t best_step = -1;
  if (!fs::is_directory(dir)) return std::nullopt;
  for (const auto& de : fs::directory_iterator(dir)) {
    if (!de.is_regular_file() || de.path().extension() != ".fdck") continue;
    const auto name = de.path().filename().string();
    if (name.rfind("ckpt_", 0) != 0) continue;
    try {
      CheckpointData ck = read_checkpoint(de.path());
      const auto mu = ck.get("train.meta_u");
      const std::int64_t step = static_cast<std::int64_t>(double_as_u64(mu[0]));
      if (step > best_step) {
        best_step = step;
        best = de.path();
      }
    } catch (const Error&) {
      // unreadable candidates are skipped; resume picks from the valid ones
    }
  }
  return best;
}

std::vector<std::pair<std::string, Tensor>> load_image_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& de : fs::directory_iterator(dir)) {
    if (!de.is_regular_file()) continue;
    const auto ext = de.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(de.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& f : files) out.emplace_back(f.stem().string(), load_image(f));
  return out;
}

void print_metric_table(const MetricReport& r, std::optional<double> obs_psnr) {
  std::printf("%-16s %10s %8s\n", "id", "psnr_db", "ssim");
  for (const auto& p : r.per_image)
    std::printf("%-16s %10.3f %8.4f\n", p.id.c_str(), p.psnr_db, p.ssim);
  if (!r.per_image.empty()) {
    std::printf("%-16s %10.3f %8.4f  (stderr %.3f / %.4f)\n", "mean", r.mean_psnr, r.mean_ssim,
                r.stderr_psnr, r.stderr_ssim);
  }
  if (obs_psnr)
    std::printf("%-16s %10.3f\n", "observation", *obs_psnr);
  if (r.frechet) std::printf("frechet: %.6f\n", *r.frechet);
}

ScoreNetwork score_from_checkpoint(const LoadedConfig& lc, const CheckpointData& ck) {
  const auto geo = checkpoint_geometry(ck);
  ScoreNetwork net(lc.cfg.model.score_config(geo[0], geo[1], geo[2]));
  auto ps = net.params();
  load_model_params(ck, "score.", ps);
  return net;
}

int run_corrupt(const std::string& cfg_path, const std::vector<std::string>& overrides,
                const std::string& out_flag) {
  LoadedConfig lc = parse_config(cfg_path, overrides);
  if (!lc.cfg.dataset.clean_dir)
    throw ConfigError("dataset.clean_dir is required for corrupt");
  const ForwardModel& fm = require_fm(lc, "for corrupt");

  const fs::path out =
      out_flag.empty() ? make_run_dir(lc.digest) / "dataset" : fs::path(out_flag);
  const auto manifest =
      build_corrupted_dataset(lc.cfg.resolve(*lc.cfg.dataset.clean_dir, lc.base_dir), out, fm,
                              to_string(fm.kind), lc.cfg.dataset.seed);
  std::printf("corrupted %zu images with %s (seed %llu)\n", manifest.entries.size(),
              to_string(fm.kind).c_str(),
              static_cast<unsigned long long>(lc.cfg.dataset.seed));
  std::printf("manifest: %s\n", (out / "manifest.json").string().c_str());
  return 0;
}

int run_train(const std::string& cfg_path, const std::vector<std::string>& overrides,
              const std::string& run_dir_flag, bool resume) {
  LoadedConfig lc = parse_config(cfg_path, overrides);
  const ForwardModel& fm = require_fm(lc, "for train");

  const fs::path run_dir =
      run_dir_flag.empty() ? make_run_dir(lc.digest) : fs::path(run_dir_flag);
  fs::create_directories(run_dir);
  {
    std::ofstream cfg_copy(run_dir / "config.json", std::ios::trunc);
    cfg_copy << lc.doc.dump(2) << "\n";
  }

  DatasetManifest manifest;
  if (lc.cfg.dataset.manifest) {
    manifest = load_manifest(lc.cfg.resolve(*lc.cfg.dataset.manifest, lc.base_dir));
  } else if (lc.cfg.dataset.clean_dir) {
    manifest =
        build_corrupted_dataset(lc.cfg.resolve(*lc.cfg.dataset.clean_dir, lc.base_dir),
                                run_dir / "dataset", fm, to_string(fm.kind),
                                lc.cfg.dataset.seed);
  } else {
    throw ConfigError("dataset.manifest or dataset.clean_dir is required for train");
  }
  Dataset dataset(manifest);
  if (dataset.size() == 0) throw ConfigError("dataset.manifest lists no images");

  const auto& sh = dataset.image_shape();
  const FlowConfig flow_cfg = lc.cfg.model.flow_config(sh[0], sh[1], sh[2]);
  const ScoreNetworkConfig score_cfg = lc.cfg.model.score_config(sh[0], sh[1], sh[2]);

  std::optional<fs::path> resume_from;
  if (resume) {
    resume_from = find_latest_checkpoint(run_dir);
    if (!resume_from)
      throw IoError("no checkpoint to resume from in " + run_dir.string());
    std::printf("resuming from %s\n", resume_from->string().c_str());
  }

  std::ofstream log(run_dir / "metrics.jsonl",
                    resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open metrics log in " + run_dir.string());

  // Light periodic eval: flow posterior-mean PSNR against references (or the
  // observations themselves when no references exist).
  const std::int64_t eval_n = std::min<std::int64_t>(static_cast<std::int64_t>(dataset.size()), 32);
  const std::int64_t k_draws = lc.cfg.eval.posterior_samples;
  TrainHooks hooks;
  hooks.eval = [&](const TrainState& st) -> json {
    RngStream erng(lc.cfg.train.seed,
                   fnv1a("eval") + static_cast<std::uint64_t>(st.step));
    double acc = 0.0;
    for (std::int64_t i = 0; i < eval_n; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      Tensor y = dataset.observation(idx).reshaped({1, sh[0], sh[1], sh[2]});
      auto draws = st.flow.sample_posterior(y, static_cast<int>(k_draws), erng);
      Tensor mean = Tensor::zeros(y.shape());
      for (const auto& d : draws) mean += d;
      mean *= 1.0 / static_cast<double>(draws.size());
      clamp01(mean);
      const Tensor& ref = dataset.has_references() ? dataset.reference(idx)
                                                   : dataset.observation(idx);
      acc += psnr(mean.reshaped({sh[0], sh[1], sh[2]}), ref);
    }
    return json{{"flow_posterior_psnr", eval_n > 0 ? acc / static_cast<double>(eval_n) : 0.0},
                {"n_images", eval_n},
                {"posterior_samples", k_draws}};
  };

  const TrainResult res = train(lc.cfg.train, dataset, fm, lc.cfg.model.diffusion, flow_cfg,
                                score_cfg, run_dir, &log, lc.digest, resume_from, &hooks);
  std::printf("trained to step %lld\n", static_cast<long long>(res.steps_completed));
  std::printf("final checkpoint: %s\n", res.final_checkpoint.string().c_str());
  std::printf("metrics log: %s\n", (run_dir / "metrics.jsonl").string().c_str());
  return 0;
}

int run_sample(const std::string& cfg_path, const std::vector<std::string>& overrides,
               const std::string& ck_path, std::int64_t n, const std::string& out_flag,
               std::uint64_t seed) {
  LoadedConfig lc = parse_config(cfg_path, overrides);
  if (n < 0) throw ConfigError("sample count must be >= 0");
  CheckpointData ck = read_checkpoint(ck_path);
  ScoreNetwork net = score_from_checkpoint(lc, ck);
  const auto geo = checkpoint_geometry(ck);

  const fs::path out = out_flag.empty() ? make_run_dir(lc.digest) / "samples" : fs::path(out_flag);
  fs::create_directories(out);

  if (n == 0) {
    std::printf("wrote 0 samples to %s\n", out.string().c_str());
    return 0;
  }

  NetworkScoreModel model(net);
  RngStream rng(seed, fnv1a("sample"));
  Tensor x = sample_unconditional(model, lc.cfg.model.diffusion, {n, geo[0], geo[1], geo[2]}, rng);
  const double clamped = clamp01(x);

  std::vector<Tensor> images;
  const std::int64_t stride = geo[0] * geo[1] * geo[2];
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor img({geo[0], geo[1], geo[2]});
    std::copy(x.vec().begin() + i * stride, x.vec().begin() + (i + 1) * stride,
              img.vec().begin());
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%04lld", static_cast<long long>(i));
    save_image(img, out / (std::string(name) + image_ext(geo[0])));
    images.push_back(std::move(img));
  }
  save_image(contact_sheet(images), out / ("grid" + image_ext(geo[0])));
  std::printf("wrote %lld samples to %s (clamp fraction %.4f)\n", static_cast<long long>(n),
              out.string().c_str(), clamped);
  return 0;
}

int run_posterior(const std::string& cfg_path, const std::vector<std::string>& overrides,
                  const std::string& ck_path, const std::string& mode,
                  const std::string& out_flag, std::int64_t samples_flag,
                  std::int64_t dps_steps, double zeta, const std::string& zeta_mode_str,
                  std::uint64_t seed) {
  LoadedConfig lc = parse_config(cfg_path, overrides);
  if (!lc.cfg.dataset.manifest)
    throw ConfigError("dataset.manifest is required for posterior");
  DatasetManifest manifest =
      load_manifest(lc.cfg.resolve(*lc.cfg.dataset.manifest, lc.base_dir));
  Dataset dataset(manifest);

  CheckpointData ck = read_checkpoint(ck_path);
  const auto geo = checkpoint_geometry(ck);
  if (dataset.size() > 0 &&
      (dataset.image_shape() != std::vector<std::int64_t>{geo[0], geo[1], geo[2]}))
    throw ConfigError("dataset image shape does not match the checkpoint geometry");

  const fs::path out =
      out_flag.empty() ? make_run_dir(lc.digest) / "posterior" : fs::path(out_flag);
  fs::create_directories(out);

  MetricReport report;
  std::vector<std::pair<std::string, Tensor>> recons;
  if (mode == "flow") {
    ConditionalFlow flow(lc.cfg.model.flow_config(geo[0], geo[1], geo[2]));
    auto ps = flow.params();
    load_model_params(ck, "flow.", ps);
    const std::int64_t k =
        samples_flag > 0 ? samples_flag : lc.cfg.eval.posterior_samples;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const std::string& id = dataset.id(i);
      Tensor y = dataset.observation(i).reshaped({1, geo[0], geo[1], geo[2]});
      RngStream rng(seed, fnv1a(id));
      auto draws = flow.sample_posterior(y, static_cast<int>(k), rng);
      Tensor mean = Tensor::zeros(y.shape());
      for (const auto& d : draws) mean += d;
      mean *= 1.0 / static_cast<double>(draws.size());
      clamp01(mean);
      Tensor img = mean.reshaped({geo[0], geo[1], geo[2]});
      if (dataset.has_references()) {
        MetricReport::PerImage pi;
        pi.id = id;
        pi.psnr_db = psnr(img, dataset.reference(i));
        pi.ssim = (geo[1] >= 7 && geo[2] >= 7) ? ssim(img, dataset.reference(i)) : 0.0;
        report.per_image.push_back(std::move(pi));
      }
      recons.emplace_back(id, std::move(img));
    }
    compute_aggregates(report);
  } else if (mode == "dps") {
    const ForwardModel& fm = require_fm(lc, "for posterior --mode dps");
    ScoreNetwork net = score_from_checkpoint(lc, ck);
    NetworkScoreModel model(net);
    DPSConfig dcfg;
    dcfg.n_steps = dps_steps;
    dcfg.zeta = zeta;
    dcfg.zeta_mode = zeta_mode_from_string(zeta_mode_str);
    dcfg.seed = seed;
    auto rep = reconstruct_batch(model, lc.cfg.model.diffusion, dataset, fm, dcfg);
    for (auto& r : rep.images) recons.emplace_back(r.id, std::move(r.image01));
    report = std::move(rep.metrics);
  } else {
    throw ConfigError("posterior mode must be 'flow' or 'dps'");
  }

  for (const auto& [id, img] : recons)
    save_image(img, out / ("recon_" + id + image_ext(geo[0])));

  std::optional<double> obs_psnr;
  if (dataset.has_references() && dataset.size() > 0) {
    double acc = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i)
      acc += psnr(dataset.observation(i), dataset.reference(i));
    obs_psnr = acc / static_cast<double>(dataset.size());
  }

  json out_json = metric_report_to_json(report);
  out_json["mode"] = mode;
  if (obs_psnr) out_json["observation_mean_psnr_db"] = *obs_psnr;
  {
    std::ofstream rf(out / "report.json", std::ios::trunc);
    rf << out_json.dump(2) << "\n";
    if (!rf) throw IoError("cannot write report to " + out.string());
  }
  print_metric_table(report, obs_psnr);
  std::printf("reconstructions: %s\n", out.string().c_str());
  return 0;
}

int run_eval(const std::string& samples_dir, const std::string& reference_dir,
             const std::string& out_flag) {
  auto samples = load_image_dir(samples_dir);
  auto refs = load_image_dir(reference_dir);
  if (samples.size() < 2 || refs.size() < 2)
    throw ConfigError("eval needs at least 2 images on each side (got " +
                      std::to_string(samples.size()) + " and " + std::to_string(refs.size()) +
                      ")");

  std::vector<Tensor> sa, sb;
  for (const auto& [id, t] : samples) sa.push_back(t);
  for (const auto& [id, t] : refs) sb.push_back(t);

  MetricReport report;
  report.frechet = frechet_gaussian(sa, sb);
  // Paired metrics for ids present on both sides.
  for (const auto& [id, img] : samples) {
    auto it = std::find_if(refs.begin(), refs.end(),
                           [&](const auto& p) { return p.first == id; });
    if (it == refs.end()) continue;
    MetricReport::PerImage pi;
    pi.id = id;
    pi.psnr_db = psnr(img, it->second);
    pi.ssim = (img.dim(1) >= 7 && img.dim(2) >= 7) ? ssim(img, it->second) : 0.0;
    report.per_image.push_back(std::move(pi));
  }
  const auto frechet_keep = report.frechet;
  compute_aggregates(report);
  report.frechet = frechet_keep;

  json out_json = metric_report_to_json(report);
  out_json["n_samples"] = samples.size();
  out_json["n_reference"] = refs.size();

  print_metric_table(report, std::nullopt);
  std::printf("n_samples: %zu, n_reference: %zu\n", samples.size(), refs.size());

  const fs::path out = out_flag.empty() ? fs::path("eval_report.json") : fs::path(out_flag);
  std::ofstream rf(out, std::ios::trunc);
  rf << out_json.dump(2) << "\n";
  if (!rf) throw IoError("cannot write " + out.string());
  std::printf("report: %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Dotted-path assignments like --train.lr_flow=1e-3 are config overrides;
  // everything else goes to the regular flag parser.
  std::vector<std::string> overrides;
  std::vector<std::string> plain;
  plain.emplace_back(argv[0]);
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a.rfind("--", 0) == 0) {
      const auto eq = a.find('=');
      const std::string head = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
      if (eq != std::string::npos && head.find('.') != std::string::npos) {
        overrides.push_back(a.substr(2));
        continue;
      }
    }
    plain.push_back(a);
  }
  std::vector<char*> cargv;
  for (auto& s : plain) cargv.push_back(s.data());

  CLI::App app{"flowdiff: flow/diffusion training from corrupted observations"};
  app.require_subcommand(1);

  std::string cfg_path, out_flag, run_dir_flag, ck_path, mode = "flow";
  std::string samples_dir, reference_dir, zeta_mode_str = "residual_normalized";
  std::int64_t n = 16, samples_flag = 0, dps_steps = 200;
  double zeta = 1.0;
  std::uint64_t seed = 0;
  bool resume = false;

  auto* c_corrupt = app.add_subcommand("corrupt", "corrupt a clean image folder into a dataset");
  c_corrupt->add_option("--config", cfg_path, "experiment config JSON")->required();
  c_corrupt->add_option("--out", out_flag, "output dataset directory");

  auto* c_train = app.add_subcommand("train", "run the joint training loop");
  c_train->add_option("--config", cfg_path, "experiment config JSON")->required();
  c_train->add_option("--run-dir", run_dir_flag, "run directory (default: fresh under FLOWDIFF_RUN_DIR)");
  c_train->add_flag("--resume", resume, "resume from the latest checkpoint in --run-dir");

  auto* c_sample = app.add_subcommand("sample", "draw unconditional samples from a checkpoint");
  c_sample->add_option("--config", cfg_path, "experiment config JSON")->required();
  c_sample->add_option("--checkpoint", ck_path, "checkpoint file")->required();
  c_sample->add_option("--n", n, "number of samples");
  c_sample->add_option("--out", out_flag, "output directory");
  c_sample->add_option("--seed", seed, "sampling seed");

  auto* c_post = app.add_subcommand("posterior", "reconstruct observations from a checkpoint");
  c_post->add_option("--config", cfg_path, "experiment config JSON")->required();
  c_post->add_option("--checkpoint", ck_path, "checkpoint file")->required();
  c_post->add_option("--mode", mode, "flow | dps");
  c_post->add_option("--out", out_flag, "output directory");
  c_post->add_option("--samples", samples_flag, "flow posterior draws per image");
  c_post->add_option("--dps-steps", dps_steps, "dps integration steps");
  c_post->add_option("--zeta", zeta, "dps measurement step size");
  c_post->add_option("--zeta-mode", zeta_mode_str, "fixed | residual_normalized");
  c_post->add_option("--seed", seed, "sampling seed");

  auto* c_eval = app.add_subcommand("eval", "compare two image directories");
  c_eval->add_option("--samples", samples_dir, "directory of generated images")->required();
  c_eval->add_option("--reference", reference_dir, "directory of reference images")->required();
  c_eval->add_option("--out", out_flag, "report JSON path");

  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (c_corrupt->parsed()) return run_corrupt(cfg_path, overrides, out_flag);
    if (c_train->parsed()) return run_train(cfg_path, overrides, run_dir_flag, resume);
    if (c_sample->parsed()) return run_sample(cfg_path, overrides, ck_path, n, out_flag, seed);
    if (c_post->parsed())
      return run_posterior(cfg_path, overrides, ck_path, mode, out_flag, samples_flag,
                           dps_steps, zeta, zeta_mode_str, seed);
    if (c_eval->parsed()) return run_eval(samples_dir, reference_dir, out_flag);
    std::cerr << "error: no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const TrainAbort& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const PreconditionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
