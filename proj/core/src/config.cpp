#include "flowdiff/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>

#include "flowdiff/errors.hpp"

namespace flowdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_known(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(path + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(keys.begin(), keys.end(),
                     [&](const char* k) { return key == k; }) == keys.end())
      throw ConfigError(path + ": unknown field '" + key + "'");
  }
}

template <typename T>
T get_or(const json& j, const char* key, const std::string& path, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path + "." + key + " has the wrong type");
  }
}

}  // namespace

FlowConfig ExperimentConfig::ModelSection::flow_config(std::int64_t channels, std::int64_t height,
                                                       std::int64_t width) const {
  FlowConfig cfg;
  cfg.channels = channels;
  cfg.height = height;
  cfg.width = width;
  cfg.hidden_channels = flow_hidden_channels;
  cfg.embed_channels = flow_embed_channels;
  cfg.couplings_per_scale = flow_couplings_per_scale;
  cfg.multiscale = flow_multiscale;
  cfg.use_1x1 = flow_use_1x1;
  cfg.s_max = flow_s_max;
  return cfg;
}

ScoreNetworkConfig ExperimentConfig::ModelSection::score_config(std::int64_t channels,
                                                                std::int64_t height,
                                                                std::int64_t width) const {
  ScoreNetworkConfig cfg;
  cfg.channels = channels;
  cfg.height = height;
  cfg.width = width;
  cfg.base_channels = score_base_channels;
  cfg.emb_dim = score_emb_dim;
  cfg.kernel = score_kernel;
  cfg.temb_mlp = score_temb_mlp;
  return cfg;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  check_known(j, "config", {"dataset", "model", "train", "eval"});
  ExperimentConfig cfg;

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_known(d, "dataset", {"manifest", "clean_dir", "forward_model", "seed"});
    if (d.contains("manifest")) cfg.dataset.manifest = d.at("manifest").get<std::string>();
    if (d.contains("clean_dir")) cfg.dataset.clean_dir = d.at("clean_dir").get<std::string>();
    if (d.contains("forward_model")) {
      try {
        cfg.dataset.forward_model = forward_model_from_json(d.at("forward_model"));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("dataset.forward_model: ") + e.what());
      }
    }
    cfg.dataset.seed = get_or<std::uint64_t>(d, "seed", "dataset", cfg.dataset.seed);
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_known(m, "model", {"flow", "score", "diffusion"});
    auto& ms = cfg.model;
    if (m.contains("flow")) {
      const auto& f = m.at("flow");
      check_known(f, "model.flow",
                  {"hidden_channels", "embed_channels", "couplings_per_scale", "multiscale",
                   "use_1x1", "s_max"});
      ms.flow_hidden_channels =
          get_or<std::int64_t>(f, "hidden_channels", "model.flow", ms.flow_hidden_channels);
      ms.flow_embed_channels =
          get_or<std::int64_t>(f, "embed_channels", "model.flow", ms.flow_embed_channels);
      ms.flow_couplings_per_scale = get_or<std::int64_t>(f, "couplings_per_scale", "model.flow",
                                                         ms.flow_couplings_per_scale);
      if (f.contains("multiscale") && !f.at("multiscale").is_null())
        ms.flow_multiscale = f.at("multiscale").get<bool>();
      ms.flow_use_1x1 = get_or<bool>(f, "use_1x1", "model.flow", ms.flow_use_1x1);
      ms.flow_s_max = get_or<double>(f, "s_max", "model.flow", ms.flow_s_max);
    }
    if (m.contains("score")) {
      const auto& s = m.at("score");
      check_known(s, "model.score", {"base_channels", "emb_dim", "kernel", "temb_mlp"});
      ms.score_base_channels =
          get_or<std::int64_t>(s, "base_channels", "model.score", ms.score_base_channels);
      ms.score_emb_dim = get_or<std::int64_t>(s, "emb_dim", "model.score", ms.score_emb_dim);
      ms.score_kernel = get_or<std::int64_t>(s, "kernel", "model.score", ms.score_kernel);
      ms.score_temb_mlp = get_or<bool>(s, "temb_mlp", "model.score", ms.score_temb_mlp);
    }
    if (m.contains("diffusion")) {
      const auto& d = m.at("diffusion");
      check_known(d, "model.diffusion", {"beta_min", "beta_max", "n_steps", "t_min"});
      ms.diffusion.beta_min =
          get_or<double>(d, "beta_min", "model.diffusion", ms.diffusion.beta_min);
      ms.diffusion.beta_max =
          get_or<double>(d, "beta_max", "model.diffusion", ms.diffusion.beta_max);
      ms.diffusion.n_steps =
          get_or<std::int64_t>(d, "n_steps", "model.diffusion", ms.diffusion.n_steps);
      ms.diffusion.t_min = get_or<double>(d, "t_min", "model.diffusion", ms.diffusion.t_min);
    }
  }

  if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_known(e, "eval", {"n_sample", "posterior_samples"});
    cfg.eval.n_sample = get_or<std::int64_t>(e, "n_sample", "eval", cfg.eval.n_sample);
    cfg.eval.posterior_samples =
        get_or<std::int64_t>(e, "posterior_samples", "eval", cfg.eval.posterior_samples);
  }
  return cfg;
}

json experiment_config_to_json(const ExperimentConfig& cfg) {
  json j;
  json d = json::object();
  if (cfg.dataset.manifest) d["manifest"] = *cfg.dataset.manifest;
  if (cfg.dataset.clean_dir) d["clean_dir"] = *cfg.dataset.clean_dir;
  if (cfg.dataset.forward_model)
    d["forward_model"] = forward_model_to_json(*cfg.dataset.forward_model);
  d["seed"] = cfg.dataset.seed;
  j["dataset"] = std::move(d);

  const auto& ms = cfg.model;
  json flow = {{"hidden_channels", ms.flow_hidden_channels},
               {"embed_channels", ms.flow_embed_channels},
               {"couplings_per_scale", ms.flow_couplings_per_scale},
               {"use_1x1", ms.flow_use_1x1},
               {"s_max", ms.flow_s_max}};
  if (ms.flow_multiscale) flow["multiscale"] = *ms.flow_multiscale;
  j["model"] = {{"flow", std::move(flow)},
                {"score",
                 {{"base_channels", ms.score_base_channels},
                  {"emb_dim", ms.score_emb_dim},
                  {"kernel", ms.score_kernel},
                  {"temb_mlp", ms.score_temb_mlp}}},
                {"diffusion",
                 {{"beta_min", ms.diffusion.beta_min},
                  {"beta_max", ms.diffusion.beta_max},
                  {"n_steps", ms.diffusion.n_steps},
                  {"t_min", ms.diffusion.t_min}}}};
  j["train"] = train_config_to_json(cfg.train);
  j["eval"] = {{"n_sample", cfg.eval.n_sample},
               {"posterior_samples", cfg.eval.posterior_samples}};
  return j;
}

std::filesystem::path ExperimentConfig::resolve(const std::string& p,
                                                const std::filesystem::path& base_dir) const {
  fs::path pp(p);
  return pp.is_absolute() ? pp : base_dir / pp;
}

void ExperimentConfig::validate(const std::filesystem::path& base_dir) const {
  if (dataset.manifest && dataset.clean_dir)
    throw ConfigError("dataset: set either manifest or clean_dir, not both");
  if (dataset.clean_dir && !dataset.forward_model)
    throw ConfigError("dataset.forward_model is required with dataset.clean_dir");
  if (dataset.manifest && !fs::exists(resolve(*dataset.manifest, base_dir)))
    throw ConfigError("dataset.manifest does not exist: " +
                      resolve(*dataset.manifest, base_dir).string());
  if (dataset.clean_dir && !fs::is_directory(resolve(*dataset.clean_dir, base_dir)))
    throw ConfigError("dataset.clean_dir is not a directory: " +
                      resolve(*dataset.clean_dir, base_dir).string());
  if (dataset.forward_model) {
    ForwardModel fm = *dataset.forward_model;
    fm.validate();
  }

  if (model.flow_hidden_channels < 1) throw ConfigError("model.flow.hidden_channels must be >= 1");
  if (model.flow_embed_channels < 1) throw ConfigError("model.flow.embed_channels must be >= 1");
  if (model.flow_couplings_per_scale < 1)
    throw ConfigError("model.flow.couplings_per_scale must be >= 1");
  if (!(model.flow_s_max > 0.0)) throw ConfigError("model.flow.s_max must be > 0");
  if (model.score_base_channels < 1) throw ConfigError("model.score.base_channels must be >= 1");
  if (model.score_emb_dim < 2 || model.score_emb_dim % 2 != 0)
    throw ConfigError("model.score.emb_dim must be a positive even number");
  if (model.score_kernel < 1 || model.score_kernel % 2 == 0)
    throw ConfigError("model.score.kernel must be odd");
  model.diffusion.validate();

  train.validate();

  if (eval.n_sample < 0) throw ConfigError("eval.n_sample must be >= 0");
  if (eval.posterior_samples < 1) throw ConfigError("eval.posterior_samples must be >= 1");
}

void apply_override(json& doc, const std::string& assignment) {
  std::string s = assignment;
  while (!s.empty() && s.front() == '-') s.erase(s.begin());
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form path.to.field=value");
  const std::string path = s.substr(0, eq);
  const std::string value = s.substr(eq + 1);

  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (const auto& p : parts)
    if (p.empty()) throw ConfigError("override '" + assignment + "' has an empty path segment");

  json* node = &doc;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ConfigError("override '" + assignment + "' descends into a non-object");

  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) {
    (*node)[parts.back()] = value;  // unquoted strings pass through verbatim
  } else {
    (*node)[parts.back()] = std::move(parsed);
  }
}

std::uint64_t config_digest(const json& doc) { return fnv1a(doc.dump()); }

json load_config_document(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config file " + path.string() + " must hold a JSON object");
  for (const auto& ov : overrides) apply_override(doc, ov);
  return doc;
}

fs::path make_run_dir(std::uint64_t digest) {
  const char* env = std::getenv("FLOWDIFF_RUN_DIR");
  const fs::path root = env && *env ? fs::path(env) : fs::path("./runs");

  char hex[24];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(digest));

  const std::time_t now = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  char ts[32];
  std::strftime(ts, sizeof(ts), "%Y%m%d-%H%M%S", &tm_utc);

  const std::string base = std::string(hex) + "_" + ts;
  fs::path dir = root / base;
  for (int k = 2; fs::exists(dir); ++k) dir = root / (base + "-" + std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

}  // namespace flowdiff
