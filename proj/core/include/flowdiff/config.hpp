#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdiff/diffusion.hpp"
#include "flowdiff/flow.hpp"
#include "flowdiff/forward_model.hpp"
#include "flowdiff/score_network.hpp"
#include "flowdiff/train.hpp"

namespace flowdiff {

// Experiment document: {"dataset": ..., "model": ..., "train": ...,
// "eval": ...}. Parsing is strict (unknown fields are errors, messages name
// the offending dotted path) and happens in full before any command acts.
struct ExperimentConfig {
  struct DatasetSection {
    std::optional<std::string> manifest;   // existing dataset
    std::optional<std::string> clean_dir;  // to be corrupted with forward_model
    std::optional<ForwardModel> forward_model;
    std::uint64_t seed = 0;
  };

  // Architecture hyperparameters only; image geometry is injected from the
  // dataset when models are built.
  struct ModelSection {
    std::int64_t flow_hidden_channels = 32;
    std::int64_t flow_embed_channels = 8;
    std::int64_t flow_couplings_per_scale = 4;
    std::optional<bool> flow_multiscale;
    bool flow_use_1x1 = true;
    double flow_s_max = 2.0;

    std::int64_t score_base_channels = 16;
    std::int64_t score_emb_dim = 16;
    std::int64_t score_kernel = 3;
    bool score_temb_mlp = true;

    DiffusionSpec diffusion;

    FlowConfig flow_config(std::int64_t channels, std::int64_t height,
                           std::int64_t width) const;
    ScoreNetworkConfig score_config(std::int64_t channels, std::int64_t height,
                                    std::int64_t width) const;
  };

  struct EvalSection {
    std::int64_t n_sample = 64;          // unconditional draws for set metrics
    std::int64_t posterior_samples = 8;  // flow draws per observation
  };

  DatasetSection dataset;
  ModelSection model;
  TrainConfig train;
  EvalSection eval;

  // Structural checks beyond parsing: section value ranges and existence of
  // referenced paths (relative paths resolved against base_dir).
  void validate(const std::filesystem::path& base_dir) const;

  std::filesystem::path resolve(const std::string& p,
                                const std::filesystem::path& base_dir) const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);

// Sets a leaf in the config document from a dotted path like
// "train.lr_flow=1e-3". The value is parsed as JSON when possible, else
// taken as a string. Intermediate objects are created; the final document
// still passes strict parsing, so typos surface as unknown-field errors.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// FNV-1a digest of the canonical (sorted-key) serialization.
std::uint64_t config_digest(const nlohmann::json& doc);

// Reads the file, applies overrides in order, returns the merged document.
nlohmann::json load_config_document(const std::filesystem::path& path,
                                    const std::vector<std::string>& overrides);

// Creates <root>/<digest hex>_<UTC timestamp>[-k] where root comes from
// FLOWDIFF_RUN_DIR (default "./runs"); the -k suffix resolves collisions.
std::filesystem::path make_run_dir(std::uint64_t digest);

}  // namespace flowdiff
