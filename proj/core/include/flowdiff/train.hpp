#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdiff/checkpoint.hpp"
#include "flowdiff/dataset.hpp"
#include "flowdiff/diffusion.hpp"
#include "flowdiff/flow.hpp"
#include "flowdiff/forward_model.hpp"
#include "flowdiff/score_network.hpp"

namespace flowdiff {

enum class ModelTarget { flow, diffusion };

std::string to_string(ModelTarget t);
ModelTarget model_target_from_string(const std::string& s);

struct ResetEvent {
  std::int64_t step = 0;
  ModelTarget target = ModelTarget::flow;
};

struct TrainConfig {
  double lr_flow = 1e-3;
  double lr_diffusion = 1e-4;
  std::int64_t batch_size = 16;
  std::int64_t total_steps = 1000;
  // Steps per alternation cycle; (1,1) interleaves single updates.
  std::int64_t flow_steps_per_cycle = 1;
  std::int64_t diffusion_steps_per_cycle = 1;
  std::vector<ResetEvent> reset_schedule;
  double w_prior = 1.0;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 0;        // 0 disables periodic evaluation
  std::int64_t checkpoint_every = 0;  // 0 keeps only the final checkpoint

  // Throws ConfigError on hard violations; returns advisory warnings (for
  // now only the lr_diffusion > lr_flow recommendation).
  std::vector<std::string> validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Fixed-capacity ring of the most recent per-update losses of one model.
// Smoothing windows for reset recovery read from here.
class LossRing {
 public:
  explicit LossRing(std::size_t capacity = 128);

  void push(double v);
  void clear();
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return buf_.size(); }
  // Mean of the newest min(n, size) entries; NaN when empty.
  double mean_last(std::size_t n) const;

  std::vector<double> snapshot() const;  // oldest to newest
  void restore(const std::vector<double>& values);

 private:
  std::vector<double> buf_;
  std::size_t head_ = 0;  // next write position
  std::size_t size_ = 0;
};

// Post-reset bookkeeping: while active, only `target` trains and the partner
// stays frozen. Exit when the smoothed loss recovers to the pre-reset level,
// or after kRecoveryPatience target steps without a new smoothed best.
struct RecoveryState {
  bool active = false;
  ModelTarget target = ModelTarget::flow;
  double pre_reset_level = 0.0;
  double best = std::numeric_limits<double>::infinity();
  std::int64_t best_step = 0;
  std::int64_t started_step = 0;
};

inline constexpr std::int64_t kRecoveryPatience = 500;
inline constexpr std::size_t kRecoveryWindow = 100;
// Minimum post-reset samples before the recovered-level comparison engages.
inline constexpr std::size_t kRecoveryMinSamples = 20;
inline constexpr std::int64_t kMaxNonFiniteSkips = 50;

struct TrainState {
  TrainState(const FlowConfig& flow_cfg, const ScoreNetworkConfig& score_cfg,
             const TrainConfig& cfg);

  std::int64_t step = 0;  // completed update steps
  ConditionalFlow flow;
  ScoreNetwork score;
  nn::Adam opt_flow;
  nn::Adam opt_diffusion;
  RngStream rng;  // the training loop's stream; all update draws come from it
  LossRing flow_losses;
  LossRing diffusion_losses;
  RecoveryState recovery;
  std::int64_t nonfinite_streak = 0;
  std::uint64_t data_epoch = 0;
  std::uint64_t data_cursor = 0;
};

// The model scheduled at 1-based step s: the alternation cycle position,
// overridden by an active recovery.
ModelTarget scheduled_model(const TrainConfig& cfg, const TrainState& state, std::int64_t s);

struct LossComponents {
  double total = 0.0;
  double entropy = 0.0;
  double data_fidelity = 0.0;
  double prior = 0.0;  // already weighted by w_prior
};

struct UpdateResult {
  bool applied = false;  // false: non-finite loss or gradient, step skipped
  LossComponents components;
};

// One optimizer step on the flow parameters under the three-term objective.
// Score parameters and gradients are left bit-identical.
UpdateResult flow_update(TrainState& state, const ImageBatch& batch, const ForwardModel& fm,
                         const DiffusionSpec& spec, const TrainConfig& cfg);

// One optimizer step on the score parameters from unweighted denoising score
// matching on flow posterior samples. Flow parameters stay bit-identical.
UpdateResult diffusion_update(TrainState& state, const ImageBatch& batch, const ForwardModel& fm,
                              const DiffusionSpec& spec, const TrainConfig& cfg);

// Re-initializes the target model and its optimizer from a stream derived
// from (cfg.seed, state.step); enters recovery mode.
void reset(TrainState& state, ModelTarget target, const TrainConfig& cfg);

void save_checkpoint(const TrainState& state, std::uint64_t config_digest,
                     const std::filesystem::path& path);

// Copies "<prefix><name>" tensors (and optimizer moments when present) into
// the given parameters; shapes must match. Lets tools rebuild a single model
// from a checkpoint without the full TrainState machinery.
void load_model_params(const CheckpointData& ck, const std::string& prefix,
                       std::span<nn::Param* const> params);

// The (channels, height, width) image geometry recorded at save time.
std::array<std::int64_t, 3> checkpoint_geometry(const CheckpointData& ck);
// Rebuilds a state from a checkpoint. Model shapes must match the configs;
// a digest mismatch (when expected_digest is set) is a ConfigError.
TrainState load_checkpoint(const std::filesystem::path& path, const FlowConfig& flow_cfg,
                           const ScoreNetworkConfig& score_cfg, const TrainConfig& cfg,
                           std::optional<std::uint64_t> expected_digest = std::nullopt);

struct TrainHooks {
  // Periodic evaluation on a state snapshot; the returned object is embedded
  // in the eval log event.
  std::function<nlohmann::json(const TrainState&)> eval;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::int64_t steps_completed = 0;
};

// Runs the alternating loop to cfg.total_steps, appending JSON-lines events
// to metrics_log (nullable) and writing checkpoints under out_dir. Resuming
// from a checkpoint continues the exact trajectory of an uninterrupted run.
// Throws TrainAbort after a non-finite cascade; the last good checkpoint is
// on disk ("ckpt_abort.fdck") when that happens.
TrainResult train(const TrainConfig& cfg, const Dataset& dataset, const ForwardModel& fm,
                  const DiffusionSpec& spec, const FlowConfig& flow_cfg,
                  const ScoreNetworkConfig& score_cfg, const std::filesystem::path& out_dir,
                  std::ostream* metrics_log, std::uint64_t config_digest,
                  const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                  const TrainHooks* hooks = nullptr);

}  // namespace flowdiff
