#include "flowdiff/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "flowdiff/errors.hpp"

namespace flowdiff {

namespace {

// Sub-stream keys hung off cfg.seed. Distinct names keep init, loop, data
// order and resets decorrelated while the whole run stays a function of one
// seed.
const std::uint64_t kKeyFlowInit = fnv1a("flow_init");
const std::uint64_t kKeyScoreInit = fnv1a("score_init");
const std::uint64_t kKeyTrainLoop = fnv1a("train_loop");
const std::uint64_t kKeyShuffle = fnv1a("data_shuffle");
const std::uint64_t kKeyReset = fnv1a("reset");

}  // namespace

std::string to_string(ModelTarget t) {
  return t == ModelTarget::flow ? "flow" : "diffusion";
}

ModelTarget model_target_from_string(const std::string& s) {
  if (s == "flow") return ModelTarget::flow;
  if (s == "diffusion") return ModelTarget::diffusion;
  throw ConfigError("unknown model target '" + s + "' (expected flow or diffusion)");
}

std::vector<std::string> TrainConfig::validate() const {
  if (!(lr_flow > 0.0)) throw ConfigError("train.lr_flow must be > 0");
  if (!(lr_diffusion > 0.0)) throw ConfigError("train.lr_diffusion must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
  if (flow_steps_per_cycle < 1)
    throw ConfigError("train.alternation flow steps per cycle must be >= 1");
  if (diffusion_steps_per_cycle < 1)
    throw ConfigError("train.alternation diffusion steps per cycle must be >= 1");
  if (w_prior < 0.0) throw ConfigError("train.w_prior must be >= 0");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  std::int64_t prev = 0;
  for (const auto& ev : reset_schedule) {
    if (ev.step < 1) throw ConfigError("train.reset_schedule steps must be >= 1");
    if (ev.step <= prev)
      throw ConfigError("train.reset_schedule steps must be strictly increasing");
    prev = ev.step;
  }
  std::vector<std::string> warnings;
  if (lr_diffusion > lr_flow)
    warnings.push_back(
        "lr_diffusion exceeds lr_flow; a smaller diffusion learning rate is recommended");
  return warnings;
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["lr_flow"] = cfg.lr_flow;
  j["lr_diffusion"] = cfg.lr_diffusion;
  j["batch_size"] = cfg.batch_size;
  j["total_steps"] = cfg.total_steps;
  j["alternation"] = {cfg.flow_steps_per_cycle, cfg.diffusion_steps_per_cycle};
  nlohmann::json sched = nlohmann::json::array();
  for (const auto& ev : cfg.reset_schedule)
    sched.push_back({{"step", ev.step}, {"target", to_string(ev.target)}});
  j["reset_schedule"] = std::move(sched);
  j["w_prior"] = cfg.w_prior;
  j["seed"] = cfg.seed;
  j["eval_every"] = cfg.eval_every;
  j["checkpoint_every"] = cfg.checkpoint_every;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const char* known[] = {"lr_flow",        "lr_diffusion", "batch_size",
                                "total_steps",    "alternation",  "reset_schedule",
                                "w_prior",        "seed",         "eval_every",
                                "checkpoint_every"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(std::begin(known), std::end(known),
                     [&](const char* k) { return key == k; }) == std::end(known))
      throw ConfigError("train config: unknown field '" + key + "'");
  }
  TrainConfig cfg;
  try {
    cfg.lr_flow = j.value("lr_flow", cfg.lr_flow);
    cfg.lr_diffusion = j.value("lr_diffusion", cfg.lr_diffusion);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.total_steps = j.value("total_steps", cfg.total_steps);
    if (j.contains("alternation")) {
      const auto& a = j.at("alternation");
      if (!a.is_array() || a.size() != 2)
        throw ConfigError("train.alternation must be a [flow, diffusion] pair");
      cfg.flow_steps_per_cycle = a.at(0).get<std::int64_t>();
      cfg.diffusion_steps_per_cycle = a.at(1).get<std::int64_t>();
    }
    if (j.contains("reset_schedule")) {
      for (const auto& je : j.at("reset_schedule")) {
        ResetEvent ev;
        ev.step = je.at("step").get<std::int64_t>();
        ev.target = model_target_from_string(je.at("target").get<std::string>());
        cfg.reset_schedule.push_back(ev);
      }
    }
    cfg.w_prior = j.value("w_prior", cfg.w_prior);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return cfg;
}

LossRing::LossRing(std::size_t capacity) : buf_(capacity, 0.0) {
  if (capacity == 0) throw PreconditionError("LossRing capacity must be > 0");
}

void LossRing::push(double v) {
  buf_[head_] = v;
  head_ = (head_ + 1) % buf_.size();
  size_ = std::min(size_ + 1, buf_.size());
}

void LossRing::clear() {
  head_ = 0;
  size_ = 0;
}

double LossRing::mean_last(std::size_t n) const {
  const std::size_t k = std::min(n, size_);
  if (k == 0) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t idx = (head_ + buf_.size() - 1 - i) % buf_.size();
    acc += buf_[idx];
  }
  return acc / static_cast<double>(k);
}

std::vector<double> LossRing::snapshot() const {
  std::vector<double> out(size_);
  for (std::size_t i = 0; i < size_; ++i)
    out[i] = buf_[(head_ + buf_.size() - size_ + i) % buf_.size()];
  return out;
}

void LossRing::restore(const std::vector<double>& values) {
  if (values.size() > buf_.size())
    throw PreconditionError("LossRing restore exceeds capacity");
  clear();
  for (double v : values) push(v);
}

TrainState::TrainState(const FlowConfig& flow_cfg, const ScoreNetworkConfig& score_cfg,
                       const TrainConfig& cfg)
    : flow(flow_cfg),
      score(score_cfg),
      opt_flow(cfg.lr_flow),
      opt_diffusion(cfg.lr_diffusion),
      rng(cfg.seed, kKeyTrainLoop) {
  RngStream flow_rng(cfg.seed, kKeyFlowInit);
  flow.init_params(flow_rng);
  RngStream score_rng(cfg.seed, kKeyScoreInit);
  score.init_params(score_rng);
}

ModelTarget scheduled_model(const TrainConfig& cfg, const TrainState& state, std::int64_t s) {
  if (state.recovery.active) return state.recovery.target;
  const std::int64_t cycle = cfg.flow_steps_per_cycle + cfg.diffusion_steps_per_cycle;
  const std::int64_t pos = (s - 1) % cycle;
  return pos < cfg.flow_steps_per_cycle ? ModelTarget::flow : ModelTarget::diffusion;
}

UpdateResult flow_update(TrainState& state, const ImageBatch& batch, const ForwardModel& fm,
                         const DiffusionSpec& spec, const TrainConfig& cfg) {
  const Tensor& y = batch.observations;
  require_rank(y, 4, "flow_update batch");
  auto flow_params = state.flow.params();
  const std::int64_t b = y.dim(0);

  Tensor z(y.shape());
  state.rng.fill_normal(z);

  UpdateResult res;
  try {
    FlowActs acts;
    FlowOutput out = state.flow.forward(z, y, &acts);

    const double l_entropy = entropy_loss(out);
    const auto ll = log_likelihood(fm, out.x_hat, y);
    double l_data = 0.0;
    for (double v : ll) l_data -= v;
    l_data /= static_cast<double>(b);

    Tensor gx = log_likelihood_grad(fm, out.x_hat, y);
    gx *= -1.0 / static_cast<double>(b);

    double l_prior = 0.0;
    if (cfg.w_prior != 0.0) {
      PriorLossResult pr =
          prior_loss(state.score, spec, out.x_hat, GradTarget::flow_input, state.rng);
      l_prior = cfg.w_prior * pr.loss;
      pr.gx_hat *= cfg.w_prior;
      gx += pr.gx_hat;
    }

    const double total = l_entropy + l_data + l_prior;
    res.components = {total, l_entropy, l_data, l_prior};
    if (!std::isfinite(total)) throw NonFiniteError("non-finite flow loss");

    std::vector<double> glogdet(static_cast<std::size_t>(b), -1.0 / static_cast<double>(b));
    state.flow.backward(acts, gx, glogdet);
    for (auto* p : flow_params)
      if (!p->grad.all_finite())
        throw NonFiniteError("non-finite flow gradient in " + p->name);

    state.opt_flow.step(flow_params);
    nn::zero_grads(flow_params);
    res.applied = true;
  } catch (const NonFiniteError&) {
    nn::zero_grads(flow_params);
    res.applied = false;
  }
  return res;
}

UpdateResult diffusion_update(TrainState& state, const ImageBatch& batch, const ForwardModel& fm,
                              const DiffusionSpec& spec, const TrainConfig& cfg) {
  (void)fm;
  (void)cfg;
  const Tensor& y = batch.observations;
  require_rank(y, 4, "diffusion_update batch");
  auto score_params = state.score.params();

  Tensor z(y.shape());
  state.rng.fill_normal(z);

  UpdateResult res;
  try {
    // Posterior samples with the flow frozen: plain forward, no activation
    // cache, no backward, so flow parameters and grads stay bit-identical.
    FlowOutput out = state.flow.forward(z, y);
    Tensor x0_d = to_diffusion_space(out.x_hat);
    const double loss =
        dsm_loss_grad(state.score, spec, x0_d, SMWeighting::unweighted, state.rng);
    res.components.total = loss;
    if (!std::isfinite(loss)) throw NonFiniteError("non-finite dsm loss");
    for (auto* p : score_params)
      if (!p->grad.all_finite())
        throw NonFiniteError("non-finite score gradient in " + p->name);

    state.opt_diffusion.step(score_params);
    nn::zero_grads(score_params);
    res.applied = true;
  } catch (const NonFiniteError&) {
    nn::zero_grads(score_params);
    res.applied = false;
  }
  return res;
}

void reset(TrainState& state, ModelTarget target, const TrainConfig& cfg) {
  RngStream init_rng(cfg.seed, kKeyReset + static_cast<std::uint64_t>(state.step));

  RecoveryState rec;
  rec.active = true;
  rec.target = target;
  rec.started_step = state.step;
  rec.best_step = state.step;
  rec.best = std::numeric_limits<double>::infinity();

  if (target == ModelTarget::flow) {
    rec.pre_reset_level = state.flow_losses.size() > 0
                              ? state.flow_losses.mean_last(kRecoveryWindow)
                              : std::numeric_limits<double>::infinity();
    state.flow.init_params(init_rng);
    auto ps = state.flow.params();
    state.opt_flow.reset(ps);
    state.flow_losses.clear();
  } else {
    rec.pre_reset_level = state.diffusion_losses.size() > 0
                              ? state.diffusion_losses.mean_last(kRecoveryWindow)
                              : std::numeric_limits<double>::infinity();
    state.score.init_params(init_rng);
    auto ps = state.score.params();
    state.opt_diffusion.reset(ps);
    state.diffusion_losses.clear();
  }
  state.recovery = rec;
}

namespace {

// Advances recovery after an applied update of the recovery target; returns
// the exit reason when recovery finishes, nullptr while it continues.
const char* advance_recovery(TrainState& state) {
  auto& rec = state.recovery;
  const LossRing& ring =
      rec.target == ModelTarget::flow ? state.flow_losses : state.diffusion_losses;
  if (ring.size() == 0) return nullptr;
  const double smoothed = ring.mean_last(kRecoveryWindow);
  if (smoothed < rec.best) {
    rec.best = smoothed;
    rec.best_step = state.step;
  }
  if (ring.size() >= kRecoveryMinSamples && smoothed <= rec.pre_reset_level) {
    rec.active = false;
    return "recovered";
  }
  if (state.step - rec.best_step >= kRecoveryPatience) {
    rec.active = false;
    return "plateau";
  }
  return nullptr;
}

Tensor u64_vector_tensor(const std::vector<std::uint64_t>& vals) {
  Tensor t({static_cast<std::int64_t>(vals.size())});
  for (std::size_t i = 0; i < vals.size(); ++i) t[static_cast<std::int64_t>(i)] = u64_as_double(vals[i]);
  return t;
}

std::vector<std::uint64_t> tensor_u64_vector(const Tensor& t) {
  std::vector<std::uint64_t> out(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = double_as_u64(t[static_cast<std::int64_t>(i)]);
  return out;
}

}  // namespace

void save_checkpoint(const TrainState& state, std::uint64_t config_digest,
                     const std::filesystem::path& path) {
  // params() is non-const for optimizer access; serialization only reads.
  auto& mut = const_cast<TrainState&>(state);

  CheckpointData ck;
  ck.config_digest = config_digest;
  auto add_model = [&](const std::string& prefix, std::vector<nn::Param*> ps) {
    for (auto* p : ps) {
      if (!p->value.all_finite())
        throw NonFiniteError("non-finite parameter at checkpoint time: " + prefix + p->name);
      ck.add(prefix + p->name, p->value);
      ck.add(prefix + p->name + ".adam_m", p->m);
      ck.add(prefix + p->name + ".adam_v", p->v);
    }
  };
  add_model("flow.", mut.flow.params());
  add_model("score.", mut.score.params());

  const auto& rec = state.recovery;
  ck.add("train.meta_u",
         u64_vector_tensor({static_cast<std::uint64_t>(state.step), state.rng.state(),
                            state.data_epoch, state.data_cursor,
                            static_cast<std::uint64_t>(state.nonfinite_streak),
                            rec.active ? 1ull : 0ull,
                            rec.target == ModelTarget::flow ? 0ull : 1ull,
                            static_cast<std::uint64_t>(rec.best_step),
                            static_cast<std::uint64_t>(rec.started_step),
                            state.opt_flow.step_count, state.opt_diffusion.step_count}),
         TensorDtype::u64);
  ck.add("train.meta_f",
         Tensor::from_vector({2}, {rec.pre_reset_level, rec.best}));

  auto ring_f = state.flow_losses.snapshot();
  auto ring_d = state.diffusion_losses.snapshot();
  const auto nf = static_cast<std::int64_t>(ring_f.size());
  const auto nd = static_cast<std::int64_t>(ring_d.size());
  ck.add("train.ring_flow", Tensor::from_vector({nf}, std::move(ring_f)));
  ck.add("train.ring_diffusion", Tensor::from_vector({nd}, std::move(ring_d)));

  const auto& geo = mut.flow.config();
  ck.add("train.geometry",
         u64_vector_tensor({static_cast<std::uint64_t>(geo.channels),
                            static_cast<std::uint64_t>(geo.height),
                            static_cast<std::uint64_t>(geo.width)}),
         TensorDtype::u64);

  write_checkpoint(ck, path);
}

void load_model_params(const CheckpointData& ck, const std::string& prefix,
                       std::span<nn::Param* const> params) {
  for (auto* p : params) {
    const Tensor& v = ck.get(prefix + p->name);
    if (!v.same_shape(p->value))
      throw ConfigError("checkpoint parameter shape mismatch for " + prefix + p->name +
                        ": file has " + v.shape_str() + ", model expects " +
                        p->value.shape_str());
    p->value = v;
    if (ck.has(prefix + p->name + ".adam_m")) p->m = ck.get(prefix + p->name + ".adam_m");
    if (ck.has(prefix + p->name + ".adam_v")) p->v = ck.get(prefix + p->name + ".adam_v");
  }
}

std::array<std::int64_t, 3> checkpoint_geometry(const CheckpointData& ck) {
  const auto g = tensor_u64_vector(ck.get("train.geometry"));
  if (g.size() != 3)
    throw FormatError("checkpoint train.geometry has unexpected length " +
                      std::to_string(g.size()));
  return {static_cast<std::int64_t>(g[0]), static_cast<std::int64_t>(g[1]),
          static_cast<std::int64_t>(g[2])};
}

TrainState load_checkpoint(const std::filesystem::path& path, const FlowConfig& flow_cfg,
                           const ScoreNetworkConfig& score_cfg, const TrainConfig& cfg,
                           std::optional<std::uint64_t> expected_digest) {
  CheckpointData ck = read_checkpoint(path);
  if (expected_digest && ck.config_digest != *expected_digest)
    throw ConfigError("checkpoint " + path.string() +
                      " was written under a different config (digest mismatch)");

  TrainState state(flow_cfg, score_cfg, cfg);
  auto load_model = [&](const std::string& prefix, std::vector<nn::Param*> ps) {
    for (auto* p : ps) {
      const Tensor& v = ck.get(prefix + p->name);
      const Tensor& m = ck.get(prefix + p->name + ".adam_m");
      const Tensor& vv = ck.get(prefix + p->name + ".adam_v");
      if (!v.same_shape(p->value))
        throw ConfigError("checkpoint parameter shape mismatch for " + prefix + p->name +
                          ": file has " + v.shape_str() + ", model expects " +
                          p->value.shape_str());
      p->value = v;
      p->m = m;
      p->v = vv;
    }
  };
  load_model("flow.", state.flow.params());
  load_model("score.", state.score.params());

  const auto mu = tensor_u64_vector(ck.get("train.meta_u"));
  if (mu.size() != 11)
    throw FormatError("checkpoint train.meta_u has unexpected length " +
                      std::to_string(mu.size()));
  state.step = static_cast<std::int64_t>(mu[0]);
  state.rng.set_state(mu[1]);
  state.data_epoch = mu[2];
  state.data_cursor = mu[3];
  state.nonfinite_streak = static_cast<std::int64_t>(mu[4]);
  state.recovery.active = mu[5] != 0;
  state.recovery.target = mu[6] == 0 ? ModelTarget::flow : ModelTarget::diffusion;
  state.recovery.best_step = static_cast<std::int64_t>(mu[7]);
  state.recovery.started_step = static_cast<std::int64_t>(mu[8]);
  state.opt_flow.step_count = mu[9];
  state.opt_diffusion.step_count = mu[10];

  const Tensor& mf = ck.get("train.meta_f");
  if (mf.numel() != 2)
    throw FormatError("checkpoint train.meta_f has unexpected length " +
                      std::to_string(mf.numel()));
  state.recovery.pre_reset_level = mf[0];
  state.recovery.best = mf[1];

  state.flow_losses.restore(ck.get("train.ring_flow").vec());
  state.diffusion_losses.restore(ck.get("train.ring_diffusion").vec());
  return state;
}

TrainResult train(const TrainConfig& cfg, const Dataset& dataset, const ForwardModel& fm,
                  const DiffusionSpec& spec, const FlowConfig& flow_cfg,
                  const ScoreNetworkConfig& score_cfg, const std::filesystem::path& out_dir,
                  std::ostream* metrics_log, std::uint64_t config_digest,
                  const std::optional<std::filesystem::path>& resume_from,
                  const TrainHooks* hooks) {
  cfg.validate();
  spec.validate();
  std::filesystem::create_directories(out_dir);

  std::optional<TrainState> holder;
  if (resume_from) {
    holder.emplace(load_checkpoint(*resume_from, flow_cfg, score_cfg, cfg));
  } else {
    holder.emplace(flow_cfg, score_cfg, cfg);
  }
  TrainState& state = *holder;

  BatchStream batches(dataset, cfg.batch_size, RngStream(cfg.seed, kKeyShuffle).next_u64());
  batches.seek(state.data_epoch, state.data_cursor);

  auto emit = [&](const nlohmann::json& j) {
    if (metrics_log) (*metrics_log) << j.dump() << '\n';
  };

  std::size_t reset_idx = 0;
  while (reset_idx < cfg.reset_schedule.size() &&
         cfg.reset_schedule[reset_idx].step <= state.step)
    ++reset_idx;

  const auto final_path = out_dir / "ckpt_final.fdck";
  while (state.step < cfg.total_steps) {
    const std::int64_t s = state.step + 1;

    if (reset_idx < cfg.reset_schedule.size() && cfg.reset_schedule[reset_idx].step == s) {
      const auto target = cfg.reset_schedule[reset_idx].target;
      reset(state, target, cfg);
      emit({{"event", "reset"}, {"step", s}, {"target", to_string(target)}});
      ++reset_idx;
    }

    const ModelTarget which = scheduled_model(cfg, state, s);
    ImageBatch batch = batches.next();
    state.data_epoch = batches.epoch();
    state.data_cursor = batches.cursor();

    const UpdateResult r = which == ModelTarget::flow
                               ? flow_update(state, batch, fm, spec, cfg)
                               : diffusion_update(state, batch, fm, spec, cfg);
    state.step = s;

    if (!r.applied) {
      ++state.nonfinite_streak;
      emit({{"event", "skip"},
            {"step", s},
            {"model", to_string(which)},
            {"reason", "non_finite"},
            {"streak", state.nonfinite_streak}});
      if (state.nonfinite_streak > kMaxNonFiniteSkips) {
        save_checkpoint(state, config_digest, out_dir / "ckpt_abort.fdck");
        emit({{"event", "abort"}, {"step", s}, {"reason", "non_finite_cascade"}});
        if (metrics_log) metrics_log->flush();
        throw TrainAbort("training aborted at step " + std::to_string(s) + " after " +
                         std::to_string(state.nonfinite_streak) +
                         " consecutive non-finite updates");
      }
      continue;
    }
    state.nonfinite_streak = 0;

    if (which == ModelTarget::flow) {
      state.flow_losses.push(r.components.total);
      emit({{"event", "update"},
            {"step", s},
            {"model", "flow"},
            {"loss_total", r.components.total},
            {"loss_entropy", r.components.entropy},
            {"loss_data_fidelity", r.components.data_fidelity},
            {"loss_prior", r.components.prior}});
    } else {
      state.diffusion_losses.push(r.components.total);
      emit({{"event", "update"},
            {"step", s},
            {"model", "diffusion"},
            {"loss", r.components.total},
            {"weighting", "unweighted"}});
    }

    if (state.recovery.active && which == state.recovery.target) {
      if (const char* reason = advance_recovery(state)) {
        emit({{"event", "recovery_end"},
              {"step", s},
              {"target", to_string(which)},
              {"reason", reason}});
      }
    }

    if (cfg.eval_every > 0 && s % cfg.eval_every == 0 && hooks && hooks->eval) {
      emit({{"event", "eval"}, {"step", s}, {"metrics", hooks->eval(state)}});
    }
    if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) {
      const auto p = out_dir / ("ckpt_step" + std::to_string(s) + ".fdck");
      save_checkpoint(state, config_digest, p);
      emit({{"event", "checkpoint"}, {"step", s}, {"file", p.filename().string()}});
    }
  }

  save_checkpoint(state, config_digest, final_path);
  emit({{"event", "checkpoint"}, {"step", state.step}, {"file", final_path.filename().string()}});
  if (metrics_log) metrics_log->flush();
  return {final_path, state.step};
}

}  // namespace flowdiff
