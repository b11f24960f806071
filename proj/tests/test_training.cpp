#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "flowdiff/checkpoint.hpp"
#include "flowdiff/dataset.hpp"
#include "flowdiff/errors.hpp"
#include "flowdiff/forward_model.hpp"
#include "flowdiff/rng.hpp"
#include "flowdiff/train.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using flowdiff::CheckpointData;
using flowdiff::Dataset;
using flowdiff::DiffusionSpec;
using flowdiff::FlowConfig;
using flowdiff::ForwardModel;
using flowdiff::ModelTarget;
using flowdiff::RngStream;
using flowdiff::ScoreNetworkConfig;
using flowdiff::Tensor;
using flowdiff::TrainConfig;
using flowdiff::TrainState;
using flowdiff_test::make_noisy_toy_dataset;
using flowdiff_test::read_file;
using flowdiff_test::read_jsonl;
using flowdiff_test::TempDir;

namespace {

FlowConfig tiny_flow() {
  FlowConfig f;
  f.channels = 1;
  f.height = 8;
  f.width = 8;
  f.hidden_channels = 8;
  f.embed_channels = 4;
  f.couplings_per_scale = 2;
  return f;
}

ScoreNetworkConfig tiny_score() {
  ScoreNetworkConfig s;
  s.channels = 1;
  s.height = 8;
  s.width = 8;
  s.base_channels = 8;
  s.emb_dim = 8;
  return s;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.lr_flow = 1e-3;
  c.lr_diffusion = 1e-4;
  c.batch_size = 2;
  c.total_steps = 4;
  c.seed = 11;
  return c;
}

std::vector<Tensor> param_values(std::vector<flowdiff::nn::Param*> params) {
  std::vector<Tensor> out;
  for (auto* p : params) out.push_back(p->value);
  return out;
}

bool values_identical(const std::vector<Tensor>& a, std::vector<flowdiff::nn::Param*> params) {
  if (a.size() != params.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != params[i]->value.shape()) return false;
    for (std::int64_t j = 0; j < a[i].numel(); ++j) {
      if (a[i][j] != params[i]->value[j]) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("checkpoint containers round-trip bit for bit") {
  TempDir tmp;
  CheckpointData data;
  data.config_digest = 0xdeadbeefcafef00dULL;
  RngStream rng(1);
  Tensor a({2, 3});
  rng.fill_normal(a);
  Tensor b({4});
  rng.fill_normal(b);
  Tensor u({3});
  u[0] = flowdiff::u64_as_double(0);
  u[1] = flowdiff::u64_as_double(0xffffffffffffffffULL);
  u[2] = flowdiff::u64_as_double(0x8000000000000001ULL);
  data.add("model.a", a);
  data.add("model.b", b, flowdiff::TensorDtype::f32);
  data.add("state.u", u, flowdiff::TensorDtype::u64);

  const auto path = tmp.path() / "x.fdck";
  flowdiff::write_checkpoint(data, path);
  const CheckpointData back = flowdiff::read_checkpoint(path);
  CHECK(back.config_digest == data.config_digest);
  REQUIRE(back.entries.size() == 3);
  CHECK(back.entries[0].first == "model.a");
  CHECK(back.entries[1].first == "model.b");
  CHECK(back.entries[2].first == "state.u");
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    CHECK(flowdiff::double_as_u64(back.get("model.a")[i]) == flowdiff::double_as_u64(a[i]));
  }
  for (std::int64_t i = 0; i < b.numel(); ++i) {
    CHECK(back.get("model.b")[i] == static_cast<double>(static_cast<float>(b[i])));
  }
  for (std::int64_t i = 0; i < u.numel(); ++i) {
    CHECK(flowdiff::double_as_u64(back.get("state.u")[i]) == flowdiff::double_as_u64(u[i]));
  }

  // Serialization is a pure function of the contents.
  const auto path2 = tmp.path() / "y.fdck";
  flowdiff::write_checkpoint(back, path2);
  CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("checkpoint corruption is detected by the trailing checksum") {
  TempDir tmp;
  CheckpointData data;
  data.config_digest = 7;
  Tensor a({4});
  RngStream rng(2);
  rng.fill_normal(a);
  data.add("p", a);
  const auto path = tmp.path() / "c.fdck";
  flowdiff::write_checkpoint(data, path);

  auto bytes = read_file(path);
  bytes[bytes.size() - 5] ^= 0x01;  // payload byte just before the crc
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS((void)flowdiff::read_checkpoint(path), flowdiff::FormatError);

  bytes[bytes.size() - 5] ^= 0x01;
  bytes.back() ^= 0x80;  // damage the crc itself
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS((void)flowdiff::read_checkpoint(path), flowdiff::FormatError);

  CHECK_THROWS_AS((void)data.get("missing"), flowdiff::PreconditionError);
  CHECK(!data.has("missing"));
  CHECK(data.has("p"));
}

TEST_CASE("flow updates never touch the score model and vice versa") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 4, 8, 8,
                                        ForwardModel::noise_only(0.3), 21);
  const Dataset ds(m);
  const auto batch = ds.make_batch(std::vector<std::size_t>{0, 1});
  const auto fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;
  const TrainConfig cfg = tiny_train();

  TrainState state(tiny_flow(), tiny_score(), cfg);
  const auto score_before = param_values(state.score.params());
  const auto res_f = flowdiff::flow_update(state, batch, fm, spec, cfg);
  CHECK(res_f.applied);
  CHECK(values_identical(score_before, state.score.params()));

  // The flow itself did move.
  TrainState fresh(tiny_flow(), tiny_score(), cfg);
  CHECK(!values_identical(param_values(fresh.flow.params()), state.flow.params()));

  const auto flow_before = param_values(state.flow.params());
  const auto res_d = flowdiff::diffusion_update(state, batch, fm, spec, cfg);
  CHECK(res_d.applied);
  CHECK(values_identical(flow_before, state.flow.params()));
  CHECK(!values_identical(param_values(fresh.score.params()), state.score.params()));
}

TEST_CASE("loss components always sum to the reported total") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 4, 8, 8,
                                        ForwardModel::noise_only(0.3), 22);
  const Dataset ds(m);
  const auto batch = ds.make_batch(std::vector<std::size_t>{0, 1});
  const auto fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;

  TrainConfig cfg = tiny_train();
  TrainState s1(tiny_flow(), tiny_score(), cfg);
  const auto r1 = flowdiff::flow_update(s1, batch, fm, spec, cfg);
  REQUIRE(r1.applied);
  CHECK(r1.components.total ==
        r1.components.entropy + r1.components.data_fidelity + r1.components.prior);
  CHECK(r1.components.prior != 0.0);

  cfg.w_prior = 0.0;
  TrainState s2(tiny_flow(), tiny_score(), cfg);
  const auto r2 = flowdiff::flow_update(s2, batch, fm, spec, cfg);
  REQUIRE(r2.applied);
  CHECK(r2.components.prior == 0.0);
  CHECK(r2.components.total == r2.components.entropy + r2.components.data_fidelity);
}

TEST_CASE("the alternation schedule interleaves by cycle position") {
  TrainConfig cfg = tiny_train();
  TrainState state(tiny_flow(), tiny_score(), cfg);
  CHECK(flowdiff::scheduled_model(cfg, state, 1) == ModelTarget::flow);
  CHECK(flowdiff::scheduled_model(cfg, state, 2) == ModelTarget::diffusion);
  CHECK(flowdiff::scheduled_model(cfg, state, 3) == ModelTarget::flow);
  CHECK(flowdiff::scheduled_model(cfg, state, 4) == ModelTarget::diffusion);

  cfg.flow_steps_per_cycle = 2;
  CHECK(flowdiff::scheduled_model(cfg, state, 1) == ModelTarget::flow);
  CHECK(flowdiff::scheduled_model(cfg, state, 2) == ModelTarget::flow);
  CHECK(flowdiff::scheduled_model(cfg, state, 3) == ModelTarget::diffusion);
  CHECK(flowdiff::scheduled_model(cfg, state, 4) == ModelTarget::flow);

  // Recovery overrides the cycle entirely.
  state.recovery.active = true;
  state.recovery.target = ModelTarget::diffusion;
  CHECK(flowdiff::scheduled_model(cfg, state, 1) == ModelTarget::diffusion);
  CHECK(flowdiff::scheduled_model(cfg, state, 2) == ModelTarget::diffusion);
}

TEST_CASE("reset reinitializes only its target and enters recovery") {
  TrainConfig cfg = tiny_train();
  TrainState state(tiny_flow(), tiny_score(), cfg);
  RngStream jit(31);
  flowdiff_test::jitter_params(state.flow.params(), 0.05, jit);
  flowdiff_test::jitter_params(state.score.params(), 0.05, jit);
  state.step = 17;
  for (double v : {1.0, 2.0, 3.0}) state.flow_losses.push(v);

  const auto score_before = param_values(state.score.params());
  flowdiff::reset(state, ModelTarget::flow, cfg);

  CHECK(values_identical(score_before, state.score.params()));
  CHECK(state.recovery.active);
  CHECK(state.recovery.target == ModelTarget::flow);
  CHECK(state.recovery.started_step == 17);
  CHECK(state.recovery.pre_reset_level == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(state.flow_losses.size() == 0);

  // A freshly reset flow is the identity map again.
  Tensor z({1, 1, 8, 8}), y({1, 1, 8, 8});
  RngStream rng(32);
  rng.fill_normal(z);
  rng.fill_normal(y);
  const auto out = state.flow.forward(z, y);
  for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(out.x_hat[i] == z[i]);
  CHECK(out.logdet[0] == 0.0);
}

TEST_CASE("the loss ring keeps the newest window") {
  flowdiff::LossRing ring(128);
  CHECK(std::isnan(ring.mean_last(10)));
  for (int i = 1; i <= 200; ++i) ring.push(static_cast<double>(i));
  CHECK(ring.size() == 128);
  CHECK(ring.capacity() == 128);
  CHECK(ring.mean_last(5) == doctest::Approx(198.0).epsilon(1e-12));
  CHECK(ring.mean_last(1) == doctest::Approx(200.0).epsilon(1e-12));
  // Asking beyond the stored count falls back to everything retained.
  CHECK(ring.mean_last(10000) == doctest::Approx((73.0 + 200.0) / 2.0).epsilon(1e-12));

  const auto snap = ring.snapshot();
  REQUIRE(snap.size() == 128);
  CHECK(snap.front() == 73.0);
  CHECK(snap.back() == 200.0);

  flowdiff::LossRing other(128);
  other.restore(snap);
  CHECK(other.size() == 128);
  CHECK(other.mean_last(5) == doctest::Approx(198.0).epsilon(1e-12));

  ring.clear();
  CHECK(ring.size() == 0);
  CHECK(std::isnan(ring.mean_last(3)));
}

TEST_CASE("training runs are deterministic and fully logged") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 6, 8, 8,
                                        ForwardModel::noise_only(0.3), 41);
  const Dataset ds(m);
  const auto fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;
  TrainConfig cfg = tiny_train();
  cfg.total_steps = 4;

  const auto out_dir = tmp.path() / "run";
  auto run_once = [&] {
    fs::create_directories(out_dir);
    std::ofstream log(out_dir / "log.jsonl", std::ios::binary | std::ios::trunc);
    const auto res = flowdiff::train(cfg, ds, fm, spec, tiny_flow(), tiny_score(), out_dir, &log,
                                     1234);
    log.close();
    return res;
  };

  const auto res1 = run_once();
  CHECK(res1.steps_completed == 4);
  CHECK(fs::exists(res1.final_checkpoint));
  const auto ckpt_bytes = read_file(res1.final_checkpoint);
  const auto log_bytes = read_file(out_dir / "log.jsonl");

  const auto events = read_jsonl(out_dir / "log.jsonl");
  std::vector<std::string> models;
  for (const auto& e : events) {
    if (e.at("event") == "update") {
      models.push_back(e.at("model"));
      CHECK(e.contains("step"));
      if (e.at("model") == "flow") {
        CHECK(e.contains("loss_total"));
        CHECK(e.contains("loss_entropy"));
        CHECK(e.contains("loss_data_fidelity"));
        CHECK(e.contains("loss_prior"));
        const double total = e.at("loss_total");
        const double sum = double(e.at("loss_entropy")) + double(e.at("loss_data_fidelity")) +
                           double(e.at("loss_prior"));
        CHECK(total == doctest::Approx(sum).epsilon(1e-9));
      } else {
        CHECK(e.contains("loss"));
        CHECK(e.at("weighting") == "unweighted");
      }
    }
  }
  CHECK(models == std::vector<std::string>{"flow", "diffusion", "flow", "diffusion"});

  // Bitwise identical rerun: same out_dir, same seed, same everything.
  const auto res2 = run_once();
  CHECK(read_file(res2.final_checkpoint) == ckpt_bytes);
  CHECK(read_file(out_dir / "log.jsonl") == log_bytes);
}

TEST_CASE("resuming from a checkpoint continues the exact trajectory") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 6, 8, 8,
                                        ForwardModel::noise_only(0.3), 42);
  const Dataset ds(m);
  const auto fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;
  TrainConfig cfg = tiny_train();
  cfg.total_steps = 10;
  cfg.checkpoint_every = 5;

  const auto dir_a = tmp.path() / "a";
  fs::create_directories(dir_a);
  const auto res_a = flowdiff::train(cfg, ds, fm, spec, tiny_flow(), tiny_score(), dir_a, nullptr,
                                     77);
  CHECK(res_a.steps_completed == 10);
  REQUIRE(fs::exists(dir_a / "ckpt_step5.fdck"));

  const auto dir_b = tmp.path() / "b";
  fs::create_directories(dir_b);
  const auto res_b = flowdiff::train(cfg, ds, fm, spec, tiny_flow(), tiny_score(), dir_b, nullptr,
                                     77, dir_a / "ckpt_step5.fdck");
  CHECK(res_b.steps_completed == 10);
  CHECK(read_file(res_b.final_checkpoint) == read_file(res_a.final_checkpoint));
}

TEST_CASE("scheduled resets fire exactly once and pin the recovery target") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 6, 8, 8,
                                        ForwardModel::noise_only(0.3), 43);
  const Dataset ds(m);
  const auto fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;
  TrainConfig cfg = tiny_train();
  cfg.total_steps = 6;
  cfg.reset_schedule = {{3, ModelTarget::flow}};

  const auto out_dir = tmp.path() / "run";
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "log.jsonl", std::ios::binary);
  (void)flowdiff::train(cfg, ds, fm, spec, tiny_flow(), tiny_score(), out_dir, &log, 5);
  log.close();

  const auto events = read_jsonl(out_dir / "log.jsonl");
  int resets = 0;
  for (const auto& e : events) {
    if (e.at("event") == "reset") {
      ++resets;
      CHECK(e.at("step") == 3);
      CHECK(e.at("target") == "flow");
    }
    if (e.at("event") == "update" && e.at("step") >= 3) {
      CHECK(e.at("model") == "flow");  // recovery holds for the rest of the run
    }
  }
  CHECK(resets == 1);
}

TEST_CASE("periodic evaluation embeds the hook's report") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 6, 8, 8,
                                        ForwardModel::noise_only(0.3), 44);
  const Dataset ds(m);
  const auto fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;
  TrainConfig cfg = tiny_train();
  cfg.total_steps = 4;
  cfg.eval_every = 2;

  flowdiff::TrainHooks hooks;
  int calls = 0;
  hooks.eval = [&](const TrainState& state) {
    ++calls;
    return nlohmann::json{{"probe", 42}, {"at_step", state.step}};
  };

  const auto out_dir = tmp.path() / "run";
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "log.jsonl", std::ios::binary);
  (void)flowdiff::train(cfg, ds, fm, spec, tiny_flow(), tiny_score(), out_dir, &log, 6, std::nullopt,
                        &hooks);
  log.close();

  CHECK(calls == 2);
  const auto events = read_jsonl(out_dir / "log.jsonl");
  std::vector<std::int64_t> eval_steps;
  for (const auto& e : events) {
    if (e.at("event") == "eval") {
      eval_steps.push_back(e.at("step"));
      CHECK(e.at("metrics").at("probe") == 42);
    }
  }
  CHECK(eval_steps == std::vector<std::int64_t>{2, 4});
}

TEST_CASE("a non-finite cascade aborts with a usable last checkpoint") {
  TempDir tmp;
  const auto m = make_noisy_toy_dataset(tmp.path() / "d", 6, 8, 8,
                                        ForwardModel::noise_only(0.3), 45);
  const Dataset ds(m);
  const auto fm = ForwardModel::noise_only(0.3);
  DiffusionSpec spec;
  TrainConfig cfg = tiny_train();
  cfg.total_steps = 500;
  cfg.lr_flow = 1e200;  // first applied flow step catapults the parameters

  const auto out_dir = tmp.path() / "run";
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "log.jsonl", std::ios::binary);
  CHECK_THROWS_AS((void)flowdiff::train(cfg, ds, fm, spec, tiny_flow(), tiny_score(), out_dir, &log,
                                        9),
                  flowdiff::TrainAbort);
  log.close();

  REQUIRE(fs::exists(out_dir / "ckpt_abort.fdck"));
  const auto ck = flowdiff::read_checkpoint(out_dir / "ckpt_abort.fdck");
  CHECK(ck.config_digest == 9);

  const auto events = read_jsonl(out_dir / "log.jsonl");
  int skips = 0;
  bool abort_seen = false;
  std::int64_t max_streak = 0;
  for (const auto& e : events) {
    if (e.at("event") == "skip") {
      ++skips;
      CHECK(e.at("reason") == "non_finite");
      max_streak = std::max<std::int64_t>(max_streak, e.at("streak"));
    }
    if (e.at("event") == "abort") {
      abort_seen = true;
      CHECK(e.at("reason") == "non_finite_cascade");
    }
  }
  CHECK(skips > flowdiff::kMaxNonFiniteSkips);
  CHECK(max_streak > flowdiff::kMaxNonFiniteSkips);
  CHECK(abort_seen);
}

TEST_CASE("state checkpoints restore every training variable") {
  TempDir tmp;
  TrainConfig cfg = tiny_train();
  TrainState state(tiny_flow(), tiny_score(), cfg);
  state.step = 9;
  state.data_epoch = 2;
  state.data_cursor = 3;
  for (double v : {0.5, 0.25}) state.flow_losses.push(v);
  state.diffusion_losses.push(1.5);
  RngStream jit(51);
  flowdiff_test::jitter_params(state.flow.params(), 0.02, jit);
  flowdiff_test::jitter_params(state.score.params(), 0.02, jit);

  const auto path = tmp.path() / "s.fdck";
  flowdiff::save_checkpoint(state, 321, path);
  const auto geom = flowdiff::checkpoint_geometry(flowdiff::read_checkpoint(path));
  CHECK(geom == std::array<std::int64_t, 3>{1, 8, 8});

  TrainState back = flowdiff::load_checkpoint(path, tiny_flow(), tiny_score(), cfg, 321);
  CHECK(back.step == 9);
  CHECK(back.data_epoch == 2);
  CHECK(back.data_cursor == 3);
  CHECK(back.flow_losses.snapshot() == state.flow_losses.snapshot());
  CHECK(back.diffusion_losses.snapshot() == state.diffusion_losses.snapshot());
  CHECK(values_identical(param_values(state.flow.params()), back.flow.params()));
  CHECK(values_identical(param_values(state.score.params()), back.score.params()));

  // Save -> load -> save is byte stable.
  const auto path2 = tmp.path() / "s2.fdck";
  flowdiff::save_checkpoint(back, 321, path2);
  CHECK(read_file(path) == read_file(path2));

  CHECK_THROWS_AS((void)flowdiff::load_checkpoint(path, tiny_flow(), tiny_score(), cfg, 999),
                  flowdiff::ConfigError);

  FlowConfig wrong = tiny_flow();
  wrong.hidden_channels = 16;
  CHECK_THROWS_AS((void)flowdiff::load_checkpoint(path, wrong, tiny_score(), cfg, 321),
                  flowdiff::ConfigError);
}

TEST_CASE("train config validation separates errors from advice") {
  TrainConfig cfg = tiny_train();
  CHECK(cfg.validate().empty());

  TrainConfig bad = cfg;
  bad.lr_flow = 0.0;
  CHECK_THROWS_AS((void)bad.validate(), flowdiff::ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS((void)bad.validate(), flowdiff::ConfigError);
  bad = cfg;
  bad.reset_schedule = {{5, ModelTarget::flow}, {5, ModelTarget::diffusion}};
  CHECK_THROWS_AS((void)bad.validate(), flowdiff::ConfigError);

  TrainConfig advisory = cfg;
  advisory.lr_diffusion = 10.0 * advisory.lr_flow;
  CHECK(!advisory.validate().empty());

  // JSON round trip preserves every field.
  TrainConfig full = cfg;
  full.reset_schedule = {{3, ModelTarget::flow}, {8, ModelTarget::diffusion}};
  full.eval_every = 7;
  full.checkpoint_every = 9;
  full.w_prior = 0.25;
  const auto j = flowdiff::train_config_to_json(full);
  const TrainConfig round = flowdiff::train_config_from_json(j);
  CHECK(round.lr_flow == full.lr_flow);
  CHECK(round.lr_diffusion == full.lr_diffusion);
  CHECK(round.batch_size == full.batch_size);
  CHECK(round.total_steps == full.total_steps);
  CHECK(round.w_prior == full.w_prior);
  CHECK(round.seed == full.seed);
  CHECK(round.eval_every == full.eval_every);
  CHECK(round.checkpoint_every == full.checkpoint_every);
  REQUIRE(round.reset_schedule.size() == 2);
  CHECK(round.reset_schedule[1].step == 8);
  CHECK(round.reset_schedule[1].target == ModelTarget::diffusion);

  CHECK_THROWS_AS((void)flowdiff::train_config_from_json(nlohmann::json{{"bogus", 1}}),
                  flowdiff::ConfigError);
  CHECK(flowdiff::model_target_from_string("flow") == ModelTarget::flow);
  CHECK(flowdiff::model_target_from_string("diffusion") == ModelTarget::diffusion);
  CHECK(flowdiff::to_string(ModelTarget::diffusion) == "diffusion");
  CHECK_THROWS_AS((void)flowdiff::model_target_from_string("both"), flowdiff::ConfigError);
}
