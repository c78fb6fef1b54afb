#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "fgn/train.hpp"

using namespace fgn;
namespace fs = std::filesystem;

static fs::path tmp_path(const std::string& name) {
  fs::path p = fs::path(FGN_TEST_TMP) / "train";
  fs::create_directories(p);
  return p / name;
}

static ModelConfig tiny_config() {
  ModelConfig c;
  c.sites = 8;
  c.d_latent = 8;
  c.n_layers = 1;
  c.d_noise = 3;
  c.d_cond = 4;
  c.window = 1;
  c.heads = 2;
  return c;
}

static const Dataset& tiny_dataset() {
  static Dataset d = [] {
    SystemConfig cfg;
    cfg.sites = 8;
    cfg.seed = 1;
    return make_dataset(cfg, 300, {0.8, 0.1, 0.1}, 50);
  }();
  return d;
}

static TrainConfig tiny_train(std::vector<StageConfig> stages) {
  TrainConfig t;
  t.stages = std::move(stages);
  t.batch_size = 8;
  t.n_samples = 2;
  t.master_seed = 5;
  return t;
}

TEST_CASE("learning rate warms up linearly and decays to an exact zero") {
  StageConfig s{1, 100, 1e-3, 10};
  REQUIRE(lr_at(s, 0) == 1e-4);
  REQUIRE(lr_at(s, 4) == 5e-4);
  REQUIRE(lr_at(s, 9) == 1e-3);  // peak hit exactly at the last warmup step
  REQUIRE(lr_at(s, 54) == Catch::Approx(5e-4).margin(1e-18));
  REQUIRE(lr_at(s, 99) == 0.0);  // exact zero, not approximately zero
  REQUIRE(lr_at(s, 98) > 0.0);
  REQUIRE_THROWS_AS(lr_at(s, 100), ContractViolation);
  REQUIRE_THROWS_AS(lr_at(s, -1), ContractViolation);
  // monotone: rises through warmup, falls after
  for (int64_t i = 1; i < 10; ++i) REQUIRE(lr_at(s, i) > lr_at(s, i - 1));
  for (int64_t i = 11; i < 100; ++i) REQUIRE(lr_at(s, i) < lr_at(s, i - 1));
}

TEST_CASE("adamw first step matches the closed form") {
  std::vector<Tensor> params{Tensor::from({1}, {1.0})};
  std::vector<Tensor> grads{Tensor::from({1}, {0.5})};
  OptState opt = OptState::like(params);
  AdamConfig cfg;
  adamw_update(params, grads, opt, 0.01, cfg, {true});
  // after bias correction the first step is g/(|g|+eps), plus decoupled decay
  double expect = 1.0 - 0.01 * (0.5 / (0.5 + 1e-8) + 0.1 * 1.0);
  REQUIRE(params[0].at(0) == Catch::Approx(expect).margin(1e-15));
  REQUIRE(opt.step == 1);
}

TEST_CASE("adamw tracks an independent reference over many steps") {
  RngStream r = RngStream::root(3, "adam-ref");
  std::vector<Tensor> params{randn({3, 2}, r), randn({4}, r)};
  std::vector<Tensor> grads_init{randn({3, 2}, r), randn({4}, r)};
  std::vector<bool> mask{true, false};
  AdamConfig cfg;
  OptState opt = OptState::like(params);

  // reference: straight transcription of decoupled-decay Adam
  std::vector<Tensor> rp = params;
  std::vector<Tensor> rm{Tensor::zeros({3, 2}), Tensor::zeros({4})};
  std::vector<Tensor> rv{Tensor::zeros({3, 2}), Tensor::zeros({4})};
  std::vector<Tensor> g = grads_init;
  for (int step = 1; step <= 7; ++step) {
    double lr = 0.02 / step;
    adamw_update(params, g, opt, lr, cfg, mask);
    for (size_t i = 0; i < rp.size(); ++i) {
      for (size_t j = 0; j < rp[i].data.size(); ++j) {
        rm[i].data[j] = 0.9 * rm[i].data[j] + 0.1 * g[i].data[j];
        rv[i].data[j] = 0.999 * rv[i].data[j] + 0.001 * g[i].data[j] * g[i].data[j];
        double mhat = rm[i].data[j] / (1.0 - std::pow(0.9, step));
        double vhat = rv[i].data[j] / (1.0 - std::pow(0.999, step));
        double upd = mhat / (std::sqrt(vhat) + 1e-8);
        if (mask[i]) upd += 0.1 * rp[i].data[j];
        rp[i].data[j] -= lr * upd;
      }
    }
    for (Tensor& t : g)
      for (double& v : t.data) v *= -0.8;  // vary the gradient each step
  }
  for (size_t i = 0; i < rp.size(); ++i)
    for (size_t j = 0; j < rp[i].data.size(); ++j)
      REQUIRE(params[i].data[j] == Catch::Approx(rp[i].data[j]).margin(1e-14));
}

TEST_CASE("global clipping rescales jointly") {
  std::vector<Tensor> g{Tensor::from({1}, {3.0}), Tensor::from({1}, {4.0})};
  double norm = clip_global_norm(g, 2.5);
  REQUIRE(norm == Catch::Approx(5.0));
  REQUIRE(g[0].at(0) == Catch::Approx(1.5));
  REQUIRE(g[1].at(0) == Catch::Approx(2.0));
  std::vector<Tensor> h{Tensor::from({2}, {0.3, 0.4})};
  REQUIRE(clip_global_norm(h, 2.5) == Catch::Approx(0.5));
  REQUIRE(h[0].at(0) == 0.3);
  REQUIRE(h[0].at(1) == 0.4);
}

TEST_CASE("weight decay touches weight matrices only") {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 0, 7);
  RngStream r = RngStream::root(1, "fill");
  auto defs = param_defs(cfg);
  for (size_t i = 0; i < defs.size(); ++i) p.values[i] = randn(defs[i].shape, r, 0.5);
  std::vector<Tensor> before = p.values;

  std::vector<Tensor> zero_grads;
  std::vector<bool> mask;
  for (const ParamDef& d : defs) {
    zero_grads.push_back(Tensor::zeros(d.shape));
    mask.push_back(d.decay);
  }
  OptState opt = OptState::like(p.values);
  AdamConfig acfg;
  adamw_update(p.values, zero_grads, opt, 0.5, acfg, mask);

  // zero grads: the only movement is lr * wd * p on decayed tensors
  for (size_t i = 0; i < defs.size(); ++i) {
    bool is_bias = defs[i].shape.size() == 1;
    bool is_norm_map = defs[i].zero_init;
    bool is_noise_encoder = defs[i].name == "noise_encoder.w";
    REQUIRE(defs[i].decay == (!is_bias && !is_norm_map && !is_noise_encoder));
    for (size_t j = 0; j < p.values[i].data.size(); ++j) {
      double expect = defs[i].decay ? before[i].data[j] * (1.0 - 0.5 * 0.1) : before[i].data[j];
      REQUIRE(p.values[i].data[j] == Catch::Approx(expect).margin(1e-15));
    }
  }
}

TEST_CASE("desk schedule shape and scaling") {
  TrainConfig full = TrainConfig::desk(true);
  REQUIRE(full.stages.size() == 9);
  REQUIRE(full.stages[0].steps == 20000);
  REQUIRE(full.stages[0].warmup == 1000);
  REQUIRE(full.stages[0].rollout == 1);
  REQUIRE(full.stages[1].steps == 2000);
  REQUIRE(full.stages[2].rollout == 2);
  REQUIRE(full.stages[8].rollout == 8);
  REQUIRE(full.stages[8].steps == 250);
  REQUIRE(full.stages[8].warmup == 12);
  full.validate();

  TrainConfig half = full.scaled(0.5);
  REQUIRE(half.stages[0].steps == 10000);
  REQUIRE(half.stages[0].warmup == 500);
  REQUIRE(half.stages[8].steps == 125);
  half.validate();

  TrainConfig single = TrainConfig::desk(false);
  REQUIRE(single.stages.size() == 1);

  TrainConfig bad = full;
  std::swap(bad.stages[2], bad.stages[8]);
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  TrainConfig few = full;
  few.n_samples = 1;
  REQUIRE_THROWS_AS(few.validate(), ConfigError);

  REQUIRE(TrainConfig::default_warmup(250) == 12);
  REQUIRE(TrainConfig::default_warmup(100) == 10);
  REQUIRE(TrainConfig::default_warmup(40) == 10);
  REQUIRE(TrainConfig::default_warmup(2000) == 100);

  // round trip through json keeps the exact schedule
  TrainConfig rt = TrainConfig::from_json(full.to_json());
  REQUIRE(rt.to_json() == full.to_json());
  REQUIRE(rt.hash() == full.hash());
}

TEST_CASE("batches draw valid windows with shared starts across samples") {
  // synthetic dataset with value t*100 + k so frames identify themselves
  Dataset d;
  d.system.sites = 4;
  d.system.seed = 0;
  int64_t T = 40;
  d.frames = Tensor::zeros({T, 4});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t k = 0; k < 4; ++k) d.frames.at(t, k) = static_cast<double>(t * 100 + k);
  d.n_train = 32;
  d.n_valid = 4;
  d.n_test = 4;
  d.stats = compute_norm_stats(d.frames, d.n_train);
  d.validate();

  TrainConfig tcfg = tiny_train({{3, 10, 1e-3, 2}});
  tcfg.batch_size = 6;
  RngStream rng = RngStream::root(2, "batch-test");
  detail::Batch b = detail::sample_batch(d, tcfg, 3, 4, rng);
  int64_t B = 6, N = 2, K = 4;
  REQUIRE(b.x_prev2.shape == std::vector<int64_t>{B * N * K, 1});
  REQUIRE(b.targets.size() == 3);
  for (int64_t i = 0; i < B; ++i) {
    double v = b.x_prev2.at(i * N * K, 0);
    int64_t t0 = static_cast<int64_t>(v) / 100;
    REQUIRE(t0 >= 0);
    REQUIRE(t0 <= d.n_train - 3 - 2);  // never reads past the train split
    for (int64_t n = 0; n < N; ++n)
      for (int64_t k = 0; k < K; ++k) {
        REQUIRE(b.x_prev2.at((i * N + n) * K + k, 0) == static_cast<double>(t0 * 100 + k));
        REQUIRE(b.x_prev1.at((i * N + n) * K + k, 0) ==
                static_cast<double>((t0 + 1) * 100 + k));
      }
    for (int64_t s = 0; s < 3; ++s)
      for (int64_t k = 0; k < K; ++k)
        REQUIRE(b.targets[static_cast<size_t>(s)].at(i, k) ==
                static_cast<double>((t0 + 2 + s) * 100 + k));
  }
  // rollout too long for the split
  TrainConfig big = tiny_train({{40, 10, 1e-3, 2}});
  RngStream rng2 = RngStream::root(2, "batch-test");
  REQUIRE_THROWS_AS(detail::sample_batch(d, big, 40, 4, rng2), ConfigError);
}

TEST_CASE("training reduces the fair crps on a small system") {
  const Dataset& d = tiny_dataset();
  TrainConfig tcfg = tiny_train({{1, 80, 3e-3, 8}});
  std::vector<StepRecord> recs;
  TrainState st = init_train_state(tiny_config(), d, tcfg, 0);
  train_steps(st, d, tcfg, -1, [&](const StepRecord& r) { recs.push_back(r); });
  REQUIRE(recs.size() == 80);
  REQUIRE(st.finished(tcfg));
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += recs[static_cast<size_t>(i)].loss;
    last += recs[recs.size() - 10 + static_cast<size_t>(i)].loss;
  }
  REQUIRE(std::isfinite(first));
  REQUIRE(last < 0.8 * first);
  for (const StepRecord& r : recs) {
    REQUIRE(std::isfinite(r.loss));
    REQUIRE(r.loss > 0.0);
    REQUIRE(r.grad_norm > 0.0);
    REQUIRE(r.lr == lr_at(tcfg.stages[0], r.step_in_stage));
  }
  REQUIRE(st.params.provenance.size() == 1);
  REQUIRE(st.params.provenance[0].at("steps") == 80);
}

TEST_CASE("rollout stages advance and reset step counters") {
  const Dataset& d = tiny_dataset();
  TrainConfig tcfg = tiny_train({{1, 12, 1e-3, 2}, {2, 6, 1e-4, 2}, {3, 4, 1e-4, 2}});
  std::vector<StepRecord> recs;
  ModelParams p = train_model(d, tiny_config(), tcfg, 0,
                              [&](const StepRecord& r) { recs.push_back(r); });
  REQUIRE(recs.size() == 22);
  REQUIRE(recs[11].stage == 0);
  REQUIRE(recs[12].stage == 1);
  REQUIRE(recs[12].step_in_stage == 0);
  REQUIRE(recs[18].stage == 2);
  REQUIRE(p.provenance.size() == 3);
  REQUIRE(p.provenance[2].at("rollout") == 3);
}

TEST_CASE("stage hook fires once per completed stage") {
  const Dataset& d = tiny_dataset();
  TrainConfig tcfg = tiny_train({{1, 6, 1e-3, 2}, {1, 4, 1e-4, 2}});
  std::vector<int64_t> seen;
  std::vector<ModelParams> snaps;
  train_model(d, tiny_config(), tcfg, 0, {}, [&](const TrainState& st) {
    seen.push_back(st.stage);
    snaps.push_back(st.params);
  });
  REQUIRE(seen == std::vector<int64_t>{1, 2});
  bool moved = false;
  for (size_t i = 0; i < snaps[0].values.size(); ++i)
    if (snaps[0].values[i].data != snaps[1].values[i].data) moved = true;
  REQUIRE(moved);
  REQUIRE(snaps[0].provenance.size() == 1);
}

TEST_CASE("independent seeds give independent models") {
  const Dataset& d = tiny_dataset();
  TrainConfig tcfg = tiny_train({{1, 6, 1e-3, 2}});
  std::vector<ModelParams> ms = train_ensemble(d, tiny_config(), tcfg, 2);
  REQUIRE(ms.size() == 2);
  REQUIRE(ms[0].seed_id == 0);
  REQUIRE(ms[1].seed_id == 1);
  bool differ = false;
  for (size_t i = 0; i < ms[0].values.size(); ++i)
    if (ms[0].values[i].data != ms[1].values[i].data) differ = true;
  REQUIRE(differ);
}

TEST_CASE("interrupted training resumes bit for bit") {
  const Dataset& d = tiny_dataset();
  TrainConfig tcfg = tiny_train({{1, 18, 1e-3, 2}, {2, 7, 1e-4, 2}});

  std::vector<double> straight_losses;
  TrainState straight = init_train_state(tiny_config(), d, tcfg, 0);
  train_steps(straight, d, tcfg, -1,
              [&](const StepRecord& r) { straight_losses.push_back(r.loss); });

  std::vector<double> split_losses;
  auto rec = [&](const StepRecord& r) { split_losses.push_back(r.loss); };
  TrainState part = init_train_state(tiny_config(), d, tcfg, 0);
  train_steps(part, d, tcfg, 11, rec);
  fs::path p = tmp_path("resume.state");
  save_train_state(part, tcfg, p);
  TrainState resumed = load_train_state(p, tcfg);
  REQUIRE(resumed.stage == part.stage);
  REQUIRE(resumed.step_in_stage == part.step_in_stage);
  train_steps(resumed, d, tcfg, -1, rec);

  REQUIRE(straight.finished(tcfg));
  REQUIRE(resumed.finished(tcfg));
  REQUIRE(split_losses == straight_losses);
  for (size_t i = 0; i < straight.params.values.size(); ++i) {
    REQUIRE(resumed.params.values[i].data == straight.params.values[i].data);
    REQUIRE(resumed.opt.m[i].data == straight.opt.m[i].data);
    REQUIRE(resumed.opt.v[i].data == straight.opt.v[i].data);
  }
  REQUIRE(resumed.opt.step == straight.opt.step);
  REQUIRE(resumed.batch_rng.key() == straight.batch_rng.key());
  REQUIRE(resumed.batch_rng.counter() == straight.batch_rng.counter());
  REQUIRE(resumed.noise_rng.counter() == straight.noise_rng.counter());
  REQUIRE(resumed.params.provenance == straight.params.provenance);

  // a different training configuration refuses the state file
  TrainConfig other = tcfg;
  other.stages[1].steps = 8;
  REQUIRE_THROWS_AS(load_train_state(p, other), ConfigError);
}

TEST_CASE("diverging training rolls back and reports") {
  const Dataset& d = tiny_dataset();
  TrainConfig tcfg = tiny_train({{1, 400, 1e6, 2}});  // absurd learning rate
  TrainState st = init_train_state(tiny_config(), d, tcfg, 0);
  REQUIRE_THROWS_AS(train_steps(st, d, tcfg), NumericalFailure);
  for (const Tensor& t : st.params.values) REQUIRE(t.all_finite());
}

TEST_CASE("model and dataset sites must agree") {
  const Dataset& d = tiny_dataset();
  ModelConfig wrong = tiny_config();
  wrong.sites = 12;
  TrainConfig tcfg = tiny_train({{1, 5, 1e-3, 2}});
  REQUIRE_THROWS_AS(init_train_state(wrong, d, tcfg, 0), ConfigError);
  TrainConfig badw = tcfg;
  badw.site_weights = {1.0, 2.0};
  REQUIRE_THROWS_AS(init_train_state(tiny_config(), d, badw, 0), ConfigError);
}
