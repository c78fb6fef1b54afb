#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fgn/common.hpp"
#include "fgn/dataset.hpp"
#include "fgn/model.hpp"
#include "fgn/optim.hpp"
#include "fgn/tape.hpp"

namespace fgn {

inline constexpr std::string_view kTrainStateMagic = "FGNTRN1\n";

struct TrainConfig {
  std::vector<StageConfig> stages;
  int64_t batch_size = 16;
  int64_t n_samples = 2;  // noise draws per batch element in the fair CRPS
  AdamConfig adam;
  uint64_t master_seed = 0;
  std::vector<double> site_weights;  // empty for uniform

  void validate() const {
    if (stages.empty()) throw ConfigError("train: no stages");
    for (const StageConfig& s : stages) s.validate();
    for (size_t i = 1; i < stages.size(); ++i)
      if (stages[i].rollout < stages[i - 1].rollout)
        throw ConfigError("train: rollout lengths must be non-decreasing across stages");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (n_samples < 2) throw ConfigError("train: fair CRPS needs n_samples >= 2");
    adam.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json st = nlohmann::json::array();
    for (const StageConfig& s : stages) st.push_back(s.to_json());
    nlohmann::json j{{"stages", std::move(st)},
                     {"batch_size", batch_size},
                     {"n_samples", n_samples},
                     {"adam", adam.to_json()},
                     {"master_seed", master_seed}};
    if (!site_weights.empty()) j["site_weights"] = site_weights;
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("stages")) {
      c.stages.clear();
      for (const auto& s : j.at("stages")) c.stages.push_back(StageConfig::from_json(s));
    } else {
      c = desk(true);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.n_samples = j.value("n_samples", c.n_samples);
    if (j.contains("adam")) c.adam = AdamConfig::from_json(j.at("adam"));
    c.master_seed = j.value("master_seed", c.master_seed);
    if (j.contains("site_weights")) c.site_weights = j.at("site_weights").get<std::vector<double>>();
    c.validate();
    return c;
  }

  uint64_t hash() const { return fnv1a64(to_json().dump()); }

  static int64_t default_warmup(int64_t steps) { return std::max<int64_t>(10, steps / 20); }

  // Desk schedule: one long single-step stage, then short rollout stages at
  // reduced learning rates.
  static TrainConfig desk(bool with_ar_stages) {
    TrainConfig c;
    c.stages.push_back({1, 20000, 1e-3, 1000});
    if (with_ar_stages) {
      c.stages.push_back({1, 2000, 1e-4, default_warmup(2000)});
      c.stages.push_back({2, 1000, 1e-4, default_warmup(1000)});
      for (int64_t r = 3; r <= 8; ++r) c.stages.push_back({r, 250, 1e-5, default_warmup(250)});
    }
    return c;
  }

  // Scales step counts (and warmups proportionally) for cheaper runs.
  TrainConfig scaled(double f) const {
    if (!(f > 0.0)) throw ConfigError("train: scale must be positive");
    TrainConfig c = *this;
    for (StageConfig& s : c.stages) {
      s.steps = std::max<int64_t>(2, std::llround(static_cast<double>(s.steps) * f));
      s.warmup = std::max<int64_t>(1, std::llround(static_cast<double>(s.warmup) * f));
      if (s.warmup >= s.steps) s.warmup = s.steps - 1;
    }
    return c;
  }
};

struct StepRecord {
  int64_t seed_id = 0;
  int64_t stage = 0;
  int64_t step_in_stage = 0;
  int64_t global_step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

struct TrainState {
  ModelParams params;
  OptState opt;
  int64_t stage = 0;
  int64_t step_in_stage = 0;
  RngStream batch_rng;
  RngStream noise_rng;

  bool finished(const TrainConfig& cfg) const {
    return stage >= static_cast<int64_t>(cfg.stages.size());
  }
};

inline TrainState init_train_state(const ModelConfig& mcfg, const Dataset& data,
                                   const TrainConfig& tcfg, int64_t seed_id) {
  mcfg.validate();
  tcfg.validate();
  data.validate();
  if (mcfg.sites != data.sites())
    throw ConfigError("train: model sites " + std::to_string(mcfg.sites) +
                      " != dataset sites " + std::to_string(data.sites()));
  if (!tcfg.site_weights.empty() &&
      static_cast<int64_t>(tcfg.site_weights.size()) != mcfg.sites)
    throw ConfigError("train: site weight count mismatch");
  TrainState st;
  st.params = init_params(mcfg, seed_id, tcfg.master_seed, data.stats);
  st.opt = OptState::like(st.params.values);
  st.batch_rng =
      RngStream::root(tcfg.master_seed, "batch").derive(static_cast<uint64_t>(seed_id));
  st.noise_rng =
      RngStream::root(tcfg.master_seed, "noise").derive(static_cast<uint64_t>(seed_id));
  return st;
}

namespace detail {

struct Batch {
  Tensor x_prev2;                // [B*N*K, 1]
  Tensor x_prev1;                // [B*N*K, 1]
  std::vector<Tensor> targets;   // rollout entries of [B, K]
};

inline Batch sample_batch(const Dataset& data, const TrainConfig& tcfg, int64_t rollout,
                          int64_t sites, RngStream& batch_rng) {
  int64_t B = tcfg.batch_size, N = tcfg.n_samples, K = sites;
  int64_t max_start = data.n_train - rollout - 2;
  if (max_start < 0)
    throw ConfigError("train: train split too small for rollout length " +
                      std::to_string(rollout));
  Batch b;
  b.x_prev2 = Tensor::zeros({B * N * K, 1});
  b.x_prev1 = Tensor::zeros({B * N * K, 1});
  for (int64_t s = 0; s < rollout; ++s) b.targets.push_back(Tensor::zeros({B, K}));
  for (int64_t i = 0; i < B; ++i) {
    int64_t t0 = static_cast<int64_t>(batch_rng.next_u64() %
                                      static_cast<uint64_t>(max_start + 1));
    for (int64_t n = 0; n < N; ++n)
      for (int64_t k = 0; k < K; ++k) {
        b.x_prev2.at((i * N + n) * K + k, 0) = data.frames.at(t0, k);
        b.x_prev1.at((i * N + n) * K + k, 0) = data.frames.at(t0 + 1, k);
      }
    for (int64_t s = 0; s < rollout; ++s)
      for (int64_t k = 0; k < K; ++k) b.targets[static_cast<size_t>(s)].at(i, k) =
          data.frames.at(t0 + 2 + s, k);
  }
  return b;
}

}  // namespace detail

// Runs up to max_steps optimizer steps (all remaining if max_steps < 0),
// advancing through stages.  The rollout is differentiated end to end: each
// autoregressive step feeds the previous step's output back in on the tape,
// with fresh noise per step and per sample.  On divergence the state is
// rolled back to the last finite parameters and NumericalFailure is thrown.
inline void train_steps(TrainState& st, const Dataset& data, const TrainConfig& tcfg,
                        int64_t max_steps = -1, const StepCallback& cb = {}) {
  tcfg.validate();
  data.validate();
  const ModelConfig& mcfg = st.params.config;
  int64_t B = tcfg.batch_size, N = tcfg.n_samples, K = mcfg.sites;
  int64_t blocks = B * N;
  std::vector<bool> decay_mask;
  for (const ParamDef& d : param_defs(mcfg)) decay_mask.push_back(d.decay);
  Tensor weights;  // empty = uniform
  if (!tcfg.site_weights.empty()) weights = Tensor::from({K}, tcfg.site_weights);
  Tensor statics = tile_rows(ring_statics(K), blocks);
  int64_t done = 0;
  std::vector<Tensor> last_good = st.params.values;
  while (!st.finished(tcfg) && (max_steps < 0 || done < max_steps)) {
    const StageConfig& stage = tcfg.stages[static_cast<size_t>(st.stage)];
    int64_t R = stage.rollout;
    double lr = lr_at(stage, st.step_in_stage);
    detail::Batch batch = detail::sample_batch(data, tcfg, R, K, st.batch_rng);

    Tape tape;
    std::vector<Var> P = params_on_tape(tape, st.params);
    Var x2 = tape.leaf(std::move(batch.x_prev2));
    Var x1 = tape.leaf(std::move(batch.x_prev1));
    Var sv = tape.leaf(statics);
    Var loss{};
    for (int64_t s = 0; s < R; ++s) {
      Tensor z = mcfg.global_noise() ? randn({blocks, mcfg.d_noise}, st.noise_rng)
                                     : randn({blocks * K, mcfg.d_noise}, st.noise_rng);
      Var out = forward_batch(tape, mcfg, st.params.stats, P, x2, x1, tape.leaf(std::move(z)),
                              sv, blocks);
      Var pred = tape.reshape(out, {blocks, K});
      Var ls = tape.fair_crps_loss(pred, batch.targets[static_cast<size_t>(s)], weights, N);
      loss = s == 0 ? ls : tape.add(loss, ls);
      x2 = x1;
      x1 = out;
    }
    if (R > 1) loss = tape.scale(loss, 1.0 / static_cast<double>(R));
    double loss_val = tape.value(loss).data[0];
    if (!std::isfinite(loss_val)) {
      st.params.values = last_good;
      throw NumericalFailure("train: loss diverged at stage " + std::to_string(st.stage) +
                             " step " + std::to_string(st.step_in_stage) +
                             "; parameters rolled back to last finite step");
    }
    tape.backward(loss);
    std::vector<Tensor> grads;
    grads.reserve(P.size());
    for (Var p : P) grads.push_back(tape.grad(p));
    double gnorm = clip_global_norm(grads, tcfg.adam.clip_norm);
    last_good = st.params.values;
    adamw_update(st.params.values, grads, st.opt, lr, tcfg.adam, decay_mask);
    for (const Tensor& p : st.params.values)
      if (!p.all_finite()) {
        st.params.values = last_good;
        throw NumericalFailure("train: parameters diverged at stage " +
                               std::to_string(st.stage) + " step " +
                               std::to_string(st.step_in_stage) +
                               "; parameters rolled back to last finite step");
      }
    st.step_in_stage += 1;
    done += 1;
    if (cb)
      cb({st.params.seed_id, st.stage, st.step_in_stage - 1, st.opt.step, loss_val, lr, gnorm});
    if (st.step_in_stage == stage.steps) {
      st.params.provenance.push_back({{"stage", st.stage},
                                      {"rollout", stage.rollout},
                                      {"steps", stage.steps},
                                      {"peak_lr", stage.peak_lr},
                                      {"warmup", stage.warmup},
                                      {"final_loss", loss_val}});
      st.stage += 1;
      st.step_in_stage = 0;
    }
  }
}

// Full run for one seed.  stage_hook fires after each completed stage, with
// the state as it stands (used to snapshot intermediate models).
inline ModelParams train_model(const Dataset& data, const ModelConfig& mcfg,
                               const TrainConfig& tcfg, int64_t seed_id,
                               const StepCallback& cb = {},
                               const std::function<void(const TrainState&)>& stage_hook = {}) {
  TrainState st = init_train_state(mcfg, data, tcfg, seed_id);
  int64_t stage_seen = 0;
  while (!st.finished(tcfg)) {
    const StageConfig& stage = tcfg.stages[static_cast<size_t>(st.stage)];
    train_steps(st, data, tcfg, stage.steps - st.step_in_stage, cb);
    if (st.stage > stage_seen || st.finished(tcfg)) {
      stage_seen = st.stage;
      if (stage_hook) stage_hook(st);
    }
  }
  return st.params;
}

inline std::vector<ModelParams> train_ensemble(const Dataset& data, const ModelConfig& mcfg,
                                               const TrainConfig& tcfg, int64_t n_seeds,
                                               const StepCallback& cb = {}) {
  if (n_seeds < 1) throw ConfigError("train: need at least one seed");
  std::vector<ModelParams> out;
  for (int64_t j = 0; j < n_seeds; ++j) out.push_back(train_model(data, mcfg, tcfg, j, cb));
  return out;
}

inline void save_train_state(const TrainState& st, const TrainConfig& tcfg,
                             const std::filesystem::path& path) {
  json header{{"format", "fgn-trainstate-v1"},
              {"config", st.params.config.to_json()},
              {"train_config", tcfg.to_json()},
              {"seed_id", st.params.seed_id},
              {"stage", st.stage},
              {"step_in_stage", st.step_in_stage},
              {"opt_step", st.opt.step},
              {"batch_rng", {{"key", st.batch_rng.key()}, {"counter", st.batch_rng.counter()}}},
              {"noise_rng", {{"key", st.noise_rng.key()}, {"counter", st.noise_rng.counter()}}},
              {"stats",
               {{"mean", st.params.stats.mean},
                {"std", st.params.stats.std},
                {"residual_std", st.params.stats.residual_std}}},
              {"provenance", st.params.provenance}};
  std::string payload;
  for (const Tensor& t : st.params.values) wire::put_tensor(payload, t);
  for (const Tensor& t : st.opt.m) wire::put_tensor(payload, t);
  for (const Tensor& t : st.opt.v) wire::put_tensor(payload, t);
  write_framed(path, kTrainStateMagic, header, payload);
}

inline TrainState load_train_state(const std::filesystem::path& path, const TrainConfig& tcfg) {
  FramedFile f = read_framed(path, kTrainStateMagic);
  try {
    if (f.header.at("train_config").dump() != tcfg.to_json().dump())
      throw ConfigError("train state in " + path.string() +
                        " was produced under a different training configuration");
    TrainState st;
    st.params.config = ModelConfig::from_json(f.header.at("config"));
    st.params.seed_id = f.header.at("seed_id").get<int64_t>();
    st.params.stats.mean = f.header.at("stats").at("mean").get<double>();
    st.params.stats.std = f.header.at("stats").at("std").get<double>();
    st.params.stats.residual_std = f.header.at("stats").at("residual_std").get<double>();
    st.params.provenance = f.header.at("provenance");
    st.stage = f.header.at("stage").get<int64_t>();
    st.step_in_stage = f.header.at("step_in_stage").get<int64_t>();
    st.batch_rng = RngStream(f.header.at("batch_rng").at("key").get<uint64_t>());
    st.batch_rng.set_counter(f.header.at("batch_rng").at("counter").get<uint64_t>());
    st.noise_rng = RngStream(f.header.at("noise_rng").at("key").get<uint64_t>());
    st.noise_rng.set_counter(f.header.at("noise_rng").at("counter").get<uint64_t>());
    auto defs = param_defs(st.params.config);
    size_t offset = 0;
    auto read_list = [&](std::vector<Tensor>& out) {
      for (const ParamDef& d : defs) {
        out.push_back(tensor_from_payload(f.payload, offset, d.shape));
        int64_t e = 1;
        for (int64_t s : d.shape) e *= s;
        offset += static_cast<size_t>(e);
      }
    };
    read_list(st.params.values);
    read_list(st.opt.m);
    read_list(st.opt.v);
    st.opt.step = f.header.at("opt_step").get<int64_t>();
    if (offset * 8 != f.payload.size())
      throw DataCorruption("train state payload size mismatch in " + path.string());
    return st;
  } catch (const json::exception& e) {
    throw DataCorruption("train state header missing fields in " + path.string() + ": " +
                         e.what());
  }
}

}  // namespace fgn
