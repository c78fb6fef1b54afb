#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgn/common.hpp"
#include "fgn/tensor.hpp"

namespace fgn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 32.0;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("adam: betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("adam: negative weight decay");
    if (!(clip_norm > 0.0)) throw ConfigError("adam: clip norm must be positive");
  }

  nlohmann::json to_json() const {
    return {{"beta1", beta1},
            {"beta2", beta2},
            {"eps", eps},
            {"weight_decay", weight_decay},
            {"clip_norm", clip_norm}};
  }
  static AdamConfig from_json(const nlohmann::json& j) {
    AdamConfig c;
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.validate();
    return c;
  }
};

// One training stage: `steps` optimizer steps at rollout length `rollout`,
// linear warmup to peak_lr then cosine decay that hits exactly zero on the
// final step.
struct StageConfig {
  int64_t rollout = 1;
  int64_t steps = 0;
  double peak_lr = 1e-3;
  int64_t warmup = 0;

  void validate() const {
    if (rollout < 1) throw ConfigError("stage: rollout must be >= 1");
    if (steps < 1) throw ConfigError("stage: steps must be >= 1");
    if (!(peak_lr > 0.0)) throw ConfigError("stage: peak_lr must be positive");
    if (warmup < 1 || warmup >= steps)
      throw ConfigError("stage: warmup must lie in [1, steps)");
  }

  nlohmann::json to_json() const {
    return {{"rollout", rollout}, {"steps", steps}, {"peak_lr", peak_lr}, {"warmup", warmup}};
  }
  static StageConfig from_json(const nlohmann::json& j) {
    StageConfig s;
    s.rollout = j.value("rollout", s.rollout);
    s.steps = j.value("steps", s.steps);
    s.peak_lr = j.value("peak_lr", s.peak_lr);
    s.warmup = j.value("warmup", s.warmup);
    s.validate();
    return s;
  }
};

// Reaches peak exactly at step warmup-1, returns exactly 0.0 at step
// steps-1 (cos(pi) == -1.0 in IEEE, so the zero is exact, not approximate).
inline double lr_at(const StageConfig& s, int64_t step) {
  if (step < 0 || step >= s.steps) throw ContractViolation("lr_at: step outside stage");
  if (step < s.warmup)
    return s.peak_lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup);
  double t = static_cast<double>(step - s.warmup + 1) / static_cast<double>(s.steps - s.warmup);
  return s.peak_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct OptState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int64_t step = 0;

  static OptState like(const std::vector<Tensor>& params) {
    OptState s;
    for (const Tensor& p : params) {
      s.m.push_back(Tensor::zeros(p.shape));
      s.v.push_back(Tensor::zeros(p.shape));
    }
    return s;
  }
};

// Scales all gradients jointly so the global L2 norm does not exceed
// max_norm; returns the pre-clip norm.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.data) sq += x * x;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double f = max_norm / norm;
    for (Tensor& g : grads)
      for (double& x : g.data) x *= f;
  }
  return norm;
}

// AdamW with decoupled weight decay, applied only where decay_mask is set.
inline void adamw_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                         OptState& opt, double lr, const AdamConfig& cfg,
                         const std::vector<bool>& decay_mask) {
  if (params.size() != grads.size() || params.size() != opt.m.size() ||
      params.size() != decay_mask.size())
    throw ContractViolation("adamw: tensor list size mismatch");
  opt.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].same_shape(grads[i]))
      throw ContractViolation("adamw: gradient shape mismatch at tensor " + std::to_string(i));
    Tensor& p = params[i];
    Tensor& m = opt.m[i];
    Tensor& v = opt.v[i];
    const Tensor& g = grads[i];
    double decay = decay_mask[i] ? cfg.weight_decay : 0.0;
    for (size_t j = 0; j < p.data.size(); ++j) {
      m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g.data[j];
      v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
      double mhat = m.data[j] / bc1;
      double vhat = v.data[j] / bc2;
      p.data[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + decay * p.data[j]);
    }
  }
}

}  // namespace fgn
