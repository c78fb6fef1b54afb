#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgn/common.hpp"
#include "fgn/rng.hpp"
#include "fgn/tensor.hpp"

namespace fgn {

// Stochastic Lorenz-96 ring:
//   dx_k/dt = (x_{k+1} - x_{k-2}) x_{k-1} - x_k + F
// integrated with RK4 at dt_integrator, plus additive noise
// noise_std * sqrt(dt) per integrator step.  Frames are recorded every
// dt_frame (an integer multiple of dt_integrator).
struct SystemConfig {
  int64_t sites = 40;
  double forcing = 8.0;
  double dt_integrator = 0.01;
  double dt_frame = 0.1;
  double noise_std = 0.1;
  uint64_t seed = 0;

  int64_t steps_per_frame() const {
    double r = dt_frame / dt_integrator;
    int64_t n = std::llround(r);
    if (n < 1 || std::fabs(r - static_cast<double>(n)) > 1e-9)
      throw ConfigError("system: dt_frame must be an integer multiple of dt_integrator");
    return n;
  }

  void validate() const {
    if (sites < 4) throw ConfigError("system: need at least 4 sites");
    if (!(forcing > 0.0) || !std::isfinite(forcing)) throw ConfigError("system: bad forcing");
    if (!(dt_integrator > 0.0) || !(dt_frame > 0.0)) throw ConfigError("system: bad time step");
    if (noise_std < 0.0 || !std::isfinite(noise_std)) throw ConfigError("system: bad noise_std");
    steps_per_frame();
  }

  nlohmann::json to_json() const {
    return {{"sites", sites},         {"forcing", forcing},
            {"dt_integrator", dt_integrator}, {"dt_frame", dt_frame},
            {"noise_std", noise_std}, {"seed", seed}};
  }

  static SystemConfig from_json(const nlohmann::json& j) {
    SystemConfig c;
    c.sites = j.value("sites", c.sites);
    c.forcing = j.value("forcing", c.forcing);
    c.dt_integrator = j.value("dt_integrator", c.dt_integrator);
    c.dt_frame = j.value("dt_frame", c.dt_frame);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

namespace detail {

inline void l96_tendency(const std::vector<double>& x, double forcing, std::vector<double>& out) {
  int64_t k_count = static_cast<int64_t>(x.size());
  auto wrap = [k_count](int64_t i) { return ((i % k_count) + k_count) % k_count; };
  for (int64_t k = 0; k < k_count; ++k) {
    out[static_cast<size_t>(k)] =
        (x[static_cast<size_t>(wrap(k + 1))] - x[static_cast<size_t>(wrap(k - 2))]) *
            x[static_cast<size_t>(wrap(k - 1))] -
        x[static_cast<size_t>(k)] + forcing;
  }
}

}  // namespace detail

// One integrator step (RK4 + additive noise) in place.
inline void lorenz96_step(std::vector<double>& x, const SystemConfig& cfg, RngStream& noise) {
  size_t n = x.size();
  static thread_local std::vector<double> k1, k2, k3, k4, tmp;
  k1.resize(n);
  k2.resize(n);
  k3.resize(n);
  k4.resize(n);
  tmp.resize(n);
  double dt = cfg.dt_integrator;
  detail::l96_tendency(x, cfg.forcing, k1);
  for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k1[i];
  detail::l96_tendency(tmp, cfg.forcing, k2);
  for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k2[i];
  detail::l96_tendency(tmp, cfg.forcing, k3);
  for (size_t i = 0; i < n; ++i) tmp[i] = x[i] + dt * k3[i];
  detail::l96_tendency(tmp, cfg.forcing, k4);
  for (size_t i = 0; i < n; ++i)
    x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  if (cfg.noise_std > 0.0) {
    double amp = cfg.noise_std * std::sqrt(dt);
    for (size_t i = 0; i < n; ++i) x[i] += amp * noise.next_normal();
  }
}

// Integrates n_frames frames starting from x0; frame 0 is x0 itself.
// Returns [n_frames, sites].  Throws NumericalFailure if the state blows up.
inline Tensor lorenz96_integrate(const SystemConfig& cfg, const Tensor& x0, int64_t n_frames,
                                 RngStream& noise) {
  cfg.validate();
  if (x0.rank() != 1 || x0.shape[0] != cfg.sites)
    throw ContractViolation("integrate: x0 shape " + x0.shape_str() + " wants [" +
                            std::to_string(cfg.sites) + "]");
  if (n_frames < 1) throw ContractViolation("integrate: need at least one frame");
  int64_t spf = cfg.steps_per_frame();
  Tensor out = Tensor::zeros({n_frames, cfg.sites});
  std::vector<double> x = x0.data;
  for (int64_t k = 0; k < cfg.sites; ++k) out.at(0, k) = x[static_cast<size_t>(k)];
  for (int64_t f = 1; f < n_frames; ++f) {
    for (int64_t s = 0; s < spf; ++s) {
      lorenz96_step(x, cfg, noise);
      for (double v : x)
        if (!std::isfinite(v) || std::fabs(v) > 1e6)
          throw NumericalFailure("lorenz96 trajectory diverged before frame " +
                                 std::to_string(f));
    }
    for (int64_t k = 0; k < cfg.sites; ++k) out.at(f, k) = x[static_cast<size_t>(k)];
  }
  return out;
}

// Spun-up initial condition: forcing plus a small seeded perturbation.
inline Tensor lorenz96_initial(const SystemConfig& cfg, RngStream& init) {
  Tensor x0 = Tensor::filled({cfg.sites}, cfg.forcing);
  for (int64_t k = 0; k < cfg.sites; ++k) x0.at(k) += 0.05 * init.next_normal();
  return x0;
}

}  // namespace fgn
