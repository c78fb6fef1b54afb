#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fgn/common.hpp"
#include "fgn/io.hpp"
#include "fgn/model.hpp"

namespace fgn {

inline constexpr std::string_view kForecastMagic = "FGNFCS1\n";

// Ensemble forecast from one initial window: values[m, t, k] is member m's
// state at lead t+1 steps.  Members map to training seeds round-robin
// (member m uses seed m % J), so every seed contributes equally.
struct EnsembleForecast {
  int64_t members = 0;
  int64_t lead_steps = 0;
  int64_t sites = 0;
  int64_t init_index = -1;
  uint64_t master_seed = 0;
  Tensor values;  // [members, lead_steps, sites]
  std::vector<int64_t> member_seed;    // member -> seed_id
  std::vector<uint64_t> noise_keys;    // member -> noise stream key

  double value(int64_t m, int64_t t, int64_t k) const {
    return values.data[static_cast<size_t>((m * lead_steps + t) * sites + k)];
  }
  double& value(int64_t m, int64_t t, int64_t k) {
    return values.data[static_cast<size_t>((m * lead_steps + t) * sites + k)];
  }

  void validate() const {
    if (members < 1 || lead_steps < 1 || sites < 1)
      throw DataCorruption("forecast: empty dimensions");
    if (values.shape != std::vector<int64_t>{members, lead_steps, sites})
      throw DataCorruption("forecast: value tensor shape mismatch");
    if (static_cast<int64_t>(member_seed.size()) != members ||
        static_cast<int64_t>(noise_keys.size()) != members)
      throw DataCorruption("forecast: member table size mismatch");
    if (!values.all_finite()) throw DataCorruption("forecast: non-finite member state");
  }
};

// Rolls one member forward lead_steps steps, drawing fresh noise from
// `noise` each step.  Throws NumericalFailure naming the failing lead if the
// trajectory leaves the finite range.
inline Tensor rollout(const ModelParams& p, const TrajectoryWindow& init, int64_t lead_steps,
                      RngStream& noise, const Tensor* statics = nullptr) {
  p.config.validate();
  init.validate(p.config.sites);
  if (lead_steps < 1) throw ContractViolation("rollout: lead_steps must be >= 1");
  int64_t K = p.config.sites;
  Tensor out = Tensor::zeros({lead_steps, K});
  TrajectoryWindow w = init;
  for (int64_t t = 0; t < lead_steps; ++t) {
    NoiseVector nv = sample_noise(p.config, noise);
    Tensor next = forward(p, w, nv.values, statics);
    for (int64_t k = 0; k < K; ++k) {
      double v = next.at(k);
      if (!std::isfinite(v) || std::fabs(v) > 1e9)
        throw NumericalFailure("rollout diverged at lead step " + std::to_string(t + 1));
      out.at(t, k) = v;
    }
    w.x_prev2 = std::move(w.x_prev1);
    w.x_prev1 = std::move(next);
  }
  return out;
}

// models: one entry per training seed (J of them); members must divide
// evenly across seeds.  Noise streams are derived per (master seed, init
// index, member), so inits and members are independent and reproducible.
inline EnsembleForecast generate_ensemble(std::span<const ModelParams> models,
                                          const TrajectoryWindow& init, int64_t members,
                                          int64_t lead_steps, uint64_t master_seed,
                                          int64_t init_index) {
  if (models.empty()) throw ConfigError("ensemble: no models given");
  int64_t J = static_cast<int64_t>(models.size());
  if (members < 1) throw ConfigError("ensemble: members must be >= 1");
  if (members % J != 0)
    throw ConfigError("ensemble: " + std::to_string(members) + " members cannot be allocated " +
                      "equally across " + std::to_string(J) +
                      " seeds (members must be a multiple of the seed count)");
  int64_t K = models[0].config.sites;
  for (const ModelParams& m : models)
    if (m.config.sites != K) throw ConfigError("ensemble: models disagree on site count");
  EnsembleForecast f;
  f.members = members;
  f.lead_steps = lead_steps;
  f.sites = K;
  f.init_index = init_index;
  f.master_seed = master_seed;
  f.values = Tensor::zeros({members, lead_steps, K});
  RngStream per_init =
      RngStream::root(master_seed, "forecast").derive(static_cast<uint64_t>(init_index));
  for (int64_t m = 0; m < members; ++m) {
    const ModelParams& model = models[static_cast<size_t>(m % J)];
    RngStream noise = per_init.derive(static_cast<uint64_t>(m));
    f.member_seed.push_back(model.seed_id);
    f.noise_keys.push_back(noise.key());
    Tensor traj = rollout(model, init, lead_steps, noise);
    for (int64_t t = 0; t < lead_steps; ++t)
      for (int64_t k = 0; k < K; ++k) f.value(m, t, k) = traj.at(t, k);
  }
  f.validate();
  return f;
}

// Derived site quantities, applied member-wise and lead-wise.
//   adjacent_magnitude:  sqrt(x_k^2 + x_{k+1}^2)   (ring-wrapped)
//   adjacent_difference: x_{k+1} - x_k             (ring-wrapped)
inline Tensor derived_quantity(const Tensor& states, std::string_view kind) {
  if (states.rank() < 1) throw ContractViolation("derived: bad input");
  int64_t K = states.shape.back();
  int64_t rows = states.numel() / K;
  Tensor out = Tensor::zeros(states.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = states.data.data() + r * K;
    double* y = out.data.data() + r * K;
    for (int64_t k = 0; k < K; ++k) {
      double a = x[k], b = x[(k + 1) % K];
      if (kind == "adjacent_magnitude")
        y[k] = std::sqrt(a * a + b * b);
      else if (kind == "adjacent_difference")
        y[k] = b - a;
      else
        throw ConfigError("derived: unknown quantity '" + std::string(kind) + "'");
    }
  }
  return out;
}

inline void save_forecast(const EnsembleForecast& f, const std::filesystem::path& path,
                          const std::string& manifest_hash = "",
                          const json& checkpoint_info = json::array()) {
  f.validate();
  json header{{"format", "fgn-forecast-v1"},
              {"members", f.members},
              {"lead_steps", f.lead_steps},
              {"sites", f.sites},
              {"init_index", f.init_index},
              {"master_seed", f.master_seed},
              {"member_seed", f.member_seed},
              {"noise_keys", f.noise_keys},
              {"checkpoints", checkpoint_info},
              {"manifest", manifest_hash}};
  std::string payload;
  payload.reserve(static_cast<size_t>(f.values.numel()) * 8);
  wire::put_tensor(payload, f.values);
  write_framed(path, kForecastMagic, header, payload);
}

inline EnsembleForecast load_forecast(const std::filesystem::path& path) {
  FramedFile fr = read_framed(path, kForecastMagic);
  try {
    EnsembleForecast f;
    f.members = fr.header.at("members").get<int64_t>();
    f.lead_steps = fr.header.at("lead_steps").get<int64_t>();
    f.sites = fr.header.at("sites").get<int64_t>();
    f.init_index = fr.header.at("init_index").get<int64_t>();
    f.master_seed = fr.header.at("master_seed").get<uint64_t>();
    f.member_seed = fr.header.at("member_seed").get<std::vector<int64_t>>();
    f.noise_keys = fr.header.at("noise_keys").get<std::vector<uint64_t>>();
    f.values = tensor_from_payload(fr.payload, 0, {f.members, f.lead_steps, f.sites});
    f.validate();
    return f;
  } catch (const json::exception& e) {
    throw DataCorruption("forecast header missing fields in " + path.string() + ": " + e.what());
  }
}

}  // namespace fgn
