#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fgn/common.hpp"
#include "fgn/io.hpp"
#include "fgn/rng.hpp"
#include "fgn/tape.hpp"
#include "fgn/tensor.hpp"

namespace fgn {

inline constexpr std::string_view kCheckpointMagic = "FGNCKP1\n";

// Emulator architecture.  One step maps two consecutive states (plus static
// site encodings) to the next state; every source of ensemble randomness is
// the noise vector z, which enters only through conditional layer norms.
struct ModelConfig {
  int64_t sites = 40;
  int64_t d_latent = 64;
  int64_t n_layers = 4;
  int64_t d_noise = 32;
  int64_t d_cond = 32;
  int64_t window = 2;
  int64_t heads = 4;
  std::string processor = "attention";   // or "message-passing"
  std::string noise_mode = "global";     // or "per-site" (control variant)

  bool global_noise() const { return noise_mode == "global"; }

  void validate() const {
    if (sites < 4) throw ConfigError("model: need at least 4 sites");
    if (d_latent < 1 || n_layers < 1 || d_noise < 1 || d_cond < 1)
      throw ConfigError("model: non-positive width");
    if (window < 1) throw ConfigError("model: window must be >= 1");
    if (2 * window + 1 > sites)
      throw ConfigError("model: window " + std::to_string(window) + " wraps around " +
                        std::to_string(sites) + " sites");
    if (heads < 1 || d_latent % heads != 0)
      throw ConfigError("model: d_latent " + std::to_string(d_latent) + " not divisible by " +
                        std::to_string(heads) + " heads");
    if (processor != "attention" && processor != "message-passing")
      throw ConfigError("model: unknown processor '" + processor + "'");
    if (noise_mode != "global" && noise_mode != "per-site")
      throw ConfigError("model: unknown noise mode '" + noise_mode + "'");
  }

  nlohmann::json to_json() const {
    return {{"sites", sites},     {"d_latent", d_latent}, {"n_layers", n_layers},
            {"d_noise", d_noise}, {"d_cond", d_cond},     {"window", window},
            {"heads", heads},     {"processor", processor}, {"noise_mode", noise_mode}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.sites = j.value("sites", c.sites);
    c.d_latent = j.value("d_latent", c.d_latent);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_noise = j.value("d_noise", c.d_noise);
    c.d_cond = j.value("d_cond", c.d_cond);
    c.window = j.value("window", c.window);
    c.heads = j.value("heads", c.heads);
    c.processor = j.value("processor", c.processor);
    c.noise_mode = j.value("noise_mode", c.noise_mode);
    c.validate();
    return c;
  }
};

struct ParamDef {
  std::string name;
  std::vector<int64_t> shape;
  bool decay;       // weight decay applies
  bool zero_init;   // conditional-norm maps start at zero
};

namespace layout {
inline constexpr int64_t kNoise = 0;
inline constexpr int64_t kEncoder = 1;   // w1 b1 w2 b2
inline constexpr int64_t kPerLayer = 16;
inline int64_t layer(int64_t i) { return 5 + kPerLayer * i; }
inline int64_t final_ln(const ModelConfig& c) { return 5 + kPerLayer * c.n_layers; }
inline int64_t decoder(const ModelConfig& c) { return final_ln(c) + 4; }
inline int64_t count(const ModelConfig& c) { return decoder(c) + 4; }
}  // namespace layout

// Single source of truth for parameter names, shapes, order, init and decay
// eligibility.  Note nothing here scales with `sites`: site identity enters
// through inputs, so the parameter count is lattice-size independent.
inline std::vector<ParamDef> param_defs(const ModelConfig& cfg) {
  cfg.validate();
  int64_t d = cfg.d_latent;
  std::vector<ParamDef> defs;
  defs.reserve(static_cast<size_t>(layout::count(cfg)));
  defs.push_back({"noise_encoder.w", {cfg.d_noise, cfg.d_cond}, false, false});
  defs.push_back({"encoder.w1", {4, d}, true, false});
  defs.push_back({"encoder.b1", {d}, false, false});
  defs.push_back({"encoder.w2", {d, d}, true, false});
  defs.push_back({"encoder.b2", {d}, false, false});
  auto norm_maps = [&](const std::string& prefix) {
    defs.push_back({prefix + ".gamma.w", {cfg.d_cond, d}, false, true});
    defs.push_back({prefix + ".gamma.b", {d}, false, true});
    defs.push_back({prefix + ".beta.w", {cfg.d_cond, d}, false, true});
    defs.push_back({prefix + ".beta.b", {d}, false, true});
  };
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string L = "layer" + std::to_string(i);
    norm_maps(L + ".ln1");
    if (cfg.processor == "attention") {
      defs.push_back({L + ".attn.wq", {d, d}, true, false});
      defs.push_back({L + ".attn.wk", {d, d}, true, false});
      defs.push_back({L + ".attn.wv", {d, d}, true, false});
      defs.push_back({L + ".attn.wo", {d, d}, true, false});
    } else {
      defs.push_back({L + ".msg.w1", {(2 * cfg.window + 1) * d, d}, true, false});
      defs.push_back({L + ".msg.b1", {d}, false, false});
      defs.push_back({L + ".msg.w2", {d, d}, true, false});
      defs.push_back({L + ".msg.b2", {d}, false, false});
    }
    norm_maps(L + ".ln2");
    defs.push_back({L + ".mlp.w1", {d, d}, true, false});
    defs.push_back({L + ".mlp.b1", {d}, false, false});
    defs.push_back({L + ".mlp.w2", {d, d}, true, false});
    defs.push_back({L + ".mlp.b2", {d}, false, false});
  }
  norm_maps("final_ln");
  defs.push_back({"decoder.w1", {d, d}, true, false});
  defs.push_back({"decoder.b1", {d}, false, false});
  defs.push_back({"decoder.w2", {d, 1}, true, false});
  defs.push_back({"decoder.b2", {1}, false, false});
  return defs;
}

inline int64_t param_count(const ModelConfig& cfg) {
  int64_t n = 0;
  for (const ParamDef& def : param_defs(cfg)) {
    int64_t e = 1;
    for (int64_t s : def.shape) e *= s;
    n += e;
  }
  return n;
}

struct ModelParams {
  ModelConfig config;
  int64_t seed_id = 0;
  NormStats stats;
  nlohmann::json provenance = nlohmann::json::array();
  std::vector<Tensor> values;  // aligned with param_defs(config)

  const Tensor& param(std::string_view name) const {
    auto defs = param_defs(config);
    for (size_t i = 0; i < defs.size(); ++i)
      if (defs[i].name == name) return values[i];
    throw ContractViolation("model: no parameter named " + std::string(name));
  }
  Tensor& param(std::string_view name) {
    return const_cast<Tensor&>(static_cast<const ModelParams*>(this)->param(name));
  }
};

// Weights ~ N(0, 1/sqrt(fan_in)), biases zero, conditional-norm maps zero
// (so the initial forward pass does not depend on z at all).  Each tensor
// draws from its own named substream, so init is insensitive to tensor order.
inline ModelParams init_params(const ModelConfig& cfg, int64_t seed_id, uint64_t master_seed,
                               const NormStats& stats = {}) {
  ModelParams p;
  p.config = cfg;
  p.seed_id = seed_id;
  p.stats = stats;
  RngStream root = RngStream::root(master_seed, "init").derive(static_cast<uint64_t>(seed_id));
  for (const ParamDef& def : param_defs(cfg)) {
    if (def.zero_init || def.shape.size() == 1) {
      p.values.push_back(Tensor::zeros(def.shape));
    } else {
      RngStream s = root.derive(def.name);
      double scale = 1.0 / std::sqrt(static_cast<double>(def.shape[0]));
      p.values.push_back(randn(def.shape, s, scale));
    }
  }
  return p;
}

// Static per-site input features: position on the ring as (sin, cos).
inline Tensor ring_statics(int64_t sites) {
  Tensor s = Tensor::zeros({sites, 2});
  for (int64_t k = 0; k < sites; ++k) {
    double a = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(sites);
    s.at(k, 0) = std::sin(a);
    s.at(k, 1) = std::cos(a);
  }
  return s;
}

inline Tensor tile_rows(const Tensor& t, int64_t reps) {
  Tensor out = Tensor::zeros({t.rows() * reps, t.cols()});
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < t.rows(); ++i)
      for (int64_t j = 0; j < t.cols(); ++j) out.at(r * t.rows() + i, j) = t.at(i, j);
  return out;
}

// Two consecutive states feeding one emulator step.
struct TrajectoryWindow {
  Tensor x_prev2;  // [sites]
  Tensor x_prev1;  // [sites]

  void validate(int64_t sites) const {
    if (x_prev2.rank() != 1 || x_prev1.rank() != 1 || x_prev2.shape[0] != sites ||
        x_prev1.shape[0] != sites)
      throw ContractViolation("window: states must be [" + std::to_string(sites) + "]");
    if (!x_prev2.all_finite() || !x_prev1.all_finite())
      throw ContractViolation("window: non-finite state");
  }
};

inline std::vector<Var> params_on_tape(Tape& t, const ModelParams& p) {
  std::vector<Var> vars;
  vars.reserve(p.values.size());
  for (const Tensor& v : p.values) vars.push_back(t.leaf(v));
  return vars;
}

// Batched forward pass.  Rows are `blocks` consecutive ring copies of
// `sites` rows each.  x_prev2/x_prev1 are [blocks*sites, 1] in physical
// units, z is [blocks, d_noise] (global) or [blocks*sites, d_noise]
// (per-site), statics is [blocks*sites, 2].  Returns the next state,
// [blocks*sites, 1], physical units, as x_prev1 + residual_std * net(...).
inline Var forward_batch(Tape& t, const ModelConfig& cfg, const NormStats& stats,
                         std::span<const Var> P, Var x_prev2, Var x_prev1, Var z, Var statics,
                         int64_t blocks) {
  cfg.validate();
  if (static_cast<int64_t>(P.size()) != layout::count(cfg))
    throw ContractViolation("forward: parameter list does not match config");
  if (!(stats.std > 0.0) || !(stats.residual_std > 0.0))
    throw ConfigError("forward: degenerate normalization stats");
  int64_t K = cfg.sites, R = blocks * K;
  auto expect = [&](Var v, int64_t rows, int64_t cols, const char* what) {
    const Tensor& tv = t.value(v);
    if (tv.rank() != 2 || tv.shape[0] != rows || tv.shape[1] != cols)
      throw ContractViolation(std::string("forward: ") + what + " shape " + tv.shape_str() +
                              " wants [" + std::to_string(rows) + "," + std::to_string(cols) +
                              "]");
  };
  expect(x_prev2, R, 1, "x_prev2");
  expect(x_prev1, R, 1, "x_prev1");
  expect(statics, R, 2, "statics");
  int64_t zrows = cfg.global_noise() ? blocks : R;
  expect(z, zrows, cfg.d_noise, "noise");

  double inv = 1.0 / stats.std;
  Var xn2 = t.affine_scalar(x_prev2, inv, -stats.mean * inv);
  Var xn1 = t.affine_scalar(x_prev1, inv, -stats.mean * inv);
  std::array<Var, 3> in_parts{xn2, xn1, statics};
  Var in = t.concat(in_parts, 1);
  Var h = t.affine(in, P[1], P[2]);
  h = t.gelu(h);
  h = t.affine(h, P[3], P[4]);

  // The conditioning vector is the only route from z to the output.
  Var c = t.matmul(z, P[layout::kNoise]);

  auto conditioned_norm = [&](Var hin, int64_t base) {
    Var graw = t.affine(c, P[base + 0], P[base + 1]);
    Var scale = t.affine_scalar(graw, 1.0, 1.0);  // zero-init maps start as identity scale
    Var shift = t.affine(c, P[base + 2], P[base + 3]);
    Var y = t.layer_norm(hin).normalized;
    return t.block_scale_shift(y, scale, shift);
  };

  std::vector<int64_t> offsets;
  for (int64_t o = -cfg.window; o <= cfg.window; ++o) offsets.push_back(o);

  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    int64_t base = layout::layer(i);
    Var u = conditioned_norm(h, base);
    Var mixed;
    if (cfg.processor == "attention") {
      AttentionParams ap{P[base + 4], P[base + 5], P[base + 6], P[base + 7]};
      mixed = t.local_attention(u, cfg.window, cfg.heads, ap, K);
    } else {
      Var g = t.gather_ring(u, offsets, K);
      Var m = t.affine(g, P[base + 4], P[base + 5]);
      m = t.gelu(m);
      mixed = t.affine(m, P[base + 6], P[base + 7]);
    }
    h = t.add(h, mixed);
    Var u2 = conditioned_norm(h, base + 8);
    Var m2 = t.affine(u2, P[base + 12], P[base + 13]);
    m2 = t.gelu(m2);
    m2 = t.affine(m2, P[base + 14], P[base + 15]);
    h = t.add(h, m2);
  }

  Var uf = conditioned_norm(h, layout::final_ln(cfg));
  int64_t dec = layout::decoder(cfg);
  Var d1 = t.gelu(t.affine(uf, P[dec + 0], P[dec + 1]));
  Var raw = t.affine(d1, P[dec + 2], P[dec + 3]);
  return t.add(x_prev1, t.scale(raw, stats.residual_std));
}

inline Tensor noise_like(const ModelConfig& cfg, double fill = 0.0) {
  return cfg.global_noise() ? Tensor::filled({1, cfg.d_noise}, fill)
                            : Tensor::filled({cfg.sites, cfg.d_noise}, fill);
}

// Identifies which stream and counter produced a noise draw, for logging.
struct NoiseVector {
  Tensor values;
  uint64_t stream_key = 0;
  uint64_t counter_begin = 0;
};

inline NoiseVector sample_noise(const ModelConfig& cfg, RngStream& rng) {
  NoiseVector nv;
  nv.stream_key = rng.key();
  nv.counter_begin = rng.counter();
  nv.values = cfg.global_noise() ? randn({1, cfg.d_noise}, rng)
                                 : randn({cfg.sites, cfg.d_noise}, rng);
  return nv;
}

namespace detail {
inline Tensor as_noise_matrix(const ModelConfig& cfg, const Tensor& z) {
  if (z.rank() == 1 && cfg.global_noise() && z.shape[0] == cfg.d_noise) {
    Tensor m = z;
    m.shape = {1, cfg.d_noise};
    return m;
  }
  return z;
}
}  // namespace detail

// Single-window forward pass in physical units.
inline Tensor forward(const ModelParams& p, const TrajectoryWindow& w, const Tensor& z,
                      const Tensor* statics = nullptr) {
  p.config.validate();
  w.validate(p.config.sites);
  int64_t K = p.config.sites;
  Tape t;
  std::vector<Var> P = params_on_tape(t, p);
  Tensor x2 = w.x_prev2;
  x2.shape = {K, 1};
  Tensor x1 = w.x_prev1;
  x1.shape = {K, 1};
  Var out = forward_batch(t, p.config, p.stats, P, t.leaf(std::move(x2)), t.leaf(std::move(x1)),
                          t.leaf(detail::as_noise_matrix(p.config, z)),
                          t.leaf(statics ? *statics : ring_statics(K)), 1);
  Tensor res = t.value(out);
  res.shape = {K};
  return res;
}

// d(next state)/d(z) for one window: [sites, numel(z)].
inline Tensor jacobian_wrt_noise(const ModelParams& p, const TrajectoryWindow& w, const Tensor& z,
                                 const Tensor* statics = nullptr) {
  p.config.validate();
  w.validate(p.config.sites);
  int64_t K = p.config.sites;
  Tape t;
  std::vector<Var> P = params_on_tape(t, p);
  Tensor x2 = w.x_prev2;
  x2.shape = {K, 1};
  Tensor x1 = w.x_prev1;
  x1.shape = {K, 1};
  Var zv = t.leaf(detail::as_noise_matrix(p.config, z));
  Var out = forward_batch(t, p.config, p.stats, P, t.leaf(std::move(x2)), t.leaf(std::move(x1)),
                          zv, t.leaf(statics ? *statics : ring_statics(K)), 1);
  int64_t nz = t.value(zv).numel();
  Tensor jac = Tensor::zeros({K, nz});
  for (int64_t k = 0; k < K; ++k) {
    t.backward_component(out, k);
    Tensor g = t.grad(zv);
    for (int64_t j = 0; j < nz; ++j) jac.at(k, j) = g.data[static_cast<size_t>(j)];
  }
  return jac;
}

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path,
                            const std::string& manifest_hash = "") {
  p.config.validate();
  auto defs = param_defs(p.config);
  if (p.values.size() != defs.size())
    throw ContractViolation("checkpoint: parameter list does not match config");
  json plist = json::array();
  std::string payload;
  for (size_t i = 0; i < defs.size(); ++i) {
    if (p.values[i].shape != defs[i].shape)
      throw ContractViolation("checkpoint: shape mismatch for " + defs[i].name);
    plist.push_back({{"name", defs[i].name}, {"shape", defs[i].shape}});
    wire::put_tensor(payload, p.values[i]);
  }
  json header{{"format", "fgn-checkpoint-v1"},
              {"config", p.config.to_json()},
              {"seed_id", p.seed_id},
              {"stats",
               {{"mean", p.stats.mean},
                {"std", p.stats.std},
                {"residual_std", p.stats.residual_std}}},
              {"stats_hash", hex64(p.stats.hash())},
              {"provenance", p.provenance},
              {"params", std::move(plist)},
              {"manifest", manifest_hash}};
  write_framed(path, kCheckpointMagic, header, payload);
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  FramedFile f = read_framed(path, kCheckpointMagic);
  try {
    ModelParams p;
    p.config = ModelConfig::from_json(f.header.at("config"));
    p.seed_id = f.header.at("seed_id").get<int64_t>();
    p.stats.mean = f.header.at("stats").at("mean").get<double>();
    p.stats.std = f.header.at("stats").at("std").get<double>();
    p.stats.residual_std = f.header.at("stats").at("residual_std").get<double>();
    if (f.header.at("stats_hash").get<std::string>() != hex64(p.stats.hash()))
      throw DataCorruption("checkpoint: stats hash mismatch in " + path.string());
    p.provenance = f.header.at("provenance");
    auto defs = param_defs(p.config);
    const auto& plist = f.header.at("params");
    if (plist.size() != defs.size())
      throw DataCorruption("checkpoint: parameter count mismatch in " + path.string());
    size_t offset = 0;
    for (size_t i = 0; i < defs.size(); ++i) {
      if (plist.at(i).at("name").get<std::string>() != defs[i].name ||
          plist.at(i).at("shape").get<std::vector<int64_t>>() != defs[i].shape)
        throw DataCorruption("checkpoint: parameter table mismatch at " + defs[i].name);
      p.values.push_back(tensor_from_payload(f.payload, offset, defs[i].shape));
      int64_t e = 1;
      for (int64_t s : defs[i].shape) e *= s;
      offset += static_cast<size_t>(e);
    }
    if (offset * 8 != f.payload.size())
      throw DataCorruption("checkpoint: payload size mismatch in " + path.string());
    return p;
  } catch (const json::exception& e) {
    throw DataCorruption("checkpoint header missing fields in " + path.string() + ": " +
                         e.what());
  }
}

}  // namespace fgn
