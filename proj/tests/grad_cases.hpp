#pragma once

// Shared central-difference gradient harness.  Each case builds a scalar from
// leaf tensors; the analytic gradient from backward() must match finite
// differences at every input element.  Cases cover every tape op plus the
// full training loss pipeline (batched forward pass into the fair CRPS).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fgn/model.hpp"
#include "fgn/rng.hpp"
#include "fgn/tape.hpp"

namespace fgn::gradcheck {

struct GradCase {
  std::string name;
  std::vector<std::vector<int64_t>> shapes;
  std::function<Var(Tape&, const std::vector<Var>&, int)> build;
  std::function<void(std::vector<Tensor>&, int)> tweak;
  int seeds = 3;
  double input_scale = 0.8;
};

struct SuiteResult {
  int configs = 0;
  int64_t elements = 0;
  double max_err = 0.0;
  std::string worst;
  double seconds = 0.0;
};

inline Var scalarize(Tape& t, Var v, Var w) { return t.sum_all(t.mul(v, w)); }

// Shift the sample values in a column so that no two samples (and no sample
// vs the target) sit within `gap` of each other; keeps abs() kinks away from
// the finite-difference step.
inline void separate_column(std::vector<double>& vals, double target, double gap) {
  for (int pass = 0; pass < 8; ++pass) {
    bool clean = true;
    std::vector<size_t> idx(vals.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return vals[a] < vals[b]; });
    for (size_t i = 1; i < idx.size(); ++i) {
      if (vals[idx[i]] - vals[idx[i - 1]] < gap) {
        vals[idx[i]] = vals[idx[i - 1]] + 2.0 * gap;
        clean = false;
      }
    }
    for (double& v : vals) {
      if (std::abs(v - target) < gap) {
        v = target + 2.0 * gap;
        clean = false;
      }
    }
    if (clean) return;
  }
  throw ContractViolation("gradcheck: could not separate sample values");
}

inline Tensor crps_targets(const std::vector<int64_t>& shape, int seed, const std::string& name) {
  RngStream r = RngStream::root(9000 + seed, "grad-targets-" + name);
  return randn(shape, r, 1.0);
}

// Evaluates one case across its seeds, folding the worst relative error into
// `out`.  Relative error uses max(1, |analytic|, |fd|) in the denominator so
// dead elements with both sides ~0 do not blow up.
inline void run_case(const GradCase& c, SuiteResult& out) {
  for (int s = 0; s < c.seeds; ++s) {
    RngStream r = RngStream::root(1000 + s, "grad-" + c.name);
    std::vector<Tensor> inputs;
    for (const auto& sh : c.shapes) inputs.push_back(randn(sh, r, c.input_scale));
    if (c.tweak) c.tweak(inputs, s);

    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    Var root = c.build(tape, vars, s);
    if (tape.value(root).numel() != 1)
      throw ContractViolation("gradcheck: case " + c.name + " is not scalar");
    tape.backward(root);
    std::vector<Tensor> grads;
    for (Var v : vars) grads.push_back(tape.grad(v));

    auto eval = [&](const std::vector<Tensor>& in) {
      Tape t2;
      std::vector<Var> v2;
      for (const Tensor& t : in) v2.push_back(t2.leaf(t));
      return t2.value(c.build(t2, v2, s)).data[0];
    };
    for (size_t i = 0; i < inputs.size(); ++i) {
      for (size_t e = 0; e < inputs[i].data.size(); ++e) {
        double x0 = inputs[i].data[e];
        double h = 1e-5 * std::max(1.0, std::abs(x0));
        std::vector<Tensor> in2 = inputs;
        in2[i].data[e] = x0 + h;
        double fp = eval(in2);
        in2[i].data[e] = x0 - h;
        double fm = eval(in2);
        double fd = (fp - fm) / (2.0 * h);
        double an = grads[i].data[e];
        double err = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
        out.elements += 1;
        if (err > out.max_err) {
          out.max_err = err;
          out.worst = c.name + " seed=" + std::to_string(s) + " input=" + std::to_string(i) +
                      " elem=" + std::to_string(e) + " analytic=" + std::to_string(an) +
                      " fd=" + std::to_string(fd);
        }
      }
    }
    out.configs += 1;
  }
}

// Full pipeline: every model parameter plus the window states and the noise
// draw as leaves, loss = fair CRPS of the batched forward pass.  Members are
// pushed apart through the noise input so no |a-b| kink sits within the
// finite-difference step, and targets sit far from all predictions.
inline GradCase pipeline_case(const std::string& name, ModelConfig cfg) {
  cfg.validate();
  NormStats stats;
  stats.mean = 0.1;
  stats.std = 1.3;
  stats.residual_std = 0.7;
  int64_t B = 2, N = 2, K = cfg.sites;
  int64_t blocks = B * N;
  int64_t zrows = cfg.global_noise() ? blocks : blocks * K;

  GradCase c;
  c.name = name;
  auto defs = param_defs(cfg);
  for (const ParamDef& d : defs) c.shapes.push_back(d.shape);
  c.shapes.push_back({blocks * K, 1});        // x_prev2
  c.shapes.push_back({blocks * K, 1});        // x_prev1
  c.shapes.push_back({zrows, cfg.d_noise});   // z
  size_t np = defs.size();

  auto assemble = [cfg, stats, B, N, K, blocks, np](Tape& t, const std::vector<Var>& v,
                                                    int seed) {
    std::vector<Var> P(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(np));
    Var statics = t.leaf(tile_rows(ring_statics(K), blocks));
    Var out = forward_batch(t, cfg, stats, P, v[np], v[np + 1], v[np + 2], statics, blocks);
    Var pred = t.reshape(out, {blocks, K});
    Tensor targets = crps_targets({B, K}, seed, "pipeline");
    for (double& x : targets.data) x += 8.0;
    return t.fair_crps_loss(pred, targets, Tensor{}, N);
  };
  c.build = assemble;

  c.tweak = [cfg, stats, B, N, K, blocks, np, assemble](std::vector<Tensor>& in, int seed) {
    Tensor& z = in[np + 2];
    int64_t zrows_per_member = cfg.global_noise() ? 1 : K;
    for (int tries = 0; tries < 8; ++tries) {
      for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n)
          for (int64_t rr = 0; rr < zrows_per_member; ++rr)
            for (int64_t j = 0; j < cfg.d_noise; ++j)
              z.at(((b * N + n) * zrows_per_member + rr), j) +=
                  0.9 * static_cast<double>(n + 1) * static_cast<double>(tries + 1);
      Tape t;
      std::vector<Var> v;
      for (const Tensor& x : in) v.push_back(t.leaf(x));
      assemble(t, v, seed);
      // predictions live two nodes above the loss: recompute directly
      Tape t2;
      std::vector<Var> v2;
      for (const Tensor& x : in) v2.push_back(t2.leaf(x));
      std::vector<Var> P(v2.begin(), v2.begin() + static_cast<std::ptrdiff_t>(np));
      Var statics = t2.leaf(tile_rows(ring_statics(K), blocks));
      Var out = forward_batch(t2, cfg, stats, P, v2[np], v2[np + 1], v2[np + 2], statics,
                              blocks);
      Tensor pred = t2.value(out);
      double min_gap = 1e300;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t k = 0; k < K; ++k)
          for (int64_t m = 0; m < N; ++m)
            for (int64_t m2 = m + 1; m2 < N; ++m2)
              min_gap = std::min(min_gap, std::abs(pred.at((b * N + m) * K + k, 0) -
                                                   pred.at((b * N + m2) * K + k, 0)));
      if (min_gap > 2e-3) return;
    }
    throw ContractViolation("gradcheck: could not separate pipeline members");
  };
  return c;
}

inline std::vector<GradCase> all_cases() {
  std::vector<GradCase> cs;
  auto add = [&](GradCase c) { cs.push_back(std::move(c)); };

  add({"add", {{3, 4}, {3, 4}, {3, 4}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.add(v[0], v[1]), v[2]);
       }});
  add({"sub", {{3, 4}, {3, 4}, {3, 4}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.sub(v[0], v[1]), v[2]);
       }});
  add({"mul", {{3, 4}, {3, 4}, {3, 4}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.mul(v[0], v[1]), v[2]);
       }});
  add({"scale", {{2, 5}, {2, 5}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.scale(v[0], -1.7), v[1]);
       }});
  add({"affine_scalar", {{2, 5}, {2, 5}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.affine_scalar(v[0], 0.6, -2.1), v[1]);
       }});
  add({"gelu", {{3, 7}, {3, 7}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.gelu(v[0]), v[1]);
       }});
  GradCase gelu_tails{"gelu_tails", {{3, 7}, {3, 7}},
                      [](Tape& t, const std::vector<Var>& v, int) {
                        return scalarize(t, t.gelu(v[0]), v[1]);
                      }};
  gelu_tails.input_scale = 4.0;
  add(gelu_tails);

  GradCase absd{"abs_diff", {{4, 3}, {4, 3}, {4, 3}},
                [](Tape& t, const std::vector<Var>& v, int) {
                  return scalarize(t, t.abs_diff(v[0], v[1]), v[2]);
                }};
  absd.tweak = [](std::vector<Tensor>& in, int) {
    for (size_t e = 0; e < in[0].data.size(); ++e)
      if (std::abs(in[0].data[e] - in[1].data[e]) < 0.05) in[0].data[e] += 0.2;
  };
  add(absd);

  add({"matmul", {{3, 4}, {4, 2}, {3, 2}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.matmul(v[0], v[1]), v[2]);
       }});
  add({"matmul_vec", {{1, 6}, {6, 1}, {1, 1}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.matmul(v[0], v[1]), v[2]);
       }});
  add({"affine", {{5, 3}, {3, 4}, {4}, {5, 4}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.affine(v[0], v[1], v[2]), v[3]);
       }});

  add({"layer_norm", {{4, 6}, {4, 6}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.layer_norm(v[0]).normalized, v[1]);
       }});
  add({"layer_norm_row", {{1, 8}, {1, 8}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.layer_norm(v[0]).normalized, v[1]);
       }});
  GradCase lnsmall{"layer_norm_small_var", {{3, 5}, {3, 5}},
                   [](Tape& t, const std::vector<Var>& v, int) {
                     return scalarize(t, t.layer_norm(v[0]).normalized, v[1]);
                   }};
  lnsmall.tweak = [](std::vector<Tensor>& in, int) {
    for (double& v : in[0].data) v = 5.0 + 0.05 * v;
  };
  add(lnsmall);

  add({"block_scale_shift", {{6, 4}, {2, 4}, {2, 4}, {6, 4}},
       [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.block_scale_shift(v[0], v[1], v[2]), v[3]);
       }});
  add({"block_scale_shift_bcast", {{5, 3}, {3}, {3}, {5, 3}},
       [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.block_scale_shift(v[0], v[1], v[2]), v[3]);
       }});

  add({"reshape", {{2, 6}, {3, 4}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.reshape(v[0], {3, 4}), v[1]);
       }});
  add({"concat_rows", {{2, 3}, {4, 3}, {6, 3}}, [](Tape& t, const std::vector<Var>& v, int) {
         std::vector<Var> parts{v[0], v[1]};
         return scalarize(t, t.concat(parts, 0), v[2]);
       }});
  add({"concat_cols", {{3, 2}, {3, 4}, {3, 6}}, [](Tape& t, const std::vector<Var>& v, int) {
         std::vector<Var> parts{v[0], v[1]};
         return scalarize(t, t.concat(parts, 1), v[2]);
       }});
  add({"reduce_mean_rows", {{5, 3}, {3}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.reduce_mean(v[0], 0), v[1]);
       }});
  add({"reduce_mean_cols", {{5, 3}, {5}}, [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.reduce_mean(v[0], 1), v[1]);
       }});
  add({"sum_all", {{4, 4}}, [](Tape& t, const std::vector<Var>& v, int) {
         return t.sum_all(t.mul(v[0], v[0]));
       }});
  add({"mean_all", {{3, 5}}, [](Tape& t, const std::vector<Var>& v, int) {
         return t.mean_all(t.gelu(v[0]));
       }});

  add({"gather_ring", {{5, 3}, {5, 15}}, [](Tape& t, const std::vector<Var>& v, int) {
         std::vector<int64_t> offs{-2, -1, 0, 1, 2};
         return scalarize(t, t.gather_ring(v[0], offs), v[1]);
       }});
  add({"gather_ring_blocks", {{10, 3}, {10, 9}}, [](Tape& t, const std::vector<Var>& v, int) {
         std::vector<int64_t> offs{-1, 0, 2};
         return scalarize(t, t.gather_ring(v[0], offs, 5), v[1]);
       }});

  add({"ring_attend", {{6, 4}, {6, 4}, {6, 4}, {6, 4}},
       [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.ring_attend(v[0], v[1], v[2], 1, 2), v[3]);
       }});
  add({"ring_attend_blocks", {{12, 4}, {12, 4}, {12, 4}, {12, 4}},
       [](Tape& t, const std::vector<Var>& v, int) {
         return scalarize(t, t.ring_attend(v[0], v[1], v[2], 2, 1, 6), v[3]);
       }});
  add({"local_attention", {{6, 4}, {4, 4}, {4, 4}, {4, 4}, {4, 4}, {6, 4}},
       [](Tape& t, const std::vector<Var>& v, int) {
         AttentionParams p{v[1], v[2], v[3], v[4]};
         return scalarize(t, t.local_attention(v[0], 1, 2, p), v[5]);
       }});

  auto crps_tweak = [](const std::string& name, int64_t B, int64_t N, int64_t K) {
    return [name, B, N, K](std::vector<Tensor>& in, int seed) {
      Tensor targets = crps_targets({B, K}, seed, name);
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t k = 0; k < K; ++k) {
          std::vector<double> col(static_cast<size_t>(N));
          for (int64_t n = 0; n < N; ++n) col[static_cast<size_t>(n)] = in[0].at(b * N + n, k);
          separate_column(col, targets.at(b, k), 0.03);
          for (int64_t n = 0; n < N; ++n) in[0].at(b * N + n, k) = col[static_cast<size_t>(n)];
        }
      }
    };
  };
  GradCase crps1{"fair_crps", {{6, 4}}, [](Tape& t, const std::vector<Var>& v, int seed) {
                   Tensor targets = crps_targets({2, 4}, seed, "fair_crps");
                   return t.fair_crps_loss(v[0], targets, Tensor{}, 3);
                 }};
  crps1.tweak = crps_tweak("fair_crps", 2, 3, 4);
  add(crps1);

  GradCase crps2{"fair_crps_weighted", {{8, 3}},
                 [](Tape& t, const std::vector<Var>& v, int seed) {
                   Tensor targets = crps_targets({2, 3}, seed, "fair_crps_weighted");
                   Tensor w = Tensor::from({3}, {0.5, 1.5, 1.0});
                   return t.fair_crps_loss(v[0], targets, w, 4);
                 }};
  crps2.tweak = crps_tweak("fair_crps_weighted", 2, 4, 3);
  add(crps2);

  GradCase crps3{"fair_crps_minimal", {{6, 2}},
                 [](Tape& t, const std::vector<Var>& v, int seed) {
                   Tensor targets = crps_targets({3, 2}, seed, "fair_crps_minimal");
                   return t.fair_crps_loss(v[0], targets, Tensor{}, 2);
                 }};
  crps3.tweak = crps_tweak("fair_crps_minimal", 3, 2, 2);
  add(crps3);

  // composition and fan-out: gradients must accumulate across reuse
  add({"chain_norm_mlp", {{4, 6}, {6, 6}, {2, 6}, {2, 6}, {4, 6}},
       [](Tape& t, const std::vector<Var>& v, int) {
         Var h = t.layer_norm(v[0]).normalized;
         h = t.block_scale_shift(h, v[2], v[3]);
         h = t.gelu(t.matmul(h, v[1]));
         return scalarize(t, h, v[4]);
       }});
  add({"fanout_reuse", {{3, 3}}, [](Tape& t, const std::vector<Var>& v, int) {
         Var y = t.add(t.mul(v[0], v[0]), t.scale(v[0], 0.5));
         return t.mean_all(t.add(y, t.gelu(v[0])));
       }});
  add({"residual_ring", {{6, 3}, {9, 3}, {6, 3}}, [](Tape& t, const std::vector<Var>& v, int) {
         std::vector<int64_t> offs{-1, 0, 1};
         Var msg = t.matmul(t.gather_ring(v[0], offs), v[1]);
         return scalarize(t, t.add(v[0], msg), v[2]);
       }});

  ModelConfig tiny;
  tiny.sites = 6;
  tiny.d_latent = 6;
  tiny.n_layers = 1;
  tiny.d_noise = 3;
  tiny.d_cond = 3;
  tiny.window = 1;
  tiny.heads = 2;
  add(pipeline_case("pipeline_attention", tiny));
  ModelConfig msg = tiny;
  msg.processor = "message-passing";
  add(pipeline_case("pipeline_message", msg));
  ModelConfig ps = tiny;
  ps.noise_mode = "per-site";
  add(pipeline_case("pipeline_per_site", ps));

  return cs;
}

inline SuiteResult run_suite() {
  auto t0 = std::chrono::steady_clock::now();
  SuiteResult out;
  for (const GradCase& c : all_cases()) run_case(c, out);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace fgn::gradcheck
