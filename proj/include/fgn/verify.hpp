#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fgn/bootstrap.hpp"
#include "fgn/climatology.hpp"
#include "fgn/common.hpp"
#include "fgn/crps.hpp"
#include "fgn/dataset.hpp"
#include "fgn/forecast.hpp"
#include "fgn/io.hpp"

namespace fgn {

struct VerifyConfig {
  std::vector<int64_t> pool_widths = {1, 2, 4, 8, 16};
  bool use_fair_crps = false;  // default is the CRPS of the empirical CDF
  std::vector<double> rev_levels = {0.99, 0.9, 0.1, 0.01};  // >= 0.5 upper tail, else lower
  std::vector<double> cost_loss_ratios = {0.02, 0.05, 0.1, 0.2, 0.3,  0.4,
                                          0.5,  0.6,  0.7, 0.8, 0.9,  0.98};
  bool spectra = true;
  std::vector<std::string> derived;  // extra CRPS rows on derived quantities

  void validate() const {
    if (pool_widths.empty()) throw ConfigError("verify: no pooling widths");
    for (int64_t w : pool_widths)
      if (w < 1) throw ConfigError("verify: pooling width must be >= 1");
    for (double r : cost_loss_ratios)
      if (!(r > 0.0) || !(r < 1.0)) throw ConfigError("verify: cost-loss ratio outside (0,1)");
    for (double l : rev_levels)
      if (!(l > 0.0) || !(l < 1.0)) throw ConfigError("verify: event level outside (0,1)");
  }

  json to_json() const {
    return {{"pool_widths", pool_widths},
            {"use_fair_crps", use_fair_crps},
            {"rev_levels", rev_levels},
            {"cost_loss_ratios", cost_loss_ratios},
            {"spectra", spectra},
            {"derived", derived}};
  }
  static VerifyConfig from_json(const json& j) {
    VerifyConfig c;
    c.pool_widths = j.value("pool_widths", c.pool_widths);
    c.use_fair_crps = j.value("use_fair_crps", c.use_fair_crps);
    c.rev_levels = j.value("rev_levels", c.rev_levels);
    c.cost_loss_ratios = j.value("cost_loss_ratios", c.cost_loss_ratios);
    c.spectra = j.value("spectra", c.spectra);
    c.derived = j.value("derived", c.derived);
    c.validate();
    return c;
  }
};

struct EvalCase {
  int64_t init_index = -1;
  EnsembleForecast forecast;
  Tensor truth;  // [lead_steps, sites]
};

struct EvalRun {
  std::vector<EvalCase> cases;
  std::optional<Climatology> clim;
  VerifyConfig config;

  int64_t members() const { return cases.at(0).forecast.members; }
  int64_t lead_steps() const { return cases.at(0).forecast.lead_steps; }
  int64_t sites() const { return cases.at(0).forecast.sites; }

  void validate() const {
    config.validate();
    if (cases.empty()) throw ConfigError("verify: no forecast cases");
    int64_t M = members(), T = lead_steps(), K = sites();
    for (const EvalCase& c : cases) {
      c.forecast.validate();
      if (c.forecast.members != M || c.forecast.lead_steps != T || c.forecast.sites != K)
        throw ConfigError("verify: forecasts disagree on ensemble dimensions");
      if (c.truth.rank() != 2 || c.truth.shape[0] != T || c.truth.shape[1] != K)
        throw ConfigError("verify: truth shape " + c.truth.shape_str() +
                          " does not match forecasts");
      if (!c.truth.all_finite()) throw ConfigError("verify: non-finite truth");
    }
    for (int64_t w : config.pool_widths)
      if (w > K) throw ConfigError("verify: pooling width exceeds ring size");
    if (clim) {
      clim->validate();
      if (clim->system.sites != K) throw ConfigError("verify: climatology site count mismatch");
      for (double l : config.rev_levels) clim->level_index(l);
    } else if (!config.rev_levels.empty()) {
      throw ConfigError("verify: threshold metrics require a climatology "
                        "(pass one or clear rev_levels)");
    }
  }
};

// Builds evaluation cases from forecasts plus the dataset they were launched
// from: truth for lead t is frame init_index + 2 + t.
inline EvalRun make_eval_run(std::vector<EnsembleForecast> forecasts, const Dataset& data,
                             std::optional<Climatology> clim, VerifyConfig config) {
  EvalRun run;
  run.config = std::move(config);
  run.clim = std::move(clim);
  for (EnsembleForecast& f : forecasts) {
    if (f.sites != data.sites()) throw ConfigError("verify: forecast/dataset site mismatch");
    if (f.init_index < 0 || f.init_index + 1 + f.lead_steps >= data.n_frames())
      throw ConfigError("verify: init index " + std::to_string(f.init_index) +
                        " runs past the dataset");
    EvalCase c;
    c.init_index = f.init_index;
    c.truth = Tensor::zeros({f.lead_steps, f.sites});
    for (int64_t t = 0; t < f.lead_steps; ++t)
      for (int64_t k = 0; k < f.sites; ++k)
        c.truth.at(t, k) = data.frames.at(f.init_index + 2 + t, k);
    c.forecast = std::move(f);
    run.cases.push_back(std::move(c));
  }
  run.validate();
  return run;
}

struct LeadSeries {
  std::vector<double> value;                  // [lead_steps]
  std::vector<std::vector<double>> per_init;  // [n_init][lead_steps], may be empty

  json to_json() const { return {{"value", value}, {"per_init", per_init}}; }
  static LeadSeries from_json(const json& j) {
    LeadSeries s;
    s.value = j.at("value").get<std::vector<double>>();
    s.per_init = j.value("per_init", s.per_init);
    return s;
  }
};

// Circular ring pooling: width-w window starting at every site.
inline void pool_ring(const double* x, int64_t K, int64_t w, bool max_pool, double* out) {
  for (int64_t k = 0; k < K; ++k) {
    double acc = max_pool ? -1e300 : 0.0;
    for (int64_t i = 0; i < w; ++i) {
      double v = x[(k + i) % K];
      if (max_pool)
        acc = std::max(acc, v);
      else
        acc += v;
    }
    out[k] = max_pool ? acc : acc / static_cast<double>(w);
  }
}

namespace detail {

template <typename PerInitLead>
LeadSeries aggregate_mean(const EvalRun& run, PerInitLead&& f) {
  int64_t T = run.lead_steps();
  LeadSeries s;
  s.value.assign(static_cast<size_t>(T), 0.0);
  for (const EvalCase& c : run.cases) {
    std::vector<double> row(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
      row[static_cast<size_t>(t)] = f(c, t);
      s.value[static_cast<size_t>(t)] += row[static_cast<size_t>(t)];
    }
    s.per_init.push_back(std::move(row));
  }
  for (double& v : s.value) v /= static_cast<double>(run.cases.size());
  return s;
}

}  // namespace detail

// Mean CRPS at one lead over all circular pooling windows of width w.
// use_fair false gives the CRPS of the empirical ensemble CDF (the metric of
// record when comparing ensembles whose members are not exchangeable, e.g.
// equal allocations across training seeds); true gives the fair estimator.
inline LeadSeries ensemble_crps(const EvalRun& run, int64_t width, bool max_pool,
                                bool use_fair) {
  int64_t M = run.members(), K = run.sites();
  if (use_fair && M < 2) throw ConfigError("verify: fair CRPS needs at least 2 members");
  std::vector<double> pooled_members(static_cast<size_t>(M * K));
  std::vector<double> pooled_truth(static_cast<size_t>(K));
  std::vector<double> member_vals(static_cast<size_t>(M));
  return detail::aggregate_mean(run, [&](const EvalCase& c, int64_t t) {
    for (int64_t m = 0; m < M; ++m)
      pool_ring(&c.forecast.values.data[static_cast<size_t>((m * run.lead_steps() + t) * K)], K,
                width, max_pool, &pooled_members[static_cast<size_t>(m * K)]);
    pool_ring(&c.truth.data[static_cast<size_t>(t * K)], K, width, max_pool,
              pooled_truth.data());
    double acc = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      for (int64_t m = 0; m < M; ++m)
        member_vals[static_cast<size_t>(m)] = pooled_members[static_cast<size_t>(m * K + k)];
      acc += use_fair ? crps::fair(member_vals, pooled_truth[static_cast<size_t>(k)])
                      : crps::biased(member_vals, pooled_truth[static_cast<size_t>(k)]);
    }
    return acc / static_cast<double>(K);
  });
}

inline LeadSeries ensemble_mean_rmse(const EvalRun& run) {
  int64_t M = run.members(), K = run.sites();
  LeadSeries s = detail::aggregate_mean(run, [&](const EvalCase& c, int64_t t) {
    double acc = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      double mean = 0.0;
      for (int64_t m = 0; m < M; ++m) mean += c.forecast.value(m, t, k);
      mean /= static_cast<double>(M);
      double d = mean - c.truth.at(t, k);
      acc += d * d;
    }
    return acc / static_cast<double>(K);
  });
  // aggregate over inits before the square root: RMSE of the pooled sample
  for (size_t t = 0; t < s.value.size(); ++t) s.value[t] = std::sqrt(s.value[t]);
  for (auto& row : s.per_init)
    for (double& v : row) v = std::sqrt(v);
  return s;
}

// Fortin-style spread: sqrt((M+1)/M * mean unbiased ensemble variance).  For
// a statistically consistent ensemble spread/skill == 1.
inline LeadSeries ensemble_spread(const EvalRun& run) {
  int64_t M = run.members(), K = run.sites();
  if (M < 2) throw ConfigError("verify: spread needs at least 2 members");
  double fortin = static_cast<double>(M + 1) / static_cast<double>(M);
  LeadSeries s = detail::aggregate_mean(run, [&](const EvalCase& c, int64_t t) {
    double acc = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      double mean = 0.0;
      for (int64_t m = 0; m < M; ++m) mean += c.forecast.value(m, t, k);
      mean /= static_cast<double>(M);
      double var = 0.0;
      for (int64_t m = 0; m < M; ++m) {
        double d = c.forecast.value(m, t, k) - mean;
        var += d * d;
      }
      acc += var / static_cast<double>(M - 1);
    }
    return fortin * acc / static_cast<double>(K);
  });
  for (size_t t = 0; t < s.value.size(); ++t) s.value[t] = std::sqrt(s.value[t]);
  for (auto& row : s.per_init)
    for (double& v : row) v = std::sqrt(v);
  return s;
}

inline LeadSeries spread_skill_ratio(const EvalRun& run) {
  LeadSeries spread = ensemble_spread(run);
  LeadSeries rmse = ensemble_mean_rmse(run);
  LeadSeries s;
  for (size_t t = 0; t < spread.value.size(); ++t)
    s.value.push_back(spread.value[t] / rmse.value[t]);
  for (size_t i = 0; i < spread.per_init.size(); ++i) {
    std::vector<double> row;
    for (size_t t = 0; t < spread.per_init[i].size(); ++t)
      row.push_back(spread.per_init[i][t] / rmse.per_init[i][t]);
    s.per_init.push_back(std::move(row));
  }
  return s;
}

// Relative economic value at one cost-loss ratio: the envelope over
// probability thresholds p in {0, 1/M, ..., 1, never} of the forecast's
// expected expense, rescaled so climatology (base rate from this evaluation
// sample) is 0 and a perfect deterministic forecast is 1.
inline LeadSeries rev_curve(const EvalRun& run, double level, double cost_loss) {
  if (!run.clim) throw ConfigError("verify: REV requires a climatology");
  int64_t M = run.members(), T = run.lead_steps(), K = run.sites();
  bool upper = level >= 0.5;
  int64_t li = run.clim->level_index(level);
  LeadSeries s;
  s.value.assign(static_cast<size_t>(T), 0.0);
  for (int64_t t = 0; t < T; ++t) {
    // counts[c] = events and non-events among samples whose forecast
    // probability is exactly c/M; the envelope then scans thresholds.
    std::vector<int64_t> events(static_cast<size_t>(M + 1), 0);
    std::vector<int64_t> totals(static_cast<size_t>(M + 1), 0);
    int64_t n = 0, n_events = 0;
    for (const EvalCase& c : run.cases) {
      for (int64_t k = 0; k < K; ++k) {
        double thr = run.clim->threshold(static_cast<size_t>(li), k);
        bool event = upper ? c.truth.at(t, k) >= thr : c.truth.at(t, k) <= thr;
        int64_t hits = 0;
        for (int64_t m = 0; m < M; ++m) {
          double v = c.forecast.value(m, t, k);
          hits += (upper ? v >= thr : v <= thr) ? 1 : 0;
        }
        totals[static_cast<size_t>(hits)] += 1;
        if (event) events[static_cast<size_t>(hits)] += 1;
        n += 1;
        n_events += event ? 1 : 0;
      }
    }
    double r = cost_loss;
    double base = static_cast<double>(n_events) / static_cast<double>(n);
    double e_clim = std::min(r, base);
    double e_perf = r * base;
    // threshold "alarm iff forecast count >= c" for c = 0..M+1 (M+1 = never)
    double best = 1e300;
    for (int64_t cthr = 0; cthr <= M + 1; ++cthr) {
      int64_t alarms = 0, misses = 0;
      for (int64_t c2 = 0; c2 <= M; ++c2) {
        if (c2 >= cthr)
          alarms += totals[static_cast<size_t>(c2)];
        else
          misses += events[static_cast<size_t>(c2)];
      }
      double e = (r * static_cast<double>(alarms) + static_cast<double>(misses)) /
                 static_cast<double>(n);
      best = std::min(best, e);
    }
    double denom = e_clim - e_perf;
    s.value[static_cast<size_t>(t)] = denom > 1e-15 ? (e_clim - best) / denom : 0.0;
  }
  return s;
}

// Ring power spectrum with the normalization that makes Parseval exact:
// sum_kappa P[kappa] == mean_k x_k^2 (variance plus squared mean).
inline std::vector<double> power_spectrum(std::span<const double> x) {
  int64_t K = static_cast<int64_t>(x.size());
  if (K < 2) throw ContractViolation("spectrum: need at least 2 sites");
  int64_t nk = K / 2 + 1;
  std::vector<double> P(static_cast<size_t>(nk), 0.0);
  for (int64_t kappa = 0; kappa < nk; ++kappa) {
    double re = 0.0, im = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      double a = -2.0 * M_PI * static_cast<double>(kappa) * static_cast<double>(k) /
                 static_cast<double>(K);
      re += x[static_cast<size_t>(k)] * std::cos(a);
      im += x[static_cast<size_t>(k)] * std::sin(a);
    }
    double p = (re * re + im * im) / (static_cast<double>(K) * static_cast<double>(K));
    bool shared = kappa == 0 || (K % 2 == 0 && kappa == K / 2);
    P[static_cast<size_t>(kappa)] = shared ? p : 2.0 * p;
  }
  return P;
}

struct SpectrumReport {
  std::vector<double> wavenumbers;
  std::vector<std::vector<double>> forecast;  // [lead][wavenumber]
  std::vector<std::vector<double>> truth;     // [lead][wavenumber]
  double parseval_residual = 0.0;

  json to_json() const {
    return {{"wavenumbers", wavenumbers},
            {"forecast", forecast},
            {"truth", truth},
            {"parseval_residual", parseval_residual}};
  }
};

inline SpectrumReport mean_spectra(const EvalRun& run) {
  int64_t M = run.members(), T = run.lead_steps(), K = run.sites();
  int64_t nk = K / 2 + 1;
  SpectrumReport rep;
  for (int64_t kappa = 0; kappa < nk; ++kappa)
    rep.wavenumbers.push_back(static_cast<double>(kappa));
  rep.forecast.assign(static_cast<size_t>(T), std::vector<double>(static_cast<size_t>(nk), 0.0));
  rep.truth.assign(static_cast<size_t>(T), std::vector<double>(static_cast<size_t>(nk), 0.0));
  for (int64_t t = 0; t < T; ++t) {
    for (const EvalCase& c : run.cases) {
      for (int64_t m = 0; m < M; ++m) {
        std::span<const double> x(
            &c.forecast.values.data[static_cast<size_t>((m * T + t) * K)],
            static_cast<size_t>(K));
        std::vector<double> P = power_spectrum(x);
        for (int64_t i = 0; i < nk; ++i)
          rep.forecast[static_cast<size_t>(t)][static_cast<size_t>(i)] +=
              P[static_cast<size_t>(i)];
      }
      std::span<const double> xt(&c.truth.data[static_cast<size_t>(t * K)],
                                 static_cast<size_t>(K));
      std::vector<double> Pt = power_spectrum(xt);
      for (int64_t i = 0; i < nk; ++i)
        rep.truth[static_cast<size_t>(t)][static_cast<size_t>(i)] += Pt[static_cast<size_t>(i)];
    }
    for (int64_t i = 0; i < nk; ++i) {
      rep.forecast[static_cast<size_t>(t)][static_cast<size_t>(i)] /=
          static_cast<double>(M * static_cast<int64_t>(run.cases.size()));
      rep.truth[static_cast<size_t>(t)][static_cast<size_t>(i)] /=
          static_cast<double>(run.cases.size());
    }
  }
  // Parseval cross-check on one representative state
  const EvalCase& c0 = run.cases.front();
  std::span<const double> x0(&c0.truth.data[0], static_cast<size_t>(K));
  std::vector<double> P0 = power_spectrum(x0);
  double lhs = 0.0;
  for (double p : P0) lhs += p;
  double ms = 0.0;
  for (double v : x0) ms += v * v;
  ms /= static_cast<double>(K);
  rep.parseval_residual = std::fabs(lhs - ms);
  return rep;
}

struct MetricsReport {
  std::vector<int64_t> init_indices;
  std::map<std::string, LeadSeries> metrics;
  json spectra;  // SpectrumReport::to_json or null
  json info;

  json to_json() const {
    json m = json::object();
    for (const auto& [k, v] : metrics) m[k] = v.to_json();
    return {{"format", "fgn-report-v1"},
            {"init_indices", init_indices},
            {"metrics", std::move(m)},
            {"spectra", spectra},
            {"info", info}};
  }

  static MetricsReport from_json(const json& j) {
    MetricsReport r;
    if (j.value("format", "") != "fgn-report-v1")
      throw DataCorruption("report: unknown format");
    r.init_indices = j.at("init_indices").get<std::vector<int64_t>>();
    for (const auto& [k, v] : j.at("metrics").items())
      r.metrics[k] = LeadSeries::from_json(v);
    r.spectra = j.value("spectra", json());
    r.info = j.value("info", json::object());
    return r;
  }

  void save(const std::filesystem::path& path) const {
    write_file_bytes(path, to_json().dump(1) + "\n");
  }
  static MetricsReport load(const std::filesystem::path& path) {
    json j = json::parse(read_file_bytes(path), nullptr, false);
    if (j.is_discarded()) throw DataCorruption("report: unparseable JSON in " + path.string());
    return from_json(j);
  }

  // One CSV per metric (lead, aggregate value) plus the spectra table.
  void write_csv(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& [name, series] : metrics) {
      std::string out = "lead,value\n";
      for (size_t t = 0; t < series.value.size(); ++t) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", t + 1, series.value[t]);
        out += buf;
      }
      write_file_bytes(dir / (name + ".csv"), out);
    }
    if (spectra.is_object()) {
      std::string out = "lead,wavenumber,forecast,truth\n";
      const auto& wn = spectra.at("wavenumbers");
      const auto& fc = spectra.at("forecast");
      const auto& tr = spectra.at("truth");
      for (size_t t = 0; t < fc.size(); ++t)
        for (size_t i = 0; i < wn.size(); ++i) {
          char buf[128];
          std::snprintf(buf, sizeof buf, "%zu,%g,%.17g,%.17g\n", t + 1,
                        wn.at(i).get<double>(), fc.at(t).at(i).get<double>(),
                        tr.at(t).at(i).get<double>());
          out += buf;
        }
      write_file_bytes(dir / "spectra.csv", out);
    }
  }
};

inline std::string format_ratio(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", r);
  return buf;
}

inline MetricsReport evaluate(const EvalRun& run) {
  run.validate();
  MetricsReport rep;
  for (const EvalCase& c : run.cases) rep.init_indices.push_back(c.init_index);
  bool fair = run.config.use_fair_crps;
  for (int64_t w : run.config.pool_widths) {
    rep.metrics["crps_avg_w" + std::to_string(w)] = ensemble_crps(run, w, false, fair);
    rep.metrics["crps_max_w" + std::to_string(w)] = ensemble_crps(run, w, true, fair);
  }
  rep.metrics["crps"] = ensemble_crps(run, 1, false, fair);
  rep.metrics["ens_mean_rmse"] = ensemble_mean_rmse(run);
  if (run.members() >= 2) {
    rep.metrics["spread"] = ensemble_spread(run);
    rep.metrics["spread_skill"] = spread_skill_ratio(run);
  }
  for (const std::string& kind : run.config.derived) {
    EvalRun drun;
    drun.config = run.config;
    drun.config.rev_levels.clear();
    for (const EvalCase& c : run.cases) {
      EvalCase dc;
      dc.init_index = c.init_index;
      dc.forecast = c.forecast;
      dc.forecast.values = derived_quantity(c.forecast.values, kind);
      dc.truth = derived_quantity(c.truth, kind);
      drun.cases.push_back(std::move(dc));
    }
    rep.metrics["crps_" + kind] = ensemble_crps(drun, 1, false, fair);
  }
  if (run.clim) {
    for (double level : run.config.rev_levels)
      for (double r : run.config.cost_loss_ratios)
        rep.metrics["rev_l" + format_ratio(level) + "_r" + format_ratio(r)] =
            rev_curve(run, level, r);
  }
  if (run.config.spectra) rep.spectra = mean_spectra(run).to_json();
  rep.info = {{"members", run.members()},
              {"lead_steps", run.lead_steps()},
              {"sites", run.sites()},
              {"n_init", run.cases.size()},
              {"config", run.config.to_json()}};
  return rep;
}

// Paired metric differences (a - b) per lead with moving-block bootstrap
// intervals; inits must match one-to-one.
inline json compare_reports(const MetricsReport& a, const MetricsReport& b,
                            const std::vector<std::string>& metric_names, int64_t n_boot = 1000,
                            double confidence = 0.95, uint64_t seed = 0) {
  if (a.init_indices != b.init_indices)
    throw ConfigError("compare: reports evaluate different init sets");
  json out = json::object();
  for (const std::string& name : metric_names) {
    auto ia = a.metrics.find(name);
    auto ib = b.metrics.find(name);
    if (ia == a.metrics.end() || ib == b.metrics.end())
      throw ConfigError("compare: metric '" + name + "' missing from a report");
    const LeadSeries& sa = ia->second;
    const LeadSeries& sb = ib->second;
    if (sa.per_init.empty() || sb.per_init.empty())
      throw ConfigError("compare: metric '" + name + "' lacks per-init values");
    size_t T = sa.value.size();
    json leads = json::array();
    for (size_t t = 0; t < T; ++t) {
      std::vector<double> xa, xb;
      for (size_t i = 0; i < sa.per_init.size(); ++i) {
        xa.push_back(sa.per_init[i][t]);
        xb.push_back(sb.per_init[i][t]);
      }
      RngStream rng = RngStream::root(seed, "compare").derive(name).derive(t);
      BootstrapInterval bi = paired_diff_interval(xa, xb, n_boot, confidence, rng);
      leads.push_back({{"lead", t + 1},
                       {"mean_diff", bi.mean},
                       {"lo", bi.lo},
                       {"hi", bi.hi},
                       {"significant", bi.excludes_zero()}});
    }
    out[name] = std::move(leads);
  }
  return out;
}

}  // namespace fgn
