#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fgn/climatology.hpp"
#include "fgn/common.hpp"
#include "fgn/dataset.hpp"
#include "fgn/forecast.hpp"
#include "fgn/manifest.hpp"
#include "fgn/model.hpp"
#include "fgn/train.hpp"
#include "fgn/verify.hpp"

namespace fgn::cli {

namespace fs = std::filesystem;

// Relative output paths land under FGN_OUTPUT_ROOT when it is set.
inline fs::path resolve_out(const fs::path& p) {
  if (p.is_absolute()) return p;
  const char* root = std::getenv("FGN_OUTPUT_ROOT");
  if (!root || !*root) return p;
  return fs::path(root) / p;
}

inline json load_json_file(const fs::path& path) {
  json j = json::parse(read_file_bytes(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("unparseable JSON config: " + path.string());
  return j;
}

// key=value pairs with dotted paths; values parse as JSON when possible,
// otherwise as strings.
inline void apply_sets(json& cfg, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set wants key=value, got '" + s + "'");
    std::string key = s.substr(0, eq);
    std::string val = s.substr(eq + 1);
    std::string ptr = "/";
    for (char c : key) ptr += c == '.' ? '/' : std::string(1, c)[0];
    json parsed = json::parse(val, nullptr, false);
    cfg[json::json_pointer(ptr)] = parsed.is_discarded() ? json(val) : parsed;
  }
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

inline void say(const std::string& line) { std::fprintf(stdout, "%s\n", line.c_str()); }

inline std::string num17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- gen-data ----

struct GenDataArgs {
  std::string out;
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::string> raw_argv;
};

inline int cmd_gen_data(const GenDataArgs& a) {
  Timer timer;
  json cfg{{"system", SystemConfig().to_json()},
           {"frames", 10000},
           {"split", {0.8, 0.1, 0.1}},
           {"burn_in", 500},
           {"clim_frames", 20000},
           {"clim_levels", default_clim_levels()}};
  if (!a.config_path.empty()) cfg.update(load_json_file(a.config_path), true);
  apply_sets(cfg, a.sets);

  SystemConfig system = SystemConfig::from_json(cfg.at("system"));
  int64_t frames = cfg.at("frames").get<int64_t>();
  auto splitv = cfg.at("split").get<std::vector<double>>();
  if (splitv.size() != 3) throw ConfigError("gen-data: split wants three fractions");
  int64_t burn_in = cfg.at("burn_in").get<int64_t>();
  int64_t clim_frames = cfg.at("clim_frames").get<int64_t>();
  auto levels = cfg.at("clim_levels").get<std::vector<double>>();

  RunManifest man;
  man.command = "gen-data";
  man.argv = a.raw_argv;
  man.config = cfg;
  man.master_seed = system.seed;
  if (!a.config_path.empty()) man.add_input("config", a.config_path);
  std::string mh = man.hash();

  fs::path out = resolve_out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  Dataset data = make_dataset(system, frames, {splitv[0], splitv[1], splitv[2]}, burn_in);
  data.manifest_hash = mh;
  save_dataset(data, out);
  Climatology clim = build_climatology(system, clim_frames, levels, burn_in);
  fs::path clim_path = out;
  clim_path += ".clim.json";
  save_climatology(clim, clim_path, mh);

  man.add_output("dataset", out);
  man.add_output("climatology", clim_path);
  man.wall_time_s = timer.seconds();
  fs::path man_path = out;
  man_path += ".manifest.json";
  man.save(man_path);

  say("dataset " + out.string() + " frames=" + std::to_string(data.n_frames()) +
      " sites=" + std::to_string(data.sites()));
  say("  stats mean=" + num17(data.stats.mean) + " std=" + num17(data.stats.std) +
      " residual_std=" + num17(data.stats.residual_std));
  say("  manifest " + mh);
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string dataset;
  std::string out_dir;
  std::string config_path;
  std::string schedule;  // empty, "desk-full" or "desk-single"
  std::vector<std::string> sets;
  int64_t seeds = 1;
  uint64_t master_seed = 0;
  bool master_seed_given = false;
  double steps_scale = 1.0;
  std::string processor;
  std::string noise_mode;
  bool resume = false;
  int64_t halt_after = -1;
  int64_t state_every = 1000;
  std::vector<std::string> raw_argv;
};

inline int cmd_train(const TrainArgs& a) {
  Timer timer;
  Dataset data = load_dataset(resolve_out(a.dataset));
  json cfg{{"model", ModelConfig().to_json()},
           {"train", TrainConfig::desk(true).to_json()},
           {"seeds", a.seeds}};
  cfg["model"].erase("sites");
  if (!a.config_path.empty()) cfg.update(load_json_file(a.config_path), true);
  apply_sets(cfg, a.sets);
  if (!a.schedule.empty()) {
    if (a.schedule == "desk-full")
      cfg["train"]["stages"] = TrainConfig::desk(true).to_json()["stages"];
    else if (a.schedule == "desk-single")
      cfg["train"]["stages"] = TrainConfig::desk(false).to_json()["stages"];
    else
      throw ConfigError("train: unknown schedule '" + a.schedule + "'");
  }
  if (!a.processor.empty()) cfg["model"]["processor"] = a.processor;
  if (!a.noise_mode.empty()) cfg["model"]["noise_mode"] = a.noise_mode;
  if (a.master_seed_given) cfg["train"]["master_seed"] = a.master_seed;
  if (!cfg["model"].contains("sites")) cfg["model"]["sites"] = data.sites();
  cfg["seeds"] = cfg.value("seeds", a.seeds);

  ModelConfig mcfg = ModelConfig::from_json(cfg.at("model"));
  TrainConfig tcfg = TrainConfig::from_json(cfg.at("train"));
  if (a.steps_scale != 1.0) {
    tcfg = tcfg.scaled(a.steps_scale);
    cfg["train"] = tcfg.to_json();
    cfg["steps_scale"] = a.steps_scale;
  }
  int64_t n_seeds = cfg.at("seeds").get<int64_t>();
  if (n_seeds < 1) throw ConfigError("train: seeds must be >= 1");

  RunManifest man;
  man.command = "train";
  man.argv = a.raw_argv;
  man.config = cfg;
  man.master_seed = tcfg.master_seed;
  man.add_input("dataset", resolve_out(a.dataset));
  if (!a.config_path.empty()) man.add_input("config", a.config_path);
  std::string mh = man.hash();

  fs::path dir = resolve_out(a.out_dir);
  fs::create_directories(dir);

  for (int64_t j = 0; j < n_seeds; ++j) {
    fs::path state_path = dir / ("seed" + std::to_string(j) + ".state");
    fs::path ckpt_path = dir / ("seed" + std::to_string(j) + ".ckpt");
    fs::path log_path = dir / ("seed" + std::to_string(j) + ".log.jsonl");
    TrainState st;
    if (a.resume && fs::exists(state_path)) {
      st = load_train_state(state_path, tcfg);
      say("seed " + std::to_string(j) + ": resumed at stage " + std::to_string(st.stage) +
          " step " + std::to_string(st.step_in_stage));
    } else {
      st = init_train_state(mcfg, data, tcfg, j);
    }
    std::ofstream log(log_path, a.resume ? std::ios::app : std::ios::trunc);
    int64_t logged = 0;
    StepCallback cb = [&](const StepRecord& r) {
      log << "{\"seed\":" << r.seed_id << ",\"stage\":" << r.stage << ",\"step\":"
          << r.step_in_stage << ",\"global_step\":" << r.global_step << ",\"loss\":"
          << num17(r.loss) << ",\"lr\":" << num17(r.lr) << ",\"grad_norm\":"
          << num17(r.grad_norm) << "}\n";
      if (++logged % 50 == 0) log.flush();
    };
    int64_t done = 0;
    try {
      while (!st.finished(tcfg)) {
        int64_t budget = a.state_every;
        if (a.halt_after >= 0) budget = std::min(budget, a.halt_after - done);
        if (budget <= 0) break;
        int64_t before = st.opt.step;
        train_steps(st, data, tcfg, budget, cb);
        done += st.opt.step - before;
        save_train_state(st, tcfg, state_path);
      }
    } catch (const NumericalFailure&) {
      fs::path bad = dir / ("seed" + std::to_string(j) + ".diverged.state");
      save_train_state(st, tcfg, bad);
      std::fprintf(stderr, "last good state saved to %s\n", bad.string().c_str());
      throw;
    }
    if (st.finished(tcfg)) {
      save_checkpoint(st.params, ckpt_path, mh);
      man.add_output("seed" + std::to_string(j), ckpt_path);
      say("seed " + std::to_string(j) + ": finished, checkpoint " + ckpt_path.string());
    } else {
      say("seed " + std::to_string(j) + ": halted at stage " + std::to_string(st.stage) +
          " step " + std::to_string(st.step_in_stage) + ", state " + state_path.string());
    }
  }
  man.wall_time_s = timer.seconds();
  man.save(dir / "manifest.json");
  say("manifest " + mh);
  return 0;
}

// ---- forecast ----

struct ForecastArgs {
  std::vector<std::string> checkpoints;
  std::string dataset;
  std::string inits = "test:10";
  int64_t members = 16;
  int64_t lead = 15;
  uint64_t master_seed = 0;
  std::string out_dir;
  std::vector<std::string> raw_argv;
};

inline std::vector<int64_t> parse_inits(const std::string& spec, const Dataset& data,
                                        int64_t lead) {
  int64_t max_start = data.n_frames() - lead - 2;
  std::vector<int64_t> out;
  if (spec.rfind("test:", 0) == 0) {
    int64_t n = std::stoll(spec.substr(5));
    if (n < 1) throw ConfigError("inits: test:N wants N >= 1");
    int64_t lo = data.test_begin();
    int64_t hi = max_start;
    if (hi < lo)
      throw ConfigError("inits: test split too short for lead " + std::to_string(lead));
    if (n > hi - lo + 1)
      throw ConfigError("inits: test split has only " + std::to_string(hi - lo + 1) +
                        " usable start frames, wanted " + std::to_string(n));
    for (int64_t i = 0; i < n; ++i) {
      int64_t idx = n == 1 ? lo
                           : lo + static_cast<int64_t>(std::llround(
                                      static_cast<double>(i) *
                                      static_cast<double>(hi - lo) / static_cast<double>(n - 1)));
      out.push_back(idx);
    }
  } else {
    std::string cur;
    for (char c : spec + ",") {
      if (c == ',') {
        if (!cur.empty()) out.push_back(std::stoll(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (out.empty()) throw ConfigError("inits: empty list");
    for (int64_t idx : out)
      if (idx < 0 || idx > max_start)
        throw ConfigError("inits: index " + std::to_string(idx) +
                          " leaves no room for lead " + std::to_string(lead));
  }
  for (size_t i = 1; i < out.size(); ++i)
    if (out[i] == out[i - 1]) throw ConfigError("inits: duplicate start frames");
  return out;
}

inline int cmd_forecast(const ForecastArgs& a) {
  Timer timer;
  if (a.checkpoints.empty()) throw ConfigError("forecast: no checkpoints given");
  Dataset data = load_dataset(resolve_out(a.dataset));
  std::vector<ModelParams> models;
  for (const std::string& c : a.checkpoints) models.push_back(load_checkpoint(resolve_out(c)));
  for (const ModelParams& m : models) {
    if (m.config.sites != data.sites())
      throw ConfigError("forecast: checkpoint trained on " + std::to_string(m.config.sites) +
                        " sites, dataset has " + std::to_string(data.sites()));
    if (m.stats.hash() != data.stats.hash())
      throw ConfigError("forecast: checkpoint normalization stats do not match this dataset");
  }
  if (a.lead < 1) throw ConfigError("forecast: lead must be >= 1");
  std::vector<int64_t> inits = parse_inits(a.inits, data, a.lead);

  RunManifest man;
  man.command = "forecast";
  man.argv = a.raw_argv;
  man.config = {{"members", a.members},
                {"lead", a.lead},
                {"inits", inits},
                {"checkpoints", a.checkpoints}};
  man.master_seed = a.master_seed;
  man.add_input("dataset", resolve_out(a.dataset));
  for (size_t i = 0; i < a.checkpoints.size(); ++i)
    man.add_input("checkpoint" + std::to_string(i), resolve_out(a.checkpoints[i]));
  std::string mh = man.hash();

  fs::path dir = resolve_out(a.out_dir);
  fs::create_directories(dir);
  json ckinfo = json::array();
  for (size_t i = 0; i < a.checkpoints.size(); ++i)
    ckinfo.push_back({{"file", fs::path(a.checkpoints[i]).filename().string()},
                      {"seed_id", models[i].seed_id}});
  for (int64_t idx : inits) {
    TrajectoryWindow w{data.frame(idx), data.frame(idx + 1)};
    EnsembleForecast f =
        generate_ensemble(models, w, a.members, a.lead, a.master_seed, idx);
    fs::path p = dir / ("init" + std::to_string(idx) + ".fcs");
    save_forecast(f, p, mh, ckinfo);
    man.add_output("init" + std::to_string(idx), p);
  }
  man.wall_time_s = timer.seconds();
  man.save(dir / "manifest.json");
  say("forecasts: " + std::to_string(inits.size()) + " inits x " + std::to_string(a.members) +
      " members x " + std::to_string(a.lead) + " steps -> " + dir.string());
  say("manifest " + mh);
  return 0;
}

// ---- verify ----

struct VerifyArgs {
  std::string forecasts;
  std::string dataset;
  std::string climatology;
  std::string config_path;
  std::vector<std::string> sets;
  bool fair = false;
  bool no_spectra = false;
  std::string out = "report.json";
  std::string csv_dir;
  std::string baseline;
  std::vector<std::string> compare_metrics;
  int64_t n_boot = 1000;
  double confidence = 0.95;
  uint64_t seed = 0;
  std::vector<std::string> raw_argv;
};

inline std::vector<fs::path> collect_forecast_files(const std::string& spec) {
  std::vector<fs::path> files;
  fs::path p = resolve_out(spec);
  if (fs::is_directory(p)) {
    for (const auto& e : fs::directory_iterator(p))
      if (e.path().extension() == ".fcs") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    std::string cur;
    for (char c : spec + ",") {
      if (c == ',') {
        if (!cur.empty()) files.push_back(resolve_out(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
  }
  if (files.empty()) throw ConfigError("verify: no forecast files found in '" + spec + "'");
  return files;
}

inline int cmd_verify(const VerifyArgs& a) {
  Timer timer;
  Dataset data = load_dataset(resolve_out(a.dataset));
  json vcfg_json = VerifyConfig().to_json();
  bool rev_requested = !a.climatology.empty();
  if (!a.config_path.empty()) {
    json file = load_json_file(a.config_path);
    if (file.contains("rev_levels")) rev_requested = true;
    vcfg_json.update(file, true);
  }
  for (const std::string& s : a.sets)
    if (s.rfind("rev_levels", 0) == 0) rev_requested = true;
  apply_sets(vcfg_json, a.sets);
  if (!rev_requested) vcfg_json["rev_levels"] = json::array();
  VerifyConfig vcfg = VerifyConfig::from_json(vcfg_json);
  if (a.fair) vcfg.use_fair_crps = true;
  if (a.no_spectra) vcfg.spectra = false;

  std::optional<Climatology> clim;
  if (!a.climatology.empty()) clim = load_climatology(resolve_out(a.climatology));
  if (!vcfg.rev_levels.empty() && !clim)
    throw ConfigError("verify: threshold exceedance metrics need --climatology");

  std::vector<fs::path> files = collect_forecast_files(a.forecasts);
  std::vector<EnsembleForecast> fcs;
  for (const fs::path& f : files) fcs.push_back(load_forecast(f));
  EvalRun run = make_eval_run(std::move(fcs), data, std::move(clim), vcfg);

  RunManifest man;
  man.command = "verify";
  man.argv = a.raw_argv;
  man.config = vcfg.to_json();
  man.master_seed = a.seed;
  man.add_input("dataset", resolve_out(a.dataset));
  for (const fs::path& f : files) man.add_input(f.filename().string(), f);
  if (!a.climatology.empty()) man.add_input("climatology", resolve_out(a.climatology));
  if (!a.baseline.empty()) man.add_input("baseline", resolve_out(a.baseline));
  std::string mh = man.hash();

  MetricsReport rep = evaluate(run);
  rep.info["manifest"] = mh;
  json out_json = rep.to_json();
  if (!a.baseline.empty()) {
    MetricsReport base = MetricsReport::load(resolve_out(a.baseline));
    std::vector<std::string> names =
        a.compare_metrics.empty() ? std::vector<std::string>{"crps"} : a.compare_metrics;
    out_json["comparison"] =
        compare_reports(rep, base, names, a.n_boot, a.confidence, a.seed);
  }
  fs::path out = resolve_out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file_bytes(out, out_json.dump(1) + "\n");
  if (!a.csv_dir.empty()) rep.write_csv(resolve_out(a.csv_dir));
  man.add_output("report", out);
  man.wall_time_s = timer.seconds();
  fs::path man_path = out;
  man_path += ".manifest.json";
  man.save(man_path);

  const LeadSeries& crps = rep.metrics.at("crps");
  say("verify: " + std::to_string(run.cases.size()) + " inits, crps lead1=" +
      num17(crps.value.front()) + " lead" + std::to_string(crps.value.size()) + "=" +
      num17(crps.value.back()));
  if (rep.metrics.count("spread_skill")) {
    const LeadSeries& ss = rep.metrics.at("spread_skill");
    double mean = 0.0;
    for (double v : ss.value) mean += v;
    say("  spread/skill mean over leads = " + num17(mean / ss.value.size()));
  }
  say("  manifest " + mh);
  return 0;
}

// ---- ablate ----

struct AblateArgs {
  std::string dataset;
  std::string out_dir;
  uint64_t master_seed = 0;
  double steps_scale = 1.0;
  int64_t members = 16;
  int64_t lead = 15;
  std::string inits = "test:50";
  int64_t seeds = 4;
  int64_t n_boot = 1000;
  double confidence = 0.95;
  std::vector<std::string> raw_argv;
};

inline int cmd_ablate(const AblateArgs& a) {
  Timer timer;
  Dataset data = load_dataset(resolve_out(a.dataset));
  if (a.seeds < 2) throw ConfigError("ablate: needs at least 2 seeds for the ensemble arm");
  if (a.members % a.seeds != 0)
    throw ConfigError("ablate: members must split equally across seeds");
  ModelConfig mcfg;
  mcfg.sites = data.sites();
  TrainConfig tcfg = TrainConfig::desk(true);
  tcfg.master_seed = a.master_seed;
  if (a.steps_scale != 1.0) tcfg = tcfg.scaled(a.steps_scale);

  RunManifest man;
  man.command = "ablate";
  man.argv = a.raw_argv;
  man.config = {{"model", mcfg.to_json()},
                {"train", tcfg.to_json()},
                {"members", a.members},
                {"lead", a.lead},
                {"inits", a.inits},
                {"seeds", a.seeds},
                {"steps_scale", a.steps_scale}};
  man.master_seed = a.master_seed;
  man.add_input("dataset", resolve_out(a.dataset));
  std::string mh = man.hash();

  fs::path dir = resolve_out(a.out_dir);
  fs::create_directories(dir);

  // Train the J-seed ensemble; seed 0's post-stage-0 snapshot doubles as the
  // single-step-only variant, and seed 0's final checkpoint as the J=1 arm.
  std::vector<ModelParams> seeds_models;
  for (int64_t j = 0; j < a.seeds; ++j) {
    std::ofstream log(dir / ("train_seed" + std::to_string(j) + ".log.jsonl"),
                      std::ios::trunc);
    int64_t logged = 0;
    StepCallback cb = [&](const StepRecord& r) {
      log << "{\"seed\":" << r.seed_id << ",\"stage\":" << r.stage << ",\"step\":"
          << r.step_in_stage << ",\"loss\":" << num17(r.loss) << ",\"lr\":" << num17(r.lr)
          << "}\n";
      if (++logged % 50 == 0) log.flush();
    };
    auto hook = [&](const TrainState& st) {
      if (j == 0 && st.stage == 1) save_checkpoint(st.params, dir / "single.ckpt", mh);
    };
    ModelParams p = train_model(data, mcfg, tcfg, j, cb, hook);
    save_checkpoint(p, dir / ("seed" + std::to_string(j) + ".ckpt"), mh);
    say("ablate: seed " + std::to_string(j) + " trained");
    seeds_models.push_back(std::move(p));
  }

  std::vector<int64_t> inits = parse_inits(a.inits, data, a.lead);
  ModelParams single = load_checkpoint(dir / "single.ckpt");

  struct Arm {
    std::string name;
    std::vector<const ModelParams*> models;
  };
  std::vector<Arm> arms;
  arms.push_back({"single", {&single}});
  arms.push_back({"ar", {&seeds_models[0]}});
  Arm ens{"ens", {}};
  for (const ModelParams& m : seeds_models) ens.models.push_back(&m);
  arms.push_back(std::move(ens));

  VerifyConfig vcfg;
  vcfg.rev_levels.clear();
  std::map<std::string, MetricsReport> reports;
  for (const Arm& arm : arms) {
    fs::path fdir = dir / ("fc_" + arm.name);
    fs::create_directories(fdir);
    std::vector<EnsembleForecast> fcs;
    for (int64_t idx : inits) {
      TrajectoryWindow w{data.frame(idx), data.frame(idx + 1)};
      std::vector<ModelParams> models;
      for (const ModelParams* m : arm.models) models.push_back(*m);
      EnsembleForecast f =
          generate_ensemble(models, w, a.members, a.lead, a.master_seed, idx);
      save_forecast(f, fdir / ("init" + std::to_string(idx) + ".fcs"), mh);
      fcs.push_back(std::move(f));
    }
    EvalRun run = make_eval_run(std::move(fcs), data, std::nullopt, vcfg);
    MetricsReport rep = evaluate(run);
    rep.info["arm"] = arm.name;
    rep.info["manifest"] = mh;
    rep.save(dir / ("report_" + arm.name + ".json"));
    say("ablate: arm " + arm.name + " crps lead" + std::to_string(a.lead) + " = " +
        num17(rep.metrics.at("crps").value.back()));
    reports.emplace(arm.name, std::move(rep));
  }

  json cmp{{"ens_vs_ar", compare_reports(reports.at("ens"), reports.at("ar"), {"crps"},
                                         a.n_boot, a.confidence, a.master_seed)},
           {"ar_vs_single", compare_reports(reports.at("ar"), reports.at("single"), {"crps"},
                                            a.n_boot, a.confidence, a.master_seed)}};
  write_file_bytes(dir / "comparison.json", cmp.dump(1) + "\n");
  man.add_output("comparison", dir / "comparison.json");
  man.wall_time_s = timer.seconds();
  man.save(dir / "manifest.json");
  say("ablate: comparison written to " + (dir / "comparison.json").string());
  say("manifest " + mh);
  return 0;
}

// ---- entry point ----

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"probabilistic forecast emulator for a stochastic ring system"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  std::vector<std::string> raw;
  for (int i = 0; i < argc; ++i) raw.push_back(argv[i]);

  GenDataArgs gen;
  gen.raw_argv = raw;
  auto* sgen = app.add_subcommand("gen-data", "simulate a trajectory dataset + climatology");
  sgen->add_option("--out", gen.out, "dataset output path")->required();
  sgen->add_option("--config", gen.config_path, "JSON config file");
  sgen->add_option("--set", gen.sets, "config override key=value (dotted keys)");

  TrainArgs tr;
  tr.raw_argv = raw;
  auto* str = app.add_subcommand("train", "train emulator seed(s) on a dataset");
  str->add_option("--dataset", tr.dataset)->required();
  str->add_option("--out-dir", tr.out_dir)->required();
  str->add_option("--config", tr.config_path, "JSON config file with model/train sections");
  str->add_option("--schedule", tr.schedule, "desk-full or desk-single");
  str->add_option("--seeds", tr.seeds, "number of independent training seeds");
  auto* seed_opt = str->add_option("--seed", tr.master_seed, "master seed");
  str->add_option("--steps-scale", tr.steps_scale, "scale all stage step counts");
  str->add_option("--processor", tr.processor, "attention or message-passing");
  str->add_option("--noise-mode", tr.noise_mode, "global or per-site");
  str->add_flag("--resume", tr.resume, "resume from saved state files");
  str->add_option("--halt-after", tr.halt_after, "stop after N optimizer steps (per seed)");
  str->add_option("--state-every", tr.state_every, "save resumable state every N steps");
  str->add_option("--set", tr.sets, "config override key=value");

  ForecastArgs fc;
  fc.raw_argv = raw;
  auto* sfc = app.add_subcommand("forecast", "generate ensemble forecasts");
  sfc->add_option("--checkpoints", fc.checkpoints, "checkpoint files (one per seed)")
      ->required()
      ->delimiter(',');
  sfc->add_option("--dataset", fc.dataset)->required();
  sfc->add_option("--inits", fc.inits, "comma list of start frames, or test:N");
  sfc->add_option("--members", fc.members);
  sfc->add_option("--lead", fc.lead, "lead steps");
  sfc->add_option("--seed", fc.master_seed, "forecast master seed");
  sfc->add_option("--out-dir", fc.out_dir)->required();

  VerifyArgs vf;
  vf.raw_argv = raw;
  auto* svf = app.add_subcommand("verify", "score forecasts against truth");
  svf->add_option("--forecasts", vf.forecasts, "forecast dir or comma list")->required();
  svf->add_option("--dataset", vf.dataset)->required();
  svf->add_option("--climatology", vf.climatology, "climatology JSON (enables REV)");
  svf->add_option("--config", vf.config_path, "verification config JSON");
  svf->add_flag("--fair", vf.fair, "use the fair CRPS estimator");
  svf->add_flag("--no-spectra", vf.no_spectra);
  svf->add_option("--out", vf.out, "report output path");
  svf->add_option("--csv-dir", vf.csv_dir, "also write per-metric CSVs here");
  svf->add_option("--baseline", vf.baseline, "baseline report for paired comparison");
  svf->add_option("--compare-metrics", vf.compare_metrics)->delimiter(',');
  svf->add_option("--boot", vf.n_boot, "bootstrap resamples");
  svf->add_option("--confidence", vf.confidence);
  svf->add_option("--seed", vf.seed, "bootstrap seed");
  svf->add_option("--set", vf.sets, "config override key=value");

  AblateArgs ab;
  ab.raw_argv = raw;
  auto* sab = app.add_subcommand("ablate", "three-arm seed/rollout ablation");
  sab->add_option("--dataset", ab.dataset)->required();
  sab->add_option("--out-dir", ab.out_dir)->required();
  sab->add_option("--seed", ab.master_seed);
  sab->add_option("--steps-scale", ab.steps_scale);
  sab->add_option("--members", ab.members);
  sab->add_option("--lead", ab.lead);
  sab->add_option("--inits", ab.inits);
  sab->add_option("--seeds", ab.seeds);
  sab->add_option("--boot", ab.n_boot);
  sab->add_option("--confidence", ab.confidence);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    tr.master_seed_given = seed_opt->count() > 0;
    if (sgen->parsed()) return cmd_gen_data(gen);
    if (str->parsed()) return cmd_train(tr);
    if (sfc->parsed()) return cmd_forecast(fc);
    if (svf->parsed()) return cmd_verify(vf);
    if (sab->parsed()) return cmd_ablate(ab);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ContractViolation& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericalFailure& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const DataCorruption& e) {
    std::fprintf(stderr, "corrupt data: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 2;
}

}  // namespace fgn::cli
