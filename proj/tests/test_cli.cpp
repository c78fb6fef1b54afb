#include <catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#include "fgn/fgn.hpp"

using namespace fgn;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run(const std::string& args, const std::string& env = "") {
  std::string cmd = env.empty() ? "" : env + " ";
  cmd += std::string(FGN_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  RunResult r;
  std::array<char, 4096> buf;
  size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.output.append(buf.data(), n);
  int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path work() {
  fs::path p = fs::path(FGN_TEST_TMP) / "cli";
  fs::create_directories(p);
  return p;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

const std::string kTinyModel =
    " --set model.d_latent=8 --set model.n_layers=1 --set model.d_noise=3"
    " --set model.d_cond=4 --set model.window=1 --set model.heads=2"
    " --set train.batch_size=4";

// dataset shared by the pipeline tests; generated once
fs::path dataset_path() {
  static fs::path ds = [] {
    fs::path p = work() / "ds.bin";
    RunResult r = run("gen-data --out " + q(p) +
                      " --set system.sites=8 --set system.seed=3 --set frames=420"
                      " --set burn_in=40 --set clim_frames=160");
    REQUIRE(r.code == 0);
    return p;
  }();
  return ds;
}

fs::path trained_dir() {
  static fs::path dir = [] {
    fs::path d = work() / "run";
    RunResult r = run("train --dataset " + q(dataset_path()) + " --out-dir " + q(d) +
                      " --schedule desk-single --steps-scale 0.002 --seed 5" + kTinyModel);
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

fs::path forecast_dir() {
  static fs::path dir = [] {
    fs::path d = work() / "fc";
    RunResult r = run("forecast --checkpoints " + q(trained_dir() / "seed0.ckpt") +
                      " --dataset " + q(dataset_path()) +
                      " --inits test:3 --members 4 --lead 6 --seed 9 --out-dir " + q(d));
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("version and parse failures") {
  REQUIRE(run("--version").output.find(kVersion) != std::string::npos);
  REQUIRE(run("--version").code == 0);
  REQUIRE(run("--help").code == 0);
  REQUIRE(run("").code == 2);                      // a subcommand is required
  REQUIRE(run("frobnicate").code == 2);            // unknown subcommand
  REQUIRE(run("gen-data").code == 2);              // missing required --out
  REQUIRE(run("gen-data --out x --bogus").code == 2);
  REQUIRE(run("train --dataset nope.bin --out-dir " + q(work() / "x")).code == 2);
}

TEST_CASE("gen-data writes dataset, climatology and manifest") {
  fs::path ds = dataset_path();
  REQUIRE(fs::exists(ds));
  fs::path clim_path = ds;
  clim_path += ".clim.json";
  fs::path man_path = ds;
  man_path += ".manifest.json";
  REQUIRE(fs::exists(clim_path));
  REQUIRE(fs::exists(man_path));

  Dataset data = load_dataset(ds);
  REQUIRE(data.sites() == 8);
  REQUIRE(data.n_frames() == 420);
  Climatology clim = load_climatology(clim_path);
  REQUIRE(clim.system.sites == 8);

  json man = json::parse(read_file_bytes(man_path));
  REQUIRE(man.at("command") == "gen-data");
  REQUIRE(man.at("manifest_hash").get<std::string>().size() == 16);
  bool has_ds = false;
  for (const auto& o : man.at("outputs"))
    if (o.at("name") == "dataset") has_ds = true;
  REQUIRE(has_ds);

  // rerunning the identical command reproduces the artifact byte for byte
  std::string before = read_file_bytes(ds);
  RunResult again = run("gen-data --out " + q(ds) +
                        " --set system.sites=8 --set system.seed=3 --set frames=420"
                        " --set burn_in=40 --set clim_frames=160");
  REQUIRE(again.code == 0);
  REQUIRE(read_file_bytes(ds) == before);
  REQUIRE(read_file_bytes(clim_path) == read_file_bytes(clim_path));
}

TEST_CASE("training produces a checkpoint and a parseable log") {
  fs::path dir = trained_dir();
  REQUIRE(fs::exists(dir / "seed0.ckpt"));
  REQUIRE(fs::exists(dir / "manifest.json"));

  ModelParams p = load_checkpoint(dir / "seed0.ckpt");
  REQUIRE(p.config.sites == 8);
  REQUIRE(p.config.d_latent == 8);
  REQUIRE(p.seed_id == 0);
  Dataset data = load_dataset(dataset_path());
  REQUIRE(p.stats.hash() == data.stats.hash());

  std::string log = read_file_bytes(dir / "seed0.log.jsonl");
  int64_t lines = 0;
  size_t pos = 0;
  double last_loss = 0.0;
  while (pos < log.size()) {
    size_t nl = log.find('\n', pos);
    if (nl == std::string::npos) break;
    json rec = json::parse(log.substr(pos, nl - pos));
    REQUIRE(std::isfinite(rec.at("loss").get<double>()));
    REQUIRE(rec.at("loss").get<double>() > 0.0);
    last_loss = rec.at("loss").get<double>();
    ++lines;
    pos = nl + 1;
  }
  REQUIRE(lines == 40);  // 20000 desk-single steps scaled by 0.002
  REQUIRE(last_loss > 0.0);
}

TEST_CASE("halted training resumes to the same checkpoint as a straight run") {
  fs::path dir = work() / "run_resume";
  fs::remove_all(dir);  // the halt-phase assertions need a fresh directory
  std::string common = "train --dataset " + q(dataset_path()) + " --out-dir " + q(dir) +
                       " --schedule desk-single --steps-scale 0.002 --seed 5" + kTinyModel;
  RunResult halted = run(common + " --halt-after 17 --state-every 7");
  REQUIRE(halted.code == 0);
  REQUIRE(!fs::exists(dir / "seed0.ckpt"));
  REQUIRE(fs::exists(dir / "seed0.state"));
  RunResult resumed = run(common + " --resume");
  REQUIRE(resumed.code == 0);
  REQUIRE(resumed.output.find("resumed") != std::string::npos);

  ModelParams a = load_checkpoint(dir / "seed0.ckpt");
  ModelParams b = load_checkpoint(trained_dir() / "seed0.ckpt");
  REQUIRE(a.values.size() == b.values.size());
  for (size_t i = 0; i < a.values.size(); ++i) REQUIRE(a.values[i].data == b.values[i].data);
}

TEST_CASE("diverging training exits with the numerical failure code") {
  fs::path dir = work() / "run_boom";
  RunResult r = run(
      "train --dataset " + q(dataset_path()) + " --out-dir " + q(dir) + " --seed 5" + kTinyModel +
      " --set 'train.stages=[{\"rollout\":1,\"steps\":8,\"peak_lr\":1e200,\"warmup\":1}]'");
  REQUIRE(r.code == 3);
  REQUIRE(fs::exists(dir / "seed0.diverged.state"));
}

TEST_CASE("forecast emits one framed file per init plus a manifest") {
  fs::path dir = forecast_dir();
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".fcs") files.push_back(e.path());
  REQUIRE(files.size() == 3);
  REQUIRE(fs::exists(dir / "manifest.json"));

  EnsembleForecast f = load_forecast(files.front());
  REQUIRE(f.members == 4);
  REQUIRE(f.lead_steps == 6);
  REQUIRE(f.sites == 8);
  REQUIRE(f.master_seed == 9);

  // identical command, fresh directory: identical member trajectories
  fs::path dir2 = work() / "fc_again";
  RunResult r = run("forecast --checkpoints " + q(trained_dir() / "seed0.ckpt") + " --dataset " +
                    q(dataset_path()) + " --inits test:3 --members 4 --lead 6 --seed 9 --out-dir " +
                    q(dir2));
  REQUIRE(r.code == 0);
  EnsembleForecast g = load_forecast(dir2 / files.front().filename());
  REQUIRE(g.values.data == f.values.data);

  // stats guard: a dataset with different normalization is rejected
  fs::path other = work() / "ds_other.bin";
  REQUIRE(run("gen-data --out " + q(other) +
              " --set system.sites=8 --set system.seed=4 --set frames=420"
              " --set burn_in=40 --set clim_frames=160")
              .code == 0);
  REQUIRE(run("forecast --checkpoints " + q(trained_dir() / "seed0.ckpt") + " --dataset " +
              q(other) + " --inits test:2 --members 2 --lead 4 --out-dir " +
              q(work() / "fc_bad"))
              .code == 2);

  // members must divide evenly across checkpoints: 2 seeds for 5 members
  REQUIRE(run("forecast --checkpoints " + q(trained_dir() / "seed0.ckpt") + "," +
              q(trained_dir() / "seed0.ckpt") + " --dataset " + q(dataset_path()) +
              " --inits test:2 --members 5 --lead 4 --out-dir " + q(work() / "fc_bad2"))
              .code == 2);
}

TEST_CASE("verify scores a forecast directory into a report") {
  fs::path rep_path = work() / "rep.json";
  fs::path csv_dir = work() / "csv";
  RunResult r = run("verify --forecasts " + q(forecast_dir()) + " --dataset " +
                    q(dataset_path()) + " --out " + q(rep_path) + " --csv-dir " + q(csv_dir) +
                    " --set 'pool_widths=[1,2,4]' --boot 200");
  REQUIRE(r.code == 0);
  REQUIRE(r.output.find("verify: 3 inits") != std::string::npos);

  MetricsReport rep = MetricsReport::load(rep_path);
  REQUIRE(rep.init_indices.size() == 3);
  REQUIRE(rep.metrics.at("crps").value.size() == 6);
  for (double v : rep.metrics.at("crps").value) REQUIRE(v > 0.0);
  REQUIRE(rep.metrics.count("crps_avg_w4") == 1);
  REQUIRE(rep.metrics.count("spread_skill") == 1);
  REQUIRE(rep.metrics.count("rev_l0.9_r0.5") == 0);  // no climatology given
  REQUIRE(fs::exists(csv_dir / "crps.csv"));
  REQUIRE(fs::exists(rep_path.string() + ".manifest.json"));

  // self-comparison against the saved report: differences are all zero
  fs::path rep2 = work() / "rep2.json";
  RunResult cmp = run("verify --forecasts " + q(forecast_dir()) + " --dataset " +
                      q(dataset_path()) + " --out " + q(rep2) + " --baseline " + q(rep_path) +
                      " --set 'pool_widths=[1,2,4]' --boot 100");
  REQUIRE(cmp.code == 0);
  json rj = json::parse(read_file_bytes(rep2));
  REQUIRE(rj.contains("comparison"));
  for (const auto& lead : rj.at("comparison").at("crps")) {
    REQUIRE(lead.at("mean_diff").get<double>() == 0.0);
    REQUIRE(!lead.at("significant").get<bool>());
  }
}

TEST_CASE("threshold metrics require the climatology") {
  fs::path clim_path = dataset_path();
  clim_path += ".clim.json";
  RunResult no_clim = run("verify --forecasts " + q(forecast_dir()) + " --dataset " +
                          q(dataset_path()) + " --out " + q(work() / "r_no.json") +
                          " --set 'pool_widths=[1,2]' --set 'rev_levels=[0.9]'");
  REQUIRE(no_clim.code == 2);

  RunResult with_clim = run("verify --forecasts " + q(forecast_dir()) + " --dataset " +
                            q(dataset_path()) + " --climatology " + q(clim_path) + " --out " +
                            q(work() / "r_rev.json") +
                            " --set 'pool_widths=[1,2]' --set 'rev_levels=[0.9]'"
                            " --set 'cost_loss_ratios=[0.1,0.5]'");
  REQUIRE(with_clim.code == 0);
  MetricsReport rep = MetricsReport::load(work() / "r_rev.json");
  REQUIRE(rep.metrics.count("rev_l0.9_r0.1") == 1);
  REQUIRE(rep.metrics.count("rev_l0.9_r0.5") == 1);
  for (double v : rep.metrics.at("rev_l0.9_r0.1").value) {
    REQUIRE(v <= 1.0);
    REQUIRE(v >= -1.0);
  }
}

TEST_CASE("corrupt inputs exit with the data corruption code") {
  fs::path bad = work() / "ds_bad.bin";
  std::string bytes = read_file_bytes(dataset_path());
  bytes[bytes.size() / 2] ^= 0x40;
  write_file_bytes(bad, bytes);
  REQUIRE(run("train --dataset " + q(bad) + " --out-dir " + q(work() / "run_bad")).code == 4);
  REQUIRE(run("verify --forecasts " + q(forecast_dir()) + " --dataset " + q(bad) + " --out " +
              q(work() / "r_bad.json") + " --set 'pool_widths=[1]'")
              .code == 4);
}

TEST_CASE("relative outputs land under the output root") {
  fs::path root = work() / "rootenv";
  fs::create_directories(root);
  RunResult r = run("gen-data --out rel_ds.bin"
                    " --set system.sites=8 --set system.seed=6 --set frames=260"
                    " --set burn_in=30 --set clim_frames=120",
                    "FGN_OUTPUT_ROOT=" + q(root));
  REQUIRE(r.code == 0);
  REQUIRE(fs::exists(root / "rel_ds.bin"));
  REQUIRE(fs::exists(root / "rel_ds.bin.manifest.json"));
}
