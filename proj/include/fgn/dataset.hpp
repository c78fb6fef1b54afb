#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fgn/common.hpp"
#include "fgn/io.hpp"
#include "fgn/lorenz96.hpp"

namespace fgn {

inline constexpr std::string_view kDatasetMagic = "FGNDAT1\n";

// A simulated trajectory with contiguous train / valid / test splits and the
// normalization moments computed from the train split only.
struct Dataset {
  SystemConfig system;
  Tensor frames;  // [T, sites]
  int64_t n_train = 0, n_valid = 0, n_test = 0;
  NormStats stats;
  std::string manifest_hash;

  int64_t n_frames() const { return frames.rows(); }
  int64_t sites() const { return frames.cols(); }
  double time_of(int64_t frame) const { return static_cast<double>(frame) * system.dt_frame; }

  int64_t train_begin() const { return 0; }
  int64_t valid_begin() const { return n_train; }
  int64_t test_begin() const { return n_train + n_valid; }

  Tensor frame(int64_t t) const {
    Tensor f = Tensor::zeros({sites()});
    for (int64_t k = 0; k < sites(); ++k) f.at(k) = frames.at(t, k);
    return f;
  }

  void validate() const {
    system.validate();
    if (frames.rank() != 2 || frames.cols() != system.sites)
      throw DataCorruption("dataset: frame tensor shape " + frames.shape_str() +
                           " inconsistent with system");
    if (n_train + n_valid + n_test != n_frames())
      throw DataCorruption("dataset: splits do not cover the trajectory");
    if (n_train < 3) throw ConfigError("dataset: train split too small to form input pairs");
    if (n_valid < 0 || n_test < 0) throw ConfigError("dataset: negative split");
    if (!(stats.std > 0.0) || !(stats.residual_std > 0.0))
      throw DataCorruption("dataset: degenerate normalization stats");
  }
};

// Pooled over train frames and sites; population (1/N) convention.
inline NormStats compute_norm_stats(const Tensor& frames, int64_t n_train) {
  if (n_train < 3) throw ConfigError("norm stats: need at least 3 train frames");
  int64_t K = frames.cols();
  double mean = 0.0;
  for (int64_t t = 0; t < n_train; ++t)
    for (int64_t k = 0; k < K; ++k) mean += frames.at(t, k);
  mean /= static_cast<double>(n_train * K);
  double var = 0.0;
  for (int64_t t = 0; t < n_train; ++t)
    for (int64_t k = 0; k < K; ++k) {
      double d = frames.at(t, k) - mean;
      var += d * d;
    }
  var /= static_cast<double>(n_train * K);
  double rvar = 0.0;
  for (int64_t t = 0; t + 1 < n_train; ++t)
    for (int64_t k = 0; k < K; ++k) {
      double d = frames.at(t + 1, k) - frames.at(t, k);
      rvar += d * d;
    }
  rvar /= static_cast<double>((n_train - 1) * K);
  NormStats s;
  s.mean = mean;
  s.std = std::sqrt(var);
  s.residual_std = std::sqrt(rvar);
  if (!(s.std > 0.0) || !(s.residual_std > 0.0))
    throw NumericalFailure("norm stats: degenerate trajectory (zero variance)");
  return s;
}

// Split sizes: train and valid rounded from fractions, test takes the rest.
inline std::array<int64_t, 3> split_counts(int64_t total, std::array<double, 3> fractions) {
  double fsum = fractions[0] + fractions[1] + fractions[2];
  if (!(fsum > 0.999) || !(fsum < 1.001))
    throw ConfigError("dataset: split fractions must sum to 1");
  int64_t a = std::llround(fractions[0] * static_cast<double>(total));
  int64_t b = std::llround(fractions[1] * static_cast<double>(total));
  int64_t c = total - a - b;
  if (a < 3 || b < 0 || c < 0) throw ConfigError("dataset: split too small");
  return {a, b, c};
}

inline Dataset make_dataset(const SystemConfig& system, int64_t n_frames,
                            std::array<double, 3> fractions = {0.8, 0.1, 0.1},
                            int64_t burn_in_frames = 500) {
  system.validate();
  if (n_frames < 10) throw ConfigError("dataset: need at least 10 frames");
  if (burn_in_frames < 0) throw ConfigError("dataset: negative burn-in");
  RngStream init = RngStream::root(system.seed, "init");
  RngStream noise = RngStream::root(system.seed, "noise");
  Tensor x0 = lorenz96_initial(system, init);
  Tensor spin = lorenz96_integrate(system, x0, burn_in_frames + 1, noise);
  Tensor start = Tensor::zeros({system.sites});
  for (int64_t k = 0; k < system.sites; ++k) start.at(k) = spin.at(burn_in_frames, k);
  Dataset d;
  d.system = system;
  d.frames = lorenz96_integrate(system, start, n_frames, noise);
  auto [a, b, c] = split_counts(n_frames, fractions);
  d.n_train = a;
  d.n_valid = b;
  d.n_test = c;
  d.stats = compute_norm_stats(d.frames, d.n_train);
  d.validate();
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  d.validate();
  json header{{"format", "fgn-dataset-v1"},
              {"system", d.system.to_json()},
              {"frames", d.n_frames()},
              {"sites", d.sites()},
              {"splits", {{"train", d.n_train}, {"valid", d.n_valid}, {"test", d.n_test}}},
              {"stats",
               {{"mean", d.stats.mean},
                {"std", d.stats.std},
                {"residual_std", d.stats.residual_std}}},
              {"manifest", d.manifest_hash}};
  std::string payload;
  payload.reserve(static_cast<size_t>(d.frames.numel()) * 8);
  wire::put_tensor(payload, d.frames);
  write_framed(path, kDatasetMagic, header, payload);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  FramedFile f = read_framed(path, kDatasetMagic);
  try {
    Dataset d;
    d.system = SystemConfig::from_json(f.header.at("system"));
    int64_t T = f.header.at("frames").get<int64_t>();
    int64_t K = f.header.at("sites").get<int64_t>();
    d.n_train = f.header.at("splits").at("train").get<int64_t>();
    d.n_valid = f.header.at("splits").at("valid").get<int64_t>();
    d.n_test = f.header.at("splits").at("test").get<int64_t>();
    d.stats.mean = f.header.at("stats").at("mean").get<double>();
    d.stats.std = f.header.at("stats").at("std").get<double>();
    d.stats.residual_std = f.header.at("stats").at("residual_std").get<double>();
    d.manifest_hash = f.header.value("manifest", "");
    d.frames = tensor_from_payload(f.payload, 0, {T, K});
    d.validate();
    return d;
  } catch (const json::exception& e) {
    throw DataCorruption("dataset header missing fields in " + path.string() + ": " + e.what());
  }
}

}  // namespace fgn
