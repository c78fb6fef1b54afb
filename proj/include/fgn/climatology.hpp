#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fgn/common.hpp"
#include "fgn/io.hpp"
#include "fgn/lorenz96.hpp"

namespace fgn {

// Type-7 (linear interpolation) quantile of a sorted sample.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw ContractViolation("quantile: empty sample");
  if (!(p >= 0.0) || !(p <= 1.0)) throw ContractViolation("quantile: p outside [0,1]");
  double h = p * static_cast<double>(sorted.size() - 1);
  size_t lo = static_cast<size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  double w = h - static_cast<double>(lo);
  return sorted[lo] + w * (sorted[lo + 1] - sorted[lo]);
}

inline double quantile(std::vector<double> xs, double p) {
  std::sort(xs.begin(), xs.end());
  return quantile_sorted(xs, p);
}

// Per-site climatological quantiles from a long independent trajectory of
// the same system.  Independence from any dataset of the same seed comes
// from dedicated RNG stream names ("clim-init"/"clim-noise").
struct Climatology {
  SystemConfig system;
  int64_t source_frames = 0;
  std::vector<double> levels;
  Tensor site_quantiles;  // [levels, sites]

  double threshold(size_t level_idx, int64_t site) const {
    return site_quantiles.at(static_cast<int64_t>(level_idx), site);
  }

  int64_t level_index(double level) const {
    for (size_t i = 0; i < levels.size(); ++i)
      if (std::fabs(levels[i] - level) < 1e-12) return static_cast<int64_t>(i);
    throw ConfigError("climatology: level " + std::to_string(level) + " not present");
  }

  void validate() const {
    system.validate();
    if (levels.empty()) throw ConfigError("climatology: no levels");
    for (double l : levels)
      if (!(l > 0.0) || !(l < 1.0)) throw ConfigError("climatology: level outside (0,1)");
    if (site_quantiles.rank() != 2 ||
        site_quantiles.rows() != static_cast<int64_t>(levels.size()) ||
        site_quantiles.cols() != system.sites)
      throw DataCorruption("climatology: quantile table shape mismatch");
  }
};

inline std::vector<double> default_clim_levels() {
  return {0.001, 0.01, 0.1, 0.9, 0.99, 0.999};
}

inline Climatology build_climatology(const SystemConfig& system, int64_t n_frames,
                                     std::vector<double> levels = default_clim_levels(),
                                     int64_t burn_in_frames = 500) {
  system.validate();
  if (n_frames < 100) throw ConfigError("climatology: need at least 100 frames");
  RngStream init = RngStream::root(system.seed, "clim-init");
  RngStream noise = RngStream::root(system.seed, "clim-noise");
  Tensor x0 = lorenz96_initial(system, init);
  Tensor spin = lorenz96_integrate(system, x0, burn_in_frames + 1, noise);
  Tensor start = Tensor::zeros({system.sites});
  for (int64_t k = 0; k < system.sites; ++k) start.at(k) = spin.at(burn_in_frames, k);
  Tensor frames = lorenz96_integrate(system, start, n_frames, noise);
  Climatology c;
  c.system = system;
  c.source_frames = n_frames;
  c.levels = std::move(levels);
  c.site_quantiles = Tensor::zeros({static_cast<int64_t>(c.levels.size()), system.sites});
  std::vector<double> col(static_cast<size_t>(n_frames));
  for (int64_t k = 0; k < system.sites; ++k) {
    for (int64_t t = 0; t < n_frames; ++t) col[static_cast<size_t>(t)] = frames.at(t, k);
    std::sort(col.begin(), col.end());
    for (size_t li = 0; li < c.levels.size(); ++li)
      c.site_quantiles.at(static_cast<int64_t>(li), k) = quantile_sorted(col, c.levels[li]);
  }
  c.validate();
  return c;
}

inline void save_climatology(const Climatology& c, const std::filesystem::path& path,
                             const std::string& manifest_hash = "") {
  c.validate();
  json quant = json::array();
  for (size_t li = 0; li < c.levels.size(); ++li) {
    json row = json::array();
    for (int64_t k = 0; k < c.system.sites; ++k)
      row.push_back(c.site_quantiles.at(static_cast<int64_t>(li), k));
    quant.push_back(std::move(row));
  }
  json j{{"format", "fgn-climatology-v1"}, {"system", c.system.to_json()},
         {"frames", c.source_frames},     {"levels", c.levels},
         {"quantiles", std::move(quant)}, {"manifest", manifest_hash}};
  write_file_bytes(path, j.dump(2) + "\n");
}

inline Climatology load_climatology(const std::filesystem::path& path) {
  json j = json::parse(read_file_bytes(path), nullptr, false);
  if (j.is_discarded()) throw DataCorruption("climatology: unparseable JSON in " + path.string());
  try {
    if (j.at("format").get<std::string>() != "fgn-climatology-v1")
      throw DataCorruption("climatology: unknown format in " + path.string());
    Climatology c;
    c.system = SystemConfig::from_json(j.at("system"));
    c.source_frames = j.at("frames").get<int64_t>();
    c.levels = j.at("levels").get<std::vector<double>>();
    auto quant = j.at("quantiles");
    c.site_quantiles =
        Tensor::zeros({static_cast<int64_t>(c.levels.size()), c.system.sites});
    for (size_t li = 0; li < c.levels.size(); ++li)
      for (int64_t k = 0; k < c.system.sites; ++k)
        c.site_quantiles.at(static_cast<int64_t>(li), k) = quant.at(li).at(static_cast<size_t>(k)).get<double>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw DataCorruption("climatology header missing fields in " + path.string() + ": " +
                         e.what());
  }
}

}  // namespace fgn
