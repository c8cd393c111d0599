#pragma once

// Synthetic training data: population draws of (OEF, DBV), noisy signals,
// and small phantom volumes.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "qbvi/binary_io.hpp"
#include "qbvi/distributions.hpp"
#include "qbvi/parallel.hpp"
#include "qbvi/physics.hpp"
#include "qbvi/random.hpp"
#include "qbvi/volume.hpp"

namespace qbvi {

enum class PriorKind { truncated_normal, uniform };

// One parameter's population law. Truncated normals use [low, high] as the
// truncation interval.
struct ParamPriorConfig {
  PriorKind kind = PriorKind::truncated_normal;
  double mean = 0.0;
  double std = 1.0;
  double low = 0.0;
  double high = 1.0;

  static ParamPriorConfig truncated(double mean, double std, double low, double high) {
    return {PriorKind::truncated_normal, mean, std, low, high};
  }
  static ParamPriorConfig uniform(double low, double high) {
    return {PriorKind::uniform, 0.5 * (low + high), 0.0, low, high};
  }
};

struct PopulationPrior {
  ParamPriorConfig oef;
  ParamPriorConfig dbv;

  // Truncation intervals are the logit-Normal support.
  static PopulationPrior normal() {
    return {ParamPriorConfig::truncated(0.40, 0.20, 0.05, 0.85),
            ParamPriorConfig::truncated(0.025, 0.02, 0.001, 0.301)};
  }
  static PopulationPrior wide() {
    return {ParamPriorConfig::truncated(0.40, 0.30, 0.05, 0.85),
            ParamPriorConfig::truncated(0.025, 0.03, 0.001, 0.301)};
  }
  static PopulationPrior narrow() {
    return {ParamPriorConfig::truncated(0.40, 0.10, 0.05, 0.85),
            ParamPriorConfig::truncated(0.025, 0.01, 0.001, 0.301)};
  }
  static PopulationPrior uniform() {
    return {ParamPriorConfig::uniform(0.05, 0.80), ParamPriorConfig::uniform(0.003, 0.25)};
  }
  static PopulationPrior named(const std::string& name) {
    if (name == "normal") return normal();
    if (name == "wide") return wide();
    if (name == "narrow") return narrow();
    if (name == "uniform") return uniform();
    throw Error("synthgen.prior", "unknown population prior '" + name + "'");
  }

  void validate(const LogitScaling& sc = {}) const {
    const ParamPriorConfig* cfgs[2] = {&oef, &dbv};
    const char* names[2] = {"oef", "dbv"};
    for (int i = 0; i < 2; ++i) {
      const ParamPriorConfig& c = *cfgs[i];
      require(c.low <= c.high, "synthgen.range", std::string(names[i]) + " range has low > high");
      require(c.low >= sc.low(i) && c.high <= sc.high(i), "synthgen.range",
              std::string(names[i]) + " range [" + std::to_string(c.low) + ", " +
                  std::to_string(c.high) + "] escapes the support [" + std::to_string(sc.low(i)) +
                  ", " + std::to_string(sc.high(i)) + "]");
      if (c.kind == PriorKind::truncated_normal) {
        require(c.std > 0.0, "synthgen.range", std::string(names[i]) + " std must be positive");
        require(c.low < c.high, "synthgen.range",
                std::string(names[i]) + " truncation interval is empty");
      }
    }
  }
};

namespace detail {

inline double draw_param(const ParamPriorConfig& c, Rng& rng) {
  if (c.kind == PriorKind::uniform) return c.low == c.high ? c.low : rng.uniform(c.low, c.high);
  return truncated_normal_sample(c.mean, c.std, c.low, c.high, rng, 1)[0];
}

// Keep draws strictly inside the open support so logits stay finite.
inline double nudge_inside(double v, double lo, double hi) {
  const double eps = 1e-9 * (hi - lo);
  return std::clamp(v, lo + eps, hi - eps);
}

inline TissueParams draw_tissue(const PopulationPrior& prior, Rng& rng, const LogitScaling& sc) {
  const double oef = draw_param(prior.oef, rng);
  const double dbv = draw_param(prior.dbv, rng);
  return {nudge_inside(oef, sc.low(0), sc.high(0)), nudge_inside(dbv, sc.low(1), sc.high(1))};
}

}  // namespace detail

inline std::vector<TissueParams> sample_population(const PopulationPrior& prior, Rng& rng,
                                                   std::size_t n, const LogitScaling& sc = {}) {
  prior.validate(sc);
  std::vector<TissueParams> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(detail::draw_tissue(prior, rng, sc));
  return out;
}

struct NoiseProfile {
  std::vector<double> rel_sigma;
  double snr_low = 50.0;
  double snr_high = 120.0;

  static NoiseProfile flat(std::size_t n_t, double snr_low = 50.0, double snr_high = 120.0) {
    return {std::vector<double>(n_t, 1.0), snr_low, snr_high};
  }

  void validate(const AcquisitionProtocol& proto) const {
    require(rel_sigma.size() == proto.size(), "noise.shape",
            "noise profile length does not match the protocol");
    for (double r : rel_sigma) require(r >= 0.0, "noise.profile", "rel_sigma must be non-negative");
    require(rel_sigma[proto.se_index] == 1.0, "noise.profile",
            "rel_sigma must equal 1 at the spin-echo index");
    require(snr_low > 0.0 && snr_low <= snr_high, "noise.snr",
            "SNR bounds must satisfy 0 < snr_low <= snr_high");
  }
};

// out[i] = clean[i] + N(0, (clean[se]/snr * rel_sigma[i])^2). An infinite SNR
// returns the clean signal.
inline SignalVector add_noise(std::span<const double> clean, double snr, const NoiseProfile& prof,
                              std::size_t se_index, Rng& rng) {
  require(snr > 0.0, "noise.snr", "snr must be positive");
  require(clean.size() == prof.rel_sigma.size(), "noise.shape", "signal/profile length mismatch");
  const double sigma = clean[se_index] / snr;
  SignalVector out(clean.begin(), clean.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double z = rng.normal();
    out[i] += sigma * prof.rel_sigma[i] * z;
  }
  return out;
}

struct SynthDataset {
  std::size_t nt = 0;
  std::vector<double> signals;  // row-major n x nt, normalized
  std::vector<TissueParams> truths;
  std::vector<double> snrs;
  std::size_t rejected = 0;

  std::size_t size() const { return truths.size(); }
  std::span<const double> row(std::size_t i) const { return {signals.data() + i * nt, nt}; }
};

// Row i is drawn from its own stream (seed, i), so the result does not depend
// on the thread count. Rows whose noisy signal has a non-positive sample are
// redrawn from the same stream.
inline SynthDataset generate_dataset(std::size_t n, const PopulationPrior& prior,
                                     const ForwardModel& model, const NoiseProfile& prof,
                                     std::uint64_t seed, unsigned threads = 1,
                                     const LogitScaling& sc = {}) {
  prior.validate(sc);
  const AcquisitionProtocol& proto = model.protocol();
  prof.validate(proto);
  SynthDataset ds;
  ds.nt = proto.size();
  ds.signals.resize(n * ds.nt);
  ds.truths.resize(n);
  ds.snrs.resize(n);
  std::vector<std::size_t> rejects(n, 0);
  constexpr std::size_t kMaxAttempts = 1000;
  parallel_for(n, threads, [&](std::size_t i) {
    Rng rng(seed, i);
    for (std::size_t attempt = 0;; ++attempt) {
      require(attempt < kMaxAttempts, "synthgen.rejection",
              "row " + std::to_string(i) + " could not be drawn with positive samples");
      const TissueParams p = detail::draw_tissue(prior, rng, sc);
      const double snr =
          prof.snr_low == prof.snr_high ? prof.snr_low : rng.uniform(prof.snr_low, prof.snr_high);
      const SignalVector clean = model.signal(p);
      const SignalVector noisy = add_noise(clean, snr, prof, proto.se_index, rng);
      if (std::any_of(noisy.begin(), noisy.end(), [](double s) { return !(s > 0.0); })) {
        ++rejects[i];
        continue;
      }
      const SignalVector norm = normalize_signal(noisy, proto);
      std::copy(norm.begin(), norm.end(), ds.signals.begin() + i * ds.nt);
      ds.truths[i] = p;
      ds.snrs[i] = snr;
      return;
    }
  });
  for (auto r : rejects) ds.rejected += r;
  if (n > 0) {
    const double rate = double(ds.rejected) / double(n + ds.rejected);
    require(rate <= 0.10, "synthgen.rejection",
            "rejection rate " + std::to_string(rate) + " exceeds 10%; SNR configuration implausible");
  }
  return ds;
}

// Binary container: 64-byte header then n rows of float32
// [signals(nt), oef, dbv, snr]. See docs/file_formats.md.
inline constexpr char kDatasetMagic[8] = {'Q', 'B', 'V', 'I', 'D', 'S', 'E', 'T'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(const SynthDataset& ds, const std::string& path) {
  bin::Writer w;
  w.put_bytes(kDatasetMagic, 8);
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.nt));
  w.put<std::uint64_t>(ds.size());
  w.put<std::uint64_t>(ds.rejected);
  w.pad_to(64);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double s : ds.row(i)) w.put<float>(static_cast<float>(s));
    w.put<float>(static_cast<float>(ds.truths[i].oef));
    w.put<float>(static_cast<float>(ds.truths[i].dbv));
    w.put<float>(static_cast<float>(ds.snrs[i]));
  }
  w.save(path);
}

inline SynthDataset read_dataset(const std::string& path) {
  auto r = bin::Reader::load(path);
  char magic[8];
  r.get_bytes(magic, 8);
  require(std::equal(magic, magic + 8, kDatasetMagic), "dataset.magic",
          path + " is not a qbvi dataset");
  const auto version = r.get<std::uint32_t>();
  require(version == kDatasetVersion, "dataset.version",
          path + " has unsupported version " + std::to_string(version));
  SynthDataset ds;
  ds.nt = r.get<std::uint32_t>();
  const auto n = r.get<std::uint64_t>();
  ds.rejected = r.get<std::uint64_t>();
  r.seek(64);
  const std::size_t row_bytes = (ds.nt + 3) * sizeof(float);
  require(r.size() == 64 + n * row_bytes, "io.truncated", path + " size does not match header");
  ds.signals.resize(n * ds.nt);
  ds.truths.resize(n);
  ds.snrs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < ds.nt; ++t) ds.signals[i * ds.nt + t] = r.get<float>();
    ds.truths[i].oef = r.get<float>();
    ds.truths[i].dbv = r.get<float>();
    ds.snrs[i] = r.get<float>();
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Phantoms

enum class PhantomPattern { constant, quadrants, smooth };

struct PhantomConfig {
  Grid grid{32, 32, 4};
  std::array<double, 3> voxel_mm{2.3, 2.3, 5.0};
  PhantomPattern pattern = PhantomPattern::constant;
  TissueParams base{0.40, 0.025};
  double snr = 60.0;  // spin-echo SNR; infinity gives a clean phantom
  double s0 = 1000.0;
  bool elliptical_mask = true;
};

struct Phantom {
  Volume4D raw;  // un-normalized signals
  Map3D oef;
  Map3D dbv;
};

inline TissueParams phantom_truth(const PhantomConfig& cfg, std::size_t x, std::size_t y) {
  const double fx = (x + 0.5) / cfg.grid.nx, fy = (y + 0.5) / cfg.grid.ny;
  switch (cfg.pattern) {
    case PhantomPattern::constant:
      return cfg.base;
    case PhantomPattern::quadrants: {
      static constexpr double d_oef[4] = {-0.10, 0.0, 0.10, 0.05};
      static constexpr double d_dbv[4] = {-0.005, 0.005, 0.0, 0.01};
      const int q = (fx >= 0.5) + 2 * (fy >= 0.5);
      return {cfg.base.oef + d_oef[q], cfg.base.dbv + d_dbv[q]};
    }
    case PhantomPattern::smooth: {
      const double s = std::sin(2 * std::numbers::pi * fx) * std::cos(2 * std::numbers::pi * fy);
      return {cfg.base.oef + 0.1 * s, cfg.base.dbv * (1.0 + 0.3 * s)};
    }
  }
  return cfg.base;
}

inline Phantom make_phantom(const PhantomConfig& cfg, const ForwardModel& model,
                            const NoiseProfile& prof, std::uint64_t seed) {
  const AcquisitionProtocol& proto = model.protocol();
  prof.validate(proto);
  Phantom ph{Volume4D(cfg.grid, proto.size()), Map3D(cfg.grid), Map3D(cfg.grid)};
  ph.raw.voxel_mm = cfg.voxel_mm;
  const double cx = 0.5 * cfg.grid.nx, cy = 0.5 * cfg.grid.ny;
  for (std::size_t z = 0; z < cfg.grid.nz; ++z)
    for (std::size_t y = 0; y < cfg.grid.ny; ++y)
      for (std::size_t x = 0; x < cfg.grid.nx; ++x) {
        const std::size_t v = cfg.grid.index(x, y, z);
        const TissueParams p = phantom_truth(cfg, x, y);
        ph.oef[v] = p.oef;
        ph.dbv[v] = p.dbv;
        if (cfg.elliptical_mask) {
          const double ex = (x + 0.5 - cx) / cx, ey = (y + 0.5 - cy) / cy;
          ph.raw.mask[v] = ex * ex + ey * ey <= 0.95;
        }
        SignalVector s = model.signal(p);
        for (double& si : s) si *= cfg.s0;
        if (std::isfinite(cfg.snr)) {
          Rng rng(seed, v);
          s = add_noise(s, cfg.snr, prof, proto.se_index, rng);
        }
        std::copy(s.begin(), s.end(), ph.raw.at(v).begin());
      }
  return ph;
}

// Replaces every sample of the chosen masked voxels with pure noise: the
// magnitude of complex Gaussian noise (Rayleigh) with per-component sigma
// amplitude * S_se of that voxel, so samples stay positive. Returns the
// corrupted voxel indices in ascending order.
inline std::vector<std::size_t> inject_artifacts(Volume4D& raw, double fraction, double amplitude,
                                                 std::uint64_t seed, std::size_t se_index) {
  require(fraction >= 0.0 && fraction <= 1.0, "phantom.artifact", "fraction must be in [0, 1]");
  require(amplitude > 0.0, "phantom.artifact", "amplitude must be positive");
  require(se_index < raw.nt, "phantom.artifact", "se_index outside the volume");
  std::vector<std::size_t> masked;
  for (std::size_t v = 0; v < raw.voxels(); ++v)
    if (raw.mask[v]) masked.push_back(v);
  Rng rng(seed, 0xA27);
  std::shuffle(masked.begin(), masked.end(), rng.engine());
  masked.resize(static_cast<std::size_t>(std::llround(fraction * masked.size())));
  std::sort(masked.begin(), masked.end());
  for (std::size_t v : masked) {
    Rng vr(seed, v);
    auto s = raw.at(v);
    const double sigma = amplitude * std::abs(s[se_index]);
    for (double& x : s) {
      const double re = vr.normal(), im = vr.normal();
      x = sigma * std::hypot(re, im);
    }
  }
  return masked;
}

}  // namespace qbvi
