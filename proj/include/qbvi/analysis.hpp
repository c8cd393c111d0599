#pragma once

// Parameter, uncertainty, R2' and ELBO maps from trained encoders; the
// weighted-least-squares baseline; region statistics and paired t-maps.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "qbvi/train.hpp"

namespace qbvi {

enum class MapSource { wls, synth, vi, vi_tv };

inline std::string to_string(MapSource s) {
  switch (s) {
    case MapSource::wls: return "wls";
    case MapSource::synth: return "synth";
    case MapSource::vi: return "vi";
    case MapSource::vi_tv: return "vi+tv";
  }
  return "?";
}

// Voxels outside `mask` hold NaN in every map. For WLS, oef and dbv are also
// NaN where the fit is flagged.
struct ParamMaps {
  Grid grid;
  std::array<double, 3> voxel_mm{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> mask;
  Map3D oef, dbv, r2p;          // point estimates (median of q for learned methods)
  Map3D oef_std, dbv_std;
  Map3D oef_mean, dbv_mean;     // Monte-Carlo means
  Map3D elbo;                   // nats per voxel
  MapSource source = MapSource::vi;
  double mean_elbo = std::numeric_limits<double>::quiet_NaN();
  std::size_t flagged = 0;      // WLS voxels with undefined OEF

  ParamMaps() = default;
  ParamMaps(const Grid& g, std::vector<std::uint8_t> m, MapSource s)
      : grid(g), mask(std::move(m)), source(s) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (Map3D* map : {&oef, &dbv, &r2p, &oef_std, &dbv_std, &oef_mean, &dbv_mean, &elbo}) *map = Map3D(g, nan);
  }
};

struct InferenceConfig {
  std::size_t n_std_samples = 256;
  ElboSettings elbo{};
  std::uint64_t seed = 0;
  unsigned threads = 1;
  MapSource source = MapSource::vi;
};

// Head outputs for every voxel, evaluated one slice at a time.
inline MatrixXd network_outputs(const EncoderWeights& psi, const Volume4D& vol) {
  MatrixXd out(psi.config.n_outputs(vol.nt), Index(vol.voxels()));
  const std::size_t plane = vol.grid.nx * vol.grid.ny;
  for (std::size_t z = 0; z < vol.grid.nz; ++z) {
    const Volume4D s = crop_block(vol, 0, 0, z, vol.grid.nx, vol.grid.ny, 1);
    out.middleCols(Index(z * plane), Index(plane)) = encoder_forward(psi, volume_inputs(s), &s.grid, &s.mask);
  }
  return out;
}

// Per-voxel ELBO (higher is better); unmasked voxels are NaN. Returns the
// mean over masked voxels, equal to -volume_elbo(...).loss.
inline double elbo_map(const EncoderWeights& psi, const Volume4D& vol, const PriorMaps& prior,
                       const ForwardModel& model, std::uint64_t seed, const ElboSettings& s,
                       std::vector<double>& per_voxel, unsigned threads = 1) {
  const ElboResult r = volume_elbo(psi, vol, prior, model, seed, s, &per_voxel, threads);
  return r.voxels ? -r.loss : std::numeric_limits<double>::quiet_NaN();
}

// Maps from an encoder. `prior` supplies p(Phi) for the ELBO; when null the
// encoder must be voxelwise and serves as its own prior (KL = 0).
inline ParamMaps infer_maps(const EncoderWeights& psi, const Volume4D& vol, const ForwardModel& model,
                            const PriorMaps* prior, const InferenceConfig& cfg) {
  require(vol.nt == psi.n_t, "analysis.shape", "volume does not match the network inputs");
  ParamMaps m(vol.grid, vol.mask, cfg.source);
  m.voxel_mm = vol.voxel_mm;
  const MatrixXd out = network_outputs(psi, vol);
  const PhysioConstants& c = model.constants();
  const double b0 = model.protocol().b0;
  parallel_for(vol.voxels(), cfg.threads, [&](std::size_t v) {
    if (!vol.mask[v]) return;
    const LogitGaussianParams q = prediction_at(out, Index(v), psi.config).q;
    const TissueParams point = forward_transform(q.mu);
    m.oef[v] = point.oef;
    m.dbv[v] = point.dbv;
    m.r2p[v] = r2_prime(point, c, b0);
    Rng rng(mix_seed(cfg.seed, 0x57D), v);
    const auto draws = sample(ScaledLogitNormal::from_params(q), rng, cfg.n_std_samples);
    double mo = 0, md = 0;
    for (const auto& d : draws) mo += d.oef, md += d.dbv;
    mo /= double(draws.size());
    md /= double(draws.size());
    double so = 0, sd = 0;
    for (const auto& d : draws) so += (d.oef - mo) * (d.oef - mo), sd += (d.dbv - md) * (d.dbv - md);
    const double denom = draws.size() > 1 ? double(draws.size() - 1) : 1.0;
    m.oef_mean[v] = mo;
    m.dbv_mean[v] = md;
    m.oef_std[v] = std::sqrt(so / denom);
    m.dbv_std[v] = std::sqrt(sd / denom);
  });
  PriorMaps own;
  if (!prior) {
    own = compute_prior_maps(psi, vol);
    prior = &own;
  }
  m.mean_elbo = elbo_map(psi, vol, *prior, model, mix_seed(cfg.seed, 0xE1B), cfg.elbo, m.elbo.values, cfg.threads);
  return m;
}

// ---------------------------------------------------------------------------
// Weighted least squares

struct WlsConfig {
  double tau_min = 0.015;   // long-tau regime: |tau| >= tau_min
  bool weighted = true;     // weights proportional to the squared signal
};

struct WlsVoxel {
  double r2p = 0.0;
  double zeta = 0.0;
  double oef = 0.0;
  bool valid = false;
};

// Fit s*(tau) = zeta - R2' |tau| over the long-tau samples of one normalized
// voxel. OEF = R2' / (zeta * dw(OEF = 1)).
inline WlsVoxel wls_voxel(std::span<const double> s, const AcquisitionProtocol& proto, const PhysioConstants& c,
                          const WlsConfig& cfg) {
  double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < proto.size(); ++i) {
    const double t = std::abs(proto.tau[i]);
    if (t < cfg.tau_min) continue;
    const double w = cfg.weighted ? std::exp(2.0 * s[i]) : 1.0;
    sw += w;
    sx += w * t;
    sy += w * s[i];
    sxx += w * t * t;
    sxy += w * t * s[i];
  }
  WlsVoxel r;
  const double det = sw * sxx - sx * sx;
  const double slope = (sw * sxy - sx * sy) / det;
  r.zeta = (sy - slope * sx) / sw;
  r.r2p = -slope;
  r.oef = r.r2p / (r.zeta * delta_omega(1.0, c, proto.b0));
  r.valid = r.zeta > 0.0 && r.oef > 0.0 && r.oef <= 1.0 && std::isfinite(r.oef);
  return r;
}

inline ParamMaps wls_fit(const Volume4D& vol, const AcquisitionProtocol& proto, const PhysioConstants& c,
                         const WlsConfig& cfg = {}) {
  require(vol.nt == proto.size(), "analysis.shape", "volume does not match the protocol");
  std::size_t n_long = 0;
  for (double t : proto.tau) n_long += std::abs(t) >= cfg.tau_min;
  require(n_long >= 3, "wls.protocol",
          "need at least 3 samples with |tau| >= " + std::to_string(cfg.tau_min) + " s, have " +
              std::to_string(n_long));
  ParamMaps m(vol.grid, vol.mask, MapSource::wls);
  m.voxel_mm = vol.voxel_mm;
  for (std::size_t v = 0; v < vol.voxels(); ++v) {
    if (!vol.mask[v]) continue;
    const WlsVoxel f = wls_voxel(vol.at(v), proto, c, cfg);
    m.r2p[v] = f.r2p;
    m.oef_std[v] = m.dbv_std[v] = 0.0;
    if (!f.valid) {
      ++m.flagged;
      continue;
    }
    m.oef[v] = m.oef_mean[v] = f.oef;
    m.dbv[v] = m.dbv_mean[v] = f.zeta;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Statistics

struct SummaryStat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double stdev = std::numeric_limits<double>::quiet_NaN();  // sample (n - 1) deviation; 0 when n == 1
  std::size_t n = 0;
};

struct RegionStats {
  SummaryStat oef, dbv, r2p, elbo;
};

// Welford accumulation over finite values of `map` inside `region`.
inline SummaryStat summarize(const Map3D& map, const std::vector<std::uint8_t>& region) {
  SummaryStat s;
  double mean = 0, m2 = 0;
  for (std::size_t v = 0; v < map.values.size(); ++v) {
    if (!region[v] || !std::isfinite(map[v])) continue;
    ++s.n;
    const double d = map[v] - mean;
    mean += d / double(s.n);
    m2 += d * (map[v] - mean);
  }
  if (s.n) {
    s.mean = mean;
    s.stdev = s.n > 1 ? std::sqrt(m2 / double(s.n - 1)) : 0.0;
  }
  return s;
}

inline RegionStats region_stats(const ParamMaps& maps, const std::vector<std::uint8_t>& region) {
  require(region.size() == maps.grid.voxels(), "analysis.shape", "region mask does not match the maps");
  std::vector<std::uint8_t> r(region.size());
  std::size_t n = 0;
  for (std::size_t v = 0; v < r.size(); ++v) n += (r[v] = region[v] && maps.mask[v]);
  require(n > 0, "analysis.empty_region", "region contains no masked voxels");
  return {summarize(maps.oef, r), summarize(maps.dbv, r), summarize(maps.r2p, r), summarize(maps.elbo, r)};
}

// Total variation of one map (same normalization as the training penalty);
// non-finite voxels are treated as unmasked.
inline double map_tv(const Map3D& map, const std::vector<std::uint8_t>& mask) {
  std::vector<std::uint8_t> m(mask.size());
  MatrixXd row(1, Index(map.values.size()));
  for (std::size_t v = 0; v < m.size(); ++v) {
    m[v] = mask[v] && std::isfinite(map[v]);
    row(0, Index(v)) = m[v] ? map[v] : 0.0;
  }
  return tv_loss(row, map.grid, m);
}

// In-plane Gaussian smoothing (FWHM in mm). Non-finite voxels neither
// contribute nor receive values; the kernel is renormalized over finite
// neighbours. Kernel radius is ceil(3 sigma).
inline Map3D smooth_in_plane(const Map3D& map, double fwhm_mm, double dx_mm, double dy_mm) {
  if (fwhm_mm <= 0.0) return map;
  const double sigma_mm = fwhm_mm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  auto kernel = [](double sigma) {
    const int r = int(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * r + 1);
    for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    return k;
  };
  const auto kx = kernel(sigma_mm / dx_mm), ky = kernel(sigma_mm / dy_mm);
  const int rx = int(kx.size() / 2), ry = int(ky.size() / 2);
  const Grid& g = map.grid;
  Map3D out(g, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t z = 0; z < g.nz; ++z)
    for (std::size_t y = 0; y < g.ny; ++y)
      for (std::size_t x = 0; x < g.nx; ++x) {
        const std::size_t v = g.index(x, y, z);
        if (!std::isfinite(map[v])) continue;
        double acc = 0, wsum = 0;
        for (int j = -ry; j <= ry; ++j) {
          const long yy = long(y) + j;
          if (yy < 0 || yy >= long(g.ny)) continue;
          for (int i = -rx; i <= rx; ++i) {
            const long xx = long(x) + i;
            if (xx < 0 || xx >= long(g.nx)) continue;
            const double val = map[g.index(std::size_t(xx), std::size_t(yy), z)];
            if (!std::isfinite(val)) continue;
            const double w = kx[i + rx] * ky[j + ry];
            acc += w * val;
            wsum += w;
          }
        }
        out[v] = acc / wsum;
      }
  return out;
}

// Voxelwise paired t = mean(d) / (sd(d) / sqrt(n)), d = a_i - b_i, after
// optional smoothing. 0/0 gives 0; a voxel non-finite in any map gives NaN.
inline Map3D paired_tstat(const std::vector<Map3D>& a, const std::vector<Map3D>& b, double fwhm_mm,
                          double dx_mm = 1.0, double dy_mm = 1.0) {
  require(a.size() == b.size(), "analysis.tstat", "condition lists differ in length");
  require(a.size() >= 2, "analysis.tstat", "need at least 2 subjects");
  const Grid g = a[0].grid;
  for (std::size_t i = 0; i < a.size(); ++i)
    require(a[i].grid == g && b[i].grid == g, "analysis.shape", "maps are not on a common grid");
  std::vector<Map3D> sa, sb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa.push_back(smooth_in_plane(a[i], fwhm_mm, dx_mm, dy_mm));
    sb.push_back(smooth_in_plane(b[i], fwhm_mm, dx_mm, dy_mm));
  }
  const double n = double(a.size());
  Map3D t(g, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t v = 0; v < g.voxels(); ++v) {
    std::vector<double> d(a.size());
    bool ok = true;
    for (std::size_t i = 0; i < a.size(); ++i) {
      d[i] = sa[i][v] - sb[i][v];
      ok = ok && std::isfinite(d[i]);
    }
    if (!ok) continue;
    double mean = 0;
    for (double x : d) mean += x;
    mean /= n;
    double ss = 0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double se = std::sqrt(ss / (n - 1.0) / n);
    if (se == 0.0)
      t[v] = mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    else
      t[v] = mean / se;
  }
  return t;
}

}  // namespace qbvi
