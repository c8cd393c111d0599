#pragma once

// Two-stage training.
//
// Pretraining fits a voxelwise network theta to synthetic (signal, truth)
// pairs by minimizing -log q(truth | signal). Fine-tuning starts psi from
// theta and minimizes the negative ELBO
//   mean_v [ KL(q_v || p_v) - (1/N_s) sum_j log N(S*_v; S(Phi_j), Sigma_im,v) ]
//   + lambda * TV(f(mu))
// on image crops, where p_v is theta's prediction for the same voxel and
// Phi_j = f(mu + L z_j) are reparameterized draws.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <string>
#include <vector>

#include "qbvi/distributions.hpp"
#include "qbvi/nnet.hpp"
#include "qbvi/parallel.hpp"
#include "qbvi/physics.hpp"
#include "qbvi/synthgen.hpp"
#include "qbvi/volume.hpp"

namespace qbvi {

enum class KlMode { analytic, sampled };

struct TrainingConfig {
  long iterations = 1400;
  std::size_t batch_size = 512;
  double lr = 2e-3;
  double weight_decay = 2e-4;
  double lr_final_factor = 1.0;  // lr and weight decay end at value / factor
  int n_samples_elbo = 4;
  double tv_lambda = 5.0;
  std::size_t crop_xy = 25;
  bool swa_enabled = true;
  double swa_start = 0.75;  // fraction of iterations before averaging starts
  double validation_fraction = 0.1;
  KlMode kl_mode = KlMode::analytic;
  double noise_floor = 1e-4;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  static TrainingConfig pretrain_defaults() { return {}; }

  static TrainingConfig finetune_defaults() {
    TrainingConfig c;
    c.iterations = 4000;
    c.batch_size = 38;
    c.lr = 5e-3;
    c.lr_final_factor = 100.0;
    c.swa_enabled = false;
    return c;
  }

  void validate() const {
    require(iterations >= 0, "config.training", "iterations must be non-negative");
    require(batch_size >= 1, "config.training", "batch_size must be positive");
    require(lr > 0 && weight_decay >= 0, "config.training", "lr must be positive, weight_decay >= 0");
    require(lr_final_factor > 0, "config.training", "lr_final_factor must be positive");
    require(n_samples_elbo >= 1, "config.training", "n_samples_elbo must be positive");
    require(tv_lambda >= 0, "config.training", "tv_lambda must be non-negative");
    require(crop_xy >= 1, "config.training", "crop_xy must be positive");
    require(swa_start >= 0 && swa_start < 1, "config.training", "swa_start must be in [0, 1)");
    require(validation_fraction >= 0 && validation_fraction < 1, "config.training",
            "validation_fraction must be in [0, 1)");
    require(noise_floor > 0, "config.training", "noise_floor must be positive");
    require(threads >= 1, "config.training", "threads must be positive");
  }
};

struct MetricsRow {
  long step = 0;
  double loss = 0, kl = 0, nll = 0, tv = 0, lr = 0;
};

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "io.write", "cannot open " + path + " for writing");
  out << "step,loss,kl,nll,tv,lr\n" << std::setprecision(10);
  for (const auto& r : rows)
    out << r.step << ',' << r.loss << ',' << r.kl << ',' << r.nll << ',' << r.tv << ',' << r.lr << '\n';
  require(static_cast<bool>(out), "io.write", "failed writing " + path);
}

// ---------------------------------------------------------------------------
// Pretraining

// -log q(truth) under the scaled logit-Normal with parameters p. grad (w.r.t.
// mu, log_l11, log_l22, l21) is optional.
inline double pretrain_loss(const LogitGaussianParams& p, const TissueParams& truth,
                            ParamGrad* grad = nullptr, const LogitScaling& sc = {}) {
  const Vec2 beta = inverse_transform(truth, sc);
  ParamGrad g;
  const double nll = gaussian_nll_grad(p, beta, g);
  if (grad) *grad = g;
  return nll + log_jacobian(truth, sc);
}

// Mean loss over the columns of x; accumulates gradients into grad.
inline double pretrain_batch_loss(const EncoderWeights& w, const MatrixXd& x,
                                  const std::vector<TissueParams>& truths, VectorXd* grad) {
  require(static_cast<std::size_t>(x.cols()) == truths.size(), "train.shape", "batch size mismatch");
  ForwardCache cache;
  const MatrixXd out = encoder_forward(w, x, nullptr, nullptr, grad ? &cache : nullptr);
  const bool full = w.config.covariance_mode == CovarianceMode::full;
  const double inv_n = 1.0 / double(x.cols());
  MatrixXd d_out;
  if (grad) d_out = MatrixXd::Zero(out.rows(), out.cols());
  double total = 0.0;
  for (Index v = 0; v < x.cols(); ++v) {
    const VoxelPrediction pred = prediction_at(out, v, w.config);
    ParamGrad g;
    total += pretrain_loss(pred.q, truths[static_cast<std::size_t>(v)], grad ? &g : nullptr);
    if (grad) {
      for (int k = 0; k < 4; ++k) d_out(k, v) = g[k] * inv_n;
      if (full) d_out(4, v) = g[4] * inv_n;
    }
  }
  if (grad) encoder_backward(w, cache, d_out, *grad);
  return total * inv_n;
}

inline MatrixXd dataset_inputs(const SynthDataset& ds, std::size_t begin, std::size_t end) {
  MatrixXd x(static_cast<Index>(ds.nt), static_cast<Index>(end - begin));
  for (std::size_t r = begin; r < end; ++r)
    for (std::size_t t = 0; t < ds.nt; ++t) x(static_cast<Index>(t), static_cast<Index>(r - begin)) = ds.row(r)[t];
  return x;
}

// Per-channel mean and inverse std over the dataset; constant channels (the
// spin echo) get scale 1.
inline void set_input_standardization(EncoderWeights& w, const SynthDataset& ds) {
  const MatrixXd x = dataset_inputs(ds, 0, ds.size());
  w.input_shift = x.rowwise().mean();
  for (Index t = 0; t < x.rows(); ++t) {
    const double var = (x.row(t).array() - w.input_shift[t]).square().mean();
    w.input_scale[t] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
  }
}

struct PretrainResult {
  EncoderWeights weights;
  double initial_validation_loss = 0;
  double final_validation_loss = 0;
  std::vector<MetricsRow> metrics;
};

inline PretrainResult run_pretraining(NetworkConfig net_cfg, const TrainingConfig& cfg,
                                      const SynthDataset& ds) {
  cfg.validate();
  require(ds.size() > 0, "train.empty", "pretraining dataset is empty");
  net_cfg.spatial_mode = SpatialMode::voxelwise;
  EncoderWeights w = EncoderWeights::create(net_cfg, ds.nt, mix_seed(cfg.seed, 1));
  set_input_standardization(w, ds);

  std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * ds.size()));
  std::size_t n_train = ds.size() - n_val;
  if (n_train == 0) n_train = ds.size(), n_val = 0;
  const MatrixXd x_val = n_val ? dataset_inputs(ds, n_train, ds.size()) : dataset_inputs(ds, 0, n_train);
  const std::vector<TissueParams> t_val =
      n_val ? std::vector<TissueParams>(ds.truths.begin() + long(n_train), ds.truths.end())
            : std::vector<TissueParams>(ds.truths.begin(), ds.truths.begin() + long(n_train));

  PretrainResult res;
  res.initial_validation_loss = pretrain_batch_loss(w, x_val, t_val, nullptr);
  AdamState state = AdamState::zeros(w.size());
  VectorXd avg;
  long swa_count = 0;
  const long swa_first = static_cast<long>(std::floor(cfg.swa_start * double(cfg.iterations)));
  Rng rng(cfg.seed, 2);
  MatrixXd x(static_cast<Index>(ds.nt), static_cast<Index>(cfg.batch_size));
  std::vector<TissueParams> truths(cfg.batch_size);
  for (long it = 0; it < cfg.iterations; ++it) {
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t r = rng.index(n_train);
      for (std::size_t t = 0; t < ds.nt; ++t) x(static_cast<Index>(t), static_cast<Index>(b)) = ds.row(r)[t];
      truths[b] = ds.truths[r];
    }
    VectorXd grad = VectorXd::Zero(w.size());
    const double loss = pretrain_batch_loss(w, x, truths, &grad);
    if (!std::isfinite(loss))
      throw Error("train.nonfinite", "non-finite pretraining loss at iteration " + std::to_string(it));
    check_finite_gradient(w, grad);
    const double lr = lr_schedule(it, cfg.iterations, cfg.lr, cfg.lr_final_factor);
    const double wd = lr_schedule(it, cfg.iterations, cfg.weight_decay, cfg.lr_final_factor);
    adamw_step(w.values, state, grad, lr, wd);
    if (cfg.swa_enabled && it >= swa_first) swa_update(avg, w.values, ++swa_count);
    res.metrics.push_back({it, loss, 0.0, loss, 0.0, lr});
  }
  if (cfg.swa_enabled && swa_count > 0) w.values = avg;
  res.final_validation_loss = pretrain_batch_loss(w, x_val, t_val, nullptr);
  res.weights = std::move(w);
  return res;
}

// ---------------------------------------------------------------------------
// Priors

// Per-voxel logit-Gaussian parameters (mu0, mu1, log_l11, log_l22, l21).
struct PriorMaps {
  Grid grid;
  std::vector<std::uint8_t> mask;
  MatrixXd params;  // 5 x voxels

  LogitGaussianParams at(std::size_t v) const {
    const Index i = static_cast<Index>(v);
    return {Vec2(params(0, i), params(1, i)), params(2, i), params(3, i), params(4, i)};
  }
};

inline PriorMaps crop_priors(const PriorMaps& p, std::size_t x0, std::size_t y0, std::size_t z0,
                             std::size_t cx, std::size_t cy, std::size_t cz) {
  PriorMaps out{Grid{cx, cy, cz}, std::vector<std::uint8_t>(cx * cy * cz), MatrixXd(5, Index(cx * cy * cz))};
  for (std::size_t z = 0; z < cz; ++z)
    for (std::size_t y = 0; y < cy; ++y)
      for (std::size_t x = 0; x < cx; ++x) {
        const std::size_t src = p.grid.index(x0 + x, y0 + y, z0 + z), dst = out.grid.index(x, y, z);
        out.mask[dst] = p.mask[src];
        out.params.col(Index(dst)) = p.params.col(Index(src));
      }
  return out;
}

// Frozen voxelwise forward pass of theta; unmasked voxels are excluded.
inline PriorMaps compute_prior_maps(const EncoderWeights& theta, const Volume4D& vol) {
  require(theta.config.spatial_mode == SpatialMode::voxelwise, "train.prior",
          "prior network must be voxelwise");
  PriorMaps p{vol.grid, vol.mask, MatrixXd::Zero(5, Index(vol.voxels()))};
  const MatrixXd out = encoder_forward(theta, volume_inputs(vol));
  for (std::size_t v = 0; v < vol.voxels(); ++v) {
    if (!vol.mask[v]) continue;
    const auto q = prediction_at(out, Index(v), theta.config).q;
    p.params.col(Index(v)) << q.mu[0], q.mu[1], q.log_l11, q.log_l22, q.l21;
  }
  return p;
}

// ---------------------------------------------------------------------------
// ELBO

struct ElboSettings {
  int n_samples = 4;
  KlMode kl_mode = KlMode::analytic;
  double noise_floor = 1e-4;
};

struct VoxelTerms {
  double kl = 0.0;
  double nll = 0.0;  // negative expected log-likelihood (MC mean)
};

// KL and expected negative log-likelihood at one voxel. When d_out is
// non-null, scale * d(kl + nll)/d(outputs) is written into it (n_outputs
// entries). Draws come from rng.
inline VoxelTerms voxel_elbo_terms(const MatrixXd& out, Index v, const NetworkConfig& cfg,
                                   const LogitGaussianParams& prior, std::span<const double> signal,
                                   const ForwardModel& model, Rng& rng, const ElboSettings& s,
                                   double* d_out, double scale) {
  const VoxelPrediction pred = prediction_at(out, v, cfg);
  const LogitGaussianParams& q = pred.q;
  const bool full = cfg.covariance_mode == CovarianceMode::full;
  const std::size_t nt = model.size(), se = model.protocol().se_index;
  const double inv_s = 1.0 / s.n_samples;
  VoxelTerms t;
  ParamGrad gq = ParamGrad::Zero();
  if (s.kl_mode == KlMode::analytic) {
    ParamGrad gk;
    t.kl = kl_gaussian(q, prior, &gk);
    gq += gk;
  }
  const Mat2 l = q.chol();
  std::vector<double> sig(nt), dl(nt, 0.0);
  for (std::size_t i = 0; i < nt; ++i) sig[i] = std::max(std::exp(pred.log_noise[i]), s.noise_floor);
  std::vector<double> pred_s(nt), d_oef(nt), d_dbv(nt);
  for (int j = 0; j < s.n_samples; ++j) {
    const double z0 = rng.normal(), z1 = rng.normal();
    const Vec2 beta = q.mu + l * Vec2(z0, z1);
    const TissueParams y = forward_transform(beta);
    model.normalized(y, pred_s, d_oef, d_dbv);
    double nll = 0.0, g_oef = 0.0, g_dbv = 0.0;
    for (std::size_t i = 0; i < nt; ++i) {
      if (i == se) continue;
      const double r = signal[i] - pred_s[i];
      const double w = r / (sig[i] * sig[i]);
      nll += 0.5 * r * w + std::log(sig[i]) + 0.5 * kLog2Pi;
      g_oef -= w * d_oef[i];
      g_dbv -= w * d_dbv[i];
      if (std::exp(pred.log_noise[i]) > s.noise_floor) dl[i] += (1.0 - r * w) * inv_s;
    }
    t.nll += nll * inv_s;
    const Vec2 slope = forward_transform_slope(beta);
    Vec2 gb(g_oef * slope[0], g_dbv * slope[1]);
    if (s.kl_mode == KlMode::sampled) {
      ParamGrad gp;
      const double nll_p = gaussian_nll_grad(prior, beta, gp);
      t.kl += (-0.5 * (z0 * z0 + z1 * z1) - q.log_l11 - q.log_l22 - kLog2Pi + nll_p) * inv_s;
      gb -= Vec2(gp[0], gp[1]);  // d nll_p / d beta = -d nll_p / d mu_p
      gq[2] -= inv_s;
      gq[3] -= inv_s;
    }
    gb *= inv_s;
    gq[0] += gb[0];
    gq[1] += gb[1];
    gq[2] += gb[0] * z0 * l(0, 0);
    gq[3] += gb[1] * z1 * l(1, 1);
    gq[4] += gb[1] * z0;
  }
  if (d_out) {
    for (int k = 0; k < 4; ++k) d_out[k] = scale * gq[k];
    if (full) d_out[4] = scale * gq[4];
    for (std::size_t i = 0; i < nt; ++i) d_out[cfg.noise_row() + Index(i)] = scale * dl[i];
  }
  return t;
}

// Eq.-style total variation of C maps (rows of `maps`) over in-plane
// neighbour pairs anchored at x < nx-1, y < ny-1, normalized by
// (nx-1)(ny-1)nz. Pairs touching an unmasked voxel are skipped. If grad is
// given, d(TV)/d(maps) is added into it.
inline double tv_loss(const MatrixXd& maps, const Grid& g, const std::vector<std::uint8_t>& mask,
                      MatrixXd* grad = nullptr) {
  require(static_cast<std::size_t>(maps.cols()) == g.voxels(), "train.shape", "map/grid mismatch");
  if (g.nx < 2 || g.ny < 2) return 0.0;
  const double norm = 1.0 / double((g.nx - 1) * (g.ny - 1) * g.nz);
  auto on = [&](std::size_t v) { return mask.empty() || mask[v] != 0; };
  double tv = 0.0;
  for (std::size_t z = 0; z < g.nz; ++z)
    for (std::size_t y = 0; y + 1 < g.ny; ++y)
      for (std::size_t x = 0; x + 1 < g.nx; ++x) {
        const std::size_t v = g.index(x, y, z);
        if (!on(v)) continue;
        for (std::size_t nb : {v + 1, v + g.nx}) {
          if (!on(nb)) continue;
          for (Index c = 0; c < maps.rows(); ++c) {
            const double d = maps(c, Index(v)) - maps(c, Index(nb));
            tv += std::abs(d);
            if (grad) {
              const double sgn = (d > 0) - (d < 0);
              (*grad)(c, Index(v)) += sgn * norm;
              (*grad)(c, Index(nb)) -= sgn * norm;
            }
          }
        }
      }
  return tv * norm;
}

// One network application: a normalized (sub)volume with aligned priors.
struct ElboItem {
  const Volume4D* vol = nullptr;
  const PriorMaps* prior = nullptr;
  std::uint64_t seed = 0;
  double* voxel_elbo = nullptr;  // optional per-voxel ELBO output (voxels())
};

struct ElboResult {
  double loss = 0.0;  // kl + nll + tv_lambda * tv
  double kl = 0.0;    // mean over masked voxels
  double nll = 0.0;   // mean over masked voxels
  double tv = 0.0;    // mean over items
  std::size_t voxels = 0;
};

// Negative ELBO over a batch of items. Voxel v of an item draws from the
// stream (item.seed, v). Gradients are reduced in item order.
inline ElboResult elbo_batch(const EncoderWeights& psi, const std::vector<ElboItem>& items,
                             const ForwardModel& model, const ElboSettings& s, double tv_lambda,
                             VectorXd* grad, unsigned threads = 1) {
  ElboResult res;
  for (const auto& it : items) {
    require(it.vol->nt == model.size(), "train.shape", "volume does not match the forward model");
    require(it.prior->grid == it.vol->grid, "train.shape", "priors are not aligned with the volume");
    res.voxels += it.vol->masked_count();
  }
  if (res.voxels == 0 || items.empty()) return res;
  const double inv_n = 1.0 / double(res.voxels);
  const double tv_scale = tv_lambda / double(items.size());
  std::vector<VectorXd> grads(items.size());
  std::vector<double> kls(items.size(), 0.0), nlls(items.size(), 0.0), tvs(items.size(), 0.0);
  parallel_for(items.size(), threads, [&](std::size_t k) {
    const ElboItem& item = items[k];
    const Volume4D& vol = *item.vol;
    ForwardCache cache;
    const MatrixXd out = encoder_forward(psi, volume_inputs(vol), &vol.grid, &vol.mask, grad ? &cache : nullptr);
    MatrixXd d_out;
    if (grad) d_out = MatrixXd::Zero(out.rows(), out.cols());
    for (std::size_t v = 0; v < vol.voxels(); ++v) {
      if (!vol.mask[v]) {
        if (item.voxel_elbo) item.voxel_elbo[v] = std::nan("");
        continue;
      }
      Rng rng(item.seed, v);
      const VoxelTerms t = voxel_elbo_terms(out, Index(v), psi.config, item.prior->at(v), vol.at(v),
                                            model, rng, s, grad ? d_out.col(Index(v)).data() : nullptr, inv_n);
      kls[k] += t.kl;
      nlls[k] += t.nll;
      if (item.voxel_elbo) item.voxel_elbo[v] = -(t.kl + t.nll);
    }
    {
      MatrixXd yhat(2, out.cols()), slope(2, out.cols());
      for (Index v = 0; v < out.cols(); ++v) {
        const Vec2 mu(out(0, v), out(1, v));
        const TissueParams y = forward_transform(mu);
        yhat(0, v) = y.oef;
        yhat(1, v) = y.dbv;
        slope.col(v) = forward_transform_slope(mu);
      }
      MatrixXd d_yhat;
      if (grad && tv_lambda > 0.0) d_yhat = MatrixXd::Zero(2, out.cols());
      tvs[k] = tv_loss(yhat, vol.grid, vol.mask, d_yhat.size() ? &d_yhat : nullptr);
      if (d_yhat.size()) d_out.topRows(2) += tv_scale * d_yhat.cwiseProduct(slope);
    }
    if (grad) {
      grads[k] = VectorXd::Zero(psi.size());
      encoder_backward(psi, cache, d_out, grads[k]);
    }
  });
  for (std::size_t k = 0; k < items.size(); ++k) {
    res.kl += kls[k];
    res.nll += nlls[k];
    res.tv += tvs[k];
    if (grad) {
      if (grad->size() != psi.size()) *grad = VectorXd::Zero(psi.size());
      *grad += grads[k];
    }
  }
  res.kl *= inv_n;
  res.nll *= inv_n;
  res.tv /= double(items.size());
  res.loss = res.kl + res.nll + tv_lambda * res.tv;
  return res;
}

// Negative ELBO of a single (cropped) volume.
inline ElboResult elbo_loss(const EncoderWeights& psi, const Volume4D& vol, const PriorMaps& prior,
                            const ForwardModel& model, std::uint64_t seed, const ElboSettings& s,
                            double tv_lambda = 0.0, VectorXd* grad = nullptr) {
  return elbo_batch(psi, {ElboItem{&vol, &prior, seed}}, model, s, tv_lambda, grad);
}

// Whole-volume evaluation split into single slices (the network is in-plane
// only, so this is exact). Slice z draws from seed mix(seed, z).
inline ElboResult volume_elbo(const EncoderWeights& psi, const Volume4D& vol, const PriorMaps& prior,
                              const ForwardModel& model, std::uint64_t seed, const ElboSettings& s,
                              std::vector<double>* voxel_elbo = nullptr, unsigned threads = 1) {
  const std::size_t nz = vol.grid.nz, plane = vol.grid.nx * vol.grid.ny;
  std::vector<Volume4D> slices;
  std::vector<PriorMaps> priors;
  for (std::size_t z = 0; z < nz; ++z) {
    slices.push_back(crop_block(vol, 0, 0, z, vol.grid.nx, vol.grid.ny, 1));
    priors.push_back(crop_priors(prior, 0, 0, z, vol.grid.nx, vol.grid.ny, 1));
  }
  if (voxel_elbo) voxel_elbo->assign(vol.voxels(), std::nan(""));
  std::vector<ElboItem> items;
  for (std::size_t z = 0; z < nz; ++z)
    items.push_back({&slices[z], &priors[z], mix_seed(seed, z), voxel_elbo ? voxel_elbo->data() + z * plane : nullptr});
  ElboResult r = elbo_batch(psi, items, model, s, 0.0, nullptr, threads);
  r.tv = 0.0;
  r.loss = r.kl + r.nll;
  return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneResult {
  EncoderWeights weights;
  double initial_validation_loss = 0;  // negative ELBO, no TV
  double final_validation_loss = 0;
  std::vector<MetricsRow> metrics;
};

struct CropSampler {
  struct Site {
    std::size_t vol, x0, y0;
  };
  std::vector<Site> sites;
  std::size_t cx = 0, cy = 0;

  CropSampler(const std::vector<Volume4D>& vols, std::size_t crop) {
    require(!vols.empty(), "train.empty", "no volumes to fine-tune on");
    cx = cy = crop;
    for (const auto& v : vols) {
      cx = std::min(cx, v.grid.nx);
      cy = std::min(cy, v.grid.ny);
    }
    for (std::size_t k = 0; k < vols.size(); ++k) {
      const Volume4D& v = vols[k];
      for (std::size_t y0 = 0; y0 + cy <= v.grid.ny; ++y0)
        for (std::size_t x0 = 0; x0 + cx <= v.grid.nx; ++x0) {
          bool any = false;
          for (std::size_t z = 0; z < v.grid.nz && !any; ++z)
            for (std::size_t y = y0; y < y0 + cy && !any; ++y)
              for (std::size_t x = x0; x < x0 + cx && !any; ++x) any = v.mask[v.grid.index(x, y, z)] != 0;
          if (any) sites.push_back({k, x0, y0});
        }
    }
    require(!sites.empty(), "train.empty", "no crop position contains a masked voxel");
  }
};

inline ElboSettings elbo_settings(const TrainingConfig& cfg) {
  return {cfg.n_samples_elbo, cfg.kl_mode, cfg.noise_floor};
}

// vols must be normalized. Validation volumes default to the training set.
inline FinetuneResult run_finetuning(const EncoderWeights& theta, const NetworkConfig& net_cfg,
                                     const TrainingConfig& cfg, const std::vector<Volume4D>& vols,
                                     const ForwardModel& model,
                                     const std::vector<Volume4D>* validation = nullptr) {
  cfg.validate();
  net_cfg.validate();
  require(theta.config.covariance_mode == net_cfg.covariance_mode, "train.config",
          "prior network and fine-tuned network must share the covariance mode");
  require(theta.n_t == model.size(), "train.config", "prior network does not match the protocol");
  const ElboSettings s = elbo_settings(cfg);
  FinetuneResult res;
  EncoderWeights psi = extend_weights(theta, net_cfg, mix_seed(cfg.seed, 3));

  std::vector<PriorMaps> priors;
  for (const auto& v : vols) priors.push_back(compute_prior_maps(theta, v));
  const std::vector<Volume4D>& val = validation ? *validation : vols;
  std::vector<PriorMaps> val_priors;
  for (const auto& v : val) val_priors.push_back(compute_prior_maps(theta, v));
  auto validation_loss = [&](const EncoderWeights& w) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < val.size(); ++k) {
      const ElboResult r = volume_elbo(w, val[k], val_priors[k], model, mix_seed(cfg.seed, 0x7A1 + k), s,
                                       nullptr, cfg.threads);
      sum += r.loss * double(r.voxels);
      n += r.voxels;
    }
    return n ? sum / double(n) : 0.0;
  };
  res.initial_validation_loss = validation_loss(psi);

  const CropSampler sampler(vols, cfg.crop_xy);
  Rng pick(cfg.seed, 4);
  AdamState state = AdamState::zeros(psi.size());
  VectorXd avg;
  long swa_count = 0;
  const long swa_first = static_cast<long>(std::floor(cfg.swa_start * double(cfg.iterations)));
  // Divergence test: moving average of the batch negative ELBO (no TV)
  // against the whole-set value at initialization.
  const double reference = res.initial_validation_loss;
  double smoothed = reference;
  for (long it = 0; it < cfg.iterations; ++it) {
    std::vector<Volume4D> crops;
    std::vector<PriorMaps> crop_priors_;
    crops.reserve(cfg.batch_size);
    crop_priors_.reserve(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& site = sampler.sites[pick.index(sampler.sites.size())];
      const Volume4D& v = vols[site.vol];
      crops.push_back(crop_block(v, site.x0, site.y0, 0, sampler.cx, sampler.cy, v.grid.nz));
      crop_priors_.push_back(crop_priors(priors[site.vol], site.x0, site.y0, 0, sampler.cx, sampler.cy, v.grid.nz));
    }
    std::vector<ElboItem> items;
    for (std::size_t b = 0; b < crops.size(); ++b)
      items.push_back({&crops[b], &crop_priors_[b], mix_seed(cfg.seed, 0x100000ULL + std::uint64_t(it) * cfg.batch_size + b)});
    VectorXd grad = VectorXd::Zero(psi.size());
    const ElboResult r = elbo_batch(psi, items, model, s, cfg.tv_lambda, &grad, cfg.threads);
    if (!std::isfinite(r.loss))
      throw Error("train.nonfinite", "non-finite fine-tuning loss at iteration " + std::to_string(it));
    smoothed = 0.9 * smoothed + 0.1 * (r.kl + r.nll);
    if (smoothed - reference > 10.0 * std::max(std::abs(reference), 1.0))
      throw Error("train.divergence", "fine-tuning diverged at iteration " + std::to_string(it));
    check_finite_gradient(psi, grad);
    const double lr = lr_schedule(it, cfg.iterations, cfg.lr, cfg.lr_final_factor);
    const double wd = lr_schedule(it, cfg.iterations, cfg.weight_decay, cfg.lr_final_factor);
    adamw_step(psi.values, state, grad, lr, wd);
    if (cfg.swa_enabled && it >= swa_first) swa_update(avg, psi.values, ++swa_count);
    res.metrics.push_back({it, r.loss, r.kl, r.nll, r.tv, lr});
  }
  if (cfg.swa_enabled && swa_count > 0) psi.values = avg;
  res.final_validation_loss = validation_loss(psi);
  res.weights = std::move(psi);
  return res;
}

}  // namespace qbvi
