#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "qbvi/train.hpp"

namespace qbvi {
namespace {

const AcquisitionProtocol& proto() {
  static const AcquisitionProtocol p = AcquisitionProtocol::standard();
  return p;
}

const ForwardModel& model2() {
  static const ForwardModel m(proto(), PhysioConstants{}, ForwardModelConfig{});
  return m;
}

// A small normalized phantom with priors from a fresh network.
struct Scene {
  Volume4D vol;
  EncoderWeights theta;
  PriorMaps prior;
};

Scene make_scene(Grid grid, double snr, std::uint64_t seed, CovarianceMode cov = CovarianceMode::full) {
  PhantomConfig pc;
  pc.grid = grid;
  pc.pattern = PhantomPattern::smooth;
  pc.snr = snr;
  auto ph = make_phantom(pc, model2(), NoiseProfile::flat(proto().size()), seed);
  normalize_volume(ph.raw, proto());
  NetworkConfig nc;
  nc.width = 8;
  nc.covariance_mode = cov;
  Scene s{ph.raw, EncoderWeights::create(nc, proto().size(), seed + 1), {}};
  // Perturb so the prior varies over voxels.
  Rng rng(seed);
  for (Index i = 0; i < s.theta.size(); ++i) s.theta.values[i] += 0.05 * rng.normal();
  s.prior = compute_prior_maps(s.theta, s.vol);
  return s;
}

TEST(PretrainLoss, MatchesHandEvaluatedDensity) {
  LogitGaussianParams p;
  p.mu = Vec2(-0.3, -2.0);
  p.log_l11 = std::log(0.7);
  p.log_l22 = std::log(0.4);
  p.l21 = 0.25;
  const TissueParams y{0.37, 0.031};
  // covariance [[a, b], [b, c]] of L = [[0.7, 0], [0.25, 0.4]]
  const double a = 0.49, b = 0.7 * 0.25, c = 0.25 * 0.25 + 0.16;
  const double det = a * c - b * b;
  const double u0 = (y.oef - 0.05) / 0.8, u1 = (y.dbv - 0.001) / 0.3;
  const double r0 = std::log(u0 / (1 - u0)) - p.mu[0], r1 = std::log(u1 / (1 - u1)) - p.mu[1];
  const double quad = (c * r0 * r0 - 2 * b * r0 * r1 + a * r1 * r1) / det;
  const double log_density = -std::log(2 * std::numbers::pi) - 0.5 * std::log(det) - 0.5 * quad -
                             std::log(0.8 * u0 * (1 - u0)) - std::log(0.3 * u1 * (1 - u1));
  EXPECT_NEAR(pretrain_loss(p, y), -log_density, 1e-8);
}

TEST(PretrainLoss, CenteredTightPredictionWins) {
  const TissueParams truth{0.4, 0.025};
  LogitGaussianParams centred;
  centred.mu = inverse_transform(truth);
  centred.log_l11 = centred.log_l22 = std::log(0.05);
  const double best = pretrain_loss(centred, truth);
  for (int i = -3; i <= 3; ++i)
    for (int j = -3; j <= 3; ++j) {
      if (i == 0 && j == 0) continue;
      LogitGaussianParams shifted = centred;
      shifted.mu += Vec2(0.05 * i, 0.05 * j);
      EXPECT_GT(pretrain_loss(shifted, truth), best);
    }
}

TEST(PretrainLoss, DiagonalAndFullRepresentationsAgree) {
  LogitGaussianParams p;
  p.mu = Vec2(0.2, -1.1);
  p.log_l11 = -0.3;
  p.log_l22 = 0.2;
  const TissueParams y{0.5, 0.05};
  const double diag = pretrain_loss(p, y);
  Mat2 l = p.chol();
  EXPECT_NEAR(diag, -log_prob(ScaledLogitNormal{p.mu, l, {}}, y, CovariancePath::cholesky), 1e-12);
}

TEST(PretrainLoss, OutsideSupportIsError) {
  EXPECT_THROW(pretrain_loss(LogitGaussianParams{}, {0.9, 0.02}), Error);
}

TEST(PretrainLoss, BatchGradientMatchesFiniteDifferences) {
  for (auto cov : {CovarianceMode::full, CovarianceMode::diagonal}) {
    NetworkConfig nc;
    nc.width = 10;
    nc.covariance_mode = cov;
    EncoderWeights w = EncoderWeights::create(nc, 11, 3);
    Rng rng(4);
    for (Index i = 0; i < w.size(); ++i) w.values[i] += 0.1 * rng.normal();
    const auto ds = generate_dataset(40, PopulationPrior::normal(), model2(), NoiseProfile::flat(11), 5);
    set_input_standardization(w, ds);
    const MatrixXd x = dataset_inputs(ds, 0, ds.size());
    VectorXd grad = VectorXd::Zero(w.size());
    pretrain_batch_loss(w, x, ds.truths, &grad);
    for (int k = 0; k < 50; ++k) {
      const Index i = Index(rng.index(std::size_t(w.size())));
      const double w0 = w.values[i], h = 1e-4 * std::max(1.0, std::abs(w0));
      w.values[i] = w0 + h;
      const double fp = pretrain_batch_loss(w, x, ds.truths, nullptr);
      w.values[i] = w0 - h;
      const double fm = pretrain_batch_loss(w, x, ds.truths, nullptr);
      w.values[i] = w0;
      const double fd = (fp - fm) / (2 * h);
      EXPECT_LT(std::abs(grad[i] - fd) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}), 1e-4)
          << i << " " << grad[i] << " " << fd;
    }
  }
}

void check_elbo_gradient(const EncoderWeights& psi0, const Scene& s, const ElboSettings& set, double lambda) {
  EncoderWeights psi = psi0;
  VectorXd grad = VectorXd::Zero(psi.size());
  elbo_loss(psi, s.vol, s.prior, model2(), 99, set, lambda, &grad);
  Rng rng(5);
  int checked = 0;
  for (int k = 0; k < 60; ++k) {
    const Index i = Index(rng.index(std::size_t(psi.size())));
    const double w0 = psi.values[i], h = 1e-4 * std::max(1.0, std::abs(w0));
    psi.values[i] = w0 + h;
    const double fp = elbo_loss(psi, s.vol, s.prior, model2(), 99, set, lambda).loss;
    psi.values[i] = w0 - h;
    const double fm = elbo_loss(psi, s.vol, s.prior, model2(), 99, set, lambda).loss;
    psi.values[i] = w0;
    const double fd = (fp - fm) / (2 * h);
    EXPECT_LT(std::abs(grad[i] - fd) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}), 1e-3)
        << i << " " << grad[i] << " " << fd;
    ++checked;
  }
  EXPECT_EQ(checked, 60);
}

TEST(ElboLoss, GradientMatchesFiniteDifferencesVoxelwise) {
  for (auto cov : {CovarianceMode::full, CovarianceMode::diagonal}) {
    const Scene s = make_scene({5, 4, 2}, 80, 7, cov);
    NetworkConfig nc = s.theta.config;
    EncoderWeights psi = extend_weights(s.theta, nc, 3);
    Rng rng(6);
    for (Index i = 0; i < psi.size(); ++i) psi.values[i] += 0.05 * rng.normal();
    check_elbo_gradient(psi, s, ElboSettings{}, 0.0);
  }
}

TEST(ElboLoss, GradientMatchesFiniteDifferencesGatedWithTv) {
  const Scene s = make_scene({5, 4, 2}, 80, 8);
  NetworkConfig nc = s.theta.config;
  nc.spatial_mode = SpatialMode::gated_residual;
  EncoderWeights psi = extend_weights(s.theta, nc, 3);
  Rng rng(6);
  for (Index i = 0; i < psi.size(); ++i) psi.values[i] += 0.05 * rng.normal();
  check_elbo_gradient(psi, s, ElboSettings{}, 5.0);
}

TEST(ElboLoss, GradientMatchesFiniteDifferencesSampledKl) {
  const Scene s = make_scene({4, 4, 1}, 80, 9);
  EncoderWeights psi = s.theta;
  Rng rng(6);
  for (Index i = 0; i < psi.size(); ++i) psi.values[i] += 0.05 * rng.normal();
  ElboSettings set;
  set.kl_mode = KlMode::sampled;
  check_elbo_gradient(psi, s, set, 1.0);
}

TEST(ElboLoss, PriorEqualsPosteriorWithHugeNoise) {
  Scene s = make_scene({4, 4, 1}, 80, 10);
  EncoderWeights psi = s.theta;
  auto bias = psi.tensor("head.bias");
  auto weight = psi.tensor("head.weight");
  for (Index i = psi.config.noise_row(); i < bias.rows(); ++i) {
    bias(i, 0) = 10.0;
    weight.row(i).setZero();
  }
  const ElboResult r = elbo_loss(psi, s.vol, s.prior, model2(), 1, ElboSettings{});
  EXPECT_NEAR(r.kl, 0.0, 1e-12);
  const double constant = 10.0 * (10.0 + 0.5 * std::log(2 * std::numbers::pi));
  EXPECT_NEAR(r.nll, constant, 1e-6);
  EXPECT_NEAR(r.loss, r.nll, 1e-12);
}

TEST(ElboLoss, ConcentratedPosteriorAtTruthReachesGaussianMaximum) {
  // Clean voxel, q a near point mass at the truth, noise sigma known. The
  // encoder floors the width, so head outputs are supplied directly.
  const TissueParams truth{0.4, 0.025};
  const auto clean = model2().normalized(truth);
  NetworkConfig nc;
  const Vec2 beta = inverse_transform(truth);
  const double sigma = 0.01;
  MatrixXd out = MatrixXd::Zero(nc.n_outputs(proto().size()), 1);
  out(0, 0) = beta[0];
  out(1, 0) = beta[1];
  out(2, 0) = out(3, 0) = -14.0;
  for (Index i = nc.noise_row(); i < out.rows(); ++i) out(i, 0) = std::log(sigma);
  LogitGaussianParams prior;
  prior.mu = beta;
  Rng rng(3);
  const VoxelTerms t = voxel_elbo_terms(out, 0, nc, prior, clean, model2(), rng, ElboSettings{}, nullptr, 1.0);
  const double max_loglik = -10.0 * (std::log(sigma) + 0.5 * std::log(2 * std::numbers::pi));
  EXPECT_NEAR(-t.nll, max_loglik, 1e-6);
}

TEST(ElboLoss, DecompositionAndNonNegativeKl) {
  const Scene s = make_scene({6, 6, 2}, 60, 11);
  NetworkConfig nc = s.theta.config;
  EncoderWeights psi = extend_weights(s.theta, nc, 2);
  Rng rng(3);
  for (Index i = 0; i < psi.size(); ++i) psi.values[i] += 0.1 * rng.normal();
  const ElboResult r = elbo_loss(psi, s.vol, s.prior, model2(), 4, ElboSettings{}, 5.0);
  EXPECT_NEAR(r.loss, r.kl + r.nll + 5.0 * r.tv, 1e-8);
  EXPECT_GT(r.kl, 0.0);
  const MatrixXd out = encoder_forward(psi, volume_inputs(s.vol));
  for (std::size_t v = 0; v < s.vol.voxels(); ++v) {
    if (!s.vol.mask[v]) continue;
    EXPECT_GE(kl_gaussian(prediction_at(out, Index(v), nc).q, s.prior.at(v)), 0.0);
  }
}

TEST(ElboLoss, SampleCountConsistency) {
  const Scene s = make_scene({12, 12, 2}, 60, 12);
  EncoderWeights psi = s.theta;
  std::vector<double> one(s.vol.voxels()), many(s.vol.voxels());
  ElboSettings s1, s64;
  s1.n_samples = 1;
  s64.n_samples = 64;
  const ElboResult r1 = elbo_batch(psi, {ElboItem{&s.vol, &s.prior, 5, one.data()}}, model2(), s1, 0.0, nullptr);
  const ElboResult r64 = elbo_batch(psi, {ElboItem{&s.vol, &s.prior, 5, many.data()}}, model2(), s64, 0.0, nullptr);
  // Standard error of the single-sample mean from the spread of per-voxel
  // differences (each voxel's 64-sample value is a near-exact reference).
  double acc = 0, mean = 0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < one.size(); ++v)
    if (s.vol.mask[v]) {
      mean += one[v] - many[v];
      ++n;
    }
  mean /= n;
  for (std::size_t v = 0; v < one.size(); ++v)
    if (s.vol.mask[v]) acc += (one[v] - many[v] - mean) * (one[v] - many[v] - mean);
  const double se = std::sqrt(acc / (n - 1) / n);
  EXPECT_LT(std::abs(r1.loss - r64.loss), 4 * se);
}

TEST(TvLoss, Examples) {
  const Grid g{2, 2, 1};
  MatrixXd m(1, 4);
  m << 0, 1, 1, 0;  // [[0,1],[1,0]]
  EXPECT_DOUBLE_EQ(tv_loss(m, g, {}), 2.0);
  MatrixXd two(2, 4);
  two.row(0) = m.row(0);
  two.row(1) = 2 * m.row(0);
  EXPECT_DOUBLE_EQ(tv_loss(two, g, {}), 6.0);
  EXPECT_DOUBLE_EQ(tv_loss(MatrixXd::Constant(2, 4, 0.3), g, {}), 0.0);
  const Grid gz{3, 3, 4};
  MatrixXd zonly(1, 36);
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t i = 0; i < 9; ++i) zonly(0, Index(z * 9 + i)) = double(z * z);
  EXPECT_DOUBLE_EQ(tv_loss(zonly, gz, {}), 0.0);
}

TEST(TvLoss, NormalizationAndMask) {
  const Grid g{3, 2, 1};
  MatrixXd m(1, 6);
  m << 0, 1, 3, 0, 0, 0;
  // anchors (0,0) and (1,0): |0-1| + |0-0| + |1-3| + |1-0| = 4, over (2*1*1)
  EXPECT_DOUBLE_EQ(tv_loss(m, g, {}), 2.0);
  std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
  // (1,0)-(2,0) pair dropped
  EXPECT_DOUBLE_EQ(tv_loss(m, g, mask), 1.0);
  MatrixXd grad = MatrixXd::Zero(1, 6);
  tv_loss(m, g, {}, &grad);
  for (Index v = 0; v < 6; ++v) {
    MatrixXd mp = m, mm = m;
    mp(0, v) += 1e-6;
    mm(0, v) -= 1e-6;
    EXPECT_NEAR(grad(0, v), (tv_loss(mp, g, {}) - tv_loss(mm, g, {})) / 2e-6, 1e-6);
  }
}

TEST(PriorMaps, IdenticalVoxelsAndMask) {
  Scene s = make_scene({4, 4, 1}, 60, 13);
  std::copy_n(s.vol.at(5).begin(), s.vol.nt, s.vol.at(6).begin());
  s.vol.mask[0] = 0;
  const PriorMaps p = compute_prior_maps(s.theta, s.vol);
  EXPECT_EQ(p.params.col(5), p.params.col(6));
  EXPECT_EQ(p.mask[0], 0);
  EXPECT_EQ(p.params.col(0).norm(), 0.0);
  NetworkConfig gated = s.theta.config;
  gated.spatial_mode = SpatialMode::gated_residual;
  EXPECT_THROW(compute_prior_maps(EncoderWeights::create(gated, 11, 1), s.vol), Error);
}

TrainingConfig small_pretrain(std::uint64_t seed) {
  TrainingConfig c;
  c.iterations = 150;
  c.batch_size = 64;
  c.seed = seed;
  return c;
}

TEST(Pretraining, DeterministicAndImproves) {
  const auto ds = generate_dataset(2000, PopulationPrior::normal(), model2(), NoiseProfile::flat(11, 100, 100), 1);
  NetworkConfig nc;
  nc.width = 16;
  const auto a = run_pretraining(nc, small_pretrain(3), ds);
  const auto b = run_pretraining(nc, small_pretrain(3), ds);
  EXPECT_EQ(a.weights.values, b.weights.values);
  EXPECT_LT(a.final_validation_loss, a.initial_validation_loss);
  EXPECT_EQ(a.metrics.size(), 150u);
  EXPECT_THROW(run_pretraining(nc, small_pretrain(3), SynthDataset{}), Error);
}

TEST(Pretraining, BeatsPopulationPriorOnHeldOutRows) {
  const auto train = generate_dataset(4000, PopulationPrior::normal(), model2(), NoiseProfile::flat(11, 100, 100), 2);
  const auto held = generate_dataset(500, PopulationPrior::normal(), model2(), NoiseProfile::flat(11, 100, 100), 3);
  NetworkConfig nc;
  nc.width = 24;
  TrainingConfig tc = small_pretrain(4);
  tc.iterations = 400;
  const auto res = run_pretraining(nc, tc, train);
  // Baseline: Gaussian fitted to the training truths' logits.
  Vec2 mean = Vec2::Zero();
  std::vector<Vec2> betas;
  for (const auto& t : train.truths) betas.push_back(inverse_transform(t)), mean += betas.back();
  mean /= double(betas.size());
  Mat2 cov = Mat2::Zero();
  for (const auto& b : betas) cov += (b - mean) * (b - mean).transpose();
  cov /= double(betas.size() - 1);
  const ScaledLogitNormal baseline{mean, cov.llt().matrixL(), {}};
  double base_lp = 0;
  for (const auto& t : held.truths) base_lp += log_prob(baseline, t);
  const double net_lp = -pretrain_batch_loss(res.weights, dataset_inputs(held, 0, held.size()), held.truths, nullptr) *
                        double(held.size());
  EXPECT_GT(net_lp, base_lp);
}

TEST(Finetuning, ImprovesValidationElboAndIsDeterministic) {
  const Scene s = make_scene({12, 12, 2}, 60, 14);
  const auto ds = generate_dataset(2000, PopulationPrior::normal(), model2(), NoiseProfile::flat(11), 1);
  NetworkConfig nc;
  nc.width = 8;
  const auto theta = run_pretraining(nc, small_pretrain(5), ds).weights;
  TrainingConfig tc = TrainingConfig::finetune_defaults();
  tc.iterations = 30;
  tc.batch_size = 2;
  tc.crop_xy = 8;
  tc.seed = 6;
  NetworkConfig gated = nc;
  gated.spatial_mode = SpatialMode::gated_residual;
  const auto a = run_finetuning(theta, gated, tc, {s.vol}, model2());
  const auto b = run_finetuning(theta, gated, tc, {s.vol}, model2());
  EXPECT_EQ(a.weights.values, b.weights.values);
  EXPECT_LT(a.final_validation_loss, a.initial_validation_loss);
  for (const auto& m : a.metrics) EXPECT_NEAR(m.loss, m.kl + m.nll + tc.tv_lambda * m.tv, 1e-8);
  NetworkConfig diag = gated;
  diag.covariance_mode = CovarianceMode::diagonal;
  EXPECT_THROW(run_finetuning(theta, diag, tc, {s.vol}, model2()), Error);
}

TEST(Finetuning, ThreadCountDoesNotChangeResult) {
  const Scene s = make_scene({10, 10, 2}, 60, 15);
  TrainingConfig tc = TrainingConfig::finetune_defaults();
  tc.iterations = 3;
  tc.batch_size = 3;
  tc.crop_xy = 6;
  const auto a = run_finetuning(s.theta, s.theta.config, tc, {s.vol}, model2());
  tc.threads = 3;
  const auto b = run_finetuning(s.theta, s.theta.config, tc, {s.vol}, model2());
  EXPECT_EQ(a.weights.values, b.weights.values);
}

TEST(Metrics, CsvHeader) {
  const std::string path = (std::filesystem::temp_directory_path() / "qbvi_metrics.csv").string();
  write_metrics_csv({{0, 1.5, 0.5, 1.0, 0.0, 2e-3}}, path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "step,loss,kl,nll,tv,lr");
  EXPECT_EQ(row, "0,1.5,0.5,1,0,0.002");
}

}  // namespace
}  // namespace qbvi
