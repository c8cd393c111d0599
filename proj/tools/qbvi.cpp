// qbvi command-line interface: simulate, pretrain, finetune, infer, wls,
// stats, compare. Failures print one line "error: <code>: <message>".

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "qbvi/analysis.hpp"
#include "qbvi/config.hpp"
#include "qbvi/nifti.hpp"

namespace {

using namespace qbvi;

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

RunConfig load(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_config(g.config);
  c.validate();
  c.pretrain.seed = c.finetune.seed = g.seed;
  c.pretrain.threads = c.finetune.threads = g.threads;
  return c;
}

ForwardModel make_model(const RunConfig& c) { return ForwardModel(c.protocol, c.constants, c.forward); }

// Reads a raw volume, applies an optional mask and normalizes it.
Volume4D load_volume(const std::string& path, const std::string& mask_path, const RunConfig& c) {
  Volume4D vol = read_volume(path);
  if (!mask_path.empty()) vol.mask = read_mask(mask_path, vol.grid);
  const std::size_t dropped = normalize_volume(vol, c.protocol);
  if (dropped) std::cerr << path << ": " << dropped << " voxels with non-positive samples left out of the mask\n";
  vol.validate();
  return vol;
}

Map3D mask_map(const Grid& g, const std::vector<std::uint8_t>& mask) {
  Map3D m(g);
  for (std::size_t v = 0; v < mask.size(); ++v) m[v] = mask[v];
  return m;
}

void write_maps(const ParamMaps& m, const std::string& prefix) {
  write_map(m.oef, m.voxel_mm, prefix + "_oef.nii");
  write_map(m.dbv, m.voxel_mm, prefix + "_dbv.nii");
  write_map(m.r2p, m.voxel_mm, prefix + "_r2p.nii");
  write_map(m.oef_std, m.voxel_mm, prefix + "_oef_std.nii");
  write_map(m.dbv_std, m.voxel_mm, prefix + "_dbv_std.nii");
  if (m.source != MapSource::wls) {
    write_map(m.oef_mean, m.voxel_mm, prefix + "_oef_mean.nii");
    write_map(m.dbv_mean, m.voxel_mm, prefix + "_dbv_mean.nii");
    write_map(m.elbo, m.voxel_mm, prefix + "_elbo.nii");
  }
}

void write_metrics(const std::vector<MetricsRow>& rows, const std::string& path) {
  if (!path.empty()) write_metrics_csv(rows, path);
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

// --- subcommands ----------------------------------------------------------

struct SimulateArgs {
  std::string dataset, phantom, mask, truth_prefix, artifact_mask, population;
  std::size_t rows = 0;
};

void cmd_simulate(const Globals& g, const SimulateArgs& a) {
  RunConfig c = load(g);
  if (a.rows) c.simulate.n_rows = a.rows;
  if (!a.population.empty()) c.simulate.population = a.population;
  const ForwardModel model = make_model(c);
  const SynthDataset ds =
      generate_dataset(c.simulate.n_rows, c.simulate.prior(), model, c.simulate.noise, mix_seed(g.seed, 11), g.threads);
  write_dataset(ds, a.dataset);
  std::cout << "dataset " << a.dataset << " rows " << ds.size() << " rejected " << ds.rejected << "\n";
  if (a.phantom.empty()) return;
  Phantom ph = make_phantom(c.simulate.phantom_cfg, model, c.simulate.noise, mix_seed(g.seed, 12));
  std::vector<std::size_t> hit;
  if (c.simulate.artifact_fraction > 0)
    hit = inject_artifacts(ph.raw, c.simulate.artifact_fraction, c.simulate.artifact_amplitude, mix_seed(g.seed, 13),
                             c.protocol.se_index);
  write_volume(ph.raw, a.phantom);
  if (!a.mask.empty()) write_map(mask_map(ph.raw.grid, ph.raw.mask), ph.raw.voxel_mm, a.mask);
  if (!a.truth_prefix.empty()) {
    write_map(ph.oef, ph.raw.voxel_mm, a.truth_prefix + "_oef.nii");
    write_map(ph.dbv, ph.raw.voxel_mm, a.truth_prefix + "_dbv.nii");
  }
  if (!a.artifact_mask.empty()) {
    std::vector<std::uint8_t> m(ph.raw.voxels(), 0);
    for (std::size_t v : hit) m[v] = 1;
    write_map(mask_map(ph.raw.grid, m), ph.raw.voxel_mm, a.artifact_mask);
  }
  std::cout << "phantom " << a.phantom << " voxels " << ph.raw.masked_count() << " artifacts " << hit.size() << "\n";
}

struct PretrainArgs {
  std::string dataset, out, metrics;
  long iterations = -1;
};

void cmd_pretrain(const Globals& g, const PretrainArgs& a) {
  RunConfig c = load(g);
  if (a.iterations >= 0) c.pretrain.iterations = a.iterations;
  const SynthDataset ds = read_dataset(a.dataset);
  require(ds.nt == c.protocol.size(), "volume.protocol", "dataset does not match the configured protocol");
  const PretrainResult r = run_pretraining(c.network, c.pretrain, ds);
  save_checkpoint(r.weights, a.out);
  write_metrics(r.metrics, a.metrics);
  std::cout << "validation loss " << fmt(r.initial_validation_loss) << " -> " << fmt(r.final_validation_loss) << "\n";
}

struct FinetuneArgs {
  std::string prior, out, metrics, spatial_mode;
  std::vector<std::string> volumes, masks;
  long iterations = -1;
  double tv_lambda = -1;
};

void cmd_finetune(const Globals& g, const FinetuneArgs& a) {
  RunConfig c = load(g);
  if (a.iterations >= 0) c.finetune.iterations = a.iterations;
  if (a.tv_lambda >= 0) c.finetune.tv_lambda = a.tv_lambda;
  require(a.masks.empty() || a.masks.size() == a.volumes.size(), "cli.args",
          "give either no --mask or one per --volume");
  const EncoderWeights theta = load_checkpoint(a.prior);
  NetworkConfig net = c.network;
  net.n_blocks = theta.config.n_blocks;
  net.width = theta.config.width;
  net.covariance_mode = theta.config.covariance_mode;
  if (!a.spatial_mode.empty())
    net.spatial_mode = a.spatial_mode == "voxelwise" ? SpatialMode::voxelwise : SpatialMode::gated_residual;
  std::vector<Volume4D> vols;
  for (std::size_t i = 0; i < a.volumes.size(); ++i)
    vols.push_back(load_volume(a.volumes[i], a.masks.empty() ? "" : a.masks[i], c));
  const ForwardModel model = make_model(c);
  const FinetuneResult r = run_finetuning(theta, net, c.finetune, vols, model);
  save_checkpoint(r.weights, a.out);
  write_metrics(r.metrics, a.metrics);
  std::cout << "validation negative ELBO " << fmt(r.initial_validation_loss) << " -> " << fmt(r.final_validation_loss)
            << "\n";
}

struct InferArgs {
  std::string weights, prior, volume, mask, prefix, source;
};

void cmd_infer(const Globals& g, const InferArgs& a) {
  const RunConfig c = load(g);
  const EncoderWeights psi = load_checkpoint(a.weights);
  const Volume4D vol = load_volume(a.volume, a.mask, c);
  const ForwardModel model = make_model(c);
  InferenceConfig ic;
  ic.n_std_samples = c.inference.n_std_samples;
  ic.elbo = {c.inference.n_elbo_samples, c.finetune.kl_mode, c.finetune.noise_floor};
  ic.seed = g.seed;
  ic.threads = g.threads;
  ic.source = a.prior.empty() ? MapSource::synth : MapSource::vi;
  if (!a.source.empty()) ic.source = a.source == "synth" ? MapSource::synth : a.source == "vi" ? MapSource::vi : MapSource::vi_tv;
  PriorMaps prior;
  if (!a.prior.empty()) prior = compute_prior_maps(load_checkpoint(a.prior), vol);
  require(!a.prior.empty() || psi.config.spatial_mode == SpatialMode::voxelwise, "cli.args",
          "a gated-residual network needs --prior for its ELBO map");
  const ParamMaps maps = infer_maps(psi, vol, model, a.prior.empty() ? nullptr : &prior, ic);
  write_maps(maps, a.prefix);
  std::cout << "source " << to_string(maps.source) << " voxels " << vol.masked_count() << " mean ELBO "
            << fmt(maps.mean_elbo) << "\n";
}

struct WlsArgs {
  std::string volume, mask, prefix;
};

void cmd_wls(const Globals& g, const WlsArgs& a) {
  const RunConfig c = load(g);
  const Volume4D vol = load_volume(a.volume, a.mask, c);
  const ParamMaps maps = wls_fit(vol, c.protocol, c.constants, c.wls);
  write_maps(maps, a.prefix);
  std::cout << "voxels " << vol.masked_count() << " flagged " << maps.flagged << "\n";
}

// Maps written by infer/wls; the mask is where r2p is finite.
ParamMaps read_maps(const std::string& prefix) {
  std::array<double, 3> mm{};
  const Map3D r2p = read_map(prefix + "_r2p.nii", &mm);
  std::vector<std::uint8_t> mask(r2p.values.size());
  for (std::size_t v = 0; v < mask.size(); ++v) mask[v] = std::isfinite(r2p[v]);
  ParamMaps m(r2p.grid, mask, MapSource::vi);
  m.voxel_mm = mm;
  m.r2p = r2p;
  m.oef = read_map(prefix + "_oef.nii");
  m.dbv = read_map(prefix + "_dbv.nii");
  if (std::ifstream(prefix + "_elbo.nii")) m.elbo = read_map(prefix + "_elbo.nii");
  for (const Map3D* x : {&m.oef, &m.dbv, &m.elbo})
    require(x->grid == m.grid, "nifti.dims", prefix + ": maps are not on a common grid");
  return m;
}

struct StatsArgs {
  std::string prefix, region, out;
};

void cmd_stats(const Globals& g, const StatsArgs& a) {
  (void)load(g);
  const ParamMaps m = read_maps(a.prefix);
  const RegionStats st = region_stats(m, read_mask(a.region, m.grid));
  std::string table = "parameter\tmean\tstd\tn\n";
  const std::pair<const char*, SummaryStat> rows[] = {{"oef", st.oef}, {"dbv", st.dbv}, {"r2p", st.r2p}, {"elbo", st.elbo}};
  for (const auto& [name, s] : rows)
    table += std::string(name) + "\t" + fmt(s.mean) + "\t" + fmt(s.stdev) + "\t" + std::to_string(s.n) + "\n";
  std::cout << table;
  if (!a.out.empty()) {
    std::ofstream out(a.out);
    if (!(out << table)) throw Error("io.write", "cannot write " + a.out);
  }
}

struct CompareArgs {
  std::vector<std::string> a, b;
  std::string param = "oef", out;
  double fwhm = -1;
};

void cmd_compare(const Globals& g, const CompareArgs& a) {
  const RunConfig c = load(g);
  const double fwhm = a.fwhm >= 0 ? a.fwhm : c.stats.fwhm_mm;
  std::array<double, 3> mm{};
  auto read_all = [&](const std::vector<std::string>& prefixes) {
    std::vector<Map3D> maps;
    for (const auto& p : prefixes) maps.push_back(read_map(p + "_" + a.param + ".nii", &mm));
    return maps;
  };
  const auto ma = read_all(a.a), mb = read_all(a.b);
  const Map3D t = paired_tstat(ma, mb, fwhm, mm[0], mm[1]);
  write_map(t, mm, a.out);
  std::cout << "subjects " << ma.size() << " fwhm_mm " << fmt(fwhm) << " -> " << a.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qBOLD variational inference toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--seed", g.seed, "run seed");
  app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "synthetic training rows and an optional phantom volume");
  sim->add_option("--dataset", sa.dataset, "output dataset file")->required();
  sim->add_option("--phantom", sa.phantom, "output phantom NIfTI (raw signals)");
  sim->add_option("--mask", sa.mask, "output phantom mask NIfTI");
  sim->add_option("--truth", sa.truth_prefix, "output prefix for true OEF/DBV maps");
  sim->add_option("--artifact-mask", sa.artifact_mask, "output mask of artifact voxels");
  sim->add_option("--rows", sa.rows, "number of rows (overrides config)");
  sim->add_option("--population", sa.population, "normal | wide | narrow | uniform | custom");

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "supervised training on a synthetic dataset");
  pre->add_option("--dataset", pa.dataset, "dataset file")->required();
  pre->add_option("--out", pa.out, "output checkpoint")->required();
  pre->add_option("--metrics", pa.metrics, "metrics CSV");
  pre->add_option("--iterations", pa.iterations, "iterations (overrides config)");

  FinetuneArgs fa;
  auto* fin = app.add_subcommand("finetune", "ELBO fine-tuning on image volumes");
  fin->add_option("--prior", fa.prior, "pretrained checkpoint")->required();
  fin->add_option("--volume", fa.volumes, "raw 4-D NIfTI (repeatable)")->required();
  fin->add_option("--mask", fa.masks, "mask NIfTI, one per volume (repeatable)");
  fin->add_option("--out", fa.out, "output checkpoint")->required();
  fin->add_option("--metrics", fa.metrics, "metrics CSV");
  fin->add_option("--iterations", fa.iterations, "iterations (overrides config)");
  fin->add_option("--tv-lambda", fa.tv_lambda, "TV weight (overrides config)");
  fin->add_option("--spatial-mode", fa.spatial_mode, "voxelwise | gated-residual")
      ->check(CLI::IsMember({"voxelwise", "gated-residual"}));

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "parameter, uncertainty and ELBO maps");
  inf->add_option("--weights", ia.weights, "checkpoint")->required();
  inf->add_option("--prior", ia.prior, "prior checkpoint for the ELBO map");
  inf->add_option("--volume", ia.volume, "raw 4-D NIfTI")->required();
  inf->add_option("--mask", ia.mask, "mask NIfTI");
  inf->add_option("--out", ia.prefix, "output prefix")->required();
  inf->add_option("--source", ia.source, "synth | vi | vi+tv")->check(CLI::IsMember({"synth", "vi", "vi+tv"}));

  WlsArgs wa;
  auto* wls = app.add_subcommand("wls", "weighted least squares baseline maps");
  wls->add_option("--volume", wa.volume, "raw 4-D NIfTI")->required();
  wls->add_option("--mask", wa.mask, "mask NIfTI");
  wls->add_option("--out", wa.prefix, "output prefix")->required();

  StatsArgs ta;
  auto* sts = app.add_subcommand("stats", "region mean and std of a map set");
  sts->add_option("--maps", ta.prefix, "map prefix written by infer or wls")->required();
  sts->add_option("--region", ta.region, "region mask NIfTI")->required();
  sts->add_option("--out", ta.out, "output TSV");

  CompareArgs ca;
  auto* cmp = app.add_subcommand("compare", "voxelwise paired t-statistics between two map sets");
  cmp->add_option("--a", ca.a, "map prefixes, condition A")->required();
  cmp->add_option("--b", ca.b, "map prefixes, condition B")->required();
  cmp->add_option("--param", ca.param, "oef | dbv | r2p")->check(CLI::IsMember({"oef", "dbv", "r2p"}));
  cmp->add_option("--out", ca.out, "output t-map NIfTI")->required();
  cmp->add_option("--fwhm", ca.fwhm, "smoothing FWHM in mm (overrides config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: cli.usage: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (*sim) cmd_simulate(g, sa);
    else if (*pre) cmd_pretrain(g, pa);
    else if (*fin) cmd_finetune(g, fa);
    else if (*inf) cmd_infer(g, ia);
    else if (*wls) cmd_wls(g, wa);
    else if (*sts) cmd_stats(g, ta);
    else if (*cmp) cmd_compare(g, ca);
  } catch (const qbvi::Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
