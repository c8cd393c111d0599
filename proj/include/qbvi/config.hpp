#pragma once

// Run configuration as JSON. Every section is optional; absent keys keep
// their defaults, unknown keys are rejected.

#include <exception>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>

#include "json.hpp"

#include "qbvi/analysis.hpp"

namespace qbvi {

using Json = nlohmann::ordered_json;

struct SimulateSettings {
  std::size_t n_rows = 200000;
  std::string population = "normal";  // normal | wide | narrow | uniform | custom
  PopulationPrior custom = PopulationPrior::normal();
  NoiseProfile noise = NoiseProfile::flat(11);
  bool phantom = true;
  PhantomConfig phantom_cfg{};
  double artifact_fraction = 0.0;
  double artifact_amplitude = 0.3;

  PopulationPrior prior() const { return population == "custom" ? custom : PopulationPrior::named(population); }
};

struct InferenceSettings {
  std::size_t n_std_samples = 256;
  int n_elbo_samples = 4;
};

struct StatsSettings {
  double fwhm_mm = 6.0;
};

struct RunConfig {
  AcquisitionProtocol protocol = AcquisitionProtocol::standard();
  PhysioConstants constants{};
  ForwardModelConfig forward{};
  NetworkConfig network{};
  TrainingConfig pretrain = TrainingConfig::pretrain_defaults();
  TrainingConfig finetune = TrainingConfig::finetune_defaults();
  SimulateSettings simulate{};
  InferenceSettings inference{};
  WlsConfig wls{};
  StatsSettings stats{};

  // Cross-field checks.
  void validate() const {
    protocol.validate();
    constants.validate();
    forward.validate();
    network.validate();
    pretrain.validate();
    finetune.validate();
    simulate.prior().validate();
    simulate.noise.validate(protocol);
    require(simulate.n_rows >= 1, "config.simulate", "n_rows must be positive");
    require(simulate.artifact_fraction >= 0 && simulate.artifact_fraction <= 1, "config.simulate",
            "artifact_fraction must lie in [0, 1]");
    require(simulate.artifact_amplitude > 0, "config.simulate", "artifact_amplitude must be positive");
    require(inference.n_std_samples >= 2 && inference.n_elbo_samples >= 1, "config.inference",
            "n_std_samples must be >= 2 and n_elbo_samples >= 1");
    require(stats.fwhm_mm >= 0, "config.stats", "fwhm_mm must be non-negative");
    require(wls.tau_min > 0, "config.wls", "tau_min must be positive");
  }
};

namespace detail {

template <class E>
struct EnumNames;

#define QBVI_ENUM_NAMES(E, ...)                                                           \
  template <>                                                                             \
  struct EnumNames<E> {                                                                   \
    static constexpr std::pair<E, const char*> table[] = {__VA_ARGS__};                  \
  };

QBVI_ENUM_NAMES(ModelVariant, {ModelVariant::full, "full"}, {ModelVariant::asymptotic, "asymptotic"})
QBVI_ENUM_NAMES(TransitionMode, {TransitionMode::one_point_five, "1.5"}, {TransitionMode::one, "1"})
QBVI_ENUM_NAMES(SpatialMode, {SpatialMode::voxelwise, "voxelwise"}, {SpatialMode::gated_residual, "gated-residual"})
QBVI_ENUM_NAMES(CovarianceMode, {CovarianceMode::diagonal, "diagonal"}, {CovarianceMode::full, "full"})
QBVI_ENUM_NAMES(GateScope, {GateScope::scalar, "scalar"}, {GateScope::voxelwise, "voxelwise"})
QBVI_ENUM_NAMES(KlMode, {KlMode::analytic, "analytic"}, {KlMode::sampled, "sampled"})
QBVI_ENUM_NAMES(PriorKind, {PriorKind::truncated_normal, "truncated-normal"}, {PriorKind::uniform, "uniform"})
QBVI_ENUM_NAMES(PhantomPattern, {PhantomPattern::constant, "constant"}, {PhantomPattern::quadrants, "quadrants"},
                {PhantomPattern::smooth, "smooth"})
#undef QBVI_ENUM_NAMES

template <class E>
std::string enum_name(E e) {
  for (const auto& [v, n] : EnumNames<E>::table)
    if (v == e) return n;
  return "?";
}

template <class E>
E enum_value(const Json& j, const std::string& key) {
  const std::string s = j.get<std::string>();
  std::string options;
  for (const auto& [v, n] : EnumNames<E>::table) {
    if (s == n) return v;
    options += std::string(options.empty() ? "" : ", ") + n;
  }
  throw Error("config.value", key + ": '" + s + "' is not one of {" + options + "}");
}

// Reads object members into fields, rejecting keys with no binding.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw Error("config.type", where_ + " must be an object");
  }
  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw Error("config.unknown_key", "unknown key " + where_ + "." + k);
  }

  template <class T>
  void field(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string path = where_ + "." + key;
    try {
      if constexpr (std::is_enum_v<T>)
        out = enum_value<T>(*it, path);
      else
        out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw Error("config.type", path + ": " + e.what());
    }
  }

  template <class F>
  void object(const char* key, F&& read) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) read(*it, where_ + "." + key);
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json to_json(const TrainingConfig& c) {
  using detail::enum_name;
  return {{"iterations", c.iterations},     {"batch_size", c.batch_size},
          {"lr", c.lr},                     {"weight_decay", c.weight_decay},
          {"lr_final_factor", c.lr_final_factor},
          {"n_samples_elbo", c.n_samples_elbo},
          {"tv_lambda", c.tv_lambda},       {"crop_xy", c.crop_xy},
          {"swa_enabled", c.swa_enabled},   {"swa_start", c.swa_start},
          {"validation_fraction", c.validation_fraction},
          {"kl_mode", enum_name(c.kl_mode)}, {"noise_floor", c.noise_floor}};
}

inline Json to_json(const ParamPriorConfig& c) {
  return {{"kind", detail::enum_name(c.kind)}, {"mean", c.mean}, {"std", c.std}, {"low", c.low}, {"high", c.high}};
}

inline Json to_json(const RunConfig& c) {
  using detail::enum_name;
  Json j;
  j["protocol"] = {{"tau", c.protocol.tau}, {"te", c.protocol.te}, {"tr", c.protocol.tr},
                   {"ti", c.protocol.ti},   {"b0", c.protocol.b0}, {"se_index", c.protocol.se_index}};
  const auto& k = c.constants;
  j["constants"] = {{"hct", k.hct}, {"dchi0", k.dchi0}, {"gamma", k.gamma}, {"r2t", k.r2t}, {"nb", k.nb},
                    {"t1b", k.t1b}, {"rb", k.rb},       {"db", k.db},       {"r2b", k.r2b}};
  j["forward"] = {{"variant", enum_name(c.forward.variant)}, {"compartments", c.forward.compartments},
                  {"tc_mode", enum_name(c.forward.tc_mode)},  {"n_intervals", c.forward.n_intervals},
                  {"tabulate", c.forward.tabulate}};
  j["network"] = {{"n_blocks", c.network.n_blocks},
                  {"width", c.network.width},
                  {"spatial_mode", enum_name(c.network.spatial_mode)},
                  {"covariance_mode", enum_name(c.network.covariance_mode)},
                  {"gate_offset", c.network.gate_offset},
                  {"gate_scope", enum_name(c.network.gate_scope)}};
  j["pretrain"] = to_json(c.pretrain);
  j["finetune"] = to_json(c.finetune);
  const auto& s = c.simulate;
  const auto& p = s.phantom_cfg;
  j["simulate"] = {
      {"n_rows", s.n_rows},
      {"population", s.population},
      {"custom", {{"oef", to_json(s.custom.oef)}, {"dbv", to_json(s.custom.dbv)}}},
      {"noise", {{"rel_sigma", s.noise.rel_sigma}, {"snr_low", s.noise.snr_low}, {"snr_high", s.noise.snr_high}}},
      {"phantom", s.phantom},
      {"phantom_cfg",
       {{"grid", {p.grid.nx, p.grid.ny, p.grid.nz}},
        {"voxel_mm", p.voxel_mm},
        {"pattern", enum_name(p.pattern)},
        {"oef", p.base.oef},
        {"dbv", p.base.dbv},
        {"snr", p.snr},
        {"s0", p.s0},
        {"elliptical_mask", p.elliptical_mask}}},
      {"artifact_fraction", s.artifact_fraction},
      {"artifact_amplitude", s.artifact_amplitude}};
  j["inference"] = {{"n_std_samples", c.inference.n_std_samples}, {"n_elbo_samples", c.inference.n_elbo_samples}};
  j["wls"] = {{"tau_min", c.wls.tau_min}, {"weighted", c.wls.weighted}};
  j["stats"] = {{"fwhm_mm", c.stats.fwhm_mm}};
  return j;
}

namespace detail {

inline void read_training(const Json& j, const std::string& where, TrainingConfig& c) {
  ObjectReader r(j, where);
  r.field("iterations", c.iterations);
  r.field("batch_size", c.batch_size);
  r.field("lr", c.lr);
  r.field("weight_decay", c.weight_decay);
  r.field("lr_final_factor", c.lr_final_factor);
  r.field("n_samples_elbo", c.n_samples_elbo);
  r.field("tv_lambda", c.tv_lambda);
  r.field("crop_xy", c.crop_xy);
  r.field("swa_enabled", c.swa_enabled);
  r.field("swa_start", c.swa_start);
  r.field("validation_fraction", c.validation_fraction);
  r.field("kl_mode", c.kl_mode);
  r.field("noise_floor", c.noise_floor);
}

inline void read_param_prior(const Json& j, const std::string& where, ParamPriorConfig& c) {
  ObjectReader r(j, where);
  r.field("kind", c.kind);
  r.field("mean", c.mean);
  r.field("std", c.std);
  r.field("low", c.low);
  r.field("high", c.high);
}

}  // namespace detail

inline RunConfig config_from_json(const Json& j) {
  RunConfig c;
  detail::ObjectReader root(j, "config");
  root.object("protocol", [&](const Json& o, const std::string& w) {
    detail::ObjectReader r(o, w);
    r.field("tau", c.protocol.tau);
    r.field("te", c.protocol.te);
    r.field("tr", c.protocol.tr);
    r.field("ti", c.protocol.ti);
    r.field("b0", c.protocol.b0);
    r.field("se_index", c.protocol.se_index);
  });
  root.object("constants", [&](const Json& o, const std::string& w) {
    detail::ObjectReader r(o, w);
    auto& k = c.constants;
    r.field("hct", k.hct);
    r.field("dchi0", k.dchi0);
    r.field("gamma", k.gamma);
    r.field("r2t", k.r2t);
    r.field("nb", k.nb);
    r.field("t1b", k.t1b);
    r.field("rb", k.rb);
    r.field("db", k.db);
    r.field("r2b", k.r2b);
  });
  root.object("forward", [&](const Json& o, const std::string& w) {
    detail::ObjectReader r(o, w);
    r.field("variant", c.forward.variant);
    r.field("compartments", c.forward.compartments);
    r.field("tc_mode", c.forward.tc_mode);
    r.field("n_intervals", c.forward.n_intervals);
    r.field("tabulate", c.forward.tabulate);
  });
  root.object("network", [&](const Json& o, const std::string& w) {
    detail::ObjectReader r(o, w);
    r.field("n_blocks", c.network.n_blocks);
    r.field("width", c.network.width);
    r.field("spatial_mode", c.network.spatial_mode);
    r.field("covariance_mode", c.network.covariance_mode);
    r.field("gate_offset", c.network.gate_offset);
    r.field("gate_scope", c.network.gate_scope);
  });
  root.object("pretrain", [&](const Json& o, const std::string& w) { detail::read_training(o, w, c.pretrain); });
  root.object("finetune", [&](const Json& o, const std::string& w) { detail::read_training(o, w, c.finetune); });
  root.object("simulate", [&](const Json& o, const std::string& w) {
    detail::ObjectReader r(o, w);
    auto& s = c.simulate;
    r.field("n_rows", s.n_rows);
    r.field("population", s.population);
    r.object("custom", [&](const Json& oc, const std::string& wc) {
      detail::ObjectReader rc(oc, wc);
      rc.object("oef", [&](const Json& x, const std::string& wx) { detail::read_param_prior(x, wx, s.custom.oef); });
      rc.object("dbv", [&](const Json& x, const std::string& wx) { detail::read_param_prior(x, wx, s.custom.dbv); });
    });
    r.object("noise", [&](const Json& on, const std::string& wn) {
      detail::ObjectReader rn(on, wn);
      rn.field("rel_sigma", s.noise.rel_sigma);
      rn.field("snr_low", s.noise.snr_low);
      rn.field("snr_high", s.noise.snr_high);
    });
    r.field("phantom", s.phantom);
    r.object("phantom_cfg", [&](const Json& op, const std::string& wp) {
      detail::ObjectReader rp(op, wp);
      auto& p = s.phantom_cfg;
      std::array<std::size_t, 3> grid{p.grid.nx, p.grid.ny, p.grid.nz};
      rp.field("grid", grid);
      p.grid = {grid[0], grid[1], grid[2]};
      rp.field("voxel_mm", p.voxel_mm);
      rp.field("pattern", p.pattern);
      rp.field("oef", p.base.oef);
      rp.field("dbv", p.base.dbv);
      rp.field("snr", p.snr);
      rp.field("s0", p.s0);
      rp.field("elliptical_mask", p.elliptical_mask);
    });
    r.field("artifact_fraction", s.artifact_fraction);
    r.field("artifact_amplitude", s.artifact_amplitude);
  });
  root.object("inference", [&](const Json& o, const std::string& w) {
    detail::ObjectReader r(o, w);
    r.field("n_std_samples", c.inference.n_std_samples);
    r.field("n_elbo_samples", c.inference.n_elbo_samples);
  });
  root.object("wls", [&](const Json& o, const std::string& w) {
    detail::ObjectReader r(o, w);
    r.field("tau_min", c.wls.tau_min);
    r.field("weighted", c.wls.weighted);
  });
  root.object("stats", [&](const Json& o, const std::string& w) {
    detail::ObjectReader r(o, w);
    r.field("fwhm_mm", c.stats.fwhm_mm);
  });
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("config.parse", e.what());
  }
  RunConfig c = config_from_json(j);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config.open", "cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

inline std::string serialize_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace qbvi
