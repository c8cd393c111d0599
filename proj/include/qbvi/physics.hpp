#pragma once

// qBOLD asymmetric-spin-echo signal models.
//
// The tissue compartment follows the static-dephasing model: the signal at
// spin-echo displacement tau is exp(-R2t*TE) * exp(-DBV * I(dw*|tau|)) where
// I is the dephasing integral and dw the characteristic frequency. The
// asymptotic variant replaces I by its short/long-time limits. An optional
// intravascular compartment mixes in a venous blood signal weighted by the
// apparent blood volume m_b * n_b * DBV.

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "qbvi/error.hpp"

namespace qbvi {

using SignalVector = std::vector<double>;

struct PhysioConstants {
  double hct = 0.34;       // fractional haematocrit
  double dchi0 = 2.64e-7;  // susceptibility difference, oxy/deoxy red cells
  double gamma = 2.675e8;  // proton gyromagnetic ratio, rad s^-1 T^-1
  double r2t = 11.5;       // tissue R2, s^-1
  double nb = 0.775;       // relative spin density of blood
  double t1b = 1.58;       // blood T1, s
  double rb = 2.6;         // red cell radius, um
  double db = 2.0;         // red cell diffusion rate, um^2 ms^-1
  double r2b = 31.1;       // blood R2, s^-1 (external assumption, see README)

  // Characteristic diffusion time rb^2/Db in seconds.
  double diffusion_time() const { return rb * rb / db * 1e-3; }

  void validate() const {
    require(hct > 0.0 && hct < 1.0, "config.constants", "hct must lie in (0, 1)");
    require(nb > 0.0 && nb < 1.0, "config.constants", "nb must lie in (0, 1)");
    require(dchi0 > 0.0 && gamma > 0.0 && r2t > 0.0 && t1b > 0.0 && rb > 0.0 && db > 0.0 &&
                r2b > 0.0,
            "config.constants", "physiological constants must be strictly positive");
  }
};

struct AcquisitionProtocol {
  std::vector<double> tau;  // spin-echo displacements, s
  double te = 0.074;        // echo time, s
  double tr = 3.0;          // repetition time, s
  double ti = 1.21;         // FLAIR inversion time, s
  double b0 = 3.0;          // field strength, T
  std::size_t se_index = 0; // position of tau == 0

  // 11 displacements from -16 ms to 64 ms in 8 ms steps.
  static AcquisitionProtocol standard() {
    AcquisitionProtocol p;
    for (int k = -2; k <= 8; ++k) p.tau.push_back(0.008 * k);
    p.tau[2] = 0.0;
    p.se_index = 2;
    return p;
  }

  std::size_t size() const { return tau.size(); }

  double max_abs_tau() const {
    double m = 0.0;
    for (double t : tau) m = std::max(m, std::abs(t));
    return m;
  }

  void validate() const {
    require(!tau.empty(), "config.protocol", "tau schedule is empty");
    require(se_index < tau.size() && tau[se_index] == 0.0, "config.protocol",
            "se_index must point at the tau == 0 entry");
    std::size_t zeros = 0;
    for (double t : tau) zeros += (t == 0.0);
    require(zeros == 1, "config.protocol", "tau schedule must contain exactly one zero");
    require(te > 0.0 && tr > 0.0 && ti > 0.0 && b0 > 0.0, "config.protocol",
            "te, tr, ti and b0 must be positive");
    require(ti < tr, "config.protocol", "ti must be shorter than tr");
  }
};

struct TissueParams {
  double oef = 0.0;
  double dbv = 0.0;
};

enum class ModelVariant { full, asymptotic };

// Position of the short/long regime boundary: t_c = factor / dw.
enum class TransitionMode { one_point_five, one };

inline double transition_factor(TransitionMode mode) {
  return mode == TransitionMode::one_point_five ? 1.5 : 1.0;
}

struct ForwardModelConfig {
  ModelVariant variant = ModelVariant::full;
  int compartments = 2;
  TransitionMode tc_mode = TransitionMode::one_point_five;
  int n_intervals = 64;
  // Interpolate the dephasing integral from a table of quadrature values
  // (ForwardModel only). Agrees with direct quadrature to ~1e-10.
  bool tabulate = true;

  void validate() const {
    require(compartments == 1 || compartments == 2, "config.forward",
            "compartments must be 1 or 2");
    require(n_intervals >= 2 && n_intervals % 2 == 0, "config.forward",
            "n_intervals must be even and >= 2");
  }
};

// dw = gamma * (4/3) * pi * dchi0 * Hct * OEF * B0
inline double delta_omega(double oef, const PhysioConstants& c, double b0) {
  return c.gamma * (4.0 / 3.0) * std::numbers::pi * c.dchi0 * c.hct * oef * b0;
}

inline double r2_prime(const TissueParams& p, const PhysioConstants& c, double b0) {
  return p.dbv * delta_omega(p.oef, c, b0);
}

// Returns +inf for dw == 0: no transition, every tau is in the short regime.
inline double characteristic_time(double dw, TransitionMode mode) {
  if (dw <= 0.0) return std::numeric_limits<double>::infinity();
  return transition_factor(mode) / dw;
}

struct IntegralValue {
  double value = 0.0;
  double slope = 0.0;  // d value / d x
};

namespace detail {

// 1 - J0(y), accurate for small y where the direct difference cancels.
inline double one_minus_j0(double y) {
  if (y < 0.05) {
    const double q = 0.25 * y * y;
    return q * (1.0 - 0.25 * q * (1.0 - q / 9.0));
  }
  return 1.0 - ::j0(y);
}

// J1(y) / y, finite at y = 0.
inline double j1_over_y(double y) {
  if (y < 0.05) {
    const double q = 0.25 * y * y;
    return 0.5 * (1.0 - 0.5 * q * (1.0 - q / 6.0));
  }
  return ::j1(y) / y;
}

}  // namespace detail

// Static dephasing integral
//   I(x) = int_0^1 (2+u) sqrt(1-u) / (3 u^2) * (1 - J0(1.5 x u)) du
// and its derivative in x, by composite Simpson's rule on n equal intervals.
// The square-root endpoint is removed with u = 1 - v^2 so the integrand is
// smooth in v; the u -> 0 end (v = 1) uses the analytic limits
// (3/8) x^2 -> 0.75 x^2 in v, and 0.75 x -> 1.5 x for the derivative.
inline IntegralValue dephasing_integral(double x, int n_intervals) {
  x = std::abs(x);
  if (x == 0.0) return {};
  const double h = 1.0 / n_intervals;
  const double a = 1.5 * x;
  double sum_value = 0.0;
  double sum_slope = 0.0;
  for (int i = 0; i <= n_intervals; ++i) {
    double f = 0.0;
    double g = 0.0;
    if (i == n_intervals) {
      f = 0.75 * x * x;
      g = 1.5 * x;
    } else if (i > 0) {
      const double v = i * h;
      const double w = 1.0 - v * v;  // u
      const double y = a * w;
      // 2 v^2 (2+w) / (3 w^2) * (1 - J0(y))
      f = 2.0 * v * v * (2.0 + w) / (3.0 * w * w) * detail::one_minus_j0(y);
      // d/dx: 2 v^2 (2+w) / (3 w^2) * J1(y) * 1.5 w  =  v^2 (2+w) * a * J1(y)/y
      g = v * v * (2.0 + w) * a * detail::j1_over_y(y);
    }
    const double weight = (i == 0 || i == n_intervals) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    sum_value += weight * f;
    sum_slope += weight * g;
  }
  return {sum_value * h / 3.0, sum_slope * h / 3.0};
}

inline double static_dephasing_integral(double dw, double tau, int n_intervals) {
  return dephasing_integral(dw * tau, n_intervals).value;
}

// Cubic Hermite table of dephasing_integral over [0, x_max], built from the
// same quadrature. Arguments beyond x_max fall back to direct evaluation.
class DephasingTable {
 public:
  DephasingTable(double x_max, int n_intervals, int n_nodes = 4096)
      : x_max_(x_max), n_intervals_(n_intervals), step_(x_max / n_nodes) {
    values_.resize(n_nodes + 1);
    for (int k = 0; k <= n_nodes; ++k) values_[k] = dephasing_integral(k * step_, n_intervals);
  }

  IntegralValue operator()(double x) const {
    x = std::abs(x);
    if (x >= x_max_) return dephasing_integral(x, n_intervals_);
    const double s = x / step_;
    const auto k = static_cast<std::size_t>(s);
    const double t = s - static_cast<double>(k);
    const IntegralValue& a = values_[k];
    const IntegralValue& b = values_[k + 1];
    const double t2 = t * t;
    const double t3 = t2 * t;
    const double h00 = 2 * t3 - 3 * t2 + 1, h10 = t3 - 2 * t2 + t;
    const double h01 = -2 * t3 + 3 * t2, h11 = t3 - t2;
    const double d00 = 6 * t2 - 6 * t, d10 = 3 * t2 - 4 * t + 1;
    const double d01 = -6 * t2 + 6 * t, d11 = 3 * t2 - 2 * t;
    return {h00 * a.value + h10 * step_ * a.slope + h01 * b.value + h11 * step_ * b.slope,
            (d00 * a.value + d01 * b.value) / step_ + d10 * a.slope + d11 * b.slope};
  }

  double x_max() const { return x_max_; }

 private:
  double x_max_;
  int n_intervals_;
  double step_;
  std::vector<IntegralValue> values_;
};

// Asymptotic replacement for I(x): 0.3 x^2 below the transition, x - 1 at or
// above it. Written in terms of x = dw*|tau| so both regimes share the
// -DBV * E(x) form; |tau| == t_c goes to the long branch.
inline IntegralValue asymptotic_exponent(double x, TransitionMode mode) {
  x = std::abs(x);
  if (x < transition_factor(mode)) return {0.3 * x * x, 0.6 * x};
  return {x - 1.0, 1.0};
}

inline SignalVector tissue_signal_full(const TissueParams& p, const AcquisitionProtocol& proto,
                                       const PhysioConstants& c, int n_intervals = 64) {
  const double dw = delta_omega(p.oef, c, proto.b0);
  const double base = std::exp(-c.r2t * proto.te);
  SignalVector s(proto.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = base * std::exp(-p.dbv * dephasing_integral(dw * proto.tau[i], n_intervals).value);
  return s;
}

inline SignalVector tissue_signal_asymptotic(const TissueParams& p,
                                             const AcquisitionProtocol& proto,
                                             const PhysioConstants& c, TransitionMode mode) {
  const double dw = delta_omega(p.oef, c, proto.b0);
  const double base = std::exp(-c.r2t * proto.te);
  SignalVector s(proto.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = base * std::exp(-p.dbv * asymptotic_exponent(dw * proto.tau[i], mode).value);
  return s;
}

// G0 = (4/45) Hct (1 - Hct) (dchi0 B0)^2
inline double mean_square_inhomogeneity(const PhysioConstants& c, double b0) {
  const double field = c.dchi0 * b0;
  return 4.0 / 45.0 * c.hct * (1.0 - c.hct) * field * field;
}

// Venous blood signal (diffusion-mediated intravascular model). Independent
// of OEF and DBV.
inline SignalVector blood_signal(const AcquisitionProtocol& proto, const PhysioConstants& c) {
  const double td = c.diffusion_time();
  const double g0 = mean_square_inhomogeneity(c, proto.b0);
  const double prefactor = 0.5 * c.gamma * c.gamma * g0 * td * td;
  const double te_ratio = proto.te / td;
  SignalVector s(proto.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double tau = proto.tau[i];
    const double plus = 0.5 + (proto.te + tau) / td;
    const double minus = 0.25 + (proto.te - tau) / td;
    if (plus < 0.0 || minus < 0.0 || 0.25 + te_ratio < 0.0)
      throw Error("physics.blood_domain",
                  "blood signal undefined at tau index " + std::to_string(i) +
                      ": TE and tau give a negative square-root argument");
    const double bracket = te_ratio + std::sqrt(0.25 + te_ratio) + 1.5 - 2.0 * std::sqrt(plus) -
                           2.0 * std::sqrt(minus);
    s[i] = std::exp(-c.r2b * proto.te) * std::exp(-prefactor * bracket);
  }
  return s;
}

// m_b = 1 - (2 - exp(-(TR - TI)/T1b)) exp(-TI/T1b)
inline double steady_state_magnetization(double tr, double ti, double t1b) {
  return 1.0 - (2.0 - std::exp(-(tr - ti) / t1b)) * std::exp(-ti / t1b);
}

// Apparent blood volume per unit DBV: zeta' = blood_weight * DBV.
inline double blood_weight(const AcquisitionProtocol& proto, const PhysioConstants& c) {
  return steady_state_magnetization(proto.tr, proto.ti, c.t1b) * c.nb;
}

inline SignalVector total_signal(const TissueParams& p, const AcquisitionProtocol& proto,
                                 const PhysioConstants& c, const ForwardModelConfig& cfg) {
  SignalVector tissue = cfg.variant == ModelVariant::full
                            ? tissue_signal_full(p, proto, c, cfg.n_intervals)
                            : tissue_signal_asymptotic(p, proto, c, cfg.tc_mode);
  if (cfg.compartments == 1) return tissue;
  const SignalVector blood = blood_signal(proto, c);
  const double zp = blood_weight(proto, c) * p.dbv;
  for (std::size_t i = 0; i < tissue.size(); ++i)
    tissue[i] = zp * blood[i] + (1.0 - zp) * tissue[i];
  return tissue;
}

// log(s[i] / s[se_index]). Throws signal.nonpositive naming the first bad
// tau index.
inline SignalVector normalize_signal(std::span<const double> s, const AcquisitionProtocol& proto) {
  require(s.size() == proto.size(), "signal.shape", "signal length does not match protocol");
  for (std::size_t i = 0; i < s.size(); ++i)
    if (!(s[i] > 0.0))
      throw Error("signal.nonpositive",
                  "non-positive or non-finite signal at tau index " + std::to_string(i));
  const double ref = std::log(s[proto.se_index]);
  SignalVector out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = std::log(s[i]) - ref;
  out[proto.se_index] = 0.0;
  return out;
}

// Signal model bound to a protocol, used inside training and inference.
// Evaluates the normalized signal S* = log(S/S_se) together with its
// derivatives with respect to OEF and DBV.
class ForwardModel {
 public:
  ForwardModel(AcquisitionProtocol proto, PhysioConstants constants, ForwardModelConfig cfg)
      : proto_(std::move(proto)), constants_(constants), cfg_(cfg) {
    proto_.validate();
    constants_.validate();
    cfg_.validate();
    dw_per_oef_ = delta_omega(1.0, constants_, proto_.b0);
    abs_tau_.resize(proto_.size());
    for (std::size_t i = 0; i < abs_tau_.size(); ++i) abs_tau_[i] = std::abs(proto_.tau[i]);
    base_ = std::exp(-constants_.r2t * proto_.te);
    if (cfg_.compartments == 2) {
      blood_ = blood_signal(proto_, constants_);
      blood_weight_ = blood_weight(proto_, constants_);
    }
    if (cfg_.variant == ModelVariant::full && cfg_.tabulate) {
      // Covers OEF up to 1 with margin; larger arguments fall back to quadrature.
      const double x_max = 1.05 * dw_per_oef_ * proto_.max_abs_tau();
      if (x_max > 0.0) table_ = std::make_shared<const DephasingTable>(x_max, cfg_.n_intervals);
    }
  }

  const AcquisitionProtocol& protocol() const { return proto_; }
  const PhysioConstants& constants() const { return constants_; }
  const ForwardModelConfig& config() const { return cfg_; }
  std::size_t size() const { return proto_.size(); }

  // Un-normalized signal with unit S0.
  SignalVector signal(const TissueParams& p) const {
    SignalVector s(size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double tissue = base_ * std::exp(-p.dbv * exponent(p.oef * dw_per_oef_ * abs_tau_[i]).value);
      s[i] = mix(p.dbv, tissue, i);
    }
    return s;
  }

  // Normalized signal; d_oef / d_dbv may be empty to skip derivatives.
  void normalized(const TissueParams& p, std::span<double> out, std::span<double> d_oef = {},
                  std::span<double> d_dbv = {}) const {
    const std::size_t n = size();
    const bool derivs = !d_oef.empty();
    const double dw = p.oef * dw_per_oef_;
    if (cfg_.compartments == 1) {
      // log-ratio reduces to -DBV * (E(x_i) - E(x_se)); E(0) = 0.
      for (std::size_t i = 0; i < n; ++i) {
        const IntegralValue e = exponent(dw * abs_tau_[i]);
        out[i] = -p.dbv * e.value;
        if (derivs) {
          d_dbv[i] = -e.value;
          d_oef[i] = -p.dbv * e.slope * abs_tau_[i] * dw_per_oef_;
        }
      }
      out[proto_.se_index] = 0.0;
      return;
    }
    const double zp = blood_weight_ * p.dbv;
    double log_ref = 0.0, ref_d_oef = 0.0, ref_d_dbv = 0.0;
    for (std::size_t pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < n; ++i) {
        // Reference (spin-echo) channel first so the others can subtract it.
        if ((pass == 0) != (i == proto_.se_index)) continue;
        const IntegralValue e = exponent(dw * abs_tau_[i]);
        const double tissue = base_ * std::exp(-p.dbv * e.value);
        const double total = zp * blood_[i] + (1.0 - zp) * tissue;
        const double log_total = std::log(total);
        double g_oef = 0.0, g_dbv = 0.0;
        if (derivs) {
          g_dbv = (blood_weight_ * (blood_[i] - tissue) - (1.0 - zp) * tissue * e.value) / total;
          g_oef = -(1.0 - zp) * tissue * p.dbv * e.slope * abs_tau_[i] * dw_per_oef_ / total;
        }
        if (pass == 0) {
          log_ref = log_total;
          ref_d_oef = g_oef;
          ref_d_dbv = g_dbv;
          out[i] = 0.0;
          if (derivs) d_oef[i] = d_dbv[i] = 0.0;
        } else {
          out[i] = log_total - log_ref;
          if (derivs) {
            d_oef[i] = g_oef - ref_d_oef;
            d_dbv[i] = g_dbv - ref_d_dbv;
          }
        }
      }
    }
  }

  SignalVector normalized(const TissueParams& p) const {
    SignalVector out(size());
    normalized(p, out);
    return out;
  }

 private:
  IntegralValue exponent(double x) const {
    if (cfg_.variant == ModelVariant::asymptotic) return asymptotic_exponent(x, cfg_.tc_mode);
    if (table_) return (*table_)(x);
    return dephasing_integral(x, cfg_.n_intervals);
  }

  double mix(double dbv, double tissue, std::size_t i) const {
    if (cfg_.compartments == 1) return tissue;
    const double zp = blood_weight_ * dbv;
    return zp * blood_[i] + (1.0 - zp) * tissue;
  }

  AcquisitionProtocol proto_;
  PhysioConstants constants_;
  ForwardModelConfig cfg_;
  double dw_per_oef_ = 0.0;
  double base_ = 1.0;
  double blood_weight_ = 0.0;
  std::vector<double> abs_tau_;
  SignalVector blood_;
  std::shared_ptr<const DephasingTable> table_;
};

}  // namespace qbvi
