#pragma once

// Scaled logit-Normal distribution over (OEF, DBV).
//
// A draw is y = s * logistic(beta) + o with beta ~ N(mu, L L^T), so each
// marginal lives on (o_i, o_i + s_i). The logit-space Gaussian is stored by
// its lower-triangular Cholesky factor; the network-facing parameterization
// is (mu, log L11, log L22, L21), which is unconstrained and always positive
// definite.

#include <Eigen/Dense>
#include <array>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "qbvi/error.hpp"
#include "qbvi/physics.hpp"
#include "qbvi/random.hpp"

namespace qbvi {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

inline constexpr double kLog2Pi = 1.8378770664093454836;

struct LogitScaling {
  Vec2 scale{0.8, 0.3};
  Vec2 offset{0.05, 0.001};

  bool operator==(const LogitScaling& other) const {
    return scale == other.scale && offset == other.offset;
  }

  double low(int i) const { return offset[i]; }
  double high(int i) const { return offset[i] + scale[i]; }

  bool contains(const TissueParams& y) const {
    return y.oef > low(0) && y.oef < high(0) && y.dbv > low(1) && y.dbv < high(1);
  }
};

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

// y = s * logistic(beta) + o, componentwise.
inline TissueParams forward_transform(const Vec2& beta, const LogitScaling& sc = {}) {
  return {sc.scale[0] * logistic(beta[0]) + sc.offset[0],
          sc.scale[1] * logistic(beta[1]) + sc.offset[1]};
}

// d y_i / d beta_i
inline Vec2 forward_transform_slope(const Vec2& beta, const LogitScaling& sc = {}) {
  const double a = logistic(beta[0]), b = logistic(beta[1]);
  return {sc.scale[0] * a * (1 - a), sc.scale[1] * b * (1 - b)};
}

inline Vec2 inverse_transform(const TissueParams& y, const LogitScaling& sc = {}) {
  const std::array<const char*, 2> names{"oef", "dbv"};
  const std::array<double, 2> v{y.oef, y.dbv};
  Vec2 beta;
  for (int i = 0; i < 2; ++i) {
    const double u = (v[i] - sc.offset[i]) / sc.scale[i];
    if (!(u > 0.0 && u < 1.0))
      throw Error("domain.support", std::string(names[i]) + " = " + std::to_string(v[i]) +
                                        " is outside the open support (" +
                                        std::to_string(sc.low(i)) + ", " +
                                        std::to_string(sc.high(i)) + ")");
    beta[i] = logit(u);
  }
  return beta;
}

// log |d y / d beta| at the point y (sum over both coordinates).
inline double log_jacobian(const TissueParams& y, const LogitScaling& sc = {}) {
  const double u0 = (y.oef - sc.offset[0]) / sc.scale[0];
  const double u1 = (y.dbv - sc.offset[1]) / sc.scale[1];
  return std::log(sc.scale[0] * u0 * (1 - u0)) + std::log(sc.scale[1] * u1 * (1 - u1));
}

// Unconstrained logit-space Gaussian parameters as emitted by the encoder.
struct LogitGaussianParams {
  Vec2 mu = Vec2::Zero();
  double log_l11 = 0.0;
  double log_l22 = 0.0;
  double l21 = 0.0;

  Mat2 chol() const {
    Mat2 l;
    l << std::exp(log_l11), 0.0, l21, std::exp(log_l22);
    return l;
  }
};

// Gradient with respect to (mu0, mu1, log_l11, log_l22, l21).
using ParamGrad = Eigen::Matrix<double, 5, 1>;

struct ScaledLogitNormal {
  Vec2 mu = Vec2::Zero();
  Mat2 chol = Mat2::Identity();  // lower triangular, positive diagonal
  LogitScaling scaling{};

  static ScaledLogitNormal from_params(const LogitGaussianParams& p, const LogitScaling& sc = {}) {
    return {p.mu, p.chol(), sc};
  }

  static ScaledLogitNormal diagonal(const Vec2& mu, double sigma0, double sigma1,
                                    const LogitScaling& sc = {}) {
    Mat2 l;
    l << sigma0, 0.0, 0.0, sigma1;
    return {mu, l, sc};
  }

  LogitGaussianParams params() const {
    return {mu, std::log(chol(0, 0)), std::log(chol(1, 1)), chol(1, 0)};
  }

  Mat2 covariance() const { return chol * chol.transpose(); }

  bool is_diagonal() const { return chol(1, 0) == 0.0; }

  // Median of the distribution: the transformed logit mean.
  TissueParams median() const { return forward_transform(mu, scaling); }

  void validate() const {
    require(chol(0, 0) > 0 && chol(1, 1) > 0 && chol(0, 1) == 0.0, "distribution.cholesky",
            "Cholesky factor must be lower triangular with a positive diagonal");
    require(scaling.scale[0] > 0 && scaling.scale[1] > 0, "distribution.scale",
            "scales must be positive");
  }
};

enum class CovariancePath { automatic, diagonal, cholesky };

// log N(beta; mu, L L^T)
inline double gaussian_log_density(const Vec2& beta, const Vec2& mu, const Mat2& chol,
                                   CovariancePath path = CovariancePath::automatic) {
  const Vec2 r = beta - mu;
  const bool diag = path == CovariancePath::diagonal ||
                    (path == CovariancePath::automatic && chol(1, 0) == 0.0);
  double quad;
  if (diag) {
    const double w0 = r[0] / chol(0, 0), w1 = r[1] / chol(1, 1);
    quad = w0 * w0 + w1 * w1;
  } else {
    // whiten: w = L^{-1} r
    const Vec2 w = chol.triangularView<Eigen::Lower>().solve(r);
    quad = w.squaredNorm();
  }
  return -0.5 * quad - std::log(chol(0, 0)) - std::log(chol(1, 1)) - kLog2Pi;
}

// Change-of-variables density of y: Gaussian density of the logits plus
// -sum_i log(s_i * yhat_i * (1 - yhat_i)).
inline double log_prob(const ScaledLogitNormal& d, const TissueParams& y,
                       CovariancePath path = CovariancePath::automatic) {
  const Vec2 beta = inverse_transform(y, d.scaling);
  return gaussian_log_density(beta, d.mu, d.chol, path) - log_jacobian(y, d.scaling);
}

// Negative Gaussian log density of fixed logits beta and its gradient with
// respect to the unconstrained parameters.
inline double gaussian_nll_grad(const LogitGaussianParams& p, const Vec2& beta, ParamGrad& grad) {
  const Mat2 l = p.chol();
  const Vec2 w = l.triangularView<Eigen::Lower>().solve(beta - p.mu);
  const Vec2 lw = l.transpose().triangularView<Eigen::Upper>().solve(w);  // L^{-T} w
  // d(0.5|w|^2)/dL = -L^{-T} w w^T
  const Mat2 m = -lw * w.transpose();
  grad[0] = -lw[0];
  grad[1] = -lw[1];
  grad[2] = m(0, 0) * l(0, 0) + 1.0;
  grad[3] = m(1, 1) * l(1, 1) + 1.0;
  grad[4] = m(1, 0);
  return 0.5 * w.squaredNorm() + p.log_l11 + p.log_l22 + kLog2Pi;
}

inline void require_same_support(const ScaledLogitNormal& q, const ScaledLogitNormal& p) {
  require(q.scaling == p.scaling, "distribution.mismatch",
          "KL requires identical scale and offset vectors");
}

// Closed-form KL(q || p) between the logit-space Gaussians. The shared
// invertible transform leaves the divergence unchanged.
inline double kl_gaussian(const LogitGaussianParams& q, const LogitGaussianParams& p,
                          ParamGrad* grad = nullptr) {
  const Mat2 lq = q.chol();
  const Mat2 lp = p.chol();
  const auto lp_tri = lp.triangularView<Eigen::Lower>();
  const Mat2 a = lp_tri.solve(lq);
  const Vec2 d = lp_tri.solve(q.mu - p.mu);
  const double kl = 0.5 * (a.squaredNorm() + d.squaredNorm() - 2.0) + (p.log_l11 + p.log_l22) -
                    (q.log_l11 + q.log_l22);
  if (grad) {
    const auto lpt = lp.transpose().triangularView<Eigen::Upper>();
    const Vec2 gmu = lpt.solve(d);
    const Mat2 g = lpt.solve(a);  // d(0.5|A|^2)/dLq = Lp^{-T} A
    (*grad)[0] = gmu[0];
    (*grad)[1] = gmu[1];
    (*grad)[2] = g(0, 0) * lq(0, 0) - 1.0;
    (*grad)[3] = g(1, 1) * lq(1, 1) - 1.0;
    (*grad)[4] = g(1, 0);
  }
  return kl;
}

inline double kl_analytic(const ScaledLogitNormal& q, const ScaledLogitNormal& p) {
  require_same_support(q, p);
  return kl_gaussian(q.params(), p.params());
}

// Reparameterized draws f(mu + L z).
inline std::vector<TissueParams> sample(const ScaledLogitNormal& d, Rng& rng, std::size_t n) {
  std::vector<TissueParams> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 z(rng.normal(), rng.normal());
    out.push_back(forward_transform(d.mu + d.chol * z, d.scaling));
  }
  return out;
}

// Monte-Carlo estimate of KL(q || p) = E_q[log q - log p]. Evaluated on the
// logits, where the Jacobian terms of the two densities cancel exactly.
inline double kl_monte_carlo(const ScaledLogitNormal& q, const ScaledLogitNormal& p, Rng& rng,
                             std::size_t n) {
  require_same_support(q, p);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 z(rng.normal(), rng.normal());
    const Vec2 beta = q.mu + q.chol * z;
    sum += gaussian_log_density(beta, q.mu, q.chol) - gaussian_log_density(beta, p.mu, p.chol);
  }
  return sum / static_cast<double>(n);
}

// Normal(mean, std^2) conditioned on [low, high], by inverting the CDF on
// the truncated interval. Upper-tail intervals are reflected so the CDF
// differences are taken where they are representable.
inline std::vector<double> truncated_normal_sample(double mean, double std, double low, double high,
                                                   Rng& rng, std::size_t n) {
  require(low < high, "distribution.truncated", "truncation interval must satisfy low < high");
  require(std > 0.0, "distribution.truncated", "std must be positive");
  const boost::math::normal unit;
  double a = (low - mean) / std;
  double b = (high - mean) / std;
  const bool reflect = a > 0.0;
  if (reflect) {
    const double t = a;
    a = -b;
    b = -t;
  }
  const double pa = boost::math::cdf(unit, a);
  const double pb = boost::math::cdf(unit, b);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    double value;
    if (!(pb > pa)) {
      // all mass collapsed onto one end of the interval
      value = std::clamp(mean, low, high);
    } else {
      const double p = std::clamp(pa + u * (pb - pa), pa, pb);
      double x = (p <= 0.0) ? a : (p >= 1.0 ? b : boost::math::quantile(unit, p));
      x = std::clamp(x, a, b);
      if (reflect) x = -x;
      value = std::clamp(mean + std * x, low, high);
    }
    out[i] = value;
  }
  return out;
}

}  // namespace qbvi
