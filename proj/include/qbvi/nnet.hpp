#pragma once

// Voxelwise encoder network with optional gated in-plane residual blocks,
// reverse-mode gradients, AdamW and weight averaging.
//
// Block b maps H_b (C_in x V, one column per voxel) to
//   H_{b+1} = silu(W_b H_b + c_b)                          (voxelwise)
//   H_{b+1} = silu(W_b H_b + c_b) + g * silu(K_b P_b + k_b) (gated residual)
// where P_b is the 3x3x1 in-plane neighbourhood of H_b (im2col, neighbours
// outside the grid or mask read as zero) and
//   g = logistic(u_b . H_b + r_b + gate_offset)   per voxel, or
//   g = logistic(r_b + gate_offset)               one learned scalar.
// The head is a single affine layer emitting, per voxel,
//   [mu (2) | covariance (2 or 3) | log noise sigma (N_t)].
// Standardized inputs are softly bounded (kInputBound) and the two
// log-Cholesky diagonals pass through a smooth floor (kLogLFloor).
//
// SiLU(z) = z * logistic(z) is smooth, so gradients are exact up to
// round-off and finite differences converge at second order.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qbvi/binary_io.hpp"
#include "qbvi/distributions.hpp"
#include "qbvi/error.hpp"
#include "qbvi/random.hpp"
#include "qbvi/volume.hpp"

namespace qbvi {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class SpatialMode { voxelwise, gated_residual };
enum class CovarianceMode { diagonal, full };
enum class GateScope { scalar, voxelwise };

struct NetworkConfig {
  int n_blocks = 2;
  int width = 60;
  SpatialMode spatial_mode = SpatialMode::voxelwise;
  CovarianceMode covariance_mode = CovarianceMode::full;
  double gate_offset = -3.0;
  GateScope gate_scope = GateScope::voxelwise;

  int sigma_channels() const { return covariance_mode == CovarianceMode::full ? 3 : 2; }
  Index n_outputs(std::size_t n_t) const { return 2 + sigma_channels() + static_cast<Index>(n_t); }
  Index noise_row() const { return 2 + sigma_channels(); }

  void validate() const {
    require(n_blocks >= 1, "config.network", "n_blocks must be >= 1");
    require(width >= 1, "config.network", "width must be >= 1");
    require(std::isfinite(gate_offset), "config.network", "gate_offset must be finite");
  }

  bool operator==(const NetworkConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  Index rows = 0, cols = 0, offset = 0;
  Index size() const { return rows * cols; }
  bool operator==(const TensorSpec&) const = default;
};

inline std::vector<TensorSpec> network_layout(const NetworkConfig& cfg, std::size_t n_t) {
  std::vector<TensorSpec> specs;
  Index offset = 0;
  auto add = [&](std::string name, Index r, Index c) {
    specs.push_back({std::move(name), r, c, offset});
    offset += r * c;
  };
  Index in = static_cast<Index>(n_t);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    add(p + "mlp.weight", cfg.width, in);
    add(p + "mlp.bias", cfg.width, 1);
    if (cfg.spatial_mode == SpatialMode::gated_residual) {
      add(p + "conv.weight", cfg.width, 9 * in);
      add(p + "conv.bias", cfg.width, 1);
      if (cfg.gate_scope == GateScope::voxelwise) add(p + "gate.weight", 1, in);
      add(p + "gate.bias", 1, 1);
    }
    in = cfg.width;
  }
  add("head.weight", cfg.n_outputs(n_t), cfg.width);
  add("head.bias", cfg.n_outputs(n_t), 1);
  return specs;
}

// Initial head biases: the network starts out predicting this distribution
// and noise level everywhere.
struct HeadInit {
  Vec2 mu = inverse_transform({0.40, 0.025});
  double log_sigma = 0.0;
  double log_noise = std::log(0.02);
};

class EncoderWeights {
 public:
  NetworkConfig config;
  std::size_t n_t = 0;
  VectorXd values;                  // all trainable parameters
  std::vector<TensorSpec> specs;
  VectorXd input_shift, input_scale;  // fixed input standardization

  static EncoderWeights create(const NetworkConfig& cfg, std::size_t n_t, std::uint64_t seed,
                               const HeadInit& head = {}) {
    cfg.validate();
    require(n_t >= 1, "config.network", "n_t must be >= 1");
    EncoderWeights w;
    w.config = cfg;
    w.n_t = n_t;
    w.specs = network_layout(cfg, n_t);
    w.values = VectorXd::Zero(w.specs.back().offset + w.specs.back().size());
    w.input_shift = VectorXd::Zero(static_cast<Index>(n_t));
    w.input_scale = VectorXd::Ones(static_cast<Index>(n_t));
    Rng rng(seed, 0x1417);
    for (const auto& s : w.specs) w.init_tensor(s, rng, head);
    return w;
  }

  Index size() const { return values.size(); }

  const TensorSpec* find(const std::string& name) const {
    for (const auto& s : specs)
      if (s.name == name) return &s;
    return nullptr;
  }

  const TensorSpec& spec(const std::string& name) const {
    const TensorSpec* s = find(name);
    require(s != nullptr, "nnet.tensor", "no tensor named " + name);
    return *s;
  }

  Eigen::Map<MatrixXd> tensor(const std::string& name) { return tensor(spec(name), values); }
  Eigen::Map<const MatrixXd> tensor(const std::string& name) const {
    return tensor(spec(name), values);
  }

  static Eigen::Map<MatrixXd> tensor(const TensorSpec& s, VectorXd& flat) {
    return {flat.data() + s.offset, s.rows, s.cols};
  }
  static Eigen::Map<const MatrixXd> tensor(const TensorSpec& s, const VectorXd& flat) {
    return {flat.data() + s.offset, s.rows, s.cols};
  }

  void validate() const {
    config.validate();
    require(specs == network_layout(config, n_t), "nnet.shape",
            "tensor layout does not match the network configuration");
    require(values.size() == specs.back().offset + specs.back().size(), "nnet.shape",
            "parameter count does not match the layout");
    require(input_shift.size() == static_cast<Index>(n_t) &&
                input_scale.size() == static_cast<Index>(n_t),
            "nnet.shape", "input standardization has the wrong length");
    for (const auto& s : specs)
      require(tensor(s, values).allFinite(), "nnet.nonfinite", "tensor " + s.name + " is not finite");
  }

  // Re-draw one tensor from its initializer.
  void init_tensor(const TensorSpec& s, Rng& rng, const HeadInit& head = {}) {
    auto t = tensor(s, values);
    auto uniform_fill = [&](double bound) {
      for (Index j = 0; j < t.cols(); ++j)
        for (Index i = 0; i < t.rows(); ++i) t(i, j) = rng.uniform(-bound, bound);
    };
    const auto ends_with = [&](const char* suffix) {
      const std::string suf(suffix);
      return s.name.size() >= suf.size() && s.name.compare(s.name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (s.name == "head.weight") {
      uniform_fill(0.1 / std::sqrt(double(s.cols)));
    } else if (s.name == "head.bias") {
      t.setZero();
      t(0, 0) = head.mu[0];
      t(1, 0) = head.mu[1];
      t(2, 0) = head.log_sigma;
      t(3, 0) = head.log_sigma;
      for (Index i = config.noise_row(); i < t.rows(); ++i) t(i, 0) = head.log_noise;
    } else if (ends_with("gate.weight") || ends_with("gate.bias") || ends_with(".bias")) {
      t.setZero();
    } else {
      // mlp.weight and conv.weight: fan-in scaled uniform
      uniform_fill(std::sqrt(6.0 / double(s.cols)));
    }
  }
};

// Copies every tensor of `base` whose name and shape exist in the target
// layout; the rest (residual and gate paths, resized heads) is freshly
// initialized.
inline EncoderWeights extend_weights(const EncoderWeights& base, const NetworkConfig& cfg,
                                     std::uint64_t seed) {
  EncoderWeights out = EncoderWeights::create(cfg, base.n_t, seed);
  for (const auto& s : out.specs) {
    const TensorSpec* b = base.find(s.name);
    if (b && b->rows == s.rows && b->cols == s.cols)
      EncoderWeights::tensor(s, out.values) = EncoderWeights::tensor(*b, base.values);
  }
  out.input_shift = base.input_shift;
  out.input_scale = base.input_scale;
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

inline double silu(double z) { return z * logistic(z); }
inline double silu_slope(double z) {
  const double s = logistic(z);
  return s * (1.0 + z * (1.0 - s));
}

struct BlockCache {
  MatrixXd z;        // mlp pre-activation
  MatrixXd out;      // block output
  MatrixXd patches;  // im2col of the block input
  MatrixXd q;        // conv pre-activation
  MatrixXd cv;       // silu(q)
  Eigen::RowVectorXd g;
};

struct ForwardCache {
  MatrixXd x;  // standardized input
  std::vector<BlockCache> blocks;
  MatrixXd out;
  MatrixXd raw_log_l;  // rows 2-3 of the head before the floor
  Grid grid;
  std::vector<std::uint8_t> mask;
};

// Smooth lower bound on the log-Cholesky diagonals. Inputs far outside the
// training range can otherwise drive the predicted width towards zero, which
// makes any KL against that prediction unbounded.
inline constexpr double kLogLFloor = -6.0;

inline double floor_log_l(double u) {
  const double x = u - kLogLFloor;
  return kLogLFloor + (x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)));
}
inline double floor_log_l_slope(double u) { return logistic(u - kLogLFloor); }

// Standardized inputs are squashed as b * tanh(x / b). The map is a bijection,
// so in-range inputs lose nothing, but corrupted voxels tens of units out can
// no longer push hidden activations arbitrarily far.
inline constexpr double kInputBound = 8.0;

inline double bound_input(double x) { return kInputBound * std::tanh(x / kInputBound); }

namespace detail {

inline bool neighbour(const Grid& g, const std::vector<std::uint8_t>& mask, Index v, int k,
                      Index& nb) {
  const Index nx = static_cast<Index>(g.nx), ny = static_cast<Index>(g.ny);
  const Index x = v % nx, y = (v / nx) % ny;
  const Index xx = x + (k % 3) - 1, yy = y + (k / 3) - 1;
  if (xx < 0 || yy < 0 || xx >= nx || yy >= ny) return false;
  nb = v + (yy - y) * nx + (xx - x);
  return mask.empty() || mask[static_cast<std::size_t>(nb)] != 0;
}

inline MatrixXd im2col(const MatrixXd& h, const Grid& g, const std::vector<std::uint8_t>& mask) {
  const Index c = h.rows(), n = h.cols();
  MatrixXd p = MatrixXd::Zero(9 * c, n);
  for (Index v = 0; v < n; ++v)
    for (int k = 0; k < 9; ++k) {
      Index nb;
      if (neighbour(g, mask, v, k, nb)) p.col(v).segment(k * c, c) = h.col(nb);
    }
  return p;
}

inline void col2im_add(const MatrixXd& dp, const Grid& g, const std::vector<std::uint8_t>& mask,
                       MatrixXd& dh) {
  const Index c = dh.rows(), n = dh.cols();
  for (Index v = 0; v < n; ++v)
    for (int k = 0; k < 9; ++k) {
      Index nb;
      if (neighbour(g, mask, v, k, nb)) dh.col(nb) += dp.col(v).segment(k * c, c);
    }
}

}  // namespace detail

// x: N_t x V raw normalized signals. grid/mask are used only by the gated
// residual blocks; voxelwise networks ignore them.
inline MatrixXd encoder_forward(const EncoderWeights& w, const MatrixXd& x, const Grid* grid = nullptr,
                                const std::vector<std::uint8_t>* mask = nullptr,
                                ForwardCache* cache = nullptr) {
  const NetworkConfig& cfg = w.config;
  require(x.rows() == static_cast<Index>(w.n_t), "nnet.shape",
          "input has " + std::to_string(x.rows()) + " channels, network expects " +
              std::to_string(w.n_t));
  const bool spatial = cfg.spatial_mode == SpatialMode::gated_residual;
  if (spatial) {
    require(grid != nullptr && grid->voxels() == static_cast<std::size_t>(x.cols()), "nnet.shape",
            "gated residual network needs a grid matching the input");
    require(mask == nullptr || mask->size() == grid->voxels(), "nnet.shape", "mask/grid mismatch");
  }
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.blocks.assign(static_cast<std::size_t>(cfg.n_blocks), {});
  c.grid = grid ? *grid : Grid{};
  c.mask = (spatial && mask) ? *mask : std::vector<std::uint8_t>{};
  c.x = ((x.colwise() - w.input_shift).array().colwise() * w.input_scale.array())
            .matrix()
            .unaryExpr(&bound_input);
  const MatrixXd* h = &c.x;
  for (int b = 0; b < cfg.n_blocks; ++b) {
    BlockCache& bc = c.blocks[static_cast<std::size_t>(b)];
    const std::string p = "block" + std::to_string(b) + ".";
    bc.z = (w.tensor(p + "mlp.weight") * *h).colwise() + w.tensor(p + "mlp.bias").col(0);
    bc.out = bc.z.unaryExpr(&silu);
    if (spatial) {
      bc.patches = detail::im2col(*h, c.grid, c.mask);
      bc.q = (w.tensor(p + "conv.weight") * bc.patches).colwise() + w.tensor(p + "conv.bias").col(0);
      bc.cv = bc.q.unaryExpr(&silu);
      const double r = w.tensor(p + "gate.bias")(0, 0) + cfg.gate_offset;
      if (cfg.gate_scope == GateScope::voxelwise) {
        const Eigen::RowVectorXd logits = (w.tensor(p + "gate.weight") * *h).array() + r;
        bc.g = logits.unaryExpr(&logistic);
      } else {
        bc.g = Eigen::RowVectorXd::Constant(x.cols(), logistic(r));
      }
      bc.out += bc.cv * bc.g.asDiagonal();
    }
    h = &bc.out;
  }
  c.out = (w.tensor("head.weight") * *h).colwise() + w.tensor("head.bias").col(0);
  c.raw_log_l = c.out.middleRows(2, 2);
  c.out.middleRows(2, 2) = c.raw_log_l.unaryExpr(&floor_log_l);
  return c.out;
}

// Accumulates d(loss)/d(weights) into grad given d(loss)/d(outputs).
inline void encoder_backward(const EncoderWeights& w, const ForwardCache& c, const MatrixXd& d_out,
                             VectorXd& grad) {
  const NetworkConfig& cfg = w.config;
  require(d_out.rows() == c.out.rows() && d_out.cols() == c.out.cols(), "nnet.shape",
          "output adjoint shape mismatch");
  if (grad.size() != w.size()) grad = VectorXd::Zero(w.size());
  const bool spatial = cfg.spatial_mode == SpatialMode::gated_residual;
  auto g_of = [&](const std::string& name) { return EncoderWeights::tensor(w.spec(name), grad); };

  const MatrixXd& h_last = c.blocks.back().out;
  MatrixXd d_raw = d_out;
  d_raw.middleRows(2, 2) = d_out.middleRows(2, 2).cwiseProduct(c.raw_log_l.unaryExpr(&floor_log_l_slope));
  g_of("head.weight").noalias() += d_raw * h_last.transpose();
  g_of("head.bias").col(0) += d_raw.rowwise().sum();
  MatrixXd dh = w.tensor("head.weight").transpose() * d_raw;

  for (int b = cfg.n_blocks - 1; b >= 0; --b) {
    const BlockCache& bc = c.blocks[static_cast<std::size_t>(b)];
    const MatrixXd& h_in = b == 0 ? c.x : c.blocks[static_cast<std::size_t>(b - 1)].out;
    const std::string p = "block" + std::to_string(b) + ".";
    const MatrixXd dz = dh.cwiseProduct(bc.z.unaryExpr(&silu_slope));
    g_of(p + "mlp.weight").noalias() += dz * h_in.transpose();
    g_of(p + "mlp.bias").col(0) += dz.rowwise().sum();
    MatrixXd dh_in;
    if (b > 0) dh_in = w.tensor(p + "mlp.weight").transpose() * dz;
    if (spatial) {
      const Eigen::RowVectorXd dg = dh.cwiseProduct(bc.cv).colwise().sum();
      const MatrixXd dq = (dh * bc.g.asDiagonal()).cwiseProduct(bc.q.unaryExpr(&silu_slope));
      g_of(p + "conv.weight").noalias() += dq * bc.patches.transpose();
      g_of(p + "conv.bias").col(0) += dq.rowwise().sum();
      const Eigen::RowVectorXd dlogit = dg.cwiseProduct(bc.g.cwiseProduct((1.0 - bc.g.array()).matrix()));
      g_of(p + "gate.bias")(0, 0) += dlogit.sum();
      if (b > 0) {
        const MatrixXd dp = w.tensor(p + "conv.weight").transpose() * dq;
        detail::col2im_add(dp, c.grid, c.mask, dh_in);
      }
      if (cfg.gate_scope == GateScope::voxelwise) {
        g_of(p + "gate.weight").noalias() += dlogit * h_in.transpose();
        if (b > 0) dh_in.noalias() += w.tensor(p + "gate.weight").transpose() * dlogit;
      }
    }
    if (b > 0) dh = std::move(dh_in);
  }
}

// Throws nnet.nonfinite naming the first tensor with a non-finite gradient.
inline void check_finite_gradient(const EncoderWeights& w, const VectorXd& grad) {
  for (const auto& s : w.specs)
    if (!EncoderWeights::tensor(s, grad).allFinite())
      throw Error("nnet.nonfinite", "non-finite gradient in tensor " + s.name);
}

// Per-voxel view of the head output.
struct VoxelPrediction {
  LogitGaussianParams q;
  const double* log_noise = nullptr;  // N_t entries
};

inline VoxelPrediction prediction_at(const MatrixXd& out, Index v, const NetworkConfig& cfg) {
  VoxelPrediction p;
  p.q.mu = Vec2(out(0, v), out(1, v));
  p.q.log_l11 = out(2, v);
  p.q.log_l22 = out(3, v);
  p.q.l21 = cfg.covariance_mode == CovarianceMode::full ? out(4, v) : 0.0;
  p.log_noise = out.col(v).data() + cfg.noise_row();
  return p;
}

// Gather masked (or all) voxels of a normalized volume as input columns.
inline MatrixXd volume_inputs(const Volume4D& vol) {
  MatrixXd x(static_cast<Index>(vol.nt), static_cast<Index>(vol.voxels()));
  for (std::size_t v = 0; v < vol.voxels(); ++v)
    for (std::size_t t = 0; t < vol.nt; ++t) x(static_cast<Index>(t), static_cast<Index>(v)) = vol.at(v)[t];
  return x;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  VectorXd m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState zeros(Index n) { return {VectorXd::Zero(n), VectorXd::Zero(n)}; }
};

// AdamW with decoupled weight decay:
//   w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * wd * w
inline void adamw_step(VectorXd& w, AdamState& s, const VectorXd& grad, double lr, double wd) {
  require(grad.size() == w.size(), "nnet.shape", "gradient length mismatch");
  if (s.m.size() != w.size()) s = AdamState::zeros(w.size());
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, double(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, double(s.step));
  const VectorXd update = (s.m / c1).array() / ((s.v / c2).array().sqrt() + s.eps);
  w = w - lr * update - lr * wd * w;
}

// Running mean of weight snapshots; k is the 1-based snapshot count.
inline void swa_update(VectorXd& avg, const VectorXd& current, long k) {
  require(k >= 1, "nnet.swa", "snapshot count must be >= 1");
  if (k == 1) {
    avg = current;
    return;
  }
  avg += (current - avg) / double(k);
}

// Linear from base at step 0 to base / final_factor at total_steps.
inline double lr_schedule(long step, long total_steps, double base, double final_factor) {
  require(step >= 0 && step <= total_steps, "train.schedule", "step outside [0, total_steps]");
  require(final_factor > 0, "train.schedule", "final_factor must be positive");
  if (total_steps == 0) return base;
  const double frac = double(step) / double(total_steps);
  return base * (1.0 + (1.0 / final_factor - 1.0) * frac);
}

// ---------------------------------------------------------------------------
// Checkpoint container. See docs/file_formats.md.

inline constexpr char kCheckpointMagic[8] = {'Q', 'B', 'V', 'I', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const EncoderWeights& w, const std::string& path) {
  w.validate();
  bin::Writer out;
  out.put_bytes(kCheckpointMagic, 8);
  out.put<std::uint32_t>(kCheckpointVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(w.n_t));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(w.config.n_blocks));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(w.config.width));
  out.put<std::uint8_t>(static_cast<std::uint8_t>(w.config.spatial_mode));
  out.put<std::uint8_t>(static_cast<std::uint8_t>(w.config.covariance_mode));
  out.put<std::uint8_t>(static_cast<std::uint8_t>(w.config.gate_scope));
  out.put<std::uint8_t>(0);
  out.put<double>(w.config.gate_offset);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(w.specs.size() + 2));
  auto put_tensor = [&](const std::string& name, const double* data, Index rows, Index cols) {
    out.put_string(name);
    out.put<std::uint32_t>(static_cast<std::uint32_t>(rows));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(cols));
    for (Index i = 0; i < rows * cols; ++i) out.put<float>(static_cast<float>(data[i]));
  };
  put_tensor("input.shift", w.input_shift.data(), w.input_shift.size(), 1);
  put_tensor("input.scale", w.input_scale.data(), w.input_scale.size(), 1);
  for (const auto& s : w.specs) put_tensor(s.name, w.values.data() + s.offset, s.rows, s.cols);
  out.save(path);
}

inline EncoderWeights load_checkpoint(const std::string& path) {
  auto in = bin::Reader::load(path);
  char magic[8];
  in.get_bytes(magic, 8);
  require(std::equal(magic, magic + 8, kCheckpointMagic), "checkpoint.magic",
          path + " is not a qbvi checkpoint");
  const auto version = in.get<std::uint32_t>();
  require(version == kCheckpointVersion, "checkpoint.version",
          path + " has unsupported version " + std::to_string(version));
  NetworkConfig cfg;
  const std::size_t n_t = in.get<std::uint32_t>();
  cfg.n_blocks = static_cast<int>(in.get<std::uint32_t>());
  cfg.width = static_cast<int>(in.get<std::uint32_t>());
  const auto spatial = in.get<std::uint8_t>();
  const auto cov = in.get<std::uint8_t>();
  const auto gate = in.get<std::uint8_t>();
  in.get<std::uint8_t>();
  require(spatial <= 1 && cov <= 1 && gate <= 1, "checkpoint.config", path + " has invalid enums");
  cfg.spatial_mode = static_cast<SpatialMode>(spatial);
  cfg.covariance_mode = static_cast<CovarianceMode>(cov);
  cfg.gate_scope = static_cast<GateScope>(gate);
  cfg.gate_offset = in.get<double>();
  EncoderWeights w = EncoderWeights::create(cfg, n_t, 0);
  const auto count = in.get<std::uint32_t>();
  require(count == w.specs.size() + 2, "checkpoint.shape", path + " has the wrong tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = in.get_string();
    const Index rows = in.get<std::uint32_t>(), cols = in.get<std::uint32_t>();
    double* dst = nullptr;
    if (name == "input.shift" || name == "input.scale") {
      VectorXd& vec = name == "input.shift" ? w.input_shift : w.input_scale;
      require(rows == vec.size() && cols == 1, "checkpoint.shape", name + " has the wrong shape");
      dst = vec.data();
    } else {
      const TensorSpec* s = w.find(name);
      require(s && s->rows == rows && s->cols == cols, "checkpoint.shape",
              "unexpected tensor " + name + " in " + path);
      dst = w.values.data() + s->offset;
    }
    for (Index i = 0; i < rows * cols; ++i) dst[i] = in.get<float>();
  }
  require(in.pos() == in.size(), "checkpoint.shape", path + " has trailing bytes");
  w.validate();
  return w;
}

}  // namespace qbvi
