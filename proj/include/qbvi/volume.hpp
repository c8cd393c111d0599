#pragma once

// Image containers. Voxels are addressed x-fastest, then y, then z; a 4-D
// volume stores each voxel's N_t samples contiguously.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qbvi/error.hpp"
#include "qbvi/physics.hpp"

namespace qbvi {

struct Grid {
  std::size_t nx = 0, ny = 0, nz = 0;

  std::size_t voxels() const { return nx * ny * nz; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * ny + y) * nx + x;
  }
  bool operator==(const Grid&) const = default;
};

struct Volume4D {
  Grid grid;
  std::size_t nt = 0;
  std::array<double, 3> voxel_mm{1.0, 1.0, 1.0};
  std::vector<double> data;         // voxels() * nt
  std::vector<std::uint8_t> mask;   // voxels()

  Volume4D() = default;
  Volume4D(Grid g, std::size_t n_t) : grid(g), nt(n_t), data(g.voxels() * n_t, 0.0), mask(g.voxels(), 1) {}

  std::size_t voxels() const { return grid.voxels(); }

  std::span<double> at(std::size_t v) { return {data.data() + v * nt, nt}; }
  std::span<const double> at(std::size_t v) const { return {data.data() + v * nt, nt}; }

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m != 0;
    return n;
  }

  void validate() const {
    require(data.size() == voxels() * nt, "volume.shape", "data size does not match dimensions");
    require(mask.size() == voxels(), "volume.shape", "mask size does not match dimensions");
    for (std::size_t v = 0; v < voxels(); ++v) {
      if (!mask[v]) continue;
      for (double s : at(v))
        require(std::isfinite(s), "volume.nonfinite",
                "masked voxel " + std::to_string(v) + " has non-finite data");
    }
  }
};

// Scalar map on a grid; unmasked voxels carry NaN by convention on export.
struct Map3D {
  Grid grid;
  std::vector<double> values;

  Map3D() = default;
  explicit Map3D(Grid g, double fill = 0.0) : grid(g), values(g.voxels(), fill) {}
  double& operator[](std::size_t v) { return values[v]; }
  double operator[](std::size_t v) const { return values[v]; }
};

// Replace each voxel's series by log(S / S_se). Voxels with a non-positive
// sample are dropped from the mask; returns the number dropped.
inline std::size_t normalize_volume(Volume4D& vol, const AcquisitionProtocol& proto) {
  require(vol.nt == proto.size(), "volume.protocol",
          "volume has " + std::to_string(vol.nt) + " samples per voxel, protocol has " +
              std::to_string(proto.size()));
  std::size_t dropped = 0;
  for (std::size_t v = 0; v < vol.voxels(); ++v) {
    auto s = vol.at(v);
    if (!vol.mask[v]) {
      std::fill(s.begin(), s.end(), 0.0);
      continue;
    }
    bool ok = true;
    for (double x : s) ok = ok && x > 0.0 && std::isfinite(x);
    if (!ok) {
      vol.mask[v] = 0;
      std::fill(s.begin(), s.end(), 0.0);
      ++dropped;
      continue;
    }
    const double ref = std::log(s[proto.se_index]);
    for (double& x : s) x = std::log(x) - ref;
    s[proto.se_index] = 0.0;
  }
  return dropped;
}

// Copy the sub-block [x0, x0+cx) x [y0, y0+cy) x [z0, z0+cz).
inline Volume4D crop_block(const Volume4D& vol, std::size_t x0, std::size_t y0, std::size_t z0,
                           std::size_t cx, std::size_t cy, std::size_t cz) {
  require(x0 + cx <= vol.grid.nx && y0 + cy <= vol.grid.ny && z0 + cz <= vol.grid.nz,
          "volume.crop", "crop outside volume");
  Volume4D out(Grid{cx, cy, cz}, vol.nt);
  out.voxel_mm = vol.voxel_mm;
  for (std::size_t z = 0; z < cz; ++z)
    for (std::size_t y = 0; y < cy; ++y)
      for (std::size_t x = 0; x < cx; ++x) {
        const std::size_t src = vol.grid.index(x0 + x, y0 + y, z0 + z);
        const std::size_t dst = out.grid.index(x, y, z);
        out.mask[dst] = vol.mask[src];
        std::copy_n(vol.data.begin() + src * vol.nt, vol.nt, out.data.begin() + dst * vol.nt);
      }
  return out;
}

// In-plane crop keeping every slice.
inline Volume4D crop_xy(const Volume4D& vol, std::size_t x0, std::size_t y0, std::size_t cx,
                        std::size_t cy) {
  return crop_block(vol, x0, y0, 0, cx, cy, vol.grid.nz);
}

}  // namespace qbvi
