#pragma once

// Single-file, uncompressed NIfTI-1 (.nii). Reads int16, uint8, float32 and
// float64 with scl_slope/scl_inter applied; writes float32. Little-endian
// files only.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qbvi/binary_io.hpp"
#include "qbvi/volume.hpp"

namespace qbvi {

namespace nifti {
inline constexpr std::int16_t kUint8 = 2;
inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::int16_t kFloat64 = 64;
inline constexpr std::int32_t kHeaderSize = 348;
inline constexpr std::size_t kDataOffset = 352;
}  // namespace nifti

// Image in file order: x fastest, then y, z, t.
struct NiftiImage {
  std::array<std::size_t, 4> dims{1, 1, 1, 1};  // nx, ny, nz, nt
  std::array<double, 4> pixdim{1.0, 1.0, 1.0, 1.0};
  std::int16_t datatype = nifti::kFloat32;       // as stored on disk
  std::vector<double> data;                      // scaled values

  std::size_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  Grid grid() const { return {dims[0], dims[1], dims[2]}; }
};

inline NiftiImage read_nifti(const std::string& path) {
  auto r = bin::Reader::load(path);
  if (r.size() < std::size_t(nifti::kHeaderSize))
    throw Error("nifti.truncated", path + ": header is truncated");
  const auto sizeof_hdr = r.get<std::int32_t>();
  if (sizeof_hdr != nifti::kHeaderSize) {
    if (sizeof_hdr == 0x5C010000) throw Error("nifti.endian", path + ": big-endian NIfTI is not supported");
    throw Error("nifti.header", path + ": sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
  }
  char magic[4];
  r.seek(344);
  r.get_bytes(magic, 4);
  if (std::string(magic, 3) != "n+1" || magic[3] != '\0') {
    if (std::string(magic, 3) == "ni1") throw Error("nifti.magic", path + ": two-file NIfTI (.hdr/.img) is not supported");
    throw Error("nifti.magic", path + ": not a single-file NIfTI-1 image");
  }
  NiftiImage img;
  r.seek(40);
  std::array<std::int16_t, 8> dim{};
  for (auto& d : dim) d = r.get<std::int16_t>();
  if (dim[0] < 1 || dim[0] > 4)
    throw Error("nifti.dims", path + ": " + std::to_string(dim[0]) + " dimensions, expected 1 to 4");
  for (int i = 1; i <= dim[0]; ++i) {
    if (dim[i] < 1) throw Error("nifti.dims", path + ": non-positive extent in dimension " + std::to_string(i));
    img.dims[i - 1] = std::size_t(dim[i]);
  }
  r.seek(70);
  img.datatype = r.get<std::int16_t>();
  const auto bitpix = r.get<std::int16_t>();
  std::size_t bytes = 0;
  switch (img.datatype) {
    case nifti::kUint8: bytes = 1; break;
    case nifti::kInt16: bytes = 2; break;
    case nifti::kFloat32: bytes = 4; break;
    case nifti::kFloat64: bytes = 8; break;
    default:
      throw Error("nifti.datatype", path + ": unsupported datatype code " + std::to_string(img.datatype));
  }
  if (std::size_t(bitpix) != 8 * bytes)
    throw Error("nifti.header", path + ": bitpix " + std::to_string(bitpix) + " does not match the datatype");
  r.seek(76);
  for (int i = 0; i < 8; ++i) {
    const double p = r.get<float>();
    if (i >= 1 && i <= 4) img.pixdim[i - 1] = std::abs(p) > 0 ? std::abs(p) : 1.0;
  }
  const double vox_offset = r.get<float>();
  double slope = r.get<float>();
  double offset = r.get<float>();
  // scl_slope == 0 means unscaled.
  if (slope == 0.0 || !std::isfinite(slope)) slope = 1.0, offset = 0.0;
  if (!std::isfinite(offset)) offset = 0.0;

  const std::size_t n = img.voxels() * img.dims[3];
  const std::size_t start = std::max<std::size_t>(std::size_t(vox_offset), nifti::kDataOffset);
  if (start + n * bytes > r.size())
    throw Error("nifti.truncated", path + ": image data is truncated (" + std::to_string(r.size()) + " bytes, need " +
                                       std::to_string(start + n * bytes) + ")");
  r.seek(start);
  img.data.resize(n);
  for (auto& v : img.data) {
    double raw = 0;
    switch (img.datatype) {
      case nifti::kUint8: raw = r.get<std::uint8_t>(); break;
      case nifti::kInt16: raw = r.get<std::int16_t>(); break;
      case nifti::kFloat32: raw = r.get<float>(); break;
      default: raw = r.get<double>(); break;
    }
    v = raw * slope + offset;
  }
  return img;
}

// float32, scl_slope 1, qform/sform unset (voxel sizes only).
inline void write_nifti(const NiftiImage& img, const std::string& path) {
  const std::size_t n = img.voxels() * img.dims[3];
  require(img.data.size() == n, "nifti.shape", "image data size does not match dimensions");
  for (std::size_t d : img.dims)
    require(d >= 1 && d <= 32767, "nifti.dims", "dimension outside the NIfTI-1 int16 range");
  bin::Writer w;
  w.put<std::int32_t>(nifti::kHeaderSize);
  w.pad_to(40);
  const int ndim = img.dims[3] > 1 ? 4 : 3;
  w.put<std::int16_t>(std::int16_t(ndim));
  for (int i = 0; i < 7; ++i) w.put<std::int16_t>(i < 4 ? std::int16_t(img.dims[i]) : std::int16_t(1));
  w.pad_to(70);
  w.put<std::int16_t>(nifti::kFloat32);
  w.put<std::int16_t>(32);
  w.pad_to(76);
  w.put<float>(1.0f);  // qfac
  for (int i = 0; i < 7; ++i) w.put<float>(i < 4 ? float(img.pixdim[i]) : 1.0f);
  w.put<float>(float(nifti::kDataOffset));
  w.put<float>(1.0f);  // scl_slope
  w.put<float>(0.0f);  // scl_inter
  w.pad_to(123);
  w.put<std::uint8_t>(2 | 8);  // mm, seconds
  w.pad_to(344);
  w.put_bytes("n+1\0", 4);
  w.pad_to(nifti::kDataOffset);
  for (double v : img.data) w.put<float>(float(v));
  try {
    w.save(path);
  } catch (const Error& e) {
    throw Error("nifti.write", e.what());
  }
}

// 4-D image -> voxel-major volume (all voxels masked).
inline Volume4D read_volume(const std::string& path) {
  const NiftiImage img = read_nifti(path);
  Volume4D vol(img.grid(), img.dims[3]);
  vol.voxel_mm = {img.pixdim[0], img.pixdim[1], img.pixdim[2]};
  const std::size_t nv = img.voxels();
  for (std::size_t t = 0; t < vol.nt; ++t)
    for (std::size_t v = 0; v < nv; ++v) vol.data[v * vol.nt + t] = img.data[t * nv + v];
  return vol;
}

inline void write_volume(const Volume4D& vol, const std::string& path) {
  NiftiImage img;
  img.dims = {vol.grid.nx, vol.grid.ny, vol.grid.nz, vol.nt};
  img.pixdim = {vol.voxel_mm[0], vol.voxel_mm[1], vol.voxel_mm[2], 1.0};
  const std::size_t nv = vol.voxels();
  img.data.resize(nv * vol.nt);
  for (std::size_t t = 0; t < vol.nt; ++t)
    for (std::size_t v = 0; v < nv; ++v) img.data[t * nv + v] = vol.data[v * vol.nt + t];
  write_nifti(img, path);
}

inline Map3D read_map(const std::string& path, std::array<double, 3>* voxel_mm = nullptr) {
  const NiftiImage img = read_nifti(path);
  require(img.dims[3] == 1, "nifti.dims", path + ": expected a 3-D image");
  if (voxel_mm) *voxel_mm = {img.pixdim[0], img.pixdim[1], img.pixdim[2]};
  Map3D m(img.grid());
  m.values = img.data;
  return m;
}

// Non-zero, finite voxels are inside the mask.
inline std::vector<std::uint8_t> read_mask(const std::string& path, const Grid& expected) {
  const Map3D m = read_map(path);
  require(m.grid == expected, "nifti.dims", path + ": mask grid does not match the volume");
  std::vector<std::uint8_t> mask(m.values.size());
  for (std::size_t v = 0; v < mask.size(); ++v) mask[v] = std::isfinite(m[v]) && m[v] != 0.0;
  return mask;
}

// Unmasked or undefined voxels are stored as NaN.
inline void write_map(const Map3D& map, const std::array<double, 3>& voxel_mm, const std::string& path) {
  NiftiImage img;
  img.dims = {map.grid.nx, map.grid.ny, map.grid.nz, 1};
  img.pixdim = {voxel_mm[0], voxel_mm[1], voxel_mm[2], 1.0};
  img.data = map.values;
  write_nifti(img, path);
}

}  // namespace qbvi
