#ifndef VOXSEG_VOLUME_HPP
#define VOXSEG_VOLUME_HPP

#include <array>
#include <cmath>
#include <vector>

#include "voxseg/common.hpp"

namespace voxseg {

namespace detail {
// Round a double through float32. The volatile staging is load-bearing: GCC 11
// at -O3 vectorizes the snap loop and illegally drops the narrowing
// conversion from two of the three lanes.
inline double snap_f32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}
}  // namespace detail

// 3-D scalar field with voxel spacing in mm and an affine position. Data is
// stored x-fastest (NIfTI order); dims are (nx, ny, nz).
template <typename T>
struct Volume {
  std::array<int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{0.8, 0.8, 0.8};
  // rows of the voxel->mm affine (sform): mm_i = affine[i][0]*x + ... + affine[i][3]
  std::array<std::array<double, 4>, 3> affine{{{0.8, 0, 0, 0}, {0, 0.8, 0, 0}, {0, 0, 0.8, 0}}};
  std::vector<T> data;

  // Spacing and affine snap to float32 so the NIfTI round trip (which stores
  // them as floats) is bit-exact.
  static Volume create(std::array<int64_t, 3> dims, std::array<double, 3> spacing = {0.8, 0.8,
                                                                                     0.8}) {
    check(dims[0] > 0 && dims[1] > 0 && dims[2] > 0, ErrorKind::Config,
          "volume: dims must be positive");
    check(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, ErrorKind::Config,
          "volume: spacing must be positive");
    Volume v;
    v.dims = dims;
    for (int i = 0; i < 3; ++i) v.spacing[i] = detail::snap_f32(spacing[i]);
    v.affine = {{{v.spacing[0], 0, 0, 0}, {0, v.spacing[1], 0, 0}, {0, 0, v.spacing[2], 0}}};
    v.data.assign(static_cast<size_t>(dims[0] * dims[1] * dims[2]), T(0));
    return v;
  }

  int64_t numel() const { return dims[0] * dims[1] * dims[2]; }

  int64_t index(int64_t x, int64_t y, int64_t z) const {
    return (z * dims[1] + y) * dims[0] + x;
  }
  T& at(int64_t x, int64_t y, int64_t z) { return data[index(x, y, z)]; }
  T at(int64_t x, int64_t y, int64_t z) const { return data[index(x, y, z)]; }

  bool same_grid(const Volume& o) const { return dims == o.dims && spacing == o.spacing; }
};

// Per-volume z-score over nonzero voxels (the phantom's implicit brain mask).
inline Volume<float> normalize_intensity(const Volume<float>& in) {
  double sum = 0.0, sq = 0.0;
  int64_t n = 0;
  for (float v : in.data) {
    if (v != 0.0f) {
      sum += v;
      sq += static_cast<double>(v) * v;
      ++n;
    }
  }
  Volume<float> out = in;
  if (n == 0) return out;
  const double mean = sum / n;
  const double var = std::max(sq / n - mean * mean, 0.0);
  const double inv_std = 1.0 / std::max(std::sqrt(var), 1e-8);
  for (auto& v : out.data)
    if (v != 0.0f) v = static_cast<float>((v - mean) * inv_std);
  return out;
}

}  // namespace voxseg

#endif  // VOXSEG_VOLUME_HPP
