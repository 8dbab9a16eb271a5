#ifndef VOXSEG_PATCHES_HPP
#define VOXSEG_PATCHES_HPP

#include <algorithm>

#include "voxseg/tensor.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// Sliding, overlapping patch layout over a (possibly padded) volume. Origins
// step by `stride`; the final origin on each axis is clamped so the last patch
// ends exactly at the border.
struct PatchGrid {
  int64_t patch_size = 64;
  int64_t stride = 32;
  std::array<int64_t, 3> volume_dims{0, 0, 0};  // padded dims the grid covers
  std::array<std::vector<int64_t>, 3> axis_origins;
  std::vector<std::array<int64_t, 3>> origins;

  int64_t patch_count() const { return static_cast<int64_t>(origins.size()); }
};

inline PatchGrid build_patch_grid(std::array<int64_t, 3> dims, int64_t patch_size = 64,
                                  int64_t stride = 32) {
  check(patch_size >= 1 && stride >= 1, ErrorKind::Config,
        "patch grid: patch size and stride must be positive");
  check(stride <= patch_size, ErrorKind::Config,
        "patch grid: stride " + std::to_string(stride) + " > patch size " +
            std::to_string(patch_size) + " would leave gaps");
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.stride = stride;
  for (int a = 0; a < 3; ++a) {
    grid.volume_dims[a] = std::max(dims[a], patch_size);
    auto& origins = grid.axis_origins[a];
    const int64_t last = grid.volume_dims[a] - patch_size;
    for (int64_t o = 0; o < last; o += stride) origins.push_back(o);
    origins.push_back(last);  // border-clamped final origin
  }
  for (int64_t oz : grid.axis_origins[2])
    for (int64_t oy : grid.axis_origins[1])
      for (int64_t ox : grid.axis_origins[0]) grid.origins.push_back({ox, oy, oz});
  return grid;
}

// Copies one patch (zero padding outside the volume) into a (1,1,p,p,p)
// tensor laid out (z,y,x) to match the tensor's (D,H,W) axes.
template <typename TVol, typename T>
void copy_patch(const Volume<TVol>& vol, std::array<int64_t, 3> origin, int64_t patch,
                T* dst) {
  for (int64_t z = 0; z < patch; ++z)
    for (int64_t y = 0; y < patch; ++y)
      for (int64_t x = 0; x < patch; ++x) {
        const int64_t vx = origin[0] + x, vy = origin[1] + y, vz = origin[2] + z;
        T v = T(0);
        if (vx >= 0 && vx < vol.dims[0] && vy >= 0 && vy < vol.dims[1] && vz >= 0 &&
            vz < vol.dims[2])
          v = static_cast<T>(vol.at(vx, vy, vz));
        dst[(z * patch + y) * patch + x] = v;
      }
}

// Per-volume-normalized patches for sliding-window inference, one
// (1,1,p,p,p) tensor per grid origin.
inline std::pair<PatchGrid, std::vector<Tensor<float>>> extract_patches(
    const Volume<float>& raw, int64_t patch_size = 64, int64_t stride = 32) {
  const Volume<float> normalized = normalize_intensity(raw);
  PatchGrid grid = build_patch_grid(normalized.dims, patch_size, stride);
  std::vector<Tensor<float>> patches;
  patches.reserve(grid.origins.size());
  for (const auto& origin : grid.origins) {
    auto t = Tensor<float>::zeros({1, 1, patch_size, patch_size, patch_size});
    copy_patch(normalized, origin, patch_size, t.data());
    patches.push_back(std::move(t));
  }
  return {std::move(grid), std::move(patches)};
}

// Voxelwise mean of all covering patch predictions, cropped to `out_dims`
// (the original, pre-padding volume size).
inline Volume<float> fuse_predictions(const PatchGrid& grid,
                                      const std::vector<Tensor<float>>& patch_probs,
                                      std::array<int64_t, 3> out_dims,
                                      std::array<double, 3> spacing) {
  check(static_cast<int64_t>(patch_probs.size()) == grid.patch_count(), ErrorKind::Data,
        "fuse: expected " + std::to_string(grid.patch_count()) + " patches, got " +
            std::to_string(patch_probs.size()));
  const int64_t p = grid.patch_size;
  std::vector<double> sum(static_cast<size_t>(grid.volume_dims[0] * grid.volume_dims[1] *
                                              grid.volume_dims[2]),
                          0.0);
  std::vector<int32_t> cover(sum.size(), 0);
  const int64_t nx = grid.volume_dims[0], ny = grid.volume_dims[1];
  for (size_t i = 0; i < patch_probs.size(); ++i) {
    const auto& t = patch_probs[i];
    check(t.defined() && t.numel() == p * p * p, ErrorKind::Data,
          "fuse: patch " + std::to_string(i) + " has wrong element count");
    const auto& o = grid.origins[i];
    const float* src = t.data();
    for (int64_t z = 0; z < p; ++z)
      for (int64_t y = 0; y < p; ++y)
        for (int64_t x = 0; x < p; ++x) {
          const int64_t idx = ((o[2] + z) * ny + (o[1] + y)) * nx + (o[0] + x);
          sum[idx] += src[(z * p + y) * p + x];
          cover[idx] += 1;
        }
  }
  Volume<float> out = Volume<float>::create(out_dims, spacing);
  bool covered = true;
  for (int64_t z = 0; z < out_dims[2]; ++z)
    for (int64_t y = 0; y < out_dims[1]; ++y)
      for (int64_t x = 0; x < out_dims[0]; ++x) {
        const int64_t idx = (z * ny + y) * nx + x;
        covered &= cover[idx] >= 1;
        out.at(x, y, z) = static_cast<float>(sum[idx] / std::max(cover[idx], 1));
      }
  check(covered, ErrorKind::Data, "fuse: grid leaves uncovered voxels");
  return out;
}

// label = 1 where prob strictly exceeds the threshold.
inline Volume<uint8_t> binarize(const Volume<float>& prob, double threshold = 0.5) {
  Volume<uint8_t> out = Volume<uint8_t>::create(prob.dims, prob.spacing);
  out.affine = prob.affine;
  for (size_t i = 0; i < prob.data.size(); ++i)
    out.data[i] = prob.data[i] > threshold ? 1 : 0;
  return out;
}

}  // namespace voxseg

#endif  // VOXSEG_PATCHES_HPP
