#ifndef VOXSEG_AUGMENT_HPP
#define VOXSEG_AUGMENT_HPP

#include <array>
#include <random>
#include <vector>

#include "voxseg/common.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

// Orthogonal transform of a cube: output coordinate o maps to source
// coordinate src[perm[a]] = flip[a] ? s-1-o[a] : o[a]. The 24 with positive
// determinant are the axis-aligned rotations.
struct CubeTransform {
  std::array<int, 3> perm{0, 1, 2};
  std::array<bool, 3> flip{false, false, false};

  bool is_rotation() const {
    int sign = 1;
    // parity of the permutation
    int p[3] = {perm[0], perm[1], perm[2]};
    for (int i = 0; i < 3; ++i)
      for (int j = i + 1; j < 3; ++j)
        if (p[i] > p[j]) sign = -sign;
    for (bool f : flip)
      if (f) sign = -sign;
    return sign == 1;
  }
};

inline const std::vector<CubeTransform>& cube_rotations() {
  static const std::vector<CubeTransform> table = [] {
    std::vector<CubeTransform> out;
    const std::array<std::array<int, 3>, 6> perms = {
        {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    for (const auto& p : perms)
      for (int mask = 0; mask < 8; ++mask) {
        CubeTransform t;
        t.perm = p;
        t.flip = {(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0};
        if (t.is_rotation()) out.push_back(t);
      }
    return out;
  }();
  return table;
}

template <typename T>
void apply_cube_transform(const T* src, T* dst, int64_t s, const CubeTransform& t) {
  for (int64_t o0 = 0; o0 < s; ++o0)
    for (int64_t o1 = 0; o1 < s; ++o1)
      for (int64_t o2 = 0; o2 < s; ++o2) {
        int64_t out_coord[3] = {o0, o1, o2};
        int64_t in_coord[3];
        for (int a = 0; a < 3; ++a)
          in_coord[t.perm[a]] = t.flip[a] ? s - 1 - out_coord[a] : out_coord[a];
        dst[(o0 * s + o1) * s + o2] = src[(in_coord[0] * s + in_coord[1]) * s + in_coord[2]];
      }
}

template <typename T>
std::vector<T> apply_cube_transform(const std::vector<T>& src, int64_t s,
                                    const CubeTransform& t) {
  std::vector<T> dst(src.size());
  apply_cube_transform(src.data(), dst.data(), s, t);
  return dst;
}

template <typename T>
std::vector<T> flip_axis(const std::vector<T>& src, int64_t s, int axis) {
  CubeTransform t;
  t.flip[axis] = true;
  return apply_cube_transform(src, s, t);
}

// One quarter turn about `axis`, repeated `turns` times.
template <typename T>
std::vector<T> rotate90(const std::vector<T>& src, int64_t s, int axis, int turns = 1) {
  // quarter turn about axis a sends (u, v) -> (v, s-1-u) in the other two axes
  const int u = axis == 0 ? 1 : 0;
  const int v = axis == 2 ? 1 : 2;
  CubeTransform t;
  t.perm[u] = v;
  t.perm[v] = u;
  t.flip[v] = true;  // swap of two axes plus one flip: determinant +1
  std::vector<T> cur = src;
  for (int i = 0; i < ((turns % 4) + 4) % 4; ++i) cur = apply_cube_transform(cur, s, t);
  return cur;
}

// Draws the random flip + 90-degree-rotation augmentation for one sample.
// Image and label must receive the identical transform, so the draw is
// returned as a pair of transforms applied in order (flips, then rotation).
struct AugmentDraw {
  CubeTransform flips;
  CubeTransform rotation;
};

inline AugmentDraw draw_augmentation(std::mt19937_64& rng, bool do_flips, bool do_rotations) {
  AugmentDraw d;
  if (do_flips) {
    std::bernoulli_distribution coin(0.5);
    for (int a = 0; a < 3; ++a) d.flips.flip[a] = coin(rng);
  }
  if (do_rotations) {
    const auto& rots = cube_rotations();
    std::uniform_int_distribution<size_t> pick(0, rots.size() - 1);
    d.rotation = rots[pick(rng)];
  }
  return d;
}

template <typename T>
std::vector<T> apply_augmentation(const std::vector<T>& src, int64_t s, const AugmentDraw& d) {
  return apply_cube_transform(apply_cube_transform(src, s, d.flips), s, d.rotation);
}

}  // namespace voxseg

#endif  // VOXSEG_AUGMENT_HPP
