#ifndef VOXSEG_METRICS_HPP
#define VOXSEG_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "voxseg/volume.hpp"

namespace voxseg {

// Voxel-center coordinates of a mask's surface, in physical mm.
struct SurfacePointSet {
  std::array<int64_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1, 1, 1};
  std::vector<std::array<int64_t, 3>> voxels;
  std::vector<std::array<double, 3>> points_mm;

  bool empty() const { return voxels.empty(); }
  size_t size() const { return voxels.size(); }
};

inline double dice(const Volume<uint8_t>& a, const Volume<uint8_t>& b) {
  check(a.dims == b.dims, ErrorKind::Shape, "dice: volume dims differ");
  int64_t na = 0, nb = 0, inter = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool va = a.data[i] != 0, vb = b.data[i] != 0;
    na += va;
    nb += vb;
    inter += va && vb;
  }
  if (na + nb == 0) return 1.0;  // two empty masks coincide
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// Surface = foreground voxels with at least one background 6-neighbor; the
// outside of the volume counts as background.
inline SurfacePointSet extract_surface(const Volume<uint8_t>& mask) {
  SurfacePointSet s;
  s.dims = mask.dims;
  s.spacing = mask.spacing;
  const int64_t nx = mask.dims[0], ny = mask.dims[1], nz = mask.dims[2];
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        if (!mask.at(x, y, z)) continue;
        const bool boundary =
            x == 0 || !mask.at(x - 1, y, z) || x == nx - 1 || !mask.at(x + 1, y, z) ||
            y == 0 || !mask.at(x, y - 1, z) || y == ny - 1 || !mask.at(x, y + 1, z) ||
            z == 0 || !mask.at(x, y, z - 1) || z == nz - 1 || !mask.at(x, y, z + 1);
        if (boundary) {
          s.voxels.push_back({x, y, z});
          s.points_mm.push_back(
              {x * mask.spacing[0], y * mask.spacing[1], z * mask.spacing[2]});
        }
      }
  return s;
}

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D lower envelope of parabolas at anisotropic sample positions x_i = i*w
// (squared-distance transform); exact up to floating point.
inline void edt_1d(const double* f, double* d, int64_t n, double w, int* v, double* zbuf) {
  int k = 0;
  v[0] = 0;
  zbuf[0] = -kInf;
  zbuf[1] = kInf;
  auto X = [&](int i) { return w * i; };
  for (int64_t q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s;
    for (;;) {
      const int p = v[k];
      if (f[p] == kInf) {
        // previous site unreachable: replace it
        --k;
        if (k < 0) break;
        continue;
      }
      s = ((f[q] + X(q) * X(q)) - (f[p] + X(p) * X(p))) / (2 * X(q) - 2 * X(p));
      if (s > zbuf[k]) break;
      --k;
      if (k < 0) break;
    }
    ++k;
    v[k] = static_cast<int>(q);
    zbuf[k] = k == 0 ? -kInf : s;
    zbuf[k + 1] = kInf;
  }
  if (k < 0 || f[v[0]] == kInf) {  // no sites on this line
    for (int64_t q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  k = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (zbuf[k + 1] < X(q)) ++k;
    const double dx = X(q) - X(v[k]);
    d[q] = dx * dx + f[v[k]];
  }
}

// Exact anisotropic squared Euclidean distance transform to the site set.
inline std::vector<double> edt_sq(const std::vector<uint8_t>& sites,
                                  const std::array<int64_t, 3>& dims,
                                  const std::array<double, 3>& spacing) {
  const int64_t nx = dims[0], ny = dims[1], nz = dims[2];
  std::vector<double> dist(sites.size());
  for (size_t i = 0; i < sites.size(); ++i) dist[i] = sites[i] ? 0.0 : kInf;
  const int64_t maxn = std::max({nx, ny, nz});
  std::vector<double> f(maxn), dline(maxn);
  std::vector<int> v(maxn);
  std::vector<double> zbuf(maxn + 1);

  // x pass
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y) {
      double* row = dist.data() + (z * ny + y) * nx;
      edt_1d(row, dline.data(), nx, spacing[0], v.data(), zbuf.data());
      std::copy(dline.begin(), dline.begin() + nx, row);
    }
  // y pass
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t x = 0; x < nx; ++x) {
      for (int64_t y = 0; y < ny; ++y) f[y] = dist[(z * ny + y) * nx + x];
      edt_1d(f.data(), dline.data(), ny, spacing[1], v.data(), zbuf.data());
      for (int64_t y = 0; y < ny; ++y) dist[(z * ny + y) * nx + x] = dline[y];
    }
  // z pass
  for (int64_t y = 0; y < ny; ++y)
    for (int64_t x = 0; x < nx; ++x) {
      for (int64_t z = 0; z < nz; ++z) f[z] = dist[(z * ny + y) * nx + x];
      edt_1d(f.data(), dline.data(), nz, spacing[2], v.data(), zbuf.data());
      for (int64_t z = 0; z < nz; ++z) dist[(z * ny + y) * nx + x] = dline[z];
    }
  return dist;
}

}  // namespace detail

// For each src surface point, the Euclidean mm distance to the nearest dst
// surface point (computed via an exact distance transform).
inline std::vector<double> directed_distances(const SurfacePointSet& src,
                                              const SurfacePointSet& dst) {
  check(!dst.empty(), ErrorKind::Data, "directed_distances: destination surface is empty");
  check(src.dims == dst.dims, ErrorKind::Shape,
        "directed_distances: surfaces come from different grids");
  std::vector<uint8_t> sites(static_cast<size_t>(dst.dims[0] * dst.dims[1] * dst.dims[2]), 0);
  for (const auto& vx : dst.voxels)
    sites[(vx[2] * dst.dims[1] + vx[1]) * dst.dims[0] + vx[0]] = 1;
  const std::vector<double> d2 = detail::edt_sq(sites, dst.dims, dst.spacing);
  std::vector<double> out;
  out.reserve(src.size());
  for (const auto& vx : src.voxels)
    out.push_back(std::sqrt(d2[(vx[2] * src.dims[1] + vx[1]) * src.dims[0] + vx[0]]));
  return out;
}

// Linear-interpolated percentile of a sample (q in [0,100]).
inline double percentile_linear(std::vector<double> values, double q) {
  check(!values.empty(), ErrorKind::Data, "percentile: empty sample");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= values.size()) return values.back();
  const double w = rank - static_cast<double>(lo);
  return values[lo] + w * (values[lo + 1] - values[lo]);
}

// 95th-percentile Hausdorff distance: max of the two directed 95th
// percentiles. Undefined (nullopt) when either mask is empty.
inline std::optional<double> hd95(const Volume<uint8_t>& a, const Volume<uint8_t>& b) {
  check(a.dims == b.dims, ErrorKind::Shape, "hd95: volume dims differ");
  SurfacePointSet sa = extract_surface(a), sb = extract_surface(b);
  if (sa.empty() || sb.empty()) return std::nullopt;
  const double pab = percentile_linear(directed_distances(sa, sb), 95.0);
  const double pba = percentile_linear(directed_distances(sb, sa), 95.0);
  return std::max(pab, pba);
}

// Average surface distance; symmetric by default, the directed prediction->
// truth variant behind the flag.
inline std::optional<double> asd(const Volume<uint8_t>& a, const Volume<uint8_t>& b,
                                 bool symmetric = true) {
  check(a.dims == b.dims, ErrorKind::Shape, "asd: volume dims differ");
  SurfacePointSet sa = extract_surface(a), sb = extract_surface(b);
  if (sa.empty() || sb.empty()) return std::nullopt;
  const std::vector<double> dab = directed_distances(sa, sb);
  double sum = 0.0;
  for (double d : dab) sum += d;
  if (!symmetric) return sum / static_cast<double>(dab.size());
  const std::vector<double> dba = directed_distances(sb, sa);
  for (double d : dba) sum += d;
  return sum / static_cast<double>(dab.size() + dba.size());
}

// Float volume holding d(pred-surface -> gt-surface) at prediction-surface
// voxels, zero elsewhere (exported for external surface rendering).
inline Volume<float> surface_error_map(const Volume<uint8_t>& pred, const Volume<uint8_t>& gt) {
  check(pred.dims == gt.dims, ErrorKind::Shape, "surface_error_map: volume dims differ");
  SurfacePointSet sp = extract_surface(pred), sg = extract_surface(gt);
  check(!sp.empty() && !sg.empty(), ErrorKind::Data,
        "surface_error_map: both masks must be nonempty");
  const std::vector<double> d = directed_distances(sp, sg);
  Volume<float> out = Volume<float>::create(pred.dims, pred.spacing);
  out.affine = pred.affine;
  for (size_t i = 0; i < sp.voxels.size(); ++i) {
    const auto& vx = sp.voxels[i];
    out.at(vx[0], vx[1], vx[2]) = static_cast<float>(d[i]);
  }
  return out;
}

// Per-case evaluation record plus aggregates for the report CSV.
struct CaseMetrics {
  std::string name;
  double dice = 0.0;
  std::optional<double> hd95_mm;
  std::optional<double> asd_mm;
};

struct MetricAggregate {
  double mean = 0.0;
  double stddev = 0.0;
  int64_t count = 0;
};

inline MetricAggregate aggregate(const std::vector<double>& values) {
  MetricAggregate a;
  a.count = static_cast<int64_t>(values.size());
  if (values.empty()) return a;
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - a.mean) * (v - a.mean);
  a.stddev = values.size() > 1 ? std::sqrt(sq / static_cast<double>(values.size() - 1)) : 0.0;
  return a;
}

struct MetricsReport {
  std::vector<CaseMetrics> cases;
  std::string method_label;

  MetricAggregate dice_agg() const {
    std::vector<double> v;
    for (const auto& c : cases) v.push_back(c.dice);
    return aggregate(v);
  }
  MetricAggregate hd95_agg() const {
    std::vector<double> v;
    for (const auto& c : cases)
      if (c.hd95_mm) v.push_back(*c.hd95_mm);
    return aggregate(v);
  }
  MetricAggregate asd_agg() const {
    std::vector<double> v;
    for (const auto& c : cases)
      if (c.asd_mm) v.push_back(*c.asd_mm);
    return aggregate(v);
  }
};

}  // namespace voxseg

#endif  // VOXSEG_METRICS_HPP
