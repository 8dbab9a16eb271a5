#ifndef VOXSEG_PHANTOM_HPP
#define VOXSEG_PHANTOM_HPP

#include <cmath>
#include <optional>
#include <random>

#include "voxseg/rng.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

// Synthetic thin-shell phantom standing in for the reconstructed MRI data: a
// folded spherical shell (the thin dark ribbon) between a bright interior and
// bright exterior, with partial-volume blur and noise.
struct PhantomSpec {
  std::array<int64_t, 3> dims{96, 96, 96};
  std::array<double, 3> spacing{0.8, 0.8, 0.8};
  std::optional<std::array<double, 3>> center_mm;  // defaults to the volume center
  double radius_mm = 24.0;
  double thickness_mm = 2.4;
  double fold_amplitude_mm = 4.0;
  int fold_frequency = 3;
  double mean_inside = 0.8, std_inside = 0.02;    // WM-like, bright
  double mean_shell = 0.35, std_shell = 0.02;     // CP, dark
  double mean_outside = 0.9, std_outside = 0.02;  // CSF-like, bright
  double blur_sigma_mm = 0.8;
  double noise_std = 0.03;
  uint64_t seed = 0;

  void validate() const {
    check(thickness_mm > 0 && thickness_mm < radius_mm, ErrorKind::Config,
          "phantom: thickness must be positive and below the radius");
    check(fold_amplitude_mm >= 0 && fold_frequency >= 0, ErrorKind::Config,
          "phantom: folding parameters must be non-negative");
  }
};

namespace detail {

// Smooth radial perturbation in [-1, 1]; vanishes at the poles so the folded
// surface stays continuous where the azimuth is undefined.
class FoldField {
 public:
  FoldField(int frequency, std::mt19937_64& rng) : freq_(frequency) {
    std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
    double norm = 0.0;
    for (int m = 1; m <= 3; ++m) {
      phases_[m - 1] = phase(rng);
      norm += 1.0 / m;
    }
    norm_ = 1.0 / norm;
  }

  double operator()(double theta, double phi) const {
    double f = 0.0;
    for (int m = 1; m <= 3; ++m)
      f += std::sin(m * freq_ * theta) * std::cos(m * freq_ * phi + phases_[m - 1]) / m;
    return f * norm_;
  }

 private:
  int freq_;
  double phases_[3]{};
  double norm_ = 1.0;
};

inline void gaussian_blur_axis(std::vector<float>& data, const std::array<int64_t, 3>& dims,
                               int axis, double sigma_vox) {
  if (sigma_vox <= 0) return;
  const int h = static_cast<int>(std::ceil(3.0 * sigma_vox));
  std::vector<double> kernel(2 * h + 1);
  double norm = 0.0;
  for (int i = -h; i <= h; ++i) {
    kernel[i + h] = std::exp(-0.5 * i * i / (sigma_vox * sigma_vox));
    norm += kernel[i + h];
  }
  for (auto& k : kernel) k /= norm;

  const int64_t nx = dims[0], ny = dims[1], nz = dims[2];
  const int64_t stride = axis == 0 ? 1 : (axis == 1 ? nx : nx * ny);
  const int64_t len = dims[axis];
  std::vector<float> line(static_cast<size_t>(len));
  for (int64_t z = 0; z < (axis == 2 ? int64_t(1) : nz); ++z)
    for (int64_t y = 0; y < (axis == 1 ? int64_t(1) : ny); ++y)
      for (int64_t x = 0; x < (axis == 0 ? int64_t(1) : nx); ++x) {
        const int64_t base = (z * ny + y) * nx + x;
        for (int64_t i = 0; i < len; ++i) line[i] = data[base + i * stride];
        for (int64_t i = 0; i < len; ++i) {
          double acc = 0.0;
          for (int k = -h; k <= h; ++k) {
            int64_t j = std::min(std::max(i + k, int64_t(0)), len - 1);  // replicate border
            acc += kernel[k + h] * line[j];
          }
          data[base + i * stride] = static_cast<float>(acc);
        }
      }
}

}  // namespace detail

inline std::pair<Volume<float>, Volume<uint8_t>> gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  Volume<float> image = Volume<float>::create(spec.dims, spec.spacing);
  Volume<uint8_t> label = Volume<uint8_t>::create(spec.dims, spec.spacing);

  std::array<double, 3> center;
  if (spec.center_mm.has_value()) {
    center = *spec.center_mm;
  } else {
    for (int i = 0; i < 3; ++i) center[i] = 0.5 * (spec.dims[i] - 1) * image.spacing[i];
  }
  const double reach = spec.radius_mm + spec.fold_amplitude_mm + 0.5 * spec.thickness_mm;
  for (int i = 0; i < 3; ++i) {
    const double extent = (spec.dims[i] - 1) * image.spacing[i];
    check(center[i] - reach >= 0.0 && center[i] + reach <= extent, ErrorKind::Data,
          "phantom: shell (reach " + std::to_string(reach) + " mm) exceeds volume bounds on axis " +
              std::to_string(i));
  }

  auto rng = make_rng(spec.seed, RngStream::Phantom);
  detail::FoldField fold(spec.fold_frequency, rng);
  std::normal_distribution<double> unit_normal(0.0, 1.0);

  const double half_t = 0.5 * spec.thickness_mm;
  for (int64_t z = 0; z < spec.dims[2]; ++z)
    for (int64_t y = 0; y < spec.dims[1]; ++y)
      for (int64_t x = 0; x < spec.dims[0]; ++x) {
        const double px = x * image.spacing[0] - center[0];
        const double py = y * image.spacing[1] - center[1];
        const double pz = z * image.spacing[2] - center[2];
        const double r = std::sqrt(px * px + py * py + pz * pz);
        double surface_r = spec.radius_mm;
        if (spec.fold_amplitude_mm > 0 && r > 1e-9) {
          const double theta = std::acos(std::clamp(pz / r, -1.0, 1.0));
          const double phi = std::atan2(py, px);
          surface_r += spec.fold_amplitude_mm * fold(theta, phi);
        }
        double mean, sd;
        if (std::abs(r - surface_r) <= half_t) {
          label.at(x, y, z) = 1;
          mean = spec.mean_shell;
          sd = spec.std_shell;
        } else if (r < surface_r) {
          mean = spec.mean_inside;
          sd = spec.std_inside;
        } else {
          mean = spec.mean_outside;
          sd = spec.std_outside;
        }
        image.at(x, y, z) =
            static_cast<float>(mean + (sd > 0 ? sd * unit_normal(rng) : 0.0));
      }

  if (spec.blur_sigma_mm > 0)
    for (int axis = 0; axis < 3; ++axis)
      detail::gaussian_blur_axis(image.data, image.dims, axis,
                                 spec.blur_sigma_mm / image.spacing[axis]);

  if (spec.noise_std > 0) {
    for (auto& v : image.data)
      v = static_cast<float>(v + spec.noise_std * unit_normal(rng));
  }
  return {std::move(image), std::move(label)};
}

}  // namespace voxseg

#endif  // VOXSEG_PHANTOM_HPP
