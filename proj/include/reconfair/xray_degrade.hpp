#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "reconfair/grid.hpp"

namespace reconfair::xray {

/// Parallel-beam projections: rows are angles, columns detector bins.
struct Sinogram {
  Grid<double> data;
  std::vector<double> angles;  // radians, uniform in [0, pi)
  double detector_spacing = 1.0;  // pixel units

  std::size_t n_angles() const { return data.rows(); }
  std::size_t n_bins() const { return data.cols(); }
};

/// Incident fluence model for the low-dose simulation.
struct DoseModel {
  double photon_count = 1e5;
  /// Per-bin multiplicative fluence in (0,1], 1 at the central bin.
  std::vector<double> bowtie_profile;
  /// Converts line integrals (pixel-value x pixel) to attenuation.
  double attenuation_scale = 0.05;
};

inline constexpr std::size_t kDefaultAngles = 180;
inline constexpr double kDefaultBowtieEdge = 0.3;
/// Target -ln(transmission) for the median ray when calibrating attenuation.
inline constexpr double kMedianRayAttenuation = 3.0;

/// Odd detector count covering the image diagonal.
std::size_t detector_bins_for(Shape shape);

/// Line integrals over `n_angles` angles uniform in [0, pi), sampled with
/// bilinear interpolation every half pixel along each ray.
Sinogram radon(const Image& img, std::size_t n_angles);

/// cos^2 bow-tie: 1 at the central bin, `edge_value` at both ends.
std::vector<double> make_bowtie(std::size_t n_bins, double edge_value = kDefaultBowtieEdge);

/// Scale so the median positive line integral across the given sinograms
/// attenuates by exp(-kMedianRayAttenuation).
double calibrate_attenuation(std::span<const Sinogram> sinograms,
                             double target = kMedianRayAttenuation);

DoseModel make_dose_model(double photon_count, std::size_t n_bins, double attenuation_scale,
                          double bowtie_edge = kDefaultBowtieEdge);

/// Poisson photon noise: counts ~ Poisson(N0 * bowtie * exp(-mu * s)),
/// clamped to >= 1, then converted back to line integrals.
Sinogram apply_dose_noise(const Sinogram& s, const DoseModel& dose, std::uint64_t seed);

/// Ramp-filtered (Hann apodized) back-projection, clamped to [0,1].
Image fbp_reconstruct(const Sinogram& s, Shape out_shape);

/// radon -> dose noise -> FBP.
Image degrade(const Image& img, const DoseModel& dose, std::size_t n_angles, std::uint64_t seed);

}  // namespace reconfair::xray
