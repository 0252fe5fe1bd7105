#pragma once

#include <cstdint>

#include "reconfair/grid.hpp"

namespace reconfair::mri {

/// Fourier domain of an image. With `dc_centered` the zero frequency sits
/// at (rows/2, cols/2).
struct KSpaceGrid {
  ComplexGrid data;
  bool dc_centered = true;
};

/// Radial sampling pattern rasterized on the Cartesian k-space grid.
struct RadialMask {
  Grid<std::uint8_t> keep;
  double acceleration = 1.0;
  std::size_t spoke_count = 0;
  double retained_fraction = 1.0;
};

/// Golden-angle increment between consecutive spokes, in degrees.
inline constexpr double kGoldenAngleDeg = 111.24611797498108;

/// Unnormalized forward DFT of a real image (zero phase), DC centered.
KSpaceGrid image_to_kspace(const Image& img);

/// Real part of the normalized inverse DFT, without clamping.
Image kspace_to_image(const KSpaceGrid& k);

/// Spokes through DC at golden-angle increments from a seeded starting
/// angle. The spoke count is the one whose rasterized coverage is closest
/// to 1/acceleration; acceleration 1 keeps every sample.
RadialMask make_radial_mask(Shape shape, double acceleration, std::uint64_t seed);

/// Elementwise product; dropped samples become exactly zero.
KSpaceGrid undersample(const KSpaceGrid& k, const RadialMask& mask);

struct ZeroFillResult {
  Image image;
  /// Largest |imaginary part| of the inverse transform before it was dropped.
  double max_imag_residue = 0.0;
};

/// Inverse DFT of the (zero-filled) grid, real part clamped to [0,1].
ZeroFillResult zero_fill_reconstruct(const KSpaceGrid& k);

/// Convenience: kspace -> radial mask -> zero-filled image.
ZeroFillResult degrade(const Image& img, double acceleration, std::uint64_t seed,
                       RadialMask* mask_out = nullptr);

}  // namespace reconfair::mri
