#pragma once

#include <cstdint>
#include <vector>

#include "reconfair/grid.hpp"

namespace reconfair::phantom {

struct Ellipse {
  double intensity;  // additive
  double semi_x, semi_y;  // in units of the half-width
  double center_x, center_y;
  double angle_deg;
};

/// Sum of ellipses on [-1,1]^2, clamped to [0,1].
Image render(const std::vector<Ellipse>& ellipses, std::size_t rows, std::size_t cols);

/// Modified Shepp-Logan head phantom (intensities in [0,1]).
Image shepp_logan(std::size_t size);

/// Seeded random head-like phantom: a bright outer ellipse with several
/// smaller inclusions. Deterministic under seed.
Image random_ellipses(std::size_t size, std::uint64_t seed);

/// Uniform disk of the given radius (pixels) centered in the image.
Image disk(std::size_t size, double radius, double value = 1.0);

}  // namespace reconfair::phantom
