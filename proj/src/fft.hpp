#pragma once

#include <complex>
#include <vector>

#include "reconfair/grid.hpp"

namespace reconfair::detail {

/// Unnormalized in-place 2D DFT (FFTW sign convention: forward uses e^{-i}).
void fft2d(ComplexGrid& grid, bool inverse);

/// Unnormalized in-place 1D DFT.
void fft1d(std::vector<std::complex<double>>& data, bool inverse);

}  // namespace reconfair::detail
