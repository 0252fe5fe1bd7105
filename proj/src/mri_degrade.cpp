#include "reconfair/mri_degrade.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "fft.hpp"
#include "reconfair/rng.hpp"

namespace reconfair::mri {

namespace {

// Moves index 0 to the center (forward) or back (inverse).
ComplexGrid shift(const ComplexGrid& in, bool to_center) {
  const std::size_t h = in.rows(), w = in.cols();
  const std::size_t dy = to_center ? h / 2 : (h + 1) / 2;
  const std::size_t dx = to_center ? w / 2 : (w + 1) / 2;
  ComplexGrid out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) out((r + dy) % h, (c + dx) % w) = in(r, c);
  }
  return out;
}

void require_finite(const ComplexGrid& k, const char* what) {
  for (const auto& v : k) {
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) {
      throw std::invalid_argument(std::string(what) + ": non-finite k-space entry");
    }
  }
}

std::size_t count_kept(const Grid<std::uint8_t>& keep) {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

void rasterize_spoke(Grid<std::uint8_t>& keep, double angle) {
  const auto h = static_cast<long>(keep.rows());
  const auto w = static_cast<long>(keep.cols());
  const double cy = static_cast<double>(h / 2);
  const double cx = static_cast<double>(w / 2);
  const double radius = std::hypot(static_cast<double>(h), static_cast<double>(w)) / 2.0 + 1.0;
  const double dy = std::sin(angle), dx = std::cos(angle);
  const auto steps = static_cast<long>(std::ceil(radius * 2.0));
  for (long s = -steps; s <= steps; ++s) {
    const double t = 0.5 * static_cast<double>(s);
    const long r = std::lround(cy + t * dy);
    const long c = std::lround(cx + t * dx);
    if (r >= 0 && r < h && c >= 0 && c < w) keep(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 1;
  }
}

}  // namespace

KSpaceGrid image_to_kspace(const Image& img) {
  ComplexGrid g(img.rows(), img.cols());
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (!std::isfinite(img[i])) throw std::invalid_argument("image_to_kspace: non-finite pixel");
    g[i] = {img[i], 0.0};
  }
  detail::fft2d(g, false);
  return {shift(g, true), true};
}

Image kspace_to_image(const KSpaceGrid& k) {
  require_finite(k.data, "kspace_to_image");
  ComplexGrid g = k.dc_centered ? shift(k.data, false) : k.data;
  detail::fft2d(g, true);
  const double norm = 1.0 / static_cast<double>(g.size());
  Image out(g.rows(), g.cols());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i].real() * norm;
  return out;
}

RadialMask make_radial_mask(Shape shape, double acceleration, std::uint64_t seed) {
  if (!(acceleration >= 1.0) || !std::isfinite(acceleration)) {
    throw std::invalid_argument("make_radial_mask: acceleration must be >= 1");
  }
  if (shape.rows == 0 || shape.cols == 0) throw std::invalid_argument("make_radial_mask: empty shape");
  const double total = static_cast<double>(shape.rows * shape.cols);

  RadialMask mask;
  mask.acceleration = acceleration;
  if (acceleration == 1.0) {
    mask.keep = Grid<std::uint8_t>(shape.rows, shape.cols, 1);
    // Nominal radial count for full Nyquist coverage.
    mask.spoke_count = static_cast<std::size_t>(
        std::ceil(std::numbers::pi / 2.0 * static_cast<double>(std::max(shape.rows, shape.cols))));
    mask.retained_fraction = 1.0;
    return mask;
  }

  const double target = 1.0 / acceleration;
  Rng rng(derive_seed(seed, "radial_mask"));
  const double start = rng.uniform(0.0, std::numbers::pi);
  const double step = kGoldenAngleDeg * std::numbers::pi / 180.0;

  // Coverage only grows as spokes are added, so walk forward until the
  // target is crossed and keep whichever side is closer.
  Grid<std::uint8_t> keep(shape.rows, shape.cols, 0);
  Grid<std::uint8_t> previous = keep;
  double prev_fraction = 0.0;
  std::size_t spokes = 0;
  const std::size_t max_spokes = 4 * (shape.rows + shape.cols) + 16;
  double fraction = 0.0;
  while (spokes < max_spokes) {
    previous = keep;
    prev_fraction = fraction;
    rasterize_spoke(keep, start + step * static_cast<double>(spokes));
    ++spokes;
    fraction = static_cast<double>(count_kept(keep)) / total;
    if (fraction >= target) break;
  }
  if (spokes > 1 && target - prev_fraction < fraction - target) {
    keep = std::move(previous);
    fraction = prev_fraction;
    --spokes;
  }
  if (std::abs(fraction - target) > 0.1 * target) {
    throw std::invalid_argument("make_radial_mask: " + std::to_string(shape.rows) + "x" +
                                std::to_string(shape.cols) +
                                " grid is too small to reach acceleration " +
                                std::to_string(acceleration) + " within 10%");
  }
  mask.keep = std::move(keep);
  mask.spoke_count = spokes;
  mask.retained_fraction = fraction;
  return mask;
}

KSpaceGrid undersample(const KSpaceGrid& k, const RadialMask& mask) {
  require_same_shape(k.data, mask.keep, "undersample");
  if (k.dc_centered && mask.keep(mask.keep.rows() / 2, mask.keep.cols() / 2) == 0) {
    throw std::invalid_argument("undersample: mask drops the DC sample");
  }
  KSpaceGrid out{ComplexGrid(k.data.rows(), k.data.cols()), k.dc_centered};
  for (std::size_t i = 0; i < k.data.size(); ++i) {
    if (mask.keep[i]) out.data[i] = k.data[i];
  }
  return out;
}

ZeroFillResult zero_fill_reconstruct(const KSpaceGrid& k) {
  if (!k.dc_centered) throw std::invalid_argument("zero_fill_reconstruct: grid must be DC centered");
  require_finite(k.data, "zero_fill_reconstruct");
  ComplexGrid g = shift(k.data, false);
  detail::fft2d(g, true);
  const double norm = 1.0 / static_cast<double>(g.size());
  ZeroFillResult res{Image(g.rows(), g.cols()), 0.0};
  for (std::size_t i = 0; i < g.size(); ++i) {
    res.image[i] = std::clamp(g[i].real() * norm, 0.0, 1.0);
    res.max_imag_residue = std::max(res.max_imag_residue, std::abs(g[i].imag() * norm));
  }
  return res;
}

ZeroFillResult degrade(const Image& img, double acceleration, std::uint64_t seed, RadialMask* mask_out) {
  auto mask = make_radial_mask(shape_of(img), acceleration, seed);
  auto res = zero_fill_reconstruct(undersample(image_to_kspace(img), mask));
  if (mask_out) *mask_out = std::move(mask);
  return res;
}

}  // namespace reconfair::mri
