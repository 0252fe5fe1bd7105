#include "reconfair/xray_degrade.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>

#include "fft.hpp"
#include "reconfair/rng.hpp"

namespace reconfair::xray {

namespace {

double bilinear(const Image& img, double row, double col) {
  const double r0 = std::floor(row), c0 = std::floor(col);
  const auto ir = static_cast<long>(r0), ic = static_cast<long>(c0);
  const double fr = row - r0, fc = col - c0;
  const auto h = static_cast<long>(img.rows()), w = static_cast<long>(img.cols());
  auto at = [&](long r, long c) {
    return (r >= 0 && r < h && c >= 0 && c < w)
               ? img(static_cast<std::size_t>(r), static_cast<std::size_t>(c))
               : 0.0;
  };
  return (1 - fr) * ((1 - fc) * at(ir, ic) + fc * at(ir, ic + 1)) +
         fr * ((1 - fc) * at(ir + 1, ic) + fc * at(ir + 1, ic + 1));
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Frequency response of the discretized ramp (band-limited spatial kernel)
// multiplied by a Hann window that reaches zero at Nyquist.
std::vector<double> ramp_hann_response(std::size_t padded) {
  std::vector<std::complex<double>> h(padded);
  h[0] = 0.25;
  for (std::size_t n = 1; n <= padded / 2; ++n) {
    if (n % 2 == 1) {
      const double v = -1.0 / (std::numbers::pi * std::numbers::pi * static_cast<double>(n * n));
      h[n] = v;
      h[padded - n] = v;
    }
  }
  detail::fft1d(h, false);
  std::vector<double> resp(padded);
  for (std::size_t k = 0; k < padded; ++k) {
    const double hann =
        0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(padded)));
    resp[k] = h[k].real() * hann;
  }
  return resp;
}

}  // namespace

std::size_t detector_bins_for(Shape shape) {
  const double diag = std::hypot(static_cast<double>(shape.rows), static_cast<double>(shape.cols));
  auto n = static_cast<std::size_t>(std::ceil(diag)) + 2;
  return n % 2 == 0 ? n + 1 : n;
}

Sinogram radon(const Image& img, std::size_t n_angles) {
  if (n_angles < 2) throw std::invalid_argument("radon: need at least 2 angles");
  for (double v : img) {
    if (!(v >= 0.0)) throw std::invalid_argument("radon: image must be non-negative and finite");
  }
  const std::size_t n_bins = detector_bins_for(shape_of(img));
  Sinogram s;
  s.data = Grid<double>(n_angles, n_bins);
  s.angles.resize(n_angles);
  const double cy = (static_cast<double>(img.rows()) - 1.0) / 2.0;
  const double cx = (static_cast<double>(img.cols()) - 1.0) / 2.0;
  const double half_len = std::hypot(static_cast<double>(img.rows()), static_cast<double>(img.cols())) / 2.0 + 1.0;
  const auto steps = static_cast<long>(std::ceil(half_len * 2.0));
  constexpr double dt = 0.5;
  const double center_bin = (static_cast<double>(n_bins) - 1.0) / 2.0;

  for (std::size_t a = 0; a < n_angles; ++a) {
    const double theta = std::numbers::pi * static_cast<double>(a) / static_cast<double>(n_angles);
    s.angles[a] = theta;
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t b = 0; b < n_bins; ++b) {
      const double det = (static_cast<double>(b) - center_bin) * s.detector_spacing;
      double sum = 0.0;
      for (long k = -steps; k <= steps; ++k) {
        const double t = dt * static_cast<double>(k);
        const double x = det * ct - t * st;
        const double y = det * st + t * ct;
        sum += bilinear(img, cy - y, x + cx);
      }
      s.data(a, b) = sum * dt;
    }
  }
  return s;
}

std::vector<double> make_bowtie(std::size_t n_bins, double edge_value) {
  if (n_bins == 0) throw std::invalid_argument("make_bowtie: no bins");
  if (!(edge_value > 0.0 && edge_value <= 1.0)) {
    throw std::invalid_argument("make_bowtie: edge value must be in (0,1]");
  }
  std::vector<double> p(n_bins, 1.0);
  const double c = (static_cast<double>(n_bins) - 1.0) / 2.0;
  if (c == 0.0) return p;
  for (std::size_t i = 0; i < n_bins; ++i) {
    const double u = (static_cast<double>(i) - c) / c;
    const double cs = std::cos(std::numbers::pi * u / 2.0);
    p[i] = edge_value + (1.0 - edge_value) * cs * cs;
  }
  // Exact symmetry regardless of rounding in cos.
  for (std::size_t i = 0; i < n_bins / 2; ++i) p[n_bins - 1 - i] = p[i];
  return p;
}

double calibrate_attenuation(std::span<const Sinogram> sinograms, double target) {
  std::vector<double> positive;
  for (const auto& s : sinograms) {
    for (double v : s.data) {
      if (v > 0.0) positive.push_back(v);
    }
  }
  if (positive.empty()) throw std::invalid_argument("calibrate_attenuation: no positive line integrals");
  const auto mid = positive.size() / 2;
  std::nth_element(positive.begin(), positive.begin() + static_cast<std::ptrdiff_t>(mid), positive.end());
  return target / positive[mid];
}

DoseModel make_dose_model(double photon_count, std::size_t n_bins, double attenuation_scale,
                          double bowtie_edge) {
  if (!(photon_count > 0.0)) throw std::invalid_argument("dose model: photon count must be positive");
  if (!(attenuation_scale > 0.0)) throw std::invalid_argument("dose model: attenuation scale must be positive");
  return {photon_count, make_bowtie(n_bins, bowtie_edge), attenuation_scale};
}

Sinogram apply_dose_noise(const Sinogram& s, const DoseModel& dose, std::uint64_t seed) {
  if (!(dose.photon_count > 0.0)) throw std::invalid_argument("apply_dose_noise: photon count must be positive");
  if (!(dose.attenuation_scale > 0.0)) throw std::invalid_argument("apply_dose_noise: attenuation scale must be positive");
  if (dose.bowtie_profile.size() != s.n_bins()) {
    throw std::invalid_argument("apply_dose_noise: bow-tie profile has " +
                                std::to_string(dose.bowtie_profile.size()) + " bins, sinogram " +
                                std::to_string(s.n_bins()));
  }
  Sinogram out = s;
  Rng rng(derive_seed(seed, "dose_noise"));
  const double mu = dose.attenuation_scale;
  for (std::size_t a = 0; a < s.n_angles(); ++a) {
    for (std::size_t b = 0; b < s.n_bins(); ++b) {
      const double incident = dose.photon_count * dose.bowtie_profile[b];
      const double lambda = incident * std::exp(-mu * s.data(a, b));
      const double counts = std::max<double>(static_cast<double>(rng.poisson(lambda)), 1.0);
      out.data(a, b) = -std::log(counts / incident) / mu;
    }
  }
  return out;
}

Image fbp_reconstruct(const Sinogram& s, Shape out_shape) {
  if (s.data.empty()) throw std::invalid_argument("fbp_reconstruct: empty sinogram");
  if (s.n_angles() < 2 || s.angles.size() != s.n_angles()) {
    throw std::invalid_argument("fbp_reconstruct: need at least 2 angles with matching angle list");
  }
  const std::size_t n_bins = s.n_bins();
  const std::size_t padded = std::max<std::size_t>(64, next_pow2(2 * n_bins));
  const auto response = ramp_hann_response(padded);

  Grid<double> filtered(s.n_angles(), n_bins);
  std::vector<std::complex<double>> buf(padded);
  for (std::size_t a = 0; a < s.n_angles(); ++a) {
    std::fill(buf.begin(), buf.end(), std::complex<double>{});
    for (std::size_t b = 0; b < n_bins; ++b) buf[b] = s.data(a, b);
    detail::fft1d(buf, false);
    for (std::size_t k = 0; k < padded; ++k) buf[k] *= response[k];
    detail::fft1d(buf, true);
    for (std::size_t b = 0; b < n_bins; ++b) filtered(a, b) = buf[b].real() / static_cast<double>(padded);
  }

  Image out(out_shape.rows, out_shape.cols);
  const double cy = (static_cast<double>(out_shape.rows) - 1.0) / 2.0;
  const double cx = (static_cast<double>(out_shape.cols) - 1.0) / 2.0;
  const double center_bin = (static_cast<double>(n_bins) - 1.0) / 2.0;
  std::vector<double> cosv(s.n_angles()), sinv(s.n_angles());
  for (std::size_t a = 0; a < s.n_angles(); ++a) {
    cosv[a] = std::cos(s.angles[a]);
    sinv[a] = std::sin(s.angles[a]);
  }
  const double scale = std::numbers::pi / static_cast<double>(s.n_angles()) / s.detector_spacing;
  for (std::size_t r = 0; r < out_shape.rows; ++r) {
    const double y = cy - static_cast<double>(r);
    for (std::size_t c = 0; c < out_shape.cols; ++c) {
      const double x = static_cast<double>(c) - cx;
      double acc = 0.0;
      for (std::size_t a = 0; a < s.n_angles(); ++a) {
        const double pos = (x * cosv[a] + y * sinv[a]) / s.detector_spacing + center_bin;
        const double p0 = std::floor(pos);
        const auto i0 = static_cast<long>(p0);
        if (i0 < 0 || i0 + 1 >= static_cast<long>(n_bins)) continue;
        const double f = pos - p0;
        acc += (1.0 - f) * filtered(a, static_cast<std::size_t>(i0)) +
               f * filtered(a, static_cast<std::size_t>(i0 + 1));
      }
      out(r, c) = std::clamp(acc * scale, 0.0, 1.0);
    }
  }
  return out;
}

Image degrade(const Image& img, const DoseModel& dose, std::size_t n_angles, std::uint64_t seed) {
  return fbp_reconstruct(apply_dose_noise(radon(img, n_angles), dose, seed), shape_of(img));
}

}  // namespace reconfair::xray
