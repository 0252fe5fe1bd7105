#include "reconfair/quality_metrics.hpp"

#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace reconfair::quality {

const char* to_string(Metric m) {
  switch (m) {
    case Metric::psnr_db: return "psnr_db";
    case Metric::ssim: return "ssim";
    case Metric::dice: return "dice";
  }
  return "?";
}

Metric parse_metric(const std::string& text) {
  if (text == "psnr" || text == "psnr_db") return Metric::psnr_db;
  if (text == "ssim") return Metric::ssim;
  if (text == "dice") return Metric::dice;
  throw std::invalid_argument("unknown quality metric '" + text + "'");
}

double psnr(const Image& reference, const Image& test) {
  require_same_shape(reference, test, "psnr");
  if (reference.empty()) throw std::invalid_argument("psnr: empty image");
  double sse = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = reference[i] - test[i];
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(reference.size());
  if (mse == 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / mse));
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

std::array<double, kWindow> gaussian_1d() {
  std::array<double, kWindow> g{};
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    g[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

// Separable "valid" Gaussian filtering.
Grid<double> filter_valid(const Grid<double>& img) {
  static const auto g = gaussian_1d();
  const std::size_t out_r = img.rows() - kWindow + 1, out_c = img.cols() - kWindow + 1;
  Grid<double> tmp(img.rows(), out_c);
  for (std::size_t r = 0; r < img.rows(); ++r) {
    for (std::size_t c = 0; c < out_c; ++c) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += g[k] * img(r, c + k);
      tmp(r, c) = s;
    }
  }
  Grid<double> out(out_r, out_c);
  for (std::size_t r = 0; r < out_r; ++r) {
    for (std::size_t c = 0; c < out_c; ++c) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += g[k] * tmp(r + k, c);
      out(r, c) = s;
    }
  }
  return out;
}

}  // namespace

double ssim(const Image& reference, const Image& test) {
  require_same_shape(reference, test, "ssim");
  if (reference.rows() < kWindow || reference.cols() < kWindow) {
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  }
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Grid<double> xx(reference.rows(), reference.cols()), yy = xx, xy = xx;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    xx[i] = reference[i] * reference[i];
    yy[i] = test[i] * test[i];
    xy[i] = reference[i] * test[i];
  }
  const auto mu_x = filter_valid(reference), mu_y = filter_valid(test);
  const auto e_xx = filter_valid(xx), e_yy = filter_valid(yy), e_xy = filter_valid(xy);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_x.size(); ++i) {
    const double mx = mu_x[i], my = mu_y[i];
    const double vx = e_xx[i] - mx * mx, vy = e_yy[i] - my * my, cxy = e_xy[i] - mx * my;
    total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mu_x.size());
}

double dice(const Mask& a, const Mask& b) {
  require_same_shape(a, b, "dice");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] != 0.0 && a[i] != 1.0) || (b[i] != 0.0 && b[i] != 1.0)) {
      throw std::invalid_argument("dice: masks must be binary");
    }
    const bool ia = a[i] == 1.0, ib = b[i] == 1.0;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double patient_mean_dice(const std::map<std::string, std::vector<double>>& dice_by_patient) {
  if (dice_by_patient.empty()) throw std::invalid_argument("patient_mean_dice: no patients");
  double total = 0.0;
  for (const auto& [id, slices] : dice_by_patient) {
    if (slices.empty()) throw std::invalid_argument("patient_mean_dice: patient '" + id + "' has no slices");
    total += std::accumulate(slices.begin(), slices.end(), 0.0) / static_cast<double>(slices.size());
  }
  return total / static_cast<double>(dice_by_patient.size());
}

}  // namespace reconfair::quality
