#include "reconfair/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "reconfair/rng.hpp"

namespace reconfair::phantom {

Image render(const std::vector<Ellipse>& ellipses, std::size_t rows, std::size_t cols) {
  Image img(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    // y axis points up so the phantom is not mirrored relative to the usual plots.
    const double y = 1.0 - (2.0 * static_cast<double>(r) + 1.0) / static_cast<double>(rows);
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = (2.0 * static_cast<double>(c) + 1.0) / static_cast<double>(cols) - 1.0;
      double v = 0.0;
      for (const auto& e : ellipses) {
        const double a = e.angle_deg * std::numbers::pi / 180.0;
        const double dx = x - e.center_x, dy = y - e.center_y;
        const double u = (dx * std::cos(a) + dy * std::sin(a)) / e.semi_x;
        const double w = (-dx * std::sin(a) + dy * std::cos(a)) / e.semi_y;
        if (u * u + w * w <= 1.0) v += e.intensity;
      }
      img(r, c) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

Image shepp_logan(std::size_t size) {
  static const std::vector<Ellipse> kModified = {
      {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},
      {-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0},
      {-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0},
      {-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0},
      {0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0},
      {0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0},
      {0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0},
      {0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0},
      {0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0},
      {0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0},
  };
  return render(kModified, size, size);
}

Image random_ellipses(std::size_t size, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "random_ellipses"));
  std::vector<Ellipse> es;
  const double outer_x = rng.uniform(0.6, 0.8), outer_y = rng.uniform(0.7, 0.9);
  es.push_back({rng.uniform(0.6, 0.9), outer_x, outer_y, 0.0, 0.0, rng.uniform(-10.0, 10.0)});
  const int inclusions = 3 + static_cast<int>(rng.uniform_index(5));
  for (int i = 0; i < inclusions; ++i) {
    const double sx = rng.uniform(0.06, 0.3), sy = rng.uniform(0.06, 0.3);
    const double cx = rng.uniform(-0.45, 0.45) * outer_x;
    const double cy = rng.uniform(-0.45, 0.45) * outer_y;
    es.push_back({rng.uniform(-0.4, 0.3), sx, sy, cx, cy, rng.uniform(0.0, 180.0)});
  }
  return render(es, size, size);
}

Image disk(std::size_t size, double radius, double value) {
  Image img(size, size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t col = 0; col < size; ++col) {
      const double d = std::hypot(static_cast<double>(r) - c, static_cast<double>(col) - c);
      if (d <= radius) img(r, col) = value;
    }
  }
  return img;
}

}  // namespace reconfair::phantom
