#pragma once

#include <map>
#include <string>
#include <vector>

#include "reconfair/grid.hpp"

namespace reconfair::quality {

/// PSNR returned for identical images.
inline constexpr double kPsnrCapDb = 200.0;

enum class Metric { psnr_db, ssim, dice };
const char* to_string(Metric m);
Metric parse_metric(const std::string& text);

struct QualityScore {
  Metric metric = Metric::psnr_db;
  double value = 0.0;
  std::string subject_id;
  std::string condition;
};

/// 10 log10(1/MSE) with a fixed data range of 1; capped at kPsnrCapDb.
double psnr(const Image& reference, const Image& test);

/// Mean SSIM over all 11x11 Gaussian windows (sigma 1.5) fully inside the
/// image; C1 = 0.01^2, C2 = 0.03^2 for data range 1.
double ssim(const Image& reference, const Image& test);

/// 2|A n B| / (|A| + |B|); both empty gives 1. Masks must be 0/1.
double dice(const Mask& a, const Mask& b);

/// Mean over slices per patient, then mean over patients.
double patient_mean_dice(const std::map<std::string, std::vector<double>>& dice_by_patient);

}  // namespace reconfair::quality
