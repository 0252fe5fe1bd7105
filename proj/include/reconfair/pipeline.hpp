#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace reconfair::pipeline {

inline constexpr const char* kReportSchemaVersion = "1.0";
inline constexpr int kReportSchemaMajor = 1;

enum class Modality { mri, xray };
const char* to_string(Modality m);

/// Flat-key JSON run configuration. Keys:
///   metadata            metadata CSV (required)
///   images              directory of clean images `<subject_id>[__<slice>]` (required)
///   modality            "mri" | "xray" (required)
///   noise_levels        accelerations (mri, >= 1) or photon counts (xray, > 0) (required)
///   xray_angles         projection angles, default 180
///   reconstructor       "zero_fill" | "fbp" | "external:DIR", default by modality
///   predictions         "toy" | "external:FILE", default "toy"
///   metrics             subset of psnr, ssim, auroc, eodd, eop, ser, delta_dice
///   attributes          subset of sex, age, race, default ["sex", "age"]
///   race_min_count      race groups smaller than this merge into "Other", default 0
///   mask_threshold      toy segmenter threshold for Dice metrics, default 0.5
///   bootstrap_iterations  0 disables bootstrap, default 1000
///   recon_fraction      share of train subjects in the reconstruction sub-split, default 0.7
///   seed                master seed, default 0
///   output              output directory (required)
///   jobs                worker threads, default 1
/// Relative paths resolve against the config file's directory.
struct RunConfig {
  std::filesystem::path metadata;
  std::filesystem::path images;
  Modality modality = Modality::mri;
  std::vector<double> noise_levels;
  std::size_t xray_angles = 180;
  /// "zero_fill", "fbp" or "external".
  std::string reconstructor;
  std::filesystem::path external_reconstructions;
  /// "toy" or "external".
  std::string predictions = "toy";
  std::filesystem::path external_predictions;
  std::vector<std::string> metrics = {"psnr", "ssim", "auroc", "eodd", "eop"};
  std::vector<std::string> attributes = {"sex", "age"};
  std::size_t race_min_count = 0;
  double mask_threshold = 0.5;
  std::size_t bootstrap_iterations = 1000;
  double recon_fraction = 0.7;
  std::uint64_t seed = 0;
  std::filesystem::path output;
  unsigned jobs = 1;

  /// Canonical JSON form (paths as given after resolution); hashed into reports.
  nlohmann::json to_json() const;
  /// Throws ConfigError on bad values or missing paths.
  void validate() const;
};

/// Parses the flat-key schema; unknown keys and type mismatches raise ConfigError.
RunConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

/// Condition labels: "R4" for acceleration 4, "N10000" for 10000 photons.
std::string condition_label(Modality m, double level);

/// Hex FNV-1a of the canonical config JSON.
std::string config_hash(const RunConfig& cfg);

struct RunReport {
  nlohmann::json document;

  /// Pretty-printed JSON; the timestamp field is dropped when asked.
  std::string to_text(bool with_timestamp = true) const;
};

/// degrade -> reconstruct -> predict -> evaluate -> fairness -> report.
/// Intermediate reconstructions are cached under `<output>/cache/<condition>`
/// and reused only when both the input key and the content hash match.
/// Stage failures throw DataError naming the stage and the image or subject.
RunReport run(const RunConfig& cfg);

/// Rejects documents whose schema major version differs.
RunReport load_report(const std::filesystem::path& path);
RunReport parse_report(const nlohmann::json& doc);

enum class PlotKind { performance_vs_noise, bias_change_histogram, fairness_bars };
PlotKind parse_plot_kind(const std::string& text);

/// Tidy CSV (header plus one observation per row). Throws DataError naming
/// the missing or empty report section.
std::string emit_plot_data(const RunReport& report, PlotKind kind);

/// subject -> task -> score.
using ScoreTable = std::map<std::string, std::map<std::string, double>>;

/// Predictions CSV `subject_id,task,score[,condition]`. With a condition
/// column only rows for `condition` are kept; `require_condition` makes the
/// column mandatory.
ScoreTable read_predictions(const std::filesystem::path& path, const std::string& condition = "original",
                            bool require_condition = false);

/// Attenuation scale calibrated on the sinograms of every image in `dir`.
double calibrate_images(const std::filesystem::path& dir, std::size_t angles, unsigned jobs);

/// Baseline reconstructions of every image for every configured noise level,
/// written as `<out>/<condition>/<image_id>` (the external reconstruction
/// layout). Seeds match the ones `run` uses.
void write_reconstructions(const RunConfig& cfg, const std::filesystem::path& out);

/// Synthetic dataset for demos and tests: metadata.csv plus `images/`, one
/// phantom (intensity <= 0.45) per subject and a disk lesion per task that is
/// brighter than 0.5 only for positives. Masks outline the first task's
/// positive lesion.
struct SyntheticDatasetOptions {
  std::size_t subjects = 60;
  std::size_t image_size = 64;
  std::vector<std::string> tasks = {"finding"};
  bool with_masks = false;
  std::uint64_t seed = 0;
};
void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticDatasetOptions& options);

}  // namespace reconfair::pipeline
