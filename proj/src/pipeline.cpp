#include "reconfair/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <map>
#include <set>
#include <sstream>

#include "reconfair/dataset.hpp"
#include "reconfair/errors.hpp"
#include "reconfair/fairness.hpp"
#include "reconfair/io.hpp"
#include "reconfair/mitigation.hpp"
#include "reconfair/mri_degrade.hpp"
#include "reconfair/parallel.hpp"
#include "reconfair/phantom.hpp"
#include "reconfair/quality_metrics.hpp"
#include "reconfair/rng.hpp"
#include "reconfair/task_metrics.hpp"
#include "reconfair/xray_degrade.hpp"

namespace reconfair::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kConfigKeys = {
    "metadata",       "images", "modality",    "noise_levels",         "xray_angles",    "reconstructor",
    "predictions",    "metrics", "attributes", "race_min_count",       "mask_threshold", "bootstrap_iterations",
    "recon_fraction", "seed",   "output",      "jobs"};
const std::set<std::string> kQualityMetrics = {"psnr", "ssim", "dice"};
const std::set<std::string> kPredictionMetrics = {"auroc", "eodd", "eop"};
const std::set<std::string> kSegmentationMetrics = {"ser", "delta_dice"};
const std::set<std::string> kAttributes = {"sex", "age", "race"};
constexpr const char* kOriginal = "original";
constexpr const char* kSegmentationTask = "segmentation";
constexpr const char* kSliceSeparator = "__";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
T get_as(const json& doc, const char* key) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

bool contains(const std::vector<std::string>& v, const std::string& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

/// Pixel values stored in float32 containers; reconstructions are rounded the
/// same way so cached and fresh results agree bit for bit.
void quantize(Image& img) {
  for (auto& v : img) v = static_cast<double>(static_cast<float>(v));
}

std::uint64_t image_hash(const Image& img) {
  std::string bytes;
  bytes.reserve(img.size() * sizeof(float) + 16);
  bytes += std::to_string(img.rows()) + "x" + std::to_string(img.cols());
  for (double v : img) {
    const auto f = static_cast<float>(v);
    bytes.append(reinterpret_cast<const char*>(&f), sizeof f);
  }
  return stable_hash(bytes);
}

std::string subject_of(const std::string& image_id) {
  const auto pos = image_id.find(kSliceSeparator);
  return pos == std::string::npos ? image_id : image_id.substr(0, pos);
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct ImageItem {
  std::string id;
  std::string subject;
  Image clean;
};

/// Everything computed for one condition (or the original images).
struct ConditionData {
  std::string label;
  std::optional<double> level;
  std::vector<Image> images;  // parallel to the evaluated image list
};

// Toy classifier: logistic model over 4 x 4 block means of the clean image.
std::vector<Mask> block_regions(std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlocks = 4;
  std::vector<Mask> regions;
  for (std::size_t br = 0; br < kBlocks; ++br) {
    for (std::size_t bc = 0; bc < kBlocks; ++bc) {
      Mask m(rows, cols);
      for (std::size_t r = br * rows / kBlocks; r < (br + 1) * rows / kBlocks; ++r) {
        for (std::size_t c = bc * cols / kBlocks; c < (bc + 1) * cols / kBlocks; ++c) m(r, c) = 1.0;
      }
      regions.push_back(std::move(m));
    }
  }
  return regions;
}

constexpr double kToyClassifierL2 = 1e-2;

Mask threshold_mask(const Image& img, double t) {
  Mask m(img.rows(), img.cols());
  for (std::size_t i = 0; i < img.size(); ++i) m[i] = img[i] > t ? 1.0 : 0.0;
  return m;
}

json argmax_json(const fairness::ArgmaxGroups& a) {
  json j = {{"group_i", a.group_i}, {"group_j", a.group_j}};
  j["y"] = a.y ? json(*a.y) : json(nullptr);
  return j;
}

json group_stats_json(const std::vector<fairness::GroupStats>& stats) {
  json arr = json::array();
  for (const auto& g : stats) {
    json j = {{"group", g.group}, {"n", g.n}, {"n_pos", g.n_pos}, {"n_neg", g.n_neg}, {"eligible", g.eligible}};
    j["tpr"] = g.tpr ? json(*g.tpr) : json(nullptr);
    j["fpr"] = g.fpr ? json(*g.fpr) : json(nullptr);
    j["dice"] = g.dice ? json(*g.dice) : json(nullptr);
    if (!g.note.empty()) j["note"] = g.note;
    arr.push_back(std::move(j));
  }
  return arr;
}

class Runner {
 public:
  explicit Runner(const RunConfig& cfg) : cfg_(cfg) {}

  RunReport execute();

 private:
  void load_inputs();
  void degrade_conditions();
  ConditionData reconstruct(const std::string& label, double level);
  ConditionData reconstruct_fresh(const std::string& label, double level);
  std::optional<ConditionData> read_cache(const std::string& label, std::uint64_t key);
  void write_cache(const ConditionData& data, std::uint64_t key);
  std::uint64_t cache_key(const std::string& label, double level) const;
  void fit_toy_classifiers();
  ScoreTable predict(const ConditionData& data) const;
  std::map<std::string, std::vector<double>> dice_by_subject(const ConditionData& data) const;
  json quality_section();
  void evaluate_tasks();
  json fairness_section();
  std::optional<double> bootstrap_ci(const std::vector<double>& subject_values, const std::string& key,
                                     double* lo, double* hi);

  const RunConfig& cfg_;
  std::vector<dataset::SubjectRecord> records_;
  std::map<std::string, const dataset::SubjectRecord*> by_id_;
  std::map<std::string, dataset::SplitAssignment> splits_;
  std::vector<std::string> tasks_;
  std::vector<ImageItem> images_;  // validation + test images, sorted by id
  std::vector<ImageItem> train_images_;  // classifier_train images
  std::map<std::string, Mask> masks_;
  double attenuation_scale_ = 0.0;
  std::vector<ConditionData> conditions_;  // [0] is the original
  std::map<std::string, mitigation::PooledLogistic> toy_;
  std::map<std::string, ScoreTable> scores_;  // condition -> table
  std::map<std::string, std::map<std::string, task::BalancedThreshold>> thresholds_;  // condition -> task
  json tasks_json_ = json::array();
  json seeds_ = json::object();
  std::vector<std::string> warnings_;
};

void Runner::load_inputs() {
  records_ = dataset::load_metadata(cfg_.metadata);
  for (const auto& r : records_) {
    by_id_[r.subject_id] = &r;
    for (const auto& [task, label] : r.labels) {
      (void)label;
      if (!contains(tasks_, task)) tasks_.push_back(task);
    }
  }
  std::sort(tasks_.begin(), tasks_.end());
  const auto split_seed = derive_seed(cfg_.seed, "splits");
  seeds_["splits"] = split_seed;
  try {
    splits_ = dataset::make_splits(records_, split_seed, cfg_.recon_fraction);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("load: ") + e.what());
  }

  std::set<std::string> with_images;
  for (const auto& id : io::list_images(cfg_.images)) {
    const auto subject = subject_of(id);
    const auto it = splits_.find(subject);
    if (it == splits_.end()) throw DataError("load: image '" + id + "' has no subject in the metadata");
    with_images.insert(subject);
    const auto& sa = it->second;
    const bool eval = sa.split != dataset::Split::train;
    const bool classifier = sa.split == dataset::Split::train && sa.sub_split == dataset::SubSplit::classifier_train;
    if (!eval && !classifier) continue;
    ImageItem item{id, subject, {}};
    try {
      item.clean = io::read_image(cfg_.images / id);
    } catch (const std::exception& e) {
      throw DataError("load: image '" + id + "': " + e.what());
    }
    (eval ? images_ : train_images_).push_back(std::move(item));
  }
  for (const auto& r : records_) {
    if (!with_images.contains(r.subject_id)) throw DataError("load: subject '" + r.subject_id + "' has no images");
  }
  if (images_.empty()) throw DataError("load: no validation or test images");

  const bool need_masks = std::any_of(cfg_.metrics.begin(), cfg_.metrics.end(), [](const std::string& m) {
    return m == "dice" || kSegmentationMetrics.contains(m);
  });
  if (need_masks) {
    const auto base = cfg_.metadata.parent_path();
    for (const auto& item : images_) {
      if (masks_.contains(item.subject)) continue;
      const auto* rec = by_id_.at(item.subject);
      if (!rec->mask_ref) throw DataError("load: subject '" + item.subject + "' has no mask_ref");
      try {
        masks_[item.subject] = io::read_image(resolve(base, *rec->mask_ref));
      } catch (const std::exception& e) {
        throw DataError("load: mask of subject '" + item.subject + "': " + e.what());
      }
    }
  }
}

std::uint64_t Runner::cache_key(const std::string& label, double level) const {
  json key = {{"modality", to_string(cfg_.modality)},
              {"condition", label},
              {"level", level},
              {"reconstructor", cfg_.reconstructor},
              {"external", cfg_.external_reconstructions.string()},
              {"angles", cfg_.xray_angles},
              {"seed", cfg_.seed}};
  json inputs = json::object();
  for (const auto& item : images_) inputs[item.id] = hex64(image_hash(item.clean));
  key["inputs"] = std::move(inputs);
  return stable_hash(key.dump());
}

std::optional<ConditionData> Runner::read_cache(const std::string& label, std::uint64_t key) {
  const auto dir = cfg_.output / "cache" / label;
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) return std::nullopt;
  try {
    const auto manifest = json::parse(io::read_text(manifest_path));
    if (manifest.at("key").get<std::string>() != hex64(key)) return std::nullopt;
    const auto& hashes = manifest.at("images");
    ConditionData data;
    data.label = label;
    for (const auto& item : images_) {
      Image img = io::read_image(dir / item.id);
      if (hex64(image_hash(img)) != hashes.at(item.id).get<std::string>()) return std::nullopt;
      data.images.push_back(std::move(img));
    }
    return data;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void Runner::write_cache(const ConditionData& data, std::uint64_t key) {
  const auto dir = cfg_.output / "cache" / data.label;
  fs::create_directories(dir);
  json hashes = json::object();
  for (std::size_t i = 0; i < images_.size(); ++i) {
    io::write_image(dir / images_[i].id, data.images[i]);
    hashes[images_[i].id] = hex64(image_hash(data.images[i]));
  }
  io::write_text(dir / "manifest.json", json{{"key", hex64(key)}, {"images", hashes}}.dump(2) + "\n");
}

ConditionData Runner::reconstruct_fresh(const std::string& label, double level) {
  ConditionData data;
  data.label = label;
  data.images.resize(images_.size());
  std::optional<xray::DoseModel> dose;
  if (cfg_.modality == Modality::xray && cfg_.reconstructor != "external") {
    const auto bins = xray::detector_bins_for(shape_of(images_.front().clean));
    dose = xray::make_dose_model(level, bins, attenuation_scale_);
  }
  parallel_for(images_.size(), cfg_.jobs, [&](std::size_t i) {
    const auto& item = images_[i];
    const auto seed = derive_seed(cfg_.seed, "degrade/" + item.id + "/" + label);
    Image out;
    try {
      if (cfg_.reconstructor == "external") {
        out = io::read_image(cfg_.external_reconstructions / label / item.id);
        require_same_shape(out, item.clean, "external reconstruction");
      } else if (cfg_.modality == Modality::mri) {
        out = mri::degrade(item.clean, level, seed).image;
      } else {
        if (xray::detector_bins_for(shape_of(item.clean)) != dose->bowtie_profile.size()) {
          throw std::invalid_argument("image size differs from the first image");
        }
        out = xray::degrade(item.clean, *dose, cfg_.xray_angles, seed);
      }
    } catch (const std::exception& e) {
      throw DataError(std::string("stage ") + (cfg_.reconstructor == "external" ? "reconstruct" : "degrade") +
                      ", image '" + item.id + "', condition " + label + ": " + e.what());
    }
    quantize(out);
    data.images[i] = std::move(out);
  });
  return data;
}

ConditionData Runner::reconstruct(const std::string& label, double level) {
  const auto key = cache_key(label, level);
  if (auto cached = read_cache(label, key)) {
    cached->level = level;
    return std::move(*cached);
  }
  auto data = reconstruct_fresh(label, level);
  data.level = level;
  write_cache(data, key);
  return data;
}

void Runner::degrade_conditions() {
  ConditionData original;
  original.label = kOriginal;
  for (const auto& item : images_) original.images.push_back(item.clean);
  conditions_.push_back(std::move(original));

  if (cfg_.modality == Modality::xray && cfg_.reconstructor != "external") {
    attenuation_scale_ = calibrate_images(cfg_.images, cfg_.xray_angles, cfg_.jobs);
  }
  for (double level : cfg_.noise_levels) {
    const auto label = condition_label(cfg_.modality, level);
    if (cfg_.reconstructor != "external") {
      for (const auto& item : images_) {
        const auto key = "degrade/" + item.id + "/" + label;
        seeds_[key] = derive_seed(cfg_.seed, key);
      }
    }
    conditions_.push_back(reconstruct(label, level));
  }
}

void Runner::fit_toy_classifiers() {
  if (train_images_.empty()) throw DataError("stage predict: no classifier_train images for the toy classifier");
  const auto shape = shape_of(train_images_.front().clean);
  for (const auto* set : {&train_images_, &images_}) {
    for (const auto& item : *set) {
      if (shape_of(item.clean) != shape) {
        throw DataError("stage predict, image '" + item.id + "': the toy classifier needs equal image sizes");
      }
    }
  }
  for (const auto& task : tasks_) {
    std::vector<Image> imgs;
    std::vector<int> labels;
    for (const auto& item : train_images_) {
      const auto& lab = by_id_.at(item.subject)->labels;
      const auto it = lab.find(task);
      if (it == lab.end()) continue;
      imgs.push_back(item.clean);
      labels.push_back(it->second);
    }
    const auto pos = std::count(labels.begin(), labels.end(), 1);
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) {
      throw DataError("stage predict, task '" + task + "': classifier_train split lacks one label class");
    }
    toy_[task] = mitigation::fit_classifier(imgs, labels, block_regions(shape.rows, shape.cols), kToyClassifierL2);
  }
}

ScoreTable Runner::predict(const ConditionData& data) const {
  if (cfg_.predictions == "external") return read_predictions(cfg_.external_predictions, data.label, true);
  std::map<std::string, std::map<std::string, std::vector<double>>> slices;
  for (std::size_t i = 0; i < images_.size(); ++i) {
    const auto& lab = by_id_.at(images_[i].subject)->labels;
    for (const auto& [task, model] : toy_) {
      if (lab.contains(task)) slices[images_[i].subject][task].push_back(model.predict(data.images[i]));
    }
  }
  ScoreTable out;
  for (const auto& [subject, per_task] : slices) {
    for (const auto& [task, v] : per_task) out[subject][task] = dataset::aggregate_slice_scores(v);
  }
  return out;
}

std::map<std::string, std::vector<double>> Runner::dice_by_subject(const ConditionData& data) const {
  std::map<std::string, std::vector<double>> out;
  for (std::size_t i = 0; i < images_.size(); ++i) {
    const auto& mask = masks_.at(images_[i].subject);
    const auto pred = threshold_mask(data.images[i], cfg_.mask_threshold);
    try {
      out[images_[i].subject].push_back(quality::dice(threshold_mask(mask, 0.5), pred));
    } catch (const std::exception& e) {
      throw DataError("stage evaluate, image '" + images_[i].id + "': " + e.what());
    }
  }
  return out;
}

std::optional<double> Runner::bootstrap_ci(const std::vector<double>& subject_values, const std::string& key,
                                           double* lo, double* hi) {
  if (cfg_.bootstrap_iterations == 0 || subject_values.size() < 10) return std::nullopt;
  const auto seed = derive_seed(cfg_.seed, key);
  seeds_[key] = seed;
  const auto res = fairness::bootstrap_compare(
      subject_values.size(),
      [&](std::span<const std::size_t> idx) -> std::optional<double> {
        double s = 0.0;
        for (auto k : idx) s += subject_values[k];
        return s / static_cast<double>(idx.size());
      },
      cfg_.bootstrap_iterations, seed, cfg_.jobs);
  *lo = res.ci_low;
  *hi = res.ci_high;
  return res.statistic;
}

json Runner::quality_section() {
  json out = json::array();
  for (const auto& metric : cfg_.metrics) {
    if (!kQualityMetrics.contains(metric)) continue;
    for (std::size_t c = 1; c < conditions_.size(); ++c) {
      const auto& data = conditions_[c];
      std::map<std::string, std::vector<double>> per_subject;
      if (metric == "dice") {
        per_subject = dice_by_subject(data);
      } else {
        std::vector<double> values(images_.size());
        parallel_for(images_.size(), cfg_.jobs, [&](std::size_t i) {
          try {
            values[i] = metric == "psnr" ? quality::psnr(images_[i].clean, data.images[i])
                                         : quality::ssim(images_[i].clean, data.images[i]);
          } catch (const std::exception& e) {
            throw DataError("stage evaluate, image '" + images_[i].id + "': " + e.what());
          }
        });
        for (std::size_t i = 0; i < images_.size(); ++i) per_subject[images_[i].subject].push_back(values[i]);
      }
      std::vector<double> subject_means;
      for (const auto& [subject, v] : per_subject) {
        (void)subject;
        subject_means.push_back(mean_of(v));
      }
      const double mean = mean_of(subject_means);
      double lo = mean, hi = mean;
      bootstrap_ci(subject_means, "quality/" + metric + "/" + data.label, &lo, &hi);
      out.push_back({{"condition", data.label},
                     {"level", *data.level},
                     {"metric", metric},
                     {"mean", mean},
                     {"ci_low", lo},
                     {"ci_high", hi},
                     {"n_subjects", subject_means.size()}});
    }
  }
  return out;
}

void Runner::evaluate_tasks() {
  for (const auto& data : conditions_) {
    const auto& table = scores_.at(data.label);
    for (const auto& task : tasks_) {
      task::ScoredLabelSet val{task, {}}, test{task, {}};
      for (const auto& r : records_) {
        const auto it = r.labels.find(task);
        const auto split = splits_.at(r.subject_id).split;
        if (it == r.labels.end() || split == dataset::Split::train) continue;
        const auto st = table.find(r.subject_id);
        if (st == table.end() || !st->second.contains(task)) {
          throw DataError("stage predict, subject '" + r.subject_id + "', condition " + data.label +
                          ": missing prediction for task '" + task + "'");
        }
        (split == dataset::Split::validation ? val : test).entries.push_back({r.subject_id, st->second.at(task), it->second});
      }
      try {
        const auto t = task::fit_balanced_threshold(val);
        thresholds_[data.label][task] = t;
        json j = {{"task", task},
                  {"condition", data.label},
                  {"threshold", t.threshold},
                  {"validation_sensitivity", t.achieved_sensitivity},
                  {"validation_specificity", t.achieved_specificity},
                  {"n_test", test.entries.size()}};
        j["auroc"] = task::auroc(test);
        tasks_json_.push_back(std::move(j));
      } catch (const std::invalid_argument& e) {
        throw DataError("stage evaluate, task '" + task + "', condition " + data.label + ": " + e.what());
      }
    }
  }
}

json Runner::fairness_section() {
  json out = json::array();
  std::vector<std::string> test_ids;
  std::vector<dataset::SubjectRecord> test_records;
  for (const auto& r : records_) {
    if (splits_.at(r.subject_id).split == dataset::Split::test) {
      test_ids.push_back(r.subject_id);
      test_records.push_back(r);
    }
  }
  std::map<std::string, dataset::SubgroupPartition> partitions;
  for (const auto& attr : cfg_.attributes) {
    if (attr == "age") {
      partitions[attr] = dataset::dichotomize_age(records_, splits_, dataset::Split::test);
    } else {
      auto p = dataset::partition_by(test_records, attr);
      if (attr == "race" && cfg_.race_min_count > 0) p = fairness::merge_small_groups(p, cfg_.race_min_count, "Other");
      partitions[attr] = std::move(p);
    }
  }

  auto emit = [&](const std::string& task, const std::string& attr, const std::string& metric,
                  const std::string& condition, const fairness::FairnessResult& orig,
                  const fairness::FairnessResult& now, const fairness::ResampleStatistic& diff, std::size_t units) {
    const auto change = fairness::bias_change(orig.value, now.value);
    json j = {{"task", task},
              {"attribute", attr},
              {"metric", metric},
              {"condition", condition},
              {"value", now.value},
              {"original_value", orig.value},
              {"argmax_groups", argmax_json(now.argmax)},
              {"group_stats", group_stats_json(now.group_stats)},
              {"bias_change", change.value},
              {"undefined_relative", change.undefined_relative}};
    j["p_value"] = nullptr;
    j["ci"] = nullptr;
    if (cfg_.bootstrap_iterations > 0) {
      const auto key = "bootstrap/" + task + "/" + attr + "/" + metric + "/" + condition;
      const auto seed = derive_seed(cfg_.seed, key);
      seeds_[key] = seed;
      try {
        const auto b = fairness::bootstrap_compare(units, diff, cfg_.bootstrap_iterations, seed, cfg_.jobs);
        j["p_value"] = b.p_value;
        j["ci"] = {b.ci_low, b.ci_high};
        j["bootstrap_statistic"] = b.statistic;
        j["degenerate_resamples"] = b.degenerate_resamples;
      } catch (const std::exception& e) {
        j["bootstrap_error"] = e.what();
        warnings_.push_back(key + ": " + e.what());
      }
    }
    std::vector<std::string> warns = now.warnings;
    warns.insert(warns.end(), orig.warnings.begin(), orig.warnings.end());
    if (!warns.empty()) j["warnings"] = warns;
    out.push_back(std::move(j));
  };

  // Prediction-based metrics, thresholds frozen per condition.
  for (const auto& task : tasks_) {
    std::vector<std::string> ids;
    for (const auto& id : test_ids) {
      if (by_id_.at(id)->labels.contains(task)) ids.push_back(id);
    }
    auto binarized = [&](const std::string& condition) {
      const auto& table = scores_.at(condition);
      task::ScoredLabelSet s{task, {}};
      for (const auto& id : ids) s.entries.push_back({id, table.at(id).at(task), by_id_.at(id)->labels.at(task)});
      return task::binarize(s, thresholds_.at(condition).at(task));
    };
    const auto orig_bin = binarized(kOriginal);
    for (const auto& metric : cfg_.metrics) {
      if (metric != "eodd" && metric != "eop") continue;
      const auto fn = metric == "eodd" ? &fairness::eodd : &fairness::eop;
      for (const auto& attr : cfg_.attributes) {
        const auto& part = partitions.at(attr);
        fairness::FairnessResult orig;
        try {
          orig = fn(orig_bin, part);
        } catch (const std::exception& e) {
          warnings_.push_back(task + "/" + attr + "/" + metric + ": " + e.what());
          continue;
        }
        for (std::size_t c = 1; c < conditions_.size(); ++c) {
          const auto& label = conditions_[c].label;
          const auto now_bin = binarized(label);
          fairness::FairnessResult now;
          try {
            now = fn(now_bin, part);
          } catch (const std::exception& e) {
            warnings_.push_back(task + "/" + attr + "/" + metric + "/" + label + ": " + e.what());
            continue;
          }
          const fairness::ResampleStatistic diff = [&](std::span<const std::size_t> idx) -> std::optional<double> {
            std::vector<task::BinarizedEntry> a, b;
            a.reserve(idx.size());
            b.reserve(idx.size());
            for (auto k : idx) {
              a.push_back(orig_bin[k]);
              b.push_back(now_bin[k]);
            }
            try {
              return fn(b, part).value - fn(a, part).value;
            } catch (const std::exception&) {
              return std::nullopt;
            }
          };
          emit(task, attr, metric, label, orig, now, diff, ids.size());
        }
      }
    }
  }

  // Segmentation metrics over per-patient Dice.
  const bool seg = std::any_of(cfg_.metrics.begin(), cfg_.metrics.end(),
                               [](const std::string& m) { return kSegmentationMetrics.contains(m); });
  if (seg) {
    std::vector<std::string> ids;
    std::set<std::string> have;
    for (const auto& item : images_) have.insert(item.subject);
    for (const auto& id : test_ids) {
      if (have.contains(id)) ids.push_back(id);
    }
    auto patient_dice = [&](const ConditionData& data) {
      const auto per = dice_by_subject(data);
      std::vector<double> v;
      for (const auto& id : ids) v.push_back(mean_of(per.at(id)));
      return v;
    };
    const auto orig_dice = patient_dice(conditions_[0]);
    for (const auto& metric : cfg_.metrics) {
      if (!kSegmentationMetrics.contains(metric)) continue;
      for (const auto& attr : cfg_.attributes) {
        const auto& part = partitions.at(attr);
        auto compute = [&](const std::vector<double>& dice, std::span<const std::size_t> idx) {
          std::map<std::string, std::pair<double, std::size_t>> acc;
          for (auto k : idx) {
            if (const auto g = part.group_of(ids[k])) {
              acc[*g].first += dice[k];
              ++acc[*g].second;
            }
          }
          std::map<std::string, double> by_group;
          for (const auto& [g, s] : acc) by_group[g] = s.first / static_cast<double>(s.second);
          return metric == "ser" ? fairness::ser(by_group, attr) : fairness::delta_dice(by_group, attr);
        };
        std::vector<std::size_t> all(ids.size());
        for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
        fairness::FairnessResult orig;
        try {
          orig = compute(orig_dice, all);
        } catch (const std::exception& e) {
          warnings_.push_back(std::string(kSegmentationTask) + "/" + attr + "/" + metric + ": " + e.what());
          continue;
        }
        for (std::size_t c = 1; c < conditions_.size(); ++c) {
          const auto now_dice = patient_dice(conditions_[c]);
          const auto now = compute(now_dice, all);
          const fairness::ResampleStatistic diff = [&](std::span<const std::size_t> idx) -> std::optional<double> {
            try {
              return compute(now_dice, idx).value - compute(orig_dice, idx).value;
            } catch (const std::exception&) {
              return std::nullopt;
            }
          };
          emit(kSegmentationTask, attr, metric, conditions_[c].label, orig, now, diff, ids.size());
        }
      }
    }
  }
  return out;
}

RunReport Runner::execute() {
  load_inputs();
  degrade_conditions();

  const bool need_predictions = std::any_of(cfg_.metrics.begin(), cfg_.metrics.end(), [](const std::string& m) {
    return kPredictionMetrics.contains(m);
  });
  if (need_predictions) {
    if (cfg_.predictions == "toy") fit_toy_classifiers();
    for (const auto& data : conditions_) scores_[data.label] = predict(data);
    evaluate_tasks();
  }

  json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["timestamp"] = utc_timestamp();
  doc["config_hash"] = config_hash(cfg_);
  doc["config"] = cfg_.to_json();
  json conds = json::array();
  for (std::size_t c = 1; c < conditions_.size(); ++c) {
    conds.push_back({{"condition", conditions_[c].label}, {"level", *conditions_[c].level}});
  }
  doc["conditions"] = conds;
  std::map<std::string, std::size_t> split_counts;
  for (const auto& [id, sa] : splits_) {
    (void)id;
    ++split_counts[dataset::to_string(sa.split)];
  }
  doc["splits"] = split_counts;
  doc["evaluated_images"] = images_.size();
  doc["quality"] = quality_section();
  doc["tasks"] = tasks_json_;
  doc["fairness"] = fairness_section();
  doc["seeds"] = seeds_;
  doc["warnings"] = warnings_;
  return RunReport{std::move(doc)};
}

}  // namespace

const char* to_string(Modality m) { return m == Modality::mri ? "mri" : "xray"; }

std::string condition_label(Modality m, double level) {
  return (m == Modality::mri ? "R" : "N") + dataset::format_real(level);
}

json RunConfig::to_json() const {
  json j;
  j["metadata"] = metadata.string();
  j["images"] = images.string();
  j["modality"] = pipeline::to_string(modality);
  j["noise_levels"] = noise_levels;
  j["xray_angles"] = xray_angles;
  j["reconstructor"] = reconstructor == "external" ? "external:" + external_reconstructions.string() : reconstructor;
  j["predictions"] = predictions == "external" ? "external:" + external_predictions.string() : predictions;
  j["metrics"] = metrics;
  j["attributes"] = attributes;
  j["race_min_count"] = race_min_count;
  j["mask_threshold"] = mask_threshold;
  j["bootstrap_iterations"] = bootstrap_iterations;
  j["recon_fraction"] = recon_fraction;
  j["seed"] = seed;
  j["output"] = output.string();
  return j;
}

void RunConfig::validate() const {
  auto need_file = [](const fs::path& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string(what) + " is required");
    if (!fs::exists(p)) throw ConfigError(std::string(what) + " does not exist: " + p.string());
  };
  need_file(metadata, "metadata");
  need_file(images, "images");
  if (!fs::is_directory(images)) throw ConfigError("images is not a directory: " + images.string());
  if (noise_levels.empty()) throw ConfigError("noise_levels must list at least one level");
  std::set<std::string> labels;
  for (double level : noise_levels) {
    if (!std::isfinite(level)) throw ConfigError("noise level is not finite");
    if (modality == Modality::mri && level < 1.0) {
      throw ConfigError("mri acceleration must be >= 1, got " + dataset::format_real(level));
    }
    if (modality == Modality::xray && level <= 0.0) {
      throw ConfigError("xray photon count must be > 0, got " + dataset::format_real(level));
    }
    if (!labels.insert(condition_label(modality, level)).second) throw ConfigError("duplicate noise level");
  }
  if (xray_angles < 2) throw ConfigError("xray_angles must be >= 2");
  if (reconstructor == "external") {
    need_file(external_reconstructions, "external reconstruction directory");
  } else if (reconstructor != (modality == Modality::mri ? "zero_fill" : "fbp")) {
    throw ConfigError("reconstructor '" + reconstructor + "' does not fit modality " + pipeline::to_string(modality));
  }
  if (predictions == "external") {
    need_file(external_predictions, "external predictions file");
  } else if (predictions != "toy") {
    throw ConfigError("predictions must be 'toy' or 'external:FILE'");
  }
  if (metrics.empty()) throw ConfigError("metrics must not be empty");
  for (const auto& m : metrics) {
    if (!kQualityMetrics.contains(m) && !kPredictionMetrics.contains(m) && !kSegmentationMetrics.contains(m)) {
      throw ConfigError("unknown metric '" + m + "'");
    }
  }
  for (const auto& a : attributes) {
    if (!kAttributes.contains(a)) throw ConfigError("unknown attribute '" + a + "'");
  }
  if (!(mask_threshold >= 0.0 && mask_threshold <= 1.0)) throw ConfigError("mask_threshold must lie in [0,1]");
  if (!(recon_fraction > 0.0 && recon_fraction < 1.0)) throw ConfigError("recon_fraction must lie in (0,1)");
  if (output.empty()) throw ConfigError("output is required");
  if (jobs == 0) throw ConfigError("jobs must be >= 1");
}

RunConfig parse_config(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (!kConfigKeys.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  RunConfig cfg;
  auto str = [&](const char* key) { return get_as<std::string>(doc, key); };
  if (doc.contains("metadata")) cfg.metadata = resolve(base_dir, str("metadata"));
  if (doc.contains("images")) cfg.images = resolve(base_dir, str("images"));
  if (!doc.contains("modality")) throw ConfigError("modality is required");
  const auto modality = str("modality");
  if (modality == "mri") {
    cfg.modality = Modality::mri;
  } else if (modality == "xray") {
    cfg.modality = Modality::xray;
  } else {
    throw ConfigError("modality must be 'mri' or 'xray'");
  }
  if (doc.contains("noise_levels")) cfg.noise_levels = get_as<std::vector<double>>(doc, "noise_levels");
  if (doc.contains("xray_angles")) cfg.xray_angles = get_as<std::size_t>(doc, "xray_angles");
  cfg.reconstructor = cfg.modality == Modality::mri ? "zero_fill" : "fbp";
  if (doc.contains("reconstructor")) {
    const auto r = str("reconstructor");
    if (r.rfind("external:", 0) == 0) {
      cfg.reconstructor = "external";
      cfg.external_reconstructions = resolve(base_dir, r.substr(9));
    } else {
      cfg.reconstructor = r;
    }
  }
  if (doc.contains("predictions")) {
    const auto p = str("predictions");
    if (p.rfind("external:", 0) == 0) {
      cfg.predictions = "external";
      cfg.external_predictions = resolve(base_dir, p.substr(9));
    } else {
      cfg.predictions = p;
    }
  }
  if (doc.contains("metrics")) cfg.metrics = get_as<std::vector<std::string>>(doc, "metrics");
  if (doc.contains("attributes")) cfg.attributes = get_as<std::vector<std::string>>(doc, "attributes");
  if (doc.contains("race_min_count")) cfg.race_min_count = get_as<std::size_t>(doc, "race_min_count");
  if (doc.contains("mask_threshold")) cfg.mask_threshold = get_as<double>(doc, "mask_threshold");
  if (doc.contains("bootstrap_iterations")) cfg.bootstrap_iterations = get_as<std::size_t>(doc, "bootstrap_iterations");
  if (doc.contains("recon_fraction")) cfg.recon_fraction = get_as<double>(doc, "recon_fraction");
  if (doc.contains("seed")) cfg.seed = get_as<std::uint64_t>(doc, "seed");
  if (doc.contains("output")) cfg.output = resolve(base_dir, str("output"));
  if (doc.contains("jobs")) cfg.jobs = get_as<unsigned>(doc, "jobs");
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(doc, path.parent_path());
}

std::string config_hash(const RunConfig& cfg) { return hex64(stable_hash(cfg.to_json().dump())); }

std::string RunReport::to_text(bool with_timestamp) const {
  if (with_timestamp) return document.dump(2) + "\n";
  json copy = document;
  copy.erase("timestamp");
  return copy.dump(2) + "\n";
}

RunReport run(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.output);
  Runner runner(cfg);
  return runner.execute();
}

RunReport parse_report(const json& doc) {
  if (!doc.is_object() || !doc.contains("schema_version") || !doc["schema_version"].is_string()) {
    throw DataError("report has no schema_version");
  }
  const auto version = doc["schema_version"].get<std::string>();
  int major = -1;
  try {
    major = std::stoi(version.substr(0, version.find('.')));
  } catch (const std::exception&) {
    throw DataError("report schema_version '" + version + "' is malformed");
  }
  if (major != kReportSchemaMajor) {
    throw DataError("report schema major version " + std::to_string(major) + " is not supported (expected " +
                    std::to_string(kReportSchemaMajor) + ")");
  }
  return RunReport{doc};
}

RunReport load_report(const fs::path& path) {
  try {
    return parse_report(json::parse(io::read_text(path)));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

PlotKind parse_plot_kind(const std::string& text) {
  if (text == "performance_vs_noise") return PlotKind::performance_vs_noise;
  if (text == "bias_change_histogram") return PlotKind::bias_change_histogram;
  if (text == "fairness_bars") return PlotKind::fairness_bars;
  throw ConfigError("unknown plot kind '" + text + "'");
}

std::string emit_plot_data(const RunReport& report, PlotKind kind) {
  const auto& doc = report.document;
  auto section = [&](const char* name) -> const json& {
    if (!doc.contains(name) || !doc[name].is_array() || doc[name].empty()) {
      throw DataError(std::string("report section '") + name + "' is missing or empty");
    }
    return doc[name];
  };
  auto num = [](const json& v) { return v.is_null() ? std::string() : dataset::format_real(v.get<double>()); };
  std::ostringstream out;
  switch (kind) {
    case PlotKind::performance_vs_noise: {
      const bool has_quality = doc.contains("quality") && doc["quality"].is_array() && !doc["quality"].empty();
      const bool has_tasks = doc.contains("tasks") && doc["tasks"].is_array() && !doc["tasks"].empty();
      if (!has_quality && !has_tasks) section("quality");
      out << "condition,metric,mean,ci_low,ci_high\n";
      if (has_quality) {
        for (const auto& q : doc["quality"]) {
          out << io::csv_escape(q["condition"].get<std::string>()) << ',' << io::csv_escape(q["metric"].get<std::string>())
              << ',' << num(q["mean"]) << ',' << num(q["ci_low"]) << ',' << num(q["ci_high"]) << '\n';
        }
      }
      if (has_tasks) {
        for (const auto& t : doc["tasks"]) {
          out << io::csv_escape(t["condition"].get<std::string>()) << ','
              << io::csv_escape("auroc:" + t["task"].get<std::string>()) << ',' << num(t["auroc"]) << ",,\n";
        }
      }
      break;
    }
    case PlotKind::bias_change_histogram: {
      const auto& f = section("fairness");
      out << "attribute,task,metric,condition,bias_change,undefined_relative,p_value\n";
      for (const auto& r : f) {
        out << io::csv_escape(r["attribute"].get<std::string>()) << ',' << io::csv_escape(r["task"].get<std::string>())
            << ',' << r["metric"].get<std::string>() << ',' << io::csv_escape(r["condition"].get<std::string>()) << ','
            << num(r["bias_change"]) << ',' << (r["undefined_relative"].get<bool>() ? "true" : "false") << ','
            << num(r["p_value"]) << '\n';
      }
      break;
    }
    case PlotKind::fairness_bars: {
      const auto& f = section("fairness");
      out << "task,attribute,metric,condition,value\n";
      std::set<std::string> seen;
      for (const auto& r : f) {
        const auto prefix = io::csv_escape(r["task"].get<std::string>()) + ',' +
                            io::csv_escape(r["attribute"].get<std::string>()) + ',' + r["metric"].get<std::string>() + ',';
        if (seen.insert(prefix).second) out << prefix << kOriginal << ',' << num(r["original_value"]) << '\n';
        out << prefix << io::csv_escape(r["condition"].get<std::string>()) << ',' << num(r["value"]) << '\n';
      }
      break;
    }
  }
  return out.str();
}

ScoreTable read_predictions(const fs::path& path, const std::string& condition, bool require_condition) {
  const auto table = io::read_csv(path);
  const int c_subject = table.column("subject_id"), c_task = table.column("task"), c_score = table.column("score"),
            c_cond = table.column("condition");
  for (const auto& [idx, name] :
       {std::pair{c_subject, "subject_id"}, std::pair{c_task, "task"}, std::pair{c_score, "score"}}) {
    if (idx < 0) throw DataError(path.string() + ": missing required column '" + name + "'");
  }
  if (require_condition && c_cond < 0) throw DataError(path.string() + ": missing required column 'condition'");
  ScoreTable out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const auto where = path.string() + ": line " + std::to_string(table.line_numbers[i]);
    if (c_cond >= 0 && row[static_cast<std::size_t>(c_cond)] != condition) continue;
    const auto& text = row[static_cast<std::size_t>(c_score)];
    double score = 0.0;
    try {
      std::size_t used = 0;
      score = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing text");
    } catch (const std::exception&) {
      throw DataError(where + ": score '" + text + "' is not a number");
    }
    if (!(score >= 0.0 && score <= 1.0)) throw DataError(where + ": score outside [0,1]");
    if (!out[row[static_cast<std::size_t>(c_subject)]].emplace(row[static_cast<std::size_t>(c_task)], score).second) {
      throw DataError(where + ": duplicate prediction for subject and task");
    }
  }
  return out;
}

double calibrate_images(const fs::path& dir, std::size_t angles, unsigned jobs) {
  const auto ids = io::list_images(dir);
  if (ids.empty()) throw DataError("no images in " + dir.string());
  std::vector<xray::Sinogram> sinos(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    try {
      sinos[i] = xray::radon(io::read_image(dir / ids[i]), angles);
    } catch (const std::exception& e) {
      throw DataError("stage calibrate, image '" + ids[i] + "': " + e.what());
    }
  });
  return xray::calibrate_attenuation(sinos);
}

void write_reconstructions(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  if (cfg.reconstructor == "external") throw ConfigError("write_reconstructions needs a baseline reconstructor");
  const auto ids = io::list_images(cfg.images);
  if (ids.empty()) throw DataError("no images in " + cfg.images.string());
  const double scale =
      cfg.modality == Modality::xray ? calibrate_images(cfg.images, cfg.xray_angles, cfg.jobs) : 0.0;
  for (double level : cfg.noise_levels) {
    const auto label = condition_label(cfg.modality, level);
    fs::create_directories(out / label);
    parallel_for(ids.size(), cfg.jobs, [&](std::size_t i) {
      Image img, rec;
      try {
        img = io::read_image(cfg.images / ids[i]);
        const auto seed = derive_seed(cfg.seed, "degrade/" + ids[i] + "/" + label);
        if (cfg.modality == Modality::mri) {
          rec = mri::degrade(img, level, seed).image;
        } else {
          const auto dose = xray::make_dose_model(level, xray::detector_bins_for(shape_of(img)), scale);
          rec = xray::degrade(img, dose, cfg.xray_angles, seed);
        }
      } catch (const std::exception& e) {
        throw DataError("stage degrade, image '" + ids[i] + "', condition " + label + ": " + e.what());
      }
      quantize(rec);
      io::write_image(out / label / ids[i], rec);
    });
  }
}

void write_synthetic_dataset(const fs::path& dir, const SyntheticDatasetOptions& o) {
  if (o.subjects < 10) throw std::invalid_argument("synthetic dataset: need at least 10 subjects");
  if (o.image_size < 16) throw std::invalid_argument("synthetic dataset: image size must be >= 16");
  if (o.tasks.empty()) throw std::invalid_argument("synthetic dataset: need at least one task");
  fs::create_directories(dir / "images");
  if (o.with_masks) fs::create_directories(dir / "masks");
  Rng rng(derive_seed(o.seed, "synthetic_dataset"));
  const auto n = o.image_size;
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  const double lesion_radius = static_cast<double>(n) / 12.0;
  constexpr double kPhantomScale = 0.45;
  std::ostringstream meta;
  meta << "subject_id,sex,age,race";
  for (const auto& t : o.tasks) meta << ",label_" << t;
  if (o.with_masks) meta << ",mask_ref";
  meta << '\n';
  static const char* races[] = {"White", "Black", "Asian", "Other"};
  for (std::size_t s = 0; s < o.subjects; ++s) {
    char id[32];
    std::snprintf(id, sizeof id, "P%04zu", s);
    const char* sex = rng.uniform() < 0.5 ? "F" : "M";
    const double age = std::floor(rng.uniform(20.0, 90.0));
    const double u = rng.uniform();
    const char* race = races[u < 0.6 ? 0 : u < 0.8 ? 1 : u < 0.93 ? 2 : 3];
    Image img = phantom::random_ellipses(n, derive_seed(o.seed, std::string("phantom/") + id));
    for (auto& v : img) v *= kPhantomScale;
    Mask mask(n, n);
    meta << id << ',' << sex << ',' << age << ',' << race;
    for (std::size_t t = 0; t < o.tasks.size(); ++t) {
      const int label = rng.uniform() < 0.5 ? 1 : 0;
      meta << ',' << label;
      const double angle = 2.0 * M_PI * static_cast<double>(t) / static_cast<double>(o.tasks.size());
      const double cy = c + 0.25 * static_cast<double>(n) * std::sin(angle);
      const double cx = c + 0.25 * static_cast<double>(n) * std::cos(angle);
      // Positives carry a lesion above the segmentation threshold, negatives a fainter mass.
      const double value = label ? rng.uniform(0.55, 0.85) : rng.uniform(0.25, 0.5);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t col = 0; col < n; ++col) {
          if (std::hypot(static_cast<double>(r) - cy, static_cast<double>(col) - cx) > lesion_radius) continue;
          img(r, col) = value;
          if (t == 0 && label) mask(r, col) = 1.0;
        }
      }
    }
    if (o.with_masks) {
      meta << ",masks/" << id;
      io::write_image(dir / "masks" / id, mask);
    }
    meta << '\n';
    io::write_image(dir / "images" / id, img);
  }
  io::write_text(dir / "metadata.csv", meta.str());
}

}  // namespace reconfair::pipeline
