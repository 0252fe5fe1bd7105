// reconfair: degradation, reconstruction, fairness auditing and mitigation
// of medical-image reconstructions.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "reconfair/dataset.hpp"
#include "reconfair/errors.hpp"
#include "reconfair/fairness.hpp"
#include "reconfair/io.hpp"
#include "reconfair/mitigation.hpp"
#include "reconfair/mri_degrade.hpp"
#include "reconfair/parallel.hpp"
#include "reconfair/pipeline.hpp"
#include "reconfair/quality_metrics.hpp"
#include "reconfair/rng.hpp"
#include "reconfair/task_metrics.hpp"
#include "reconfair/xray_degrade.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace reconfair;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string subject_of(const std::string& image_id) {
  const auto pos = image_id.find("__");
  return pos == std::string::npos ? image_id : image_id.substr(0, pos);
}

std::vector<std::string> require_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  auto ids = io::list_images(dir);
  if (ids.empty()) throw DataError("no images in " + dir.string());
  return ids;
}

// ---------------------------------------------------------------------------
// degrade

struct DegradeArgs {
  std::string acceleration = "4";
  std::string photons = "100000";
  std::size_t angles = xray::kDefaultAngles;
  std::uint64_t seed = 0;
  std::string in, out;
  unsigned jobs = 1;
};

double parse_level(const std::string& text, const char* what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(std::string("--") + what + " expects a number, got '" + text + "'");
}

void degrade_mri(const DegradeArgs& a) {
  const double r = parse_level(a.acceleration, "acceleration");
  if (r < 1.0) throw ConfigError("--acceleration must be >= 1");
  const auto ids = require_images(a.in);
  fs::create_directories(a.out);
  std::vector<std::string> rows(ids.size());
  parallel_for(ids.size(), a.jobs, [&](std::size_t i) {
    const auto seed = derive_seed(a.seed, ids[i]);
    mri::RadialMask mask;
    const auto img = io::read_image(fs::path(a.in) / ids[i]);
    const auto res = mri::degrade(img, r, seed, &mask);
    io::write_image(fs::path(a.out) / ids[i], res.image);
    rows[i] = io::csv_escape(subject_of(ids[i])) + "," + io::csv_escape(ids[i]) + "," + dataset::format_real(r) + "," +
              dataset::format_real(mask.retained_fraction) + "," + std::to_string(seed) + "\n";
  });
  std::string manifest = "subject_id,image_id,acceleration,retained_fraction,seed\n";
  for (const auto& row : rows) manifest += row;
  io::write_text(fs::path(a.out) / "manifest.csv", manifest);
}

void degrade_xray(const DegradeArgs& a) {
  const double photons = parse_level(a.photons, "photons");
  if (photons <= 0.0) throw ConfigError("--photons must be > 0");
  if (a.angles < 2) throw ConfigError("--angles must be >= 2");
  const auto ids = require_images(a.in);
  fs::create_directories(a.out);
  const double scale = pipeline::calibrate_images(a.in, a.angles, a.jobs);
  std::vector<std::string> rows(ids.size());
  parallel_for(ids.size(), a.jobs, [&](std::size_t i) {
    const auto seed = derive_seed(a.seed, ids[i]);
    const auto img = io::read_image(fs::path(a.in) / ids[i]);
    const auto dose = xray::make_dose_model(photons, xray::detector_bins_for(shape_of(img)), scale);
    io::write_image(fs::path(a.out) / ids[i], xray::degrade(img, dose, a.angles, seed));
    rows[i] = io::csv_escape(subject_of(ids[i])) + "," + io::csv_escape(ids[i]) + "," + dataset::format_real(photons) +
              "," + std::to_string(seed) + "\n";
  });
  std::string manifest = "subject_id,image_id,photons,seed\n";
  for (const auto& row : rows) manifest += row;
  io::write_text(fs::path(a.out) / "manifest.csv", manifest);
}

// ---------------------------------------------------------------------------
// evaluate

void evaluate_quality(const std::string& ref, const std::string& test, const std::string& metrics,
                      const std::string& condition, const std::string& out, unsigned jobs) {
  const auto list = split_list(metrics);
  if (list.empty()) throw ConfigError("--metric must name at least one metric");
  std::vector<quality::Metric> ms;
  for (const auto& m : list) {
    try {
      ms.push_back(quality::parse_metric(m == "psnr" ? "psnr_db" : m));
    } catch (const std::exception&) {
      throw ConfigError("unknown quality metric '" + m + "'");
    }
  }
  const auto ids = require_images(ref);
  std::vector<std::string> rows(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    const auto a = io::read_image(fs::path(ref) / ids[i]);
    Image b;
    try {
      b = io::read_image(fs::path(test) / ids[i]);
    } catch (const std::exception& e) {
      throw DataError("image '" + ids[i] + "' missing from --test: " + e.what());
    }
    if (!a.same_shape(b)) throw DataError("image '" + ids[i] + "': shape differs between --ref and --test");
    for (auto m : ms) {
      double v = 0.0;
      switch (m) {
        case quality::Metric::psnr_db: v = quality::psnr(a, b); break;
        case quality::Metric::ssim: v = quality::ssim(a, b); break;
        case quality::Metric::dice: {
          Mask ma(a.rows(), a.cols()), mb(b.rows(), b.cols());
          for (std::size_t k = 0; k < a.size(); ++k) {
            ma[k] = a[k] > 0.5 ? 1.0 : 0.0;
            mb[k] = b[k] > 0.5 ? 1.0 : 0.0;
          }
          v = quality::dice(ma, mb);
          break;
        }
      }
      rows[i] += io::csv_escape(subject_of(ids[i])) + "," + io::csv_escape(ids[i]) + "," + quality::to_string(m) + "," +
                 dataset::format_real(v) + "," + io::csv_escape(condition) + "\n";
    }
  });
  std::string text = "subject_id,image_id,metric,value,condition\n";
  for (const auto& r : rows) text += r;
  io::write_text(out, text);
}

std::map<std::string, dataset::SplitAssignment> splits_for(const std::vector<dataset::SubjectRecord>& records,
                                                           std::uint64_t seed) {
  return dataset::make_splits(records, derive_seed(seed, "splits"), 0.0);
}

task::ScoredLabelSet scored_set(const std::vector<dataset::SubjectRecord>& records,
                                const std::map<std::string, dataset::SplitAssignment>& splits,
                                const pipeline::ScoreTable& scores, const std::string& task, dataset::Split split) {
  task::ScoredLabelSet s{task, {}};
  for (const auto& r : records) {
    const auto it = r.labels.find(task);
    if (it == r.labels.end() || splits.at(r.subject_id).split != split) continue;
    const auto st = scores.find(r.subject_id);
    if (st == scores.end() || !st->second.contains(task)) {
      throw DataError("missing prediction for subject '" + r.subject_id + "', task '" + task + "'");
    }
    s.entries.push_back({r.subject_id, st->second.at(task), it->second});
  }
  return s;
}

std::vector<std::string> tasks_of(const std::vector<dataset::SubjectRecord>& records) {
  std::set<std::string> t;
  for (const auto& r : records) {
    for (const auto& [task, y] : r.labels) {
      (void)y;
      t.insert(task);
    }
  }
  return {t.begin(), t.end()};
}

void evaluate_task(const std::string& pred, const std::string& meta, const std::string& split_text,
                   const std::string& out, const std::string& condition, std::uint64_t seed) {
  const auto outs = split_list(out);
  if (outs.size() != 2) throw ConfigError("--out expects two paths: auroc.csv,thresholds.json");
  dataset::Split split;
  try {
    split = dataset::parse_split(split_text);
  } catch (const std::exception&) {
    throw ConfigError("--split must be validation or test");
  }
  const auto records = dataset::load_metadata(meta);
  const auto scores = pipeline::read_predictions(pred, condition);
  const auto splits = splits_for(records, seed);
  std::string csv = "task,split,auroc,n_pos,n_neg\n";
  json thresholds = json::object();
  for (const auto& task : tasks_of(records)) {
    const auto val = scored_set(records, splits, scores, task, dataset::Split::validation);
    const auto t = task::fit_balanced_threshold(val);
    thresholds[task] = {{"threshold", t.threshold},
                        {"sensitivity", t.achieved_sensitivity},
                        {"specificity", t.achieved_specificity}};
    const auto s = scored_set(records, splits, scores, task, split);
    csv += io::csv_escape(task) + "," + dataset::to_string(split) + "," + dataset::format_real(task::auroc(s)) + "," +
           std::to_string(s.positives()) + "," + std::to_string(s.negatives()) + "\n";
  }
  io::write_text(outs[0], csv);
  io::write_text(outs[1], thresholds.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// fairness

struct FairnessArgs {
  std::string pred, pred_b, dice, dice_b, meta, out;
  std::string metrics = "eodd";
  std::string attrs = "sex,age";
  std::string condition = "original";
  std::size_t bootstrap = fairness::kDefaultBootstrapIterations;
  std::size_t race_min_count = 0;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
};

std::map<std::string, double> read_dice(const fs::path& path) {
  const auto table = io::read_csv(path);
  const int cs = table.column("subject_id"), cv = table.column("dice");
  if (cs < 0 || cv < 0) throw DataError(path.string() + ": expected columns subject_id,dice");
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    double v = 0.0;
    try {
      v = std::stod(table.rows[i][static_cast<std::size_t>(cv)]);
    } catch (const std::exception&) {
      throw DataError(path.string() + ": line " + std::to_string(table.line_numbers[i]) + ": bad dice value");
    }
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError(path.string() + ": line " + std::to_string(table.line_numbers[i]) + ": dice outside [0,1]");
    }
    out[table.rows[i][static_cast<std::size_t>(cs)]] = v;
  }
  return out;
}

json result_json(const fairness::FairnessResult& r) {
  json stats = json::array();
  for (const auto& g : r.group_stats) {
    json j = {{"group", g.group}, {"n", g.n}, {"n_pos", g.n_pos}, {"n_neg", g.n_neg}, {"eligible", g.eligible}};
    j["tpr"] = g.tpr ? json(*g.tpr) : json(nullptr);
    j["fpr"] = g.fpr ? json(*g.fpr) : json(nullptr);
    j["dice"] = g.dice ? json(*g.dice) : json(nullptr);
    if (!g.note.empty()) j["note"] = g.note;
    stats.push_back(std::move(j));
  }
  json argmax = {{"group_i", r.argmax.group_i}, {"group_j", r.argmax.group_j}};
  argmax["y"] = r.argmax.y ? json(*r.argmax.y) : json(nullptr);
  json j = {{"value", r.value}, {"argmax_groups", argmax}, {"group_stats", stats}};
  if (!r.warnings.empty()) j["warnings"] = r.warnings;
  return j;
}

void run_fairness(const FairnessArgs& a) {
  const auto metrics = split_list(a.metrics);
  const auto attrs = split_list(a.attrs);
  std::vector<fairness::Metric> ms;
  for (const auto& m : metrics) {
    try {
      ms.push_back(fairness::parse_metric(m));
    } catch (const std::exception&) {
      throw ConfigError("unknown fairness metric '" + m + "'");
    }
  }
  for (const auto& at : attrs) {
    if (at != "sex" && at != "age" && at != "race") throw ConfigError("unknown attribute '" + at + "'");
  }
  const bool need_pred = std::any_of(ms.begin(), ms.end(), [](auto m) {
    return m == fairness::Metric::eodd || m == fairness::Metric::eop || m == fairness::Metric::eodd_sum;
  });
  const bool need_dice = std::any_of(ms.begin(), ms.end(), [](auto m) {
    return m == fairness::Metric::ser || m == fairness::Metric::delta_dice;
  });
  if (need_pred && a.pred.empty()) throw ConfigError("--pred is required for prediction-based metrics");
  if (need_dice && a.dice.empty()) throw ConfigError("--dice is required for ser and delta_dice");

  const auto records = dataset::load_metadata(a.meta);
  const auto splits = splits_for(records, a.seed);
  std::vector<dataset::SubjectRecord> test_records;
  for (const auto& r : records) {
    if (splits.at(r.subject_id).split == dataset::Split::test) test_records.push_back(r);
  }
  std::map<std::string, dataset::SubgroupPartition> parts;
  for (const auto& at : attrs) {
    if (at == "age") {
      parts[at] = dataset::dichotomize_age(records, splits, dataset::Split::test);
    } else {
      auto p = dataset::partition_by(test_records, at);
      if (at == "race" && a.race_min_count > 0) p = fairness::merge_small_groups(p, a.race_min_count, "Other");
      parts[at] = std::move(p);
    }
  }

  json report = json::array();
  auto add = [&](const std::string& task, const std::string& attr, fairness::Metric m,
                 const fairness::FairnessResult& orig, const std::optional<fairness::FairnessResult>& other,
                 const fairness::ResampleStatistic& diff, std::size_t units) {
    json cell = result_json(other ? *other : orig);
    cell["task"] = task;
    cell["attribute"] = attr;
    cell["metric"] = fairness::to_string(m);
    cell["bias_change"] = nullptr;
    cell["p_value"] = nullptr;
    cell["ci"] = nullptr;
    if (other) {
      cell["original_value"] = orig.value;
      const auto change = fairness::bias_change(orig.value, other->value);
      cell["bias_change"] = change.value;
      cell["undefined_relative"] = change.undefined_relative;
      if (a.bootstrap > 0) {
        const auto seed = derive_seed(a.seed, "bootstrap/" + task + "/" + attr + "/" + fairness::to_string(m));
        const auto b = fairness::bootstrap_compare(units, diff, a.bootstrap, seed, a.jobs);
        cell["p_value"] = b.p_value;
        cell["ci"] = {b.ci_low, b.ci_high};
        cell["bootstrap_seed"] = seed;
      }
    }
    report.push_back(std::move(cell));
  };

  if (need_pred) {
    const auto scores_a = pipeline::read_predictions(a.pred, a.condition);
    std::optional<pipeline::ScoreTable> scores_b;
    if (!a.pred_b.empty()) scores_b = pipeline::read_predictions(a.pred_b, a.condition);
    for (const auto& task : tasks_of(records)) {
      auto binarize = [&](const pipeline::ScoreTable& s) {
        const auto t = task::fit_balanced_threshold(scored_set(records, splits, s, task, dataset::Split::validation));
        return task::binarize(scored_set(records, splits, s, task, dataset::Split::test), t);
      };
      const auto bin_a = binarize(scores_a);
      std::optional<std::vector<task::BinarizedEntry>> bin_b;
      if (scores_b) bin_b = binarize(*scores_b);
      for (auto m : ms) {
        if (m == fairness::Metric::ser || m == fairness::Metric::delta_dice) continue;
        const auto fn = m == fairness::Metric::eodd ? &fairness::eodd
                        : m == fairness::Metric::eop ? &fairness::eop
                                                     : &fairness::eodd_sum;
        for (const auto& attr : attrs) {
          const auto& part = parts.at(attr);
          const auto orig = fn(bin_a, part);
          std::optional<fairness::FairnessResult> other;
          if (bin_b) other = fn(*bin_b, part);
          const fairness::ResampleStatistic diff = [&](std::span<const std::size_t> idx) -> std::optional<double> {
            std::vector<task::BinarizedEntry> x, y;
            for (auto k : idx) {
              x.push_back(bin_a[k]);
              y.push_back((*bin_b)[k]);
            }
            try {
              return fn(y, part).value - fn(x, part).value;
            } catch (const std::exception&) {
              return std::nullopt;
            }
          };
          add(task, attr, m, orig, other, diff, bin_a.size());
        }
      }
    }
  }
  if (need_dice) {
    const auto dice_a = read_dice(a.dice);
    std::optional<std::map<std::string, double>> dice_b;
    if (!a.dice_b.empty()) dice_b = read_dice(a.dice_b);
    std::vector<std::string> ids;
    for (const auto& r : test_records) {
      if (dice_a.contains(r.subject_id)) ids.push_back(r.subject_id);
    }
    for (auto m : ms) {
      if (m != fairness::Metric::ser && m != fairness::Metric::delta_dice) continue;
      for (const auto& attr : attrs) {
        const auto& part = parts.at(attr);
        auto compute = [&](const std::map<std::string, double>& dice, std::span<const std::size_t> idx) {
          std::map<std::string, std::pair<double, double>> acc;
          for (auto k : idx) {
            if (const auto g = part.group_of(ids[k])) {
              acc[*g].first += dice.at(ids[k]);
              acc[*g].second += 1.0;
            }
          }
          std::map<std::string, double> by_group;
          for (const auto& [g, s] : acc) by_group[g] = s.first / s.second;
          return m == fairness::Metric::ser ? fairness::ser(by_group, attr) : fairness::delta_dice(by_group, attr);
        };
        std::vector<std::size_t> all(ids.size());
        for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
        const auto orig = compute(dice_a, all);
        std::optional<fairness::FairnessResult> other;
        if (dice_b) {
          for (const auto& id : ids) {
            if (!dice_b->contains(id)) throw DataError("--dice-b lacks subject '" + id + "'");
          }
          other = compute(*dice_b, all);
        }
        const fairness::ResampleStatistic diff = [&](std::span<const std::size_t> idx) -> std::optional<double> {
          try {
            return compute(*dice_b, idx).value - compute(dice_a, idx).value;
          } catch (const std::exception&) {
            return std::nullopt;
          }
        };
        add("segmentation", attr, m, orig, other, diff, ids.size());
      }
    }
  }
  io::write_text(a.out, json{{"results", report}}.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// mitigate

/// Mitigation data directory: metadata.csv, clean/<id>, degraded/<id>; one
/// image per subject, one label column.
struct MitigationData {
  std::vector<dataset::SubjectRecord> records;
  std::vector<mitigation::Sample> samples;
  std::vector<std::string> attributes = {"sex", "age"};
};

MitigationData load_mitigation_data(const fs::path& dir) {
  MitigationData d;
  d.records = dataset::load_metadata(dir / "metadata.csv");
  const auto tasks = tasks_of(d.records);
  if (tasks.size() != 1) throw DataError("mitigation data needs exactly one label column");
  const auto sex = dataset::partition_by(d.records, "sex");
  const auto age = dataset::partition_by(d.records, "age");
  auto index_of = [](const dataset::SubgroupPartition& p, const std::string& id) {
    int k = 0;
    for (const auto& [label, members] : p.groups) {
      if (members.contains(id)) return k;
      ++k;
    }
    return -1;
  };
  for (const auto& r : d.records) {
    mitigation::Sample s;
    s.subject_id = r.subject_id;
    s.clean = io::read_image(dir / "clean" / r.subject_id);
    s.degraded = io::read_image(dir / "degraded" / r.subject_id);
    if (!s.clean.same_shape(s.degraded)) throw DataError("subject '" + r.subject_id + "': clean/degraded shape mismatch");
    const auto it = r.labels.find(tasks.front());
    if (it == r.labels.end()) throw DataError("subject '" + r.subject_id + "' has no label");
    s.label = it->second;
    s.groups = {index_of(sex, r.subject_id), index_of(age, r.subject_id)};
    d.samples.push_back(std::move(s));
  }
  return d;
}

void write_mitigation_data(const fs::path& dir, const mitigation::BiasedCorpus& corpus) {
  fs::create_directories(dir / "clean");
  fs::create_directories(dir / "degraded");
  std::string meta = "subject_id,sex,age,label_finding\n";
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& r = corpus.records[i];
    meta += r.subject_id + "," + r.sex + "," + dataset::format_real(*r.age_years) + "," +
            std::to_string(r.labels.at("finding")) + "\n";
    io::write_image(dir / "clean" / r.subject_id, corpus.samples[i].clean);
    io::write_image(dir / "degraded" / r.subject_id, corpus.samples[i].degraded);
  }
  io::write_text(dir / "metadata.csv", meta);
}

struct MitigateArgs {
  std::string strategy = "eodd";
  double lambda_fair = mitigation::SoftEoddConfig{}.lambda_fair;
  double tau = mitigation::SoftEoddConfig{}.tau;
  double temperature = mitigation::SoftEoddConfig{}.temperature;
  double ema = mitigation::SoftEoddConfig{}.ema_momentum;
  std::size_t epochs = mitigation::FinetuneOptions{}.epochs;
  std::size_t batch_size = mitigation::FinetuneOptions{}.batch_size;
  std::string optimizer = "adam";
  double learning_rate = mitigation::FinetuneOptions{}.learning_rate;
  std::size_t kernel_size = 3;
  std::uint64_t seed = 0;
  std::string data, out;
};

void run_mitigate(const MitigateArgs& a) {
  mitigation::Strategy strategy;
  try {
    strategy = mitigation::parse_strategy(a.strategy == "eodd" ? "eodd_constraint" : a.strategy);
  } catch (const std::exception&) {
    throw ConfigError("--strategy must be uniform, reweight or eodd");
  }
  mitigation::FinetuneOptions fo;
  if (a.optimizer == "sgd") {
    fo.optimizer = mitigation::Optimizer::sgd;
  } else if (a.optimizer == "adam") {
    fo.optimizer = mitigation::Optimizer::adam;
  } else if (a.optimizer == "gauss_newton") {
    fo.optimizer = mitigation::Optimizer::gauss_newton;
  } else {
    throw ConfigError("--optimizer must be sgd, adam or gauss_newton");
  }
  fo.epochs = a.epochs;
  fo.batch_size = a.batch_size;
  fo.learning_rate = a.learning_rate;
  fo.seed = derive_seed(a.seed, "finetune");
  mitigation::SoftEoddConfig cfg{a.tau, a.temperature, a.lambda_fair, a.ema};
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (fo.epochs == 0 || fo.batch_size == 0 || !(fo.learning_rate > 0.0)) {
    throw ConfigError("--epochs, --batch-size and --lr must be positive");
  }

  const auto data = load_mitigation_data(a.data);
  const auto splits = dataset::make_splits(data.records, derive_seed(a.seed, "splits"), 0.0);
  std::vector<mitigation::Sample> train, eval;
  std::vector<dataset::SubjectRecord> train_records;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    if (splits.at(data.records[i].subject_id).split == dataset::Split::train) {
      train.push_back(data.samples[i]);
      train_records.push_back(data.records[i]);
    } else if (splits.at(data.records[i].subject_id).split == dataset::Split::test) {
      eval.push_back(data.samples[i]);
    }
  }
  std::vector<Image> imgs;
  std::vector<int> labels;
  for (const auto& s : train) {
    imgs.push_back(s.clean);
    labels.push_back(s.label);
  }
  const auto n = train.front().clean.rows();
  mitigation::ToyPipeline pipe;
  pipe.classifier = mitigation::fit_classifier(
      imgs, labels, mitigation::corpus_classifier_regions(n, mitigation::BiasedCorpusOptions{}.center_radius));
  pipe.reconstructor = mitigation::fit_denoiser(train, a.kernel_size);
  if (strategy == mitigation::Strategy::reweight) {
    const auto w = mitigation::compute_reweights(train_records, data.attributes);
    for (const auto& r : train_records) {
      const auto it = w.weights.find(r.subject_id);
      fo.sample_weights.push_back(it == w.weights.end() ? 0.0 : it->second);
    }
    for (const auto& msg : w.warnings) std::cerr << "warning: " << msg << "\n";
  }
  const auto res = mitigation::finetune(pipe, train, eval, strategy, cfg, fo);
  fs::create_directories(a.out);
  std::string log = "epoch,train_loss,rec_loss,soft_eodd,hard_eodd,psnr_db,inactive_fairness_steps\n";
  for (const auto& e : res.log) {
    log += std::to_string(e.epoch) + "," + dataset::format_real(e.train_loss) + "," + dataset::format_real(e.rec_loss) +
           "," + dataset::format_real(e.soft_eodd) + "," + dataset::format_real(e.hard_eodd) + "," +
           dataset::format_real(e.psnr_db) + "," + std::to_string(e.inactive_fairness_steps) + "\n";
  }
  io::write_text(fs::path(a.out) / "log.csv", log);
  io::write_text(fs::path(a.out) / "params.json", json(res.pipeline.reconstructor.parameters()).dump() + "\n");
  if (res.diverged) {
    std::cerr << "warning: " << res.message << "\n";
  }
}

// ---------------------------------------------------------------------------

int dispatch(int argc, char** argv) {
  CLI::App app{"Fairness audit of medical image reconstruction"};
  app.require_subcommand(1);
  unsigned jobs = 1;
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::Range(1u, 1024u));

  // degrade
  auto* degrade = app.add_subcommand("degrade", "Simulate accelerated MRI or low-dose X-ray");
  degrade->require_subcommand(1);
  DegradeArgs da;
  auto* dmri = degrade->add_subcommand("mri", "Radial golden-angle undersampling + zero-filled reconstruction");
  dmri->add_option("--acceleration", da.acceleration, "Acceleration factor (4, 8, 16 or any real >= 1)");
  auto* dxray = degrade->add_subcommand("xray", "Poisson dose noise + filtered back-projection");
  dxray->add_option("--photons", da.photons, "Incident photons per detector bin");
  dxray->add_option("--angles", da.angles, "Projection angles");
  for (auto* sub : {dmri, dxray}) {
    sub->add_option("--seed", da.seed, "Master seed");
    sub->add_option("--in", da.in, "Directory of clean images")->required();
    sub->add_option("--out", da.out, "Output directory")->required();
    sub->add_option("--jobs", da.jobs, "Worker threads")->check(CLI::Range(1u, 1024u));
  }

  // reconstruct
  auto* recon = app.add_subcommand("reconstruct", "Baseline reconstructions for every noise level of a config");
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed_override;
  recon->add_option("--config", config_path, "Run config (JSON)")->required();
  recon->add_option("--out", out_dir, "Output directory (<out>/<condition>/<image>)")->required();
  recon->add_option("--seed", seed_override, "Override the master seed");
  recon->add_option("--jobs", jobs, "Worker threads")->check(CLI::Range(1u, 1024u));

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Image quality or task metrics");
  evaluate->require_subcommand(1);
  auto* equality = evaluate->add_subcommand("quality", "PSNR / SSIM / Dice per image");
  std::string ref, test, qmetrics = "psnr,ssim", condition = "test", qout;
  equality->add_option("--ref", ref, "Reference images")->required();
  equality->add_option("--test", test, "Test images")->required();
  equality->add_option("--metric", qmetrics, "Comma list of psnr,ssim,dice");
  equality->add_option("--condition", condition, "Condition label written to each row");
  equality->add_option("--out", qout, "scores.csv")->required();
  equality->add_option("--jobs", jobs, "Worker threads")->check(CLI::Range(1u, 1024u));
  auto* etask = evaluate->add_subcommand("task", "AUROC and balanced thresholds");
  std::string pred, meta, split = "test", tout, pcond = "original";
  std::uint64_t seed = 0;
  etask->add_option("--pred", pred, "Predictions CSV")->required();
  etask->add_option("--meta", meta, "Metadata CSV")->required();
  etask->add_option("--split", split, "validation or test");
  etask->add_option("--condition", pcond, "Condition to select when the CSV has a condition column");
  etask->add_option("--seed", seed, "Master seed (splits)");
  etask->add_option("--out", tout, "auroc.csv,thresholds.json")->required();

  // fairness
  auto* fair = app.add_subcommand("fairness", "Group fairness, bias change and bootstrap significance");
  FairnessArgs fa;
  fair->add_option("--pred", fa.pred, "Predictions on original images");
  fair->add_option("--pred-b", fa.pred_b, "Predictions on reconstructed images");
  fair->add_option("--dice", fa.dice, "Per-subject Dice CSV (subject_id,dice)");
  fair->add_option("--dice-b", fa.dice_b, "Per-subject Dice CSV for the compared condition");
  fair->add_option("--meta", fa.meta, "Metadata CSV")->required();
  fair->add_option("--metric", fa.metrics, "Comma list of eodd,eop,ser,delta_dice,eodd_sum");
  fair->add_option("--attr", fa.attrs, "Comma list of sex,age,race");
  fair->add_option("--condition", fa.condition, "Condition to select when the CSV has a condition column");
  fair->add_option("--bootstrap", fa.bootstrap, "Bootstrap iterations (0 disables)");
  fair->add_option("--race-min-count", fa.race_min_count, "Merge smaller race groups into Other");
  fair->add_option("--seed", fa.seed, "Master seed");
  fair->add_option("--out", fa.out, "report.json")->required();
  fair->add_option("--jobs", fa.jobs, "Worker threads")->check(CLI::Range(1u, 1024u));

  // mitigate
  auto* mit = app.add_subcommand("mitigate", "Fine-tune the toy reconstructor");
  MitigateArgs ma;
  mit->add_option("--strategy", ma.strategy, "uniform, reweight or eodd");
  mit->add_option("--lambda-fair", ma.lambda_fair, "Fairness weight");
  mit->add_option("--tau", ma.tau, "Soft prediction threshold");
  mit->add_option("--temp", ma.temperature, "Soft prediction temperature");
  mit->add_option("--ema", ma.ema, "EMA momentum");
  mit->add_option("--epochs", ma.epochs, "Epochs");
  mit->add_option("--batch-size", ma.batch_size, "Batch size");
  mit->add_option("--optimizer", ma.optimizer, "sgd, adam or gauss_newton");
  mit->add_option("--lr", ma.learning_rate, "Learning rate");
  mit->add_option("--kernel-size", ma.kernel_size, "Denoiser kernel size (odd)");
  mit->add_option("--seed", ma.seed, "Master seed");
  mit->add_option("--data", ma.data, "Data directory (metadata.csv, clean/, degraded/)")->required();
  mit->add_option("--out", ma.out, "Run directory")->required();

  // report
  auto* rep = app.add_subcommand("report", "Plot-ready CSV from a run report");
  std::string report_in, plot_kind = "performance_vs_noise", plot_out;
  rep->add_option("--in", report_in, "report.json")->required();
  rep->add_option("--plot", plot_kind, "performance_vs_noise, bias_change_histogram or fairness_bars");
  rep->add_option("--out", plot_out, "CSV path (stdout when omitted)");

  // run
  auto* run = app.add_subcommand("run", "Full pipeline from a config");
  run->add_option("--config", config_path, "Run config (JSON)")->required();
  run->add_option("--seed", seed_override, "Override the master seed");
  run->add_option("--out", out_dir, "Override the output directory");
  run->add_option("--jobs", jobs, "Worker threads")->check(CLI::Range(1u, 1024u));

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  std::string kind = "images", synth_out, synth_tasks = "finding";
  pipeline::SyntheticDatasetOptions so;
  mitigation::BiasedCorpusOptions bo;
  synth->add_option("--kind", kind, "images (run input) or biased (mitigate input)");
  synth->add_option("--subjects", so.subjects, "Subjects");
  synth->add_option("--size", so.image_size, "Image side length");
  synth->add_option("--tasks", synth_tasks, "Comma list of task names (images)");
  synth->add_flag("--masks", so.with_masks, "Write segmentation masks (images)");
  synth->add_option("--seed", so.seed, "Seed");
  synth->add_option("--out", synth_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  if (degrade->got_subcommand(dmri)) {
    da.jobs = std::max(da.jobs, jobs);
    degrade_mri(da);
  } else if (degrade->got_subcommand(dxray)) {
    da.jobs = std::max(da.jobs, jobs);
    degrade_xray(da);
  } else if (app.got_subcommand(recon)) {
    auto cfg = pipeline::load_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (jobs > 1) cfg.jobs = jobs;
    if (cfg.output.empty()) cfg.output = out_dir;
    pipeline::write_reconstructions(cfg, out_dir);
  } else if (evaluate->got_subcommand(equality)) {
    evaluate_quality(ref, test, qmetrics, condition, qout, jobs);
  } else if (evaluate->got_subcommand(etask)) {
    evaluate_task(pred, meta, split, tout, pcond, seed);
  } else if (app.got_subcommand(fair)) {
    fa.jobs = std::max(fa.jobs, jobs);
    run_fairness(fa);
  } else if (app.got_subcommand(mit)) {
    run_mitigate(ma);
  } else if (app.got_subcommand(rep)) {
    const auto report = pipeline::load_report(report_in);
    const auto csv = pipeline::emit_plot_data(report, pipeline::parse_plot_kind(plot_kind));
    if (plot_out.empty()) {
      std::cout << csv;
    } else {
      io::write_text(plot_out, csv);
    }
  } else if (app.got_subcommand(run)) {
    auto cfg = pipeline::load_config(config_path);
    if (seed_override) cfg.seed = *seed_override;
    if (!out_dir.empty()) cfg.output = out_dir;
    if (jobs > 1) cfg.jobs = jobs;
    const auto report = pipeline::run(cfg);
    io::write_text(cfg.output / "report.json", report.to_text());
    for (const char* k : {"performance_vs_noise", "bias_change_histogram", "fairness_bars"}) {
      try {
        io::write_text(cfg.output / (std::string(k) + ".csv"),
                       pipeline::emit_plot_data(report, pipeline::parse_plot_kind(k)));
      } catch (const DataError& e) {
        std::cerr << "note: " << k << " skipped: " << e.what() << "\n";
      }
    }
    std::cout << (cfg.output / "report.json").string() << "\n";
  } else if (app.got_subcommand(synth)) {
    if (kind == "images") {
      so.tasks = split_list(synth_tasks);
      pipeline::write_synthetic_dataset(synth_out, so);
    } else if (kind == "biased") {
      if (synth->count("--subjects")) bo.subjects = so.subjects;
      if (synth->count("--size")) bo.image_size = so.image_size;
      bo.seed = so.seed;
      write_mitigation_data(synth_out, mitigation::make_biased_corpus(bo));
    } else {
      throw ConfigError("--kind must be images or biased");
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
