#include "reconfair/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

#include "reconfair/errors.hpp"
#include "reconfair/io.hpp"
#include "reconfair/rng.hpp"

namespace reconfair::dataset {

std::map<std::string, std::size_t> SubgroupPartition::counts() const {
  std::map<std::string, std::size_t> out;
  for (const auto& [label, members] : groups) out[label] = members.size();
  return out;
}

std::optional<std::string> SubgroupPartition::group_of(const std::string& subject_id) const {
  for (const auto& [label, members] : groups) {
    if (members.contains(subject_id)) return label;
  }
  return std::nullopt;
}

std::size_t SubgroupPartition::non_empty_groups() const {
  return static_cast<std::size_t>(
      std::count_if(groups.begin(), groups.end(), [](const auto& g) { return !g.second.empty(); }));
}

const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

const char* to_string(SubSplit s) {
  return s == SubSplit::recon_train ? "recon_train" : "classifier_train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "validation") return Split::validation;
  if (text == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + text + "'");
}

std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc{} ? std::string(buf, end) : std::to_string(v);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<SubjectRecord> load_metadata(const std::filesystem::path& path) {
  const auto table = io::read_csv(path);
  for (const char* required : {"subject_id", "sex", "age"}) {
    if (table.column(required) < 0) {
      throw DataError(path.string() + ": missing required column '" + required + "'");
    }
  }
  const int c_id = table.column("subject_id");
  const int c_sex = table.column("sex");
  const int c_age = table.column("age");
  const int c_race = table.column("race");
  const int c_mask = table.column("mask_ref");
  std::vector<std::pair<int, std::string>> label_cols;
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    const auto& h = table.header[i];
    if (h.rfind("label_", 0) == 0 && h.size() > 6) {
      label_cols.emplace_back(static_cast<int>(i), h.substr(6));
    } else if (h != "subject_id" && h != "sex" && h != "age" && h != "race" && h != "mask_ref") {
      throw DataError(path.string() + ": unknown column '" + h + "'");
    }
  }

  std::vector<SubjectRecord> records;
  std::set<std::string> seen;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    const auto where = path.string() + ": row " + std::to_string(table.line_numbers[r]);
    SubjectRecord rec;
    rec.subject_id = trim(row[c_id]);
    if (rec.subject_id.empty()) throw DataError(where + ": empty subject_id");
    if (!seen.insert(rec.subject_id).second) {
      throw DataError(where + ": duplicate subject_id '" + rec.subject_id + "'");
    }
    rec.sex = trim(row[c_sex]);
    if (rec.sex.empty()) throw DataError(where + ": missing sex");
    const auto age = trim(row[c_age]);
    if (!age.empty()) {
      double v = 0;
      auto [p, ec] = std::from_chars(age.data(), age.data() + age.size(), v);
      if (ec != std::errc{} || p != age.data() + age.size() || !std::isfinite(v) || v < 0) {
        throw DataError(where + ": invalid age '" + age + "'");
      }
      rec.age_years = v;
    }
    if (c_race >= 0) {
      auto race = trim(row[c_race]);
      if (!race.empty()) rec.race = std::move(race);
    }
    if (c_mask >= 0) {
      auto mask = trim(row[c_mask]);
      if (!mask.empty()) rec.mask_ref = std::move(mask);
    }
    for (const auto& [col, task] : label_cols) {
      const auto v = trim(row[col]);
      if (v.empty()) continue;
      if (v != "0" && v != "1") {
        throw DataError(where + ": label_" + task + " must be 0 or 1, got '" + v + "'");
      }
      rec.labels[task] = v == "1" ? 1 : 0;
    }
    records.push_back(std::move(rec));
  }
  return records;
}

SubgroupPartition partition_by(std::span<const SubjectRecord> records, const std::string& attribute) {
  if (attribute == "age") return dichotomize_age(records);
  if (attribute != "sex" && attribute != "race") {
    throw std::invalid_argument("unknown attribute '" + attribute + "'");
  }
  SubgroupPartition part;
  part.attribute = attribute;
  for (const auto& r : records) {
    if (attribute == "sex") {
      part.groups[r.sex].insert(r.subject_id);
    } else if (r.race) {
      part.groups[*r.race].insert(r.subject_id);
    }
  }
  part.degenerate = part.non_empty_groups() < 2;
  return part;
}

SubgroupPartition dichotomize_age(std::span<const SubjectRecord> records) {
  std::vector<double> ages;
  for (const auto& r : records) {
    if (r.age_years) ages.push_back(*r.age_years);
  }
  if (ages.empty()) throw std::invalid_argument("dichotomize_age: no record with a known age");
  const double m = aggregate_slice_scores(ages);
  SubgroupPartition part;
  part.attribute = "age";
  part.median = m;
  const auto lo = "<=" + format_real(m);
  const auto hi = ">" + format_real(m);
  part.groups[lo];
  part.groups[hi];
  for (const auto& r : records) {
    if (!r.age_years) continue;
    part.groups[*r.age_years <= m ? lo : hi].insert(r.subject_id);
  }
  part.degenerate = part.non_empty_groups() < 2;
  return part;
}

SubgroupPartition dichotomize_age(std::span<const SubjectRecord> records,
                                  const std::map<std::string, SplitAssignment>& splits, Split only) {
  std::vector<SubjectRecord> kept;
  for (const auto& r : records) {
    auto it = splits.find(r.subject_id);
    if (it != splits.end() && it->second.split == only) kept.push_back(r);
  }
  return dichotomize_age(kept);
}

std::map<std::string, SplitAssignment> make_splits(std::span<const SubjectRecord> records,
                                                   std::uint64_t seed,
                                                   double train_sub_split_fraction) {
  if (!(train_sub_split_fraction >= 0.0 && train_sub_split_fraction <= 1.0)) {
    throw std::invalid_argument("make_splits: sub-split fraction must be in [0,1]");
  }
  if (records.size() < 10) {
    throw std::invalid_argument("make_splits: need at least 10 subjects, got " +
                                std::to_string(records.size()));
  }
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.subject_id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw std::invalid_argument("make_splits: duplicate subject_id");
  }
  Rng rng(derive_seed(seed, "make_splits"));
  for (std::size_t i = ids.size() - 1; i > 0; --i) {
    std::swap(ids[i], ids[rng.uniform_index(i + 1)]);
  }

  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * n));
  const auto n_train_val = static_cast<std::size_t>(std::llround(0.8 * n));
  const auto n_recon = static_cast<std::size_t>(
      std::llround(train_sub_split_fraction * static_cast<double>(n_train)));

  std::map<std::string, SplitAssignment> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    SplitAssignment a;
    if (i < n_train) {
      a.split = Split::train;
      if (train_sub_split_fraction > 0.0) {
        a.sub_split = i < n_recon ? SubSplit::recon_train : SubSplit::classifier_train;
      }
    } else if (i < n_train_val) {
      a.split = Split::validation;
    } else {
      a.split = Split::test;
    }
    out.emplace(ids[i], a);
  }
  return out;
}

double aggregate_slice_scores(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("aggregate_slice_scores: empty score list");
  std::vector<double> v(scores.begin(), scores.end());
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

}  // namespace reconfair::dataset
