#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace reconfair::dataset {

struct SubjectRecord {
  std::string subject_id;
  std::string sex;
  std::optional<double> age_years;
  std::optional<std::string> race;
  /// task name -> binary label
  std::map<std::string, int> labels;
  std::vector<std::string> image_refs;
  std::optional<std::string> mask_ref;
};

/// Disjoint groups of subjects for one sensitive attribute.
struct SubgroupPartition {
  std::string attribute;
  std::map<std::string, std::set<std::string>> groups;
  /// Set when the partition came from median dichotomization.
  std::optional<double> median;
  /// True when fewer than two groups are non-empty.
  bool degenerate = false;

  std::map<std::string, std::size_t> counts() const;
  /// Group label of a subject, or nullopt when the subject is not covered.
  std::optional<std::string> group_of(const std::string& subject_id) const;
  std::size_t non_empty_groups() const;
};

enum class Split { train, validation, test };
enum class SubSplit { recon_train, classifier_train };

struct SplitAssignment {
  Split split = Split::train;
  std::optional<SubSplit> sub_split;
  friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

const char* to_string(Split s);
const char* to_string(SubSplit s);
Split parse_split(const std::string& text);

/// Parses the metadata CSV:
/// `subject_id,sex,age,race,label_<task>...[,mask_ref]`.
/// `race` and `mask_ref` columns are optional; empty cells are missing values.
/// Throws DataError naming the missing column or the offending row.
std::vector<SubjectRecord> load_metadata(const std::filesystem::path& path);

/// Partition by "sex", "race" or "age" (median dichotomization). Subjects
/// with a missing value are left out.
SubgroupPartition partition_by(std::span<const SubjectRecord> records, const std::string& attribute);

/// Two groups `<=m` and `>m` around the median age m of the supplied
/// records. Ties go to the lower group.
SubgroupPartition dichotomize_age(std::span<const SubjectRecord> records);

/// Same as above restricted to subjects assigned to `only`.
SubgroupPartition dichotomize_age(std::span<const SubjectRecord> records,
                                  const std::map<std::string, SplitAssignment>& splits,
                                  Split only);

/// 70/10/20 patient-level split from a seeded permutation of the sorted
/// subject ids. With `train_sub_split_fraction` > 0 the train part is cut
/// again into recon_train (that fraction) and classifier_train.
std::map<std::string, SplitAssignment> make_splits(std::span<const SubjectRecord> records,
                                                   std::uint64_t seed,
                                                   double train_sub_split_fraction);

/// Median of per-slice scores; mean of the two central values for even counts.
double aggregate_slice_scores(std::span<const double> scores);

/// Shortest round-trip decimal text for a real (used in group labels).
std::string format_real(double v);

}  // namespace reconfair::dataset
