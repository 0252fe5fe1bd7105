#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reconfair/dataset.hpp"
#include "reconfair/task_metrics.hpp"

namespace reconfair::fairness {

enum class Metric { eodd, eop, ser, delta_dice, eodd_sum };
const char* to_string(Metric m);
Metric parse_metric(const std::string& text);

struct GroupStats {
  std::string group;
  std::size_t n = 0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::optional<double> tpr;
  std::optional<double> fpr;
  std::optional<double> dice;
  bool eligible = true;
  std::string note;
};

/// The pair realizing a reported value; `y` is set for rate-based metrics.
struct ArgmaxGroups {
  std::string group_i;
  std::string group_j;
  std::optional<int> y;
};

struct FairnessResult {
  Metric metric = Metric::eodd;
  std::string attribute;
  double value = 0.0;
  ArgmaxGroups argmax;
  std::vector<GroupStats> group_stats;
  std::vector<std::string> warnings;
};

/// Denominator floor for the skewed-error ratio.
inline constexpr double kSerErrorFloor = 1e-6;
/// Below this original bias the relative change is reported as undefined.
inline constexpr double kBiasChangeFloor = 1e-6;
inline constexpr std::size_t kDefaultBootstrapIterations = 1000;
/// Fraction of degenerate resamples tolerated by bootstrap_compare.
inline constexpr double kMaxDegenerateFraction = 0.2;

/// Worst gap over y in {0,1} and group pairs of P(pred=1 | Y=y, group).
/// Groups lacking either label class are excluded and noted in group_stats.
/// Subjects not covered by the partition are ignored.
FairnessResult eodd(std::span<const task::BinarizedEntry> binarized,
                    const dataset::SubgroupPartition& partition);

/// As eodd restricted to Y=1 (TPR gaps); groups need only positives.
FairnessResult eop(std::span<const task::BinarizedEntry> binarized,
                   const dataset::SubgroupPartition& partition);

/// Pairwise sum |TPR gap| + |FPR gap|, maximized over pairs.
FairnessResult eodd_sum(std::span<const task::BinarizedEntry> binarized,
                        const dataset::SubgroupPartition& partition);

/// max(1 - Dice) / max(min(1 - Dice), kSerErrorFloor).
FairnessResult ser(const std::map<std::string, double>& dice_by_group, const std::string& attribute = {});

/// Largest pairwise |Dice gap|.
FairnessResult delta_dice(const std::map<std::string, double>& dice_by_group,
                          const std::string& attribute = {});

struct BiasChange {
  /// Percent change, or the absolute change when `undefined_relative`.
  double value = 0.0;
  bool undefined_relative = false;
};

BiasChange bias_change(double bias_orig, double bias_new);

struct BootstrapComparison {
  double statistic = 0.0;  // on the original sample
  std::size_t iterations = kDefaultBootstrapIterations;
  double p_value = 1.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::uint64_t seed = 0;
  std::size_t degenerate_resamples = 0;
};

/// Statistic over a resample given as unit indices (with repetition).
/// Returns nullopt when the resample is degenerate (e.g. a class missing).
using ResampleStatistic = std::function<std::optional<double>(std::span<const std::size_t>)>;

/// Subject-level bootstrap. Two-sided p = 2 min(P*(stat <= 0), P*(stat >= 0))
/// clamped to [2/(iterations+1), 1]; 95% percentile CI. Iteration b draws
/// from a seed derived from (seed, b), so results do not depend on `jobs`.
BootstrapComparison bootstrap_compare(std::size_t n_units, const ResampleStatistic& statistic,
                                      std::size_t iterations, std::uint64_t seed, unsigned jobs = 1);

/// Moves every group smaller than min_count into `sink_label`.
dataset::SubgroupPartition merge_small_groups(const dataset::SubgroupPartition& partition,
                                              std::size_t min_count, const std::string& sink_label);

/// Largest |value_i - value_j| over pairs in the given (ordered) list; the
/// first maximal pair in lexicographic index order wins ties.
struct PairGap {
  double gap = 0.0;
  std::size_t i = 0;
  std::size_t j = 0;
};
PairGap max_pairwise_gap(std::span<const double> values);

}  // namespace reconfair::fairness
