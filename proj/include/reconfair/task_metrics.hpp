#pragma once

#include <string>
#include <vector>

namespace reconfair::task {

struct ScoredEntry {
  std::string subject_id;
  double score = 0.0;
  int label = 0;
};

struct ScoredLabelSet {
  std::string task;
  std::vector<ScoredEntry> entries;

  std::size_t positives() const;
  std::size_t negatives() const;
};

struct BalancedThreshold {
  std::string task;
  double threshold = 0.5;
  double achieved_sensitivity = 0.0;
  double achieved_specificity = 0.0;
};

struct BinarizedEntry {
  std::string subject_id;
  int predicted = 0;
  int label = 0;
};

/// Mann-Whitney U / (n_pos n_neg), ties counted as one half.
double auroc(const ScoredLabelSet& s);

/// Candidate thresholds are 0, 1 and every midpoint between adjacent
/// distinct scores. Picks the one minimizing |TPR - TNR|; ties go to the
/// larger TPR, then the smaller threshold.
BalancedThreshold fit_balanced_threshold(const ScoredLabelSet& validation);

/// Predicted positive iff score > threshold.
std::vector<BinarizedEntry> binarize(const ScoredLabelSet& s, const BalancedThreshold& t);

}  // namespace reconfair::task
