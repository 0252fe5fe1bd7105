#include "reconfair/task_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace reconfair::task {

std::size_t ScoredLabelSet::positives() const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.label == 1; }));
}

std::size_t ScoredLabelSet::negatives() const { return entries.size() - positives(); }

namespace {

void require_two_classes(const ScoredLabelSet& s, const char* what) {
  for (const auto& e : s.entries) {
    if (e.label != 0 && e.label != 1) {
      throw std::invalid_argument(std::string(what) + ": labels must be 0 or 1");
    }
    if (!std::isfinite(e.score)) throw std::invalid_argument(std::string(what) + ": non-finite score");
  }
  if (s.positives() == 0 || s.negatives() == 0) {
    throw std::invalid_argument(std::string(what) + ": task '" + s.task +
                                "' needs both positive and negative samples");
  }
}

}  // namespace

double auroc(const ScoredLabelSet& s) {
  require_two_classes(s, "auroc");
  std::vector<std::pair<double, int>> v;
  v.reserve(s.entries.size());
  for (const auto& e : s.entries) v.emplace_back(e.score, e.label);
  std::sort(v.begin(), v.end());
  // Sum of mid-ranks of the positives.
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (v[k].second == 1) rank_sum += mid_rank;
    }
    i = j;
  }
  const auto np = static_cast<double>(s.positives());
  const auto nn = static_cast<double>(s.negatives());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

BalancedThreshold fit_balanced_threshold(const ScoredLabelSet& validation) {
  require_two_classes(validation, "fit_balanced_threshold");
  std::vector<double> pos, neg, all;
  for (const auto& e : validation.entries) {
    (e.label == 1 ? pos : neg).push_back(e.score);
    all.push_back(e.score);
  }
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  std::vector<double> candidates = {0.0, 1.0};
  for (std::size_t i = 0; i + 1 < all.size(); ++i) candidates.push_back(0.5 * (all[i] + all[i + 1]));
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  const auto np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  BalancedThreshold best{validation.task, 0.0, 0.0, 0.0};
  double best_gap = 2.0;
  for (double t : candidates) {
    // TPR: positives strictly above t; TNR: negatives at or below t.
    const auto above = pos.end() - std::upper_bound(pos.begin(), pos.end(), t);
    const auto below = std::upper_bound(neg.begin(), neg.end(), t) - neg.begin();
    const double tpr = static_cast<double>(above) / np;
    const double tnr = static_cast<double>(below) / nn;
    const double gap = std::abs(tpr - tnr);
    // Candidates ascend, so a strict improvement keeps the smaller threshold on ties.
    if (gap < best_gap || (gap == best_gap && tpr > best.achieved_sensitivity)) {
      best_gap = gap;
      best.threshold = t;
      best.achieved_sensitivity = tpr;
      best.achieved_specificity = tnr;
    }
  }
  return best;
}

std::vector<BinarizedEntry> binarize(const ScoredLabelSet& s, const BalancedThreshold& t) {
  if (s.task != t.task) {
    throw std::invalid_argument("binarize: threshold for task '" + t.task + "' applied to task '" +
                                s.task + "'");
  }
  std::vector<BinarizedEntry> out;
  out.reserve(s.entries.size());
  for (const auto& e : s.entries) out.push_back({e.subject_id, e.score > t.threshold ? 1 : 0, e.label});
  return out;
}

}  // namespace reconfair::task
