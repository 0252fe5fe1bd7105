#include "reconfair/fairness.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "reconfair/parallel.hpp"
#include "reconfair/rng.hpp"

namespace reconfair::fairness {

const char* to_string(Metric m) {
  switch (m) {
    case Metric::eodd: return "eodd";
    case Metric::eop: return "eop";
    case Metric::ser: return "ser";
    case Metric::delta_dice: return "delta_dice";
    case Metric::eodd_sum: return "eodd_sum";
  }
  return "?";
}

Metric parse_metric(const std::string& text) {
  if (text == "eodd") return Metric::eodd;
  if (text == "eop") return Metric::eop;
  if (text == "ser") return Metric::ser;
  if (text == "delta_dice") return Metric::delta_dice;
  if (text == "eodd_sum") return Metric::eodd_sum;
  throw std::invalid_argument("unknown fairness metric '" + text + "'");
}

PairGap max_pairwise_gap(std::span<const double> values) {
  PairGap best;
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = i + 1; j < values.size(); ++j) {
      const double g = std::abs(values[i] - values[j]);
      if (g > best.gap || (i == 0 && j == 1)) best = {g, i, j};
    }
  }
  return best;
}

namespace {

struct Tally {
  std::size_t pos = 0, neg = 0, tp = 0, fp = 0;
};

std::vector<GroupStats> tally_groups(std::span<const task::BinarizedEntry> binarized,
                                     const dataset::SubgroupPartition& partition,
                                     bool need_negatives) {
  std::map<std::string, std::string> group_of;
  for (const auto& [label, members] : partition.groups) {
    for (const auto& id : members) group_of[id] = label;
  }
  std::map<std::string, Tally> tallies;
  for (const auto& [label, members] : partition.groups) tallies[label];
  for (const auto& e : binarized) {
    auto it = group_of.find(e.subject_id);
    if (it == group_of.end()) continue;
    auto& t = tallies[it->second];
    if (e.label == 1) {
      ++t.pos;
      t.tp += e.predicted == 1;
    } else {
      ++t.neg;
      t.fp += e.predicted == 1;
    }
  }
  std::vector<GroupStats> stats;
  for (const auto& [label, t] : tallies) {
    GroupStats g;
    g.group = label;
    g.n = t.pos + t.neg;
    g.n_pos = t.pos;
    g.n_neg = t.neg;
    if (t.pos > 0) g.tpr = static_cast<double>(t.tp) / static_cast<double>(t.pos);
    if (t.neg > 0) g.fpr = static_cast<double>(t.fp) / static_cast<double>(t.neg);
    g.eligible = t.pos > 0 && (!need_negatives || t.neg > 0);
    if (!g.eligible) {
      g.note = t.pos == 0 ? "excluded: no Y=1 samples" : "excluded: no Y=0 samples";
    }
    stats.push_back(std::move(g));
  }
  return stats;
}

std::vector<const GroupStats*> eligible_groups(const std::vector<GroupStats>& stats,
                                               FairnessResult& result, const char* what) {
  std::vector<const GroupStats*> out;
  for (const auto& g : stats) {
    if (g.eligible) {
      out.push_back(&g);
    } else {
      result.warnings.push_back("group '" + g.group + "' " + g.note);
    }
  }
  if (out.size() < 2) {
    throw std::invalid_argument(std::string(what) + ": attribute '" + result.attribute +
                                "' has fewer than 2 eligible groups");
  }
  return out;
}

FairnessResult rate_gap(std::span<const task::BinarizedEntry> binarized,
                        const dataset::SubgroupPartition& partition, Metric metric) {
  FairnessResult res;
  res.metric = metric;
  res.attribute = partition.attribute;
  const bool need_neg = metric != Metric::eop;
  res.group_stats = tally_groups(binarized, partition, need_neg);
  const auto groups = eligible_groups(res.group_stats, res, to_string(metric));

  std::vector<double> tpr, fpr;
  for (const auto* g : groups) {
    tpr.push_back(*g->tpr);
    if (need_neg) fpr.push_back(*g->fpr);
  }
  if (metric == Metric::eodd_sum) {
    bool first = true;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      for (std::size_t j = i + 1; j < groups.size(); ++j) {
        const double v = std::abs(tpr[i] - tpr[j]) + std::abs(fpr[i] - fpr[j]);
        if (first || v > res.value) {
          res.value = v;
          res.argmax = {groups[i]->group, groups[j]->group, std::nullopt};
          first = false;
        }
      }
    }
    return res;
  }
  const auto t = max_pairwise_gap(tpr);
  res.value = t.gap;
  res.argmax = {groups[t.i]->group, groups[t.j]->group, 1};
  if (need_neg) {
    const auto f = max_pairwise_gap(fpr);
    if (f.gap > res.value) {
      res.value = f.gap;
      res.argmax = {groups[f.i]->group, groups[f.j]->group, 0};
    }
  }
  return res;
}

void require_dice_groups(const std::map<std::string, double>& dice_by_group, const char* what) {
  if (dice_by_group.size() < 2) throw std::invalid_argument(std::string(what) + ": need at least 2 groups");
  for (const auto& [g, d] : dice_by_group) {
    if (!(d >= 0.0 && d <= 1.0)) {
      throw std::invalid_argument(std::string(what) + ": Dice of group '" + g + "' outside [0,1]");
    }
  }
}

std::vector<GroupStats> dice_stats(const std::map<std::string, double>& dice_by_group) {
  std::vector<GroupStats> out;
  for (const auto& [g, d] : dice_by_group) {
    GroupStats s;
    s.group = g;
    s.dice = d;
    out.push_back(std::move(s));
  }
  return out;
}

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return sorted[lo] + f * (sorted[hi] - sorted[lo]);
}

}  // namespace

FairnessResult eodd(std::span<const task::BinarizedEntry> binarized,
                    const dataset::SubgroupPartition& partition) {
  return rate_gap(binarized, partition, Metric::eodd);
}

FairnessResult eop(std::span<const task::BinarizedEntry> binarized,
                   const dataset::SubgroupPartition& partition) {
  return rate_gap(binarized, partition, Metric::eop);
}

FairnessResult eodd_sum(std::span<const task::BinarizedEntry> binarized,
                        const dataset::SubgroupPartition& partition) {
  return rate_gap(binarized, partition, Metric::eodd_sum);
}

FairnessResult ser(const std::map<std::string, double>& dice_by_group, const std::string& attribute) {
  require_dice_groups(dice_by_group, "ser");
  FairnessResult res;
  res.metric = Metric::ser;
  res.attribute = attribute;
  res.group_stats = dice_stats(dice_by_group);
  auto worst = dice_by_group.begin(), best = dice_by_group.begin();
  for (auto it = dice_by_group.begin(); it != dice_by_group.end(); ++it) {
    if (1.0 - it->second > 1.0 - worst->second) worst = it;
    if (1.0 - it->second < 1.0 - best->second) best = it;
  }
  const double num = std::max(1.0 - worst->second, kSerErrorFloor);
  const double den = std::max(1.0 - best->second, kSerErrorFloor);
  res.value = num / den;
  res.argmax = {worst->first, best->first, std::nullopt};
  return res;
}

FairnessResult delta_dice(const std::map<std::string, double>& dice_by_group, const std::string& attribute) {
  require_dice_groups(dice_by_group, "delta_dice");
  FairnessResult res;
  res.metric = Metric::delta_dice;
  res.attribute = attribute;
  res.group_stats = dice_stats(dice_by_group);
  std::vector<double> v;
  std::vector<std::string> names;
  for (const auto& [g, d] : dice_by_group) {
    names.push_back(g);
    v.push_back(d);
  }
  const auto p = max_pairwise_gap(v);
  res.value = p.gap;
  res.argmax = {names[p.i], names[p.j], std::nullopt};
  return res;
}

BiasChange bias_change(double bias_orig, double bias_new) {
  if (!(bias_orig >= 0.0) || !(bias_new >= 0.0)) {
    throw std::invalid_argument("bias_change: bias values must be non-negative");
  }
  if (bias_orig < kBiasChangeFloor) return {bias_new - bias_orig, true};
  return {100.0 * (bias_new - bias_orig) / bias_orig, false};
}

BootstrapComparison bootstrap_compare(std::size_t n_units, const ResampleStatistic& statistic,
                                      std::size_t iterations, std::uint64_t seed, unsigned jobs) {
  if (n_units < 10) throw std::invalid_argument("bootstrap_compare: need at least 10 subjects");
  if (iterations == 0) throw std::invalid_argument("bootstrap_compare: iterations must be positive");

  BootstrapComparison out;
  out.iterations = iterations;
  out.seed = seed;
  std::vector<std::size_t> identity(n_units);
  for (std::size_t i = 0; i < n_units; ++i) identity[i] = i;
  const auto observed = statistic(identity);
  if (!observed) throw std::invalid_argument("bootstrap_compare: statistic undefined on the original sample");
  out.statistic = *observed;

  std::vector<std::optional<double>> reps(iterations);
  parallel_for(iterations, jobs, [&](std::size_t b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::vector<std::size_t> idx(n_units);
    for (auto& k : idx) k = rng.uniform_index(n_units);
    reps[b] = statistic(idx);
  });

  std::vector<double> values;
  values.reserve(iterations);
  for (const auto& r : reps) {
    if (r) values.push_back(*r);
  }
  out.degenerate_resamples = iterations - values.size();
  if (static_cast<double>(out.degenerate_resamples) > kMaxDegenerateFraction * static_cast<double>(iterations)) {
    throw std::runtime_error("bootstrap_compare: " + std::to_string(out.degenerate_resamples) + " of " +
                             std::to_string(iterations) +
                             " resamples were degenerate (e.g. a label class missing in a group)");
  }
  const auto m = static_cast<double>(values.size());
  const auto le = static_cast<double>(std::count_if(values.begin(), values.end(), [](double v) { return v <= 0.0; }));
  const auto ge = static_cast<double>(std::count_if(values.begin(), values.end(), [](double v) { return v >= 0.0; }));
  const double floor_p = 2.0 / (static_cast<double>(iterations) + 1.0);
  out.p_value = std::clamp(2.0 * std::min(le, ge) / m, floor_p, 1.0);
  std::sort(values.begin(), values.end());
  out.ci_low = quantile(values, 0.025);
  out.ci_high = quantile(values, 0.975);
  return out;
}

dataset::SubgroupPartition merge_small_groups(const dataset::SubgroupPartition& partition,
                                              std::size_t min_count, const std::string& sink_label) {
  dataset::SubgroupPartition out = partition;
  std::vector<std::string> small;
  for (const auto& [label, members] : partition.groups) {
    if (label != sink_label && members.size() < min_count) small.push_back(label);
  }
  for (const auto& label : small) {
    auto node = out.groups.extract(label);
    out.groups[sink_label].insert(node.mapped().begin(), node.mapped().end());
  }
  out.degenerate = out.non_empty_groups() < 2;
  return out;
}

}  // namespace reconfair::fairness
