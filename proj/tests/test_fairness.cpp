#include <doctest.h>

#include <cmath>
#include <random>

#include "reconfair/fairness.hpp"

using namespace reconfair;
using namespace reconfair::fairness;

namespace {

struct Fixture {
  std::vector<task::BinarizedEntry> entries;
  dataset::SubgroupPartition partition;

  void add(const std::string& group, int label, int predicted, int count) {
    for (int i = 0; i < count; ++i) {
      const std::string id = group + std::to_string(entries.size());
      entries.push_back({id, predicted, label});
      partition.groups[group].insert(id);
    }
  }
};

Fixture worked_example() {
  Fixture f;
  f.partition.attribute = "sex";
  f.add("F", 1, 1, 9);
  f.add("F", 1, 0, 1);
  f.add("F", 0, 1, 4);
  f.add("F", 0, 0, 16);
  f.add("M", 1, 1, 7);
  f.add("M", 1, 0, 3);
  f.add("M", 0, 1, 5);
  f.add("M", 0, 0, 15);
  return f;
}

}  // namespace

TEST_CASE("EODD worked example: TPR 0.9 vs 0.7, FPR 0.2 vs 0.25") {
  const auto f = worked_example();
  const auto r = eodd(f.entries, f.partition);
  CHECK(r.value == doctest::Approx(0.2));
  REQUIRE(r.argmax.y.has_value());
  CHECK(*r.argmax.y == 1);
  CHECK(eop(f.entries, f.partition).value == doctest::Approx(0.2));
  CHECK(eodd_sum(f.entries, f.partition).value == doctest::Approx(0.25));
  REQUIRE(r.group_stats.size() == 2);
  CHECK(*r.group_stats[0].tpr == doctest::Approx(0.9));
  CHECK(*r.group_stats[1].fpr == doctest::Approx(0.25));
}

TEST_CASE("EODD agrees with a brute-force oracle and bounds EOP") {
  for (unsigned seed = 0; seed < 20; ++seed) {
    std::mt19937_64 g(seed);
    std::uniform_int_distribution<int> coin(0, 1), grp(0, 2);
    Fixture f;
    f.partition.attribute = "race";
    for (int i = 0; i < 90; ++i) f.add(std::string(1, static_cast<char>('A' + grp(g))), coin(g), coin(g), 1);
    // Guarantee both classes per group.
    for (const char* gname : {"A", "B", "C"}) {
      f.add(gname, 0, 0, 1);
      f.add(gname, 1, 1, 1);
    }
    double rates[3][2] = {};
    double counts[3][2] = {};
    for (const auto& e : f.entries) {
      const int gi = f.partition.group_of(e.subject_id)->at(0) - 'A';
      counts[gi][e.label] += 1;
      rates[gi][e.label] += e.predicted;
    }
    double oracle = 0.0, oracle_eop = 0.0;
    for (int y = 0; y < 2; ++y)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          const double gap = std::abs(rates[i][y] / counts[i][y] - rates[j][y] / counts[j][y]);
          oracle = std::max(oracle, gap);
          if (y == 1) oracle_eop = std::max(oracle_eop, gap);
        }
    const double e = eodd(f.entries, f.partition).value;
    const double o = eop(f.entries, f.partition).value;
    CHECK(e == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(o == doctest::Approx(oracle_eop).epsilon(1e-12));
    CHECK(o <= e + 1e-12);
  }
}

TEST_CASE("groups missing a label class are excluded from EODD") {
  auto f = worked_example();
  f.add("X", 1, 1, 5);
  const auto r = eodd(f.entries, f.partition);
  CHECK(r.value == doctest::Approx(0.2));
  bool noted = false;
  for (const auto& g : r.group_stats) {
    if (g.group == "X") noted = !g.eligible && !g.note.empty();
  }
  CHECK(noted);
}

TEST_CASE("skewed error ratio and Dice gap") {
  const std::map<std::string, double> d{{"F", 0.8}, {"M", 0.9}};
  CHECK(ser(d).value == doctest::Approx(2.0));
  CHECK(ser({{"a", 1.0}, {"b", 0.9}}).value == doctest::Approx(0.1 / kSerErrorFloor));
  CHECK(delta_dice({{"a", 0.5}, {"b", 0.75}, {"c", 0.6}}).value == doctest::Approx(0.25));
  CHECK_THROWS_AS(ser({{"a", 0.5}}), std::invalid_argument);
  CHECK_THROWS_AS(delta_dice({{"a", 0.5}, {"b", 1.5}}), std::invalid_argument);
}

TEST_CASE("bias change") {
  const auto b = bias_change(0.05, 0.062);
  CHECK_FALSE(b.undefined_relative);
  CHECK(b.value == doctest::Approx(24.0));
  const auto u = bias_change(0.0, 0.03);
  CHECK(u.undefined_relative);
  CHECK(u.value == doctest::Approx(0.03));
  CHECK_THROWS_AS(bias_change(-0.1, 0.2), std::invalid_argument);
}

TEST_CASE("bootstrap of a constant statistic") {
  const auto r = bootstrap_compare(
      20, [](std::span<const std::size_t>) -> std::optional<double> { return 0.0; }, 200, 7);
  CHECK(r.p_value == 1.0);
  CHECK(r.ci_low == 0.0);
  CHECK(r.ci_high == 0.0);
  CHECK(r.degenerate_resamples == 0);
}

TEST_CASE("bootstrap p-value floor, determinism and job invariance") {
  std::vector<double> x(30);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 1.0 + 0.01 * static_cast<double>(i);
  const ResampleStatistic mean = [&](std::span<const std::size_t> idx) -> std::optional<double> {
    double s = 0.0;
    for (auto i : idx) s += x[i];
    return s / static_cast<double>(idx.size());
  };
  const auto a = bootstrap_compare(x.size(), mean, 99, 11, 1);
  const auto b = bootstrap_compare(x.size(), mean, 99, 11, 4);
  CHECK(a.p_value == doctest::Approx(2.0 / 100.0));
  CHECK(a.ci_low == b.ci_low);
  CHECK(a.ci_high == b.ci_high);
  CHECK(a.statistic == doctest::Approx(1.145));
  CHECK(a.ci_low <= a.statistic);
  CHECK(a.ci_high >= a.statistic);
}

TEST_CASE("bootstrap rejects too many degenerate resamples and tiny samples") {
  const ResampleStatistic flaky = [](std::span<const std::size_t> idx) -> std::optional<double> {
    if (idx[0] < 5) return std::nullopt;
    return 0.0;
  };
  std::size_t n = 10;
  const ResampleStatistic first_ok = [](std::span<const std::size_t> idx) -> std::optional<double> {
    if (idx.size() && idx[0] == 0 && idx[1] == 1) return 0.0;
    return std::nullopt;
  };
  CHECK_THROWS_AS(bootstrap_compare(n, first_ok, 50, 1), std::runtime_error);
  CHECK_THROWS_AS(bootstrap_compare(9, flaky, 50, 1), std::invalid_argument);
  CHECK_THROWS_AS(bootstrap_compare(10, flaky, 0, 1), std::invalid_argument);
}

TEST_CASE("small groups merge into the sink") {
  dataset::SubgroupPartition p;
  p.attribute = "race";
  p.groups["White"] = {"a", "b", "c", "d"};
  p.groups["Black"] = {"e", "f", "g"};
  p.groups["Asian"] = {"h"};
  p.groups["Other"] = {"i"};
  const auto m = merge_small_groups(p, 3, "Other");
  CHECK(m.groups.at("Other") == std::set<std::string>{"h", "i"});
  CHECK(m.groups.count("Asian") == 0);
  CHECK(m.groups.at("Black").size() == 3);
}

TEST_CASE("pairwise gap ties go to the first pair") {
  const std::vector<double> v{0.1, 0.5, 0.1, 0.5};
  const auto g = max_pairwise_gap(v);
  CHECK(g.gap == doctest::Approx(0.4));
  CHECK(g.i == 0);
  CHECK(g.j == 1);
}
