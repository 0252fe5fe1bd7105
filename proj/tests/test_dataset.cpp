#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>

#include "reconfair/dataset.hpp"
#include "reconfair/errors.hpp"
#include "test_util.hpp"

using namespace reconfair;
using namespace reconfair::dataset;

namespace {

std::vector<SubjectRecord> make_records(std::size_t n) {
  std::vector<SubjectRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    SubjectRecord r;
    r.subject_id = "S" + std::to_string(1000 + i);
    r.sex = i % 2 ? "F" : "M";
    r.age_years = 20.0 + static_cast<double>(i % 60);
    out.push_back(r);
  }
  return out;
}

std::string error_of(const std::filesystem::path& p) {
  try {
    load_metadata(p);
  } catch (const DataError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("load_metadata parses the documented schema") {
  testutil::TempDir dir("meta");
  const auto p = dir.write("m.csv",
                           "subject_id,sex,age,race,label_edema,label_effusion,mask_ref\n"
                           "a,F,61,Asian,1,0,masks/a\n"
                           "b,M,45,,0,,\n"
                           "c,F,,White,1,1,\n");
  const auto recs = load_metadata(p);
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].subject_id == "a");
  CHECK(recs[0].race == std::optional<std::string>("Asian"));
  CHECK(recs[0].mask_ref == std::optional<std::string>("masks/a"));
  CHECK(recs[0].labels.at("edema") == 1);
  CHECK(recs[0].labels.at("effusion") == 0);
  CHECK_FALSE(recs[1].race.has_value());
  CHECK_FALSE(recs[1].labels.contains("effusion"));
  CHECK_FALSE(recs[2].age_years.has_value());
  CHECK(*recs[1].age_years == 45.0);
}

TEST_CASE("load_metadata rejects schema and domain violations") {
  testutil::TempDir dir("meta_bad");
  CHECK(error_of(dir.write("a.csv", "subject_id,age,label_x\na,50,1\n")).find("sex") != std::string::npos);
  const auto label_err = error_of(dir.write("b.csv", "subject_id,sex,age,label_x\na,F,50,1\nb,M,40,2\n"));
  CHECK(label_err.find("row 3") != std::string::npos);
  CHECK(error_of(dir.write("c.csv", "subject_id,sex,age\na,F,50\na,M,40\n")).find("duplicate") != std::string::npos);
  CHECK(error_of(dir.write("d.csv", "subject_id,sex,age,colour\na,F,50,red\n")).find("colour") != std::string::npos);
  CHECK(error_of(dir.write("e.csv", "subject_id,sex,age\na,F,-3\n")).find("age") != std::string::npos);
}

TEST_CASE("dichotomize_age follows the <= median rule") {
  auto recs = make_records(3);
  recs[0].age_years = 50;
  recs[1].age_years = 60;
  recs[2].age_years = 70;
  const auto p = dichotomize_age(recs);
  CHECK(*p.median == 60.0);
  CHECK(p.groups.at("<=60").size() == 2);
  CHECK(p.groups.at(">60").size() == 1);
  CHECK_FALSE(p.degenerate);

  auto ties = make_records(2);
  ties[0].age_years = ties[1].age_years = 58;
  const auto t = dichotomize_age(ties);
  CHECK(t.groups.at("<=58").size() == 2);
  CHECK(t.groups.at(">58").empty());
  CHECK(t.degenerate);

  CHECK_THROWS_AS(dichotomize_age(std::vector<SubjectRecord>{}), std::invalid_argument);
}

TEST_CASE("age partition covers every subject with a known age exactly once") {
  auto recs = make_records(41);
  recs[5].age_years.reset();
  const auto p = dichotomize_age(recs);
  std::size_t covered = 0;
  for (const auto& [g, m] : p.groups) covered += m.size();
  CHECK(covered == 40);
  CHECK_FALSE(p.group_of(recs[5].subject_id).has_value());
}

TEST_CASE("partition_by excludes missing race but keeps sex") {
  auto recs = make_records(4);
  recs[0].race = "A";
  recs[1].race = "B";
  const auto race = partition_by(recs, "race");
  CHECK(race.groups.size() == 2);
  CHECK_FALSE(race.group_of(recs[2].subject_id).has_value());
  CHECK(partition_by(recs, "sex").group_of(recs[2].subject_id).has_value());
}

TEST_CASE("make_splits proportions, sub-split and determinism") {
  const auto recs = make_records(100);
  const auto a = make_splits(recs, 7, 0.0);
  const auto b = make_splits(recs, 7, 0.0);
  CHECK(a == b);
  std::map<Split, int> counts;
  for (const auto& [id, s] : a) {
    ++counts[s.split];
    CHECK_FALSE(s.sub_split.has_value());
  }
  CHECK(std::abs(counts[Split::train] - 70) <= 2);
  CHECK(std::abs(counts[Split::validation] - 10) <= 2);
  CHECK(std::abs(counts[Split::test] - 20) <= 2);

  const auto c = make_splits(recs, 7, 0.7);
  int recon = 0, cls = 0;
  for (const auto& [id, s] : c) {
    if (s.split != Split::train) continue;
    REQUIRE(s.sub_split.has_value());
    (*s.sub_split == SubSplit::recon_train ? recon : cls)++;
  }
  CHECK(recon == 49);
  CHECK(cls == 21);

  CHECK_THROWS_AS(make_splits(make_records(9), 1, 0.0), std::invalid_argument);
}

TEST_CASE("make_splits ignores input row order") {
  auto recs = make_records(57);
  const auto a = make_splits(recs, 11, 0.7);
  std::mt19937 g(3);
  std::shuffle(recs.begin(), recs.end(), g);
  CHECK(make_splits(recs, 11, 0.7) == a);
  CHECK(make_splits(recs, 12, 0.7) != a);
}

TEST_CASE("aggregate_slice_scores is the median") {
  CHECK(aggregate_slice_scores(std::vector<double>{0.2, 0.9, 0.4}) == doctest::Approx(0.4));
  CHECK(aggregate_slice_scores(std::vector<double>{0.2, 0.8}) == doctest::Approx(0.5));
  CHECK_THROWS(aggregate_slice_scores(std::vector<double>{}));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t n : {71u, 70u}) {
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    const double oracle = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    CHECK(aggregate_slice_scores(v) == oracle);
  }
}
