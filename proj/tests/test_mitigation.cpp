#include <doctest.h>

#include <cmath>
#include <random>

#include "reconfair/mitigation.hpp"

using namespace reconfair;
using namespace reconfair::mitigation;

namespace {

struct Small {
  BiasedCorpus corpus;
  ToyPipeline pipeline;
};

Small small_setup(std::size_t subjects = 160) {
  BiasedCorpusOptions o;
  o.subjects = subjects;
  o.image_size = 16;
  o.seed = 5;
  Small s{make_biased_corpus(o), {}};
  std::vector<Image> clean;
  std::vector<int> labels;
  for (const auto& x : s.corpus.samples) {
    clean.push_back(x.clean);
    labels.push_back(x.label);
  }
  s.pipeline.classifier = fit_classifier(clean, labels, s.corpus.classifier_regions, 1e-2);
  s.pipeline.reconstructor = fit_denoiser(s.corpus.samples, 3);
  return s;
}

}  // namespace

TEST_CASE("soft prediction is a tempered sigmoid") {
  SoftEoddConfig cfg;
  cfg.tau = 0.5;
  cfg.temperature = 0.3;
  CHECK(soft_predict(0.8, cfg) == doctest::Approx(0.731058578630).epsilon(1e-10));
  CHECK(soft_predict(0.5, cfg) == doctest::Approx(0.5));
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("inverse joint-frequency weights") {
  std::vector<dataset::SubjectRecord> records;
  for (int i = 0; i < 40; ++i) {
    dataset::SubjectRecord r;
    r.subject_id = "s" + std::to_string(i);
    r.sex = i < 30 ? "F" : "M";
    r.age_years = 50.0;
    records.push_back(r);
  }
  const auto w = compute_reweights(records, {"sex"});
  CHECK(w.weights.at("s0") == doctest::Approx(1.0 / 60.0));
  CHECK(w.weights.at("s35") == doctest::Approx(1.0 / 20.0));
  double total = 0.0;
  for (const auto& [id, v] : w.weights) total += v;
  CHECK(total == doctest::Approx(1.0));
  CHECK(w.joint_counts.at("F") == 30);
}

TEST_CASE("equal weights draw exactly like a uniform index") {
  WeightedSampler sampler(std::vector<double>(7, 0.25));
  CHECK(sampler.uniform());
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) CHECK(sampler.draw(a) == b.uniform_index(7));

  WeightedSampler skewed({0.0, 1.0, 0.0});
  Rng c(1);
  for (int i = 0; i < 50; ++i) CHECK(skewed.draw(c) == 1);
}

TEST_CASE("soft EODD picks the largest group gap") {
  const std::vector<double> p{0.9, 0.1, 0.7, 0.3, 0.8, 0.2, 0.2, 0.4};
  const std::vector<int> y{1, 0, 1, 0, 1, 0, 1, 0};
  const std::vector<std::vector<int>> g{{0, 0, 0, 0, 1, 1, 1, 1}};
  const auto d = soft_eodd_detail(p, y, g);
  // y=1: means 0.8 vs 0.5; y=0: 0.2 vs 0.3.
  CHECK(d.defined);
  CHECK(d.value == doctest::Approx(0.3));
  CHECK(d.y == 1);
  CHECK(d.sign == 1.0);
  CHECK(hard_eodd(p, y, g, 0.5) == doctest::Approx(0.5));
}

TEST_CASE("EMA follows its recurrence") {
  auto s = small_setup();
  SoftEoddConfig cfg;
  cfg.ema_momentum = 0.1;
  std::span<const Sample> all(s.corpus.samples);
  const auto first = eodd_loss(all.subspan(0, 64), s.pipeline, cfg);
  REQUIRE(first.fairness_active);
  CHECK(*first.ema_after == doctest::Approx(first.fairness_value));
  s.pipeline.ema.value = first.ema_after;
  const auto second = eodd_loss(all.subspan(64, 64), s.pipeline, cfg);
  CHECK(*second.ema_after == doctest::Approx(0.9 * first.fairness_value + 0.1 * second.fairness_value));
  CHECK(second.loss == doctest::Approx(second.rec_loss + cfg.lambda_fair * *second.ema_after));
}

TEST_CASE("lambda 0 reduces to the reconstruction loss") {
  const auto s = small_setup();
  SoftEoddConfig cfg;
  cfg.lambda_fair = 0.0;
  std::span<const Sample> batch(s.corpus.samples.data(), 32);
  const auto a = eodd_loss(batch, s.pipeline, cfg);
  const auto b = mse_loss(batch, s.pipeline.reconstructor);
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
  REQUIRE(a.gradient.size() == b.gradient.size());
  for (std::size_t i = 0; i < a.gradient.size(); ++i) {
    CHECK(a.gradient[i] == doctest::Approx(b.gradient[i]).epsilon(1e-9));
  }
}

TEST_CASE("eodd_loss gradient matches central differences") {
  auto s = small_setup();
  SoftEoddConfig cfg;
  cfg.lambda_fair = 2.0;
  s.pipeline.ema.value = 0.4;
  std::span<const Sample> batch(s.corpus.samples.data(), 48);
  const auto base = eodd_loss(batch, s.pipeline, cfg);
  const auto params = s.pipeline.reconstructor.parameters();
  const double h = 1e-6;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto plus = s.pipeline, minus = s.pipeline;
    auto p = params;
    p[i] += h;
    plus.reconstructor.set_parameters(p);
    p[i] -= 2 * h;
    minus.reconstructor.set_parameters(p);
    const double fd = (eodd_loss(batch, plus, cfg).loss - eodd_loss(batch, minus, cfg).loss) / (2 * h);
    CHECK(base.gradient[i] == doctest::Approx(fd).epsilon(1e-4).scale(1e-3));
  }
}

TEST_CASE("EODD proxy is proportional to the conditional covariance") {
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> scores;
  std::vector<int> labels, groups;
  for (int i = 0; i < 500; ++i) {
    labels.push_back(u(g) < 0.4);
    groups.push_back(u(g) < 0.3);
    scores.push_back(u(g) + 0.2 * groups.back());
  }
  const auto c = check_proportionality(scores, labels, groups);
  REQUIRE_FALSE(c.skipped);
  for (const auto* t : {&c.positive, &c.negative}) {
    double na = 0, nb = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (labels[i] != t->y) continue;
      (groups[i] ? nb : na) += 1;
      (groups[i] ? sb : sa) += scores[i];
    }
    const double n = na + nb;
    CHECK(t->proxy == doctest::Approx(sb / nb - sa / na).epsilon(1e-10));
    CHECK(t->factor == doctest::Approx(n * n / (nb * (n - nb))).epsilon(1e-10));
    CHECK(t->relative_error < 1e-9);
  }
}

TEST_CASE("zero epochs leave the pipeline untouched") {
  const auto s = small_setup();
  FinetuneOptions o;
  o.epochs = 0;
  const auto r = finetune(s.pipeline, s.corpus.samples, {}, Strategy::eodd_constraint, SoftEoddConfig{}, o);
  CHECK(r.pipeline.reconstructor.parameters() == s.pipeline.reconstructor.parameters());
  CHECK(r.log.size() == 1);
}

TEST_CASE("fine-tuning never changes the classifier") {
  const auto s = small_setup();
  FinetuneOptions o;
  o.epochs = 2;
  o.learning_rate = 1e-2;
  const auto r = finetune(s.pipeline, s.corpus.samples, {}, Strategy::eodd_constraint, SoftEoddConfig{}, o);
  CHECK(r.pipeline.classifier.parameters() == s.pipeline.classifier.parameters());
  CHECK(r.pipeline.reconstructor.parameters() != s.pipeline.reconstructor.parameters());
  CHECK(r.log.size() == 3);
}

TEST_CASE("balanced reweighting reproduces the uniform run") {
  const auto s = small_setup(80);
  FinetuneOptions o;
  o.epochs = 2;
  o.seed = 4;
  const auto u = finetune(s.pipeline, s.corpus.samples, {}, Strategy::uniform, SoftEoddConfig{}, o);
  o.sample_weights.assign(s.corpus.samples.size(), 1.0 / 80.0);
  const auto w = finetune(s.pipeline, s.corpus.samples, {}, Strategy::reweight, SoftEoddConfig{}, o);
  CHECK(u.pipeline.reconstructor.parameters() == w.pipeline.reconstructor.parameters());
}

TEST_CASE("denoiser identity and parameter round trip") {
  auto d = Denoiser::identity(3);
  Image x(5, 5);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1 * static_cast<double>(i % 7);
  CHECK(d.apply(x) == x);
  auto p = d.parameters();
  CHECK(p.size() == 10);
  p[9] = 0.25;
  d.set_parameters(p);
  CHECK(d.apply(x)(2, 2) == doctest::Approx(x(2, 2) + 0.25));
}
