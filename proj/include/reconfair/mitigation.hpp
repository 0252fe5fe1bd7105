#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reconfair/dataset.hpp"
#include "reconfair/grid.hpp"
#include "reconfair/rng.hpp"

namespace reconfair::mitigation {

// ---------------------------------------------------------------------------
// Inverse joint-frequency reweighting

struct SampleWeights {
  /// Normalized to sum 1.
  std::map<std::string, double> weights;
  std::vector<std::string> joint_attributes;
  /// joint subgroup key ("F|<=60|Asian") -> subject count
  std::map<std::string, std::size_t> joint_counts;
  std::vector<std::string> warnings;
};

/// weight(subject) = 1 / |joint subgroup of subject|, normalized. Subjects
/// missing any attribute are excluded with a warning.
SampleWeights compute_reweights(std::span<const dataset::SubjectRecord> records,
                                const std::vector<std::string>& attributes);

/// Draws indices proportional to non-negative weights. When all weights are
/// equal it degenerates to a plain uniform draw, so a balanced reweighting
/// and an unweighted run consume the generator identically.
class WeightedSampler {
 public:
  explicit WeightedSampler(std::vector<double> weights);
  std::size_t draw(Rng& rng) const;
  std::size_t size() const { return cumulative_.size(); }
  bool uniform() const { return uniform_; }

 private:
  std::vector<double> cumulative_;
  bool uniform_ = true;
};

// ---------------------------------------------------------------------------
// Differentiable equalized-odds constraint

struct SoftEoddConfig {
  double tau = 0.5;
  double temperature = 0.3;
  double lambda_fair = 1.0;
  double ema_momentum = 0.1;

  /// Throws std::invalid_argument on out-of-range fields.
  void validate() const;
};

/// sigma((score - tau) / T)
double soft_predict(double score, const SoftEoddConfig& cfg);

/// Where the soft EODD maximum is attained.
struct SoftEoddDetail {
  double value = 0.0;
  bool defined = false;
  std::size_t attribute = 0;
  int y = 1;
  int group_i = -1;
  int group_j = -1;
  /// sign of (mean_i - mean_j)
  double sign = 0.0;
};

/// Max over attributes, y in {0,1} and eligible group pairs of the gap in
/// mean soft prediction. `groups[a][k]` is the group id of sample k for
/// attribute a (negative = missing). Groups need both label classes.
/// Ties keep the first maximum in (attribute, y = 1 then 0, i < j) order.
SoftEoddDetail soft_eodd_detail(std::span<const double> soft_preds, std::span<const int> labels,
                                const std::vector<std::vector<int>>& groups);

/// Single-attribute soft EODD with string group labels. Throws when fewer
/// than two groups have both label classes.
double soft_eodd(std::span<const double> soft_preds, std::span<const int> labels,
                 std::span<const std::string> groups, const SoftEoddConfig& cfg);

/// Same maximum computed on hard predictions score > tau.
double hard_eodd(std::span<const double> scores, std::span<const int> labels,
                 const std::vector<std::vector<int>>& groups, double tau);

// ---------------------------------------------------------------------------
// Toy reconstruction + classification pipeline

/// Single k x k correlation kernel plus bias, zero padded ("same" output).
struct Denoiser {
  std::size_t kernel_size = 3;
  std::vector<double> kernel;  // row-major, kernel_size^2
  double bias = 0.0;

  static Denoiser identity(std::size_t kernel_size);
  Image apply(const Image& x) const;
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> p);
  std::size_t parameter_count() const { return kernel.size() + 1; }
};

/// Frozen logistic model over region-mean features of an image.
struct PooledLogistic {
  std::vector<Mask> regions;
  std::vector<double> weights;
  double intercept = 0.0;

  double logit(const Image& x) const;
  double predict(const Image& x) const;
  /// d logit / d pixel.
  Image saliency() const;
  std::vector<double> features(const Image& x) const;
  std::vector<double> parameters() const;
};

struct EmaState {
  std::optional<double> value;
};

struct ToyPipeline {
  Denoiser reconstructor;
  PooledLogistic classifier;
  EmaState ema;
};

struct Sample {
  std::string subject_id;
  Image degraded;
  Image clean;
  int label = 0;
  /// One group id per sensitive attribute (negative = missing).
  std::vector<int> groups;
};

/// Least-squares fit of the denoiser on (degraded, clean) pairs, optionally
/// weighted per sample; `ridge` is added to the normal-equation diagonal.
Denoiser fit_denoiser(std::span<const Sample> samples, std::size_t kernel_size,
                      std::span<const double> weights = {}, double ridge = 1e-9);

/// Newton fit of the pooled logistic classifier on clean images.
PooledLogistic fit_classifier(std::span<const Image> images, std::span<const int> labels,
                              std::vector<Mask> regions, double l2 = 1e-6);

struct EoddLossResult {
  double loss = 0.0;
  std::vector<double> gradient;  // w.r.t. Denoiser::parameters()
  double rec_loss = 0.0;
  double bce = 0.0;
  double soft_eodd = 0.0;
  /// bce + soft_eodd^2 for this batch.
  double fairness_value = 0.0;
  /// EMA value after this step (unchanged when the term is inactive).
  std::optional<double> ema_after;
  bool fairness_active = false;
};

/// L = mean squared reconstruction error + lambda * EMA(BCE + soft_eodd^2).
/// The EMA update is e <- (1-m) e + m v, starting from the first v; the
/// history is a constant, so only the current batch term is differentiated.
/// When no attribute has two eligible groups in the batch the fairness term
/// is dropped for the step. Throws std::runtime_error on a non-finite loss.
EoddLossResult eodd_loss(std::span<const Sample> batch, const ToyPipeline& pipeline,
                         const SoftEoddConfig& cfg);

/// Reconstruction-only loss and its gradient.
EoddLossResult mse_loss(std::span<const Sample> batch, const Denoiser& f);

// ---------------------------------------------------------------------------
// Proportionality between the EODD proxy and conditional covariances

struct ProportionalityTerm {
  int y = 1;
  double proxy = 0.0;       // signed mean-score gap between A=1 and A=0 within Y=y
  double covariance = 0.0;  // Cov(A, f | Y=y), population normalization
  double factor = 0.0;      // proxy = factor * covariance
  double relative_error = 0.0;
};

struct ProportionalityCheck {
  std::string group_a;  // treated as A=0
  std::string group_b;  // treated as A=1
  bool skipped = false;
  std::string reason;
  ProportionalityTerm positive;  // y = 1
  ProportionalityTerm negative;  // y = 0
};

struct ProportionalityReport {
  std::vector<ProportionalityCheck> checks;
  double max_relative_error = 0.0;
  std::size_t skipped = 0;
};

/// Binary attribute in `groups` (0/1). Factors depend only on counts:
/// y=1: S_Y^2 / (S_AY (S_Y - S_AY)); y=0: the same expression on the Y=0
/// subpopulation.
ProportionalityCheck check_proportionality(std::span<const double> scores, std::span<const int> labels,
                                           std::span<const int> groups);

/// Multi-group input is reduced to every pair of groups.
ProportionalityReport verify_covariance_proportionality(std::span<const double> scores,
                                                        std::span<const int> labels,
                                                        std::span<const std::string> groups);

// ---------------------------------------------------------------------------
// Fine-tuning

enum class Strategy { uniform, reweight, eodd_constraint };
const char* to_string(Strategy s);
Strategy parse_strategy(const std::string& text);

/// gauss_newton preconditions every step with the inverse of the (constant)
/// reconstruction-loss Hessian over the training set.
enum class Optimizer { sgd, adam, gauss_newton };

struct FinetuneOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  Optimizer optimizer = Optimizer::adam;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  /// Per-sample draw weights for the reweight strategy (parallel to data).
  std::vector<double> sample_weights;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double rec_loss = 0.0;
  double soft_eodd = 0.0;
  double hard_eodd = 0.0;
  double psnr_db = 0.0;
  std::size_t inactive_fairness_steps = 0;
};

struct EvaluationSummary {
  double rec_loss = 0.0;
  double soft_eodd = 0.0;
  double hard_eodd = 0.0;
  double psnr_db = 0.0;
};

/// Metrics of the pipeline on a sample set: MSE, soft/hard EODD at tau,
/// mean PSNR of the reconstructions.
EvaluationSummary evaluate(std::span<const Sample> samples, const ToyPipeline& pipeline,
                           const SoftEoddConfig& cfg);

struct FinetuneResult {
  ToyPipeline pipeline;
  std::vector<EpochLog> log;  // entry 0 is the state before training
  bool diverged = false;
  std::string message;
};

/// Gradient descent on the reconstructor only. `uniform` and `reweight`
/// draw batches with replacement (uniformly / by weight) and use the
/// reconstruction loss; `eodd_constraint` walks seeded shuffles of the data
/// and uses eodd_loss. Logged metrics are computed on `eval` (or `train`
/// when `eval` is empty). A non-finite step stops training and returns the
/// last finite state.
FinetuneResult finetune(const ToyPipeline& pipeline, std::span<const Sample> train,
                        std::span<const Sample> eval, Strategy strategy, const SoftEoddConfig& cfg,
                        const FinetuneOptions& options);

// ---------------------------------------------------------------------------
// Synthetic corpus where degradation interacts with a group-correlated feature

enum class FeatureShape { bar, ring };

struct BiasedCorpusOptions {
  std::size_t subjects = 6000;
  std::size_t image_size = 24;
  /// Share of subjects (group "B") carrying the feature.
  double minority_fraction = 0.3;
  /// Bar: vertical band left of the lesion at horizontal offset
  /// [inner, inner + width]. Ring: annulus with those radii.
  FeatureShape feature = FeatureShape::bar;
  /// Peak contrast; each subject scales it by U(0.5, 1).
  double feature_amplitude = 0.6;
  double feature_inner = 3.0;
  double feature_width = 3.0;
  /// Flip the feature sign per subject with probability 1/2.
  bool random_sign = false;
  double lesion_sigma = 6.0;
  /// Subject-level spread of lesion contrast.
  double lesion_spread = 0.02;
  double background = 0.3;
  double blur_sigma = 2.0;
  /// Radius of the classifier's central pooling region.
  double center_radius = 2.5;
  double noise_sigma = 0.02;
  std::uint64_t seed = 1;
};

struct BiasedCorpus {
  std::vector<dataset::SubjectRecord> records;
  std::vector<Sample> samples;  // parallel to records; groups = {sex, age}
  std::vector<std::string> attributes;
  std::vector<Mask> classifier_regions;
};

/// Central disk of `center_radius` and the periphery beyond 0.4 * size.
std::vector<Mask> corpus_classifier_regions(std::size_t image_size, double center_radius);

/// Subjects with label-dependent central lesions; group "B" (sex) adds a
/// bright structure next to the lesion. Degradation blurs and adds Gaussian
/// noise, so the feature leaks into the classifier's central region.
BiasedCorpus make_biased_corpus(const BiasedCorpusOptions& options);

}  // namespace reconfair::mitigation
