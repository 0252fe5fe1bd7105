#include "reconfair/mitigation.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include <Eigen/Dense>

#include "reconfair/quality_metrics.hpp"

namespace reconfair::mitigation {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

// ---------------------------------------------------------------------------

SampleWeights compute_reweights(std::span<const dataset::SubjectRecord> records,
                                const std::vector<std::string>& attributes) {
  SampleWeights out;
  out.joint_attributes = attributes;
  std::vector<dataset::SubgroupPartition> parts;
  for (const auto& a : attributes) parts.push_back(dataset::partition_by(records, a));
  for (const auto& p : parts) {
    if (p.non_empty_groups() < 2) {
      out.warnings.push_back("attribute '" + p.attribute + "' has a single observed value");
    }
  }
  std::map<std::string, std::string> key_of;
  for (const auto& r : records) {
    std::string key;
    bool complete = true;
    for (const auto& p : parts) {
      auto g = p.group_of(r.subject_id);
      if (!g) {
        complete = false;
        out.warnings.push_back("subject '" + r.subject_id + "' excluded: missing " + p.attribute);
        break;
      }
      if (!key.empty()) key += '|';
      key += *g;
    }
    if (!complete) continue;
    key_of[r.subject_id] = key;
    ++out.joint_counts[key];
  }
  double total = 0.0;
  for (const auto& [id, key] : key_of) total += 1.0 / static_cast<double>(out.joint_counts[key]);
  for (const auto& [id, key] : key_of) {
    out.weights[id] = (1.0 / static_cast<double>(out.joint_counts[key])) / total;
  }
  return out;
}

WeightedSampler::WeightedSampler(std::vector<double> weights) {
  if (weights.empty()) throw std::invalid_argument("WeightedSampler: no weights");
  double acc = 0.0;
  cumulative_.reserve(weights.size());
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("WeightedSampler: invalid weight");
    if (w != weights.front()) uniform_ = false;
    acc += w;
    cumulative_.push_back(acc);
  }
  if (!(acc > 0.0)) throw std::invalid_argument("WeightedSampler: weights sum to zero");
}

std::size_t WeightedSampler::draw(Rng& rng) const {
  if (uniform_) return static_cast<std::size_t>(rng.uniform_index(cumulative_.size()));
  const double u = rng.uniform() * cumulative_.back();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
}

// ---------------------------------------------------------------------------

void SoftEoddConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("soft EODD: temperature must be > 0");
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("soft EODD: tau must be in (0,1)");
  if (!(lambda_fair >= 0.0)) throw std::invalid_argument("soft EODD: lambda_fair must be >= 0");
  if (!(ema_momentum > 0.0 && ema_momentum <= 1.0)) {
    throw std::invalid_argument("soft EODD: EMA momentum must be in (0,1]");
  }
}

double soft_predict(double score, const SoftEoddConfig& cfg) {
  return sigmoid((score - cfg.tau) / cfg.temperature);
}

SoftEoddDetail soft_eodd_detail(std::span<const double> soft_preds, std::span<const int> labels,
                                const std::vector<std::vector<int>>& groups) {
  if (soft_preds.size() != labels.size()) throw std::invalid_argument("soft_eodd: size mismatch");
  SoftEoddDetail best;
  for (std::size_t a = 0; a < groups.size(); ++a) {
    const auto& g = groups[a];
    if (g.size() != labels.size()) throw std::invalid_argument("soft_eodd: group column size mismatch");
    // Per group: [y] -> (sum, count)
    std::map<int, std::array<std::pair<double, std::size_t>, 2>> acc;
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (g[k] < 0) continue;
      auto& cell = acc[g[k]][labels[k] == 1 ? 1 : 0];
      cell.first += soft_preds[k];
      ++cell.second;
    }
    std::vector<int> ids;
    std::vector<std::array<double, 2>> means;
    for (const auto& [id, cells] : acc) {
      if (cells[0].second == 0 || cells[1].second == 0) continue;
      ids.push_back(id);
      means.push_back({cells[0].first / static_cast<double>(cells[0].second),
                       cells[1].first / static_cast<double>(cells[1].second)});
    }
    if (ids.size() < 2) continue;
    for (int y : {1, 0}) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = i + 1; j < ids.size(); ++j) {
          const double d = means[i][y] - means[j][y];
          if (!best.defined || std::abs(d) > best.value) {
            best = {std::abs(d), true, a, y, ids[i], ids[j], d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)};
          }
        }
      }
    }
  }
  return best;
}

double soft_eodd(std::span<const double> soft_preds, std::span<const int> labels,
                 std::span<const std::string> groups, const SoftEoddConfig& cfg) {
  cfg.validate();
  if (groups.size() != labels.size()) throw std::invalid_argument("soft_eodd: size mismatch");
  std::set<std::string> names(groups.begin(), groups.end());
  std::map<std::string, int> id;
  for (const auto& n : names) id.emplace(n, static_cast<int>(id.size()));
  std::vector<std::vector<int>> cols(1);
  for (const auto& g : groups) cols[0].push_back(id[g]);
  const auto d = soft_eodd_detail(soft_preds, labels, cols);
  if (!d.defined) throw std::invalid_argument("soft_eodd: fewer than 2 eligible groups");
  return d.value;
}

double hard_eodd(std::span<const double> scores, std::span<const int> labels,
                 const std::vector<std::vector<int>>& groups, double tau) {
  std::vector<double> hard(scores.size());
  for (std::size_t k = 0; k < scores.size(); ++k) hard[k] = scores[k] > tau ? 1.0 : 0.0;
  const auto d = soft_eodd_detail(hard, labels, groups);
  if (!d.defined) throw std::invalid_argument("hard_eodd: fewer than 2 eligible groups");
  return d.value;
}

// ---------------------------------------------------------------------------

Denoiser Denoiser::identity(std::size_t kernel_size) {
  if (kernel_size % 2 == 0) throw std::invalid_argument("Denoiser: kernel size must be odd");
  Denoiser d;
  d.kernel_size = kernel_size;
  d.kernel.assign(kernel_size * kernel_size, 0.0);
  d.kernel[d.kernel.size() / 2] = 1.0;
  return d;
}

Image Denoiser::apply(const Image& x) const {
  const auto h = static_cast<long>(kernel_size / 2);
  const auto rows = static_cast<long>(x.rows()), cols = static_cast<long>(x.cols());
  Image out(x.rows(), x.cols(), bias);
  for (long dy = -h; dy <= h; ++dy) {
    for (long dx = -h; dx <= h; ++dx) {
      const double w = kernel[static_cast<std::size_t>((dy + h) * static_cast<long>(kernel_size) + dx + h)];
      if (w == 0.0) continue;
      for (long r = std::max(0L, -dy); r < std::min(rows, rows - dy); ++r) {
        for (long c = std::max(0L, -dx); c < std::min(cols, cols - dx); ++c) {
          out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) +=
              w * x(static_cast<std::size_t>(r + dy), static_cast<std::size_t>(c + dx));
        }
      }
    }
  }
  return out;
}

std::vector<double> Denoiser::parameters() const {
  std::vector<double> p = kernel;
  p.push_back(bias);
  return p;
}

void Denoiser::set_parameters(std::span<const double> p) {
  if (p.size() != parameter_count()) throw std::invalid_argument("Denoiser: wrong parameter count");
  std::copy(p.begin(), p.end() - 1, kernel.begin());
  bias = p.back();
}

namespace {

// Per-parameter inputs: shifted copies of x for every kernel offset and a
// constant plane for the bias. jac[k][p] = d xhat(p) / d param_k.
std::vector<Image> shifted_inputs(const Image& x, std::size_t kernel_size) {
  const auto h = static_cast<long>(kernel_size / 2);
  const auto rows = static_cast<long>(x.rows()), cols = static_cast<long>(x.cols());
  std::vector<Image> out;
  out.reserve(kernel_size * kernel_size + 1);
  for (long dy = -h; dy <= h; ++dy) {
    for (long dx = -h; dx <= h; ++dx) {
      Image s(x.rows(), x.cols());
      for (long r = std::max(0L, -dy); r < std::min(rows, rows - dy); ++r) {
        for (long c = std::max(0L, -dx); c < std::min(cols, cols - dx); ++c) {
          s(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) =
              x(static_cast<std::size_t>(r + dy), static_cast<std::size_t>(c + dx));
        }
      }
      out.push_back(std::move(s));
    }
  }
  out.emplace_back(x.rows(), x.cols(), 1.0);
  return out;
}

double dot(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

double PooledLogistic::logit(const Image& x) const {
  const auto f = features(x);
  double z = intercept;
  for (std::size_t i = 0; i < f.size(); ++i) z += weights[i] * f[i];
  return z;
}

double PooledLogistic::predict(const Image& x) const { return sigmoid(logit(x)); }

std::vector<double> PooledLogistic::features(const Image& x) const {
  std::vector<double> f;
  f.reserve(regions.size());
  for (const auto& m : regions) {
    require_same_shape(m, x, "PooledLogistic");
    double s = 0.0, n = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += m[i] * x[i];
      n += m[i];
    }
    f.push_back(n > 0 ? s / n : 0.0);
  }
  return f;
}

Image PooledLogistic::saliency() const {
  if (regions.empty()) return {};
  Image g(regions.front().rows(), regions.front().cols());
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const double n = std::accumulate(regions[r].begin(), regions[r].end(), 0.0);
    if (n <= 0) continue;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += weights[r] * regions[r][i] / n;
  }
  return g;
}

std::vector<double> PooledLogistic::parameters() const {
  std::vector<double> p = weights;
  p.push_back(intercept);
  return p;
}

Denoiser fit_denoiser(std::span<const Sample> samples, std::size_t kernel_size,
                      std::span<const double> weights, double ridge) {
  if (samples.empty()) throw std::invalid_argument("fit_denoiser: no samples");
  if (!weights.empty() && weights.size() != samples.size()) {
    throw std::invalid_argument("fit_denoiser: weight count mismatch");
  }
  Denoiser d = Denoiser::identity(kernel_size);
  const auto np = static_cast<Eigen::Index>(d.parameter_count());
  Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(np, np);
  Eigen::VectorXd atb = Eigen::VectorXd::Zero(np);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const double w = weights.empty() ? 1.0 : weights[s];
    const auto jac = shifted_inputs(samples[s].degraded, kernel_size);
    for (Eigen::Index i = 0; i < np; ++i) {
      atb(i) += w * dot(jac[static_cast<std::size_t>(i)], samples[s].clean);
      for (Eigen::Index j = i; j < np; ++j) {
        ata(i, j) += w * dot(jac[static_cast<std::size_t>(i)], jac[static_cast<std::size_t>(j)]);
      }
    }
  }
  ata = ata.selfadjointView<Eigen::Upper>();
  ata.diagonal().array() += ridge * std::max(1.0, ata.diagonal().maxCoeff());
  const Eigen::VectorXd p = ata.ldlt().solve(atb);
  std::vector<double> params(p.data(), p.data() + p.size());
  d.set_parameters(params);
  return d;
}

PooledLogistic fit_classifier(std::span<const Image> images, std::span<const int> labels,
                              std::vector<Mask> regions, double l2) {
  if (images.size() != labels.size() || images.empty()) {
    throw std::invalid_argument("fit_classifier: need matching non-empty images and labels");
  }
  PooledLogistic model;
  model.regions = std::move(regions);
  model.weights.assign(model.regions.size(), 0.0);
  const auto nf = static_cast<Eigen::Index>(model.regions.size()) + 1;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(images.size()), nf);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto f = model.features(images[i]);
    for (std::size_t k = 0; k < f.size(); ++k) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = f[k];
    x(static_cast<Eigen::Index>(i), nf - 1) = 1.0;
  }
  Eigen::VectorXd y(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i)) = labels[i];
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(nf);
  const double n = static_cast<double>(images.size());
  for (int iter = 0; iter < 100; ++iter) {
    const Eigen::VectorXd z = x * beta;
    Eigen::VectorXd p(z.size()), w(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      p(i) = sigmoid(z(i));
      w(i) = p(i) * (1.0 - p(i));
    }
    Eigen::VectorXd grad = x.transpose() * (p - y) / n;
    Eigen::MatrixXd hess = x.transpose() * w.asDiagonal() * x / n;
    grad.head(nf - 1) += l2 * beta.head(nf - 1);
    hess.diagonal().head(nf - 1).array() += l2;
    hess.diagonal().array() += 1e-12;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    beta -= step;
    if (step.norm() < 1e-12) break;
  }
  for (Eigen::Index k = 0; k + 1 < nf; ++k) model.weights[static_cast<std::size_t>(k)] = beta(k);
  model.intercept = beta(nf - 1);
  return model;
}

// ---------------------------------------------------------------------------

EoddLossResult mse_loss(std::span<const Sample> batch, const Denoiser& f) {
  if (batch.empty()) throw std::invalid_argument("mse_loss: empty batch");
  EoddLossResult res;
  res.gradient.assign(f.parameter_count(), 0.0);
  double pixels = 0.0;
  for (const auto& s : batch) pixels += static_cast<double>(s.clean.size());
  for (const auto& s : batch) {
    const Image xhat = f.apply(s.degraded);
    require_same_shape(xhat, s.clean, "mse_loss");
    Image resid(xhat.rows(), xhat.cols());
    for (std::size_t p = 0; p < xhat.size(); ++p) {
      resid[p] = xhat[p] - s.clean[p];
      res.rec_loss += resid[p] * resid[p] / pixels;
    }
    const auto jac = shifted_inputs(s.degraded, f.kernel_size);
    for (std::size_t k = 0; k < jac.size(); ++k) res.gradient[k] += 2.0 * dot(resid, jac[k]) / pixels;
  }
  res.loss = res.rec_loss;
  if (!std::isfinite(res.loss)) throw std::runtime_error("mse_loss: non-finite loss");
  return res;
}

EoddLossResult eodd_loss(std::span<const Sample> batch, const ToyPipeline& pipeline, const SoftEoddConfig& cfg) {
  cfg.validate();
  EoddLossResult res = mse_loss(batch, pipeline.reconstructor);
  res.ema_after = pipeline.ema.value;
  const std::size_t n = batch.size();
  const auto& f = pipeline.reconstructor;
  const auto& g = pipeline.classifier;
  const Image saliency = g.saliency();

  std::vector<double> yhat(n), soft(n);
  std::vector<int> labels(n);
  std::vector<std::vector<double>> dlogit_dparam(n);
  const std::size_t n_attr = batch.front().groups.size();
  std::vector<std::vector<int>> groups(n_attr, std::vector<int>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = batch[i];
    if (s.groups.size() != n_attr) throw std::invalid_argument("eodd_loss: inconsistent attribute count");
    const auto jac = shifted_inputs(s.degraded, f.kernel_size);
    dlogit_dparam[i].resize(jac.size());
    for (std::size_t k = 0; k < jac.size(); ++k) dlogit_dparam[i][k] = dot(saliency, jac[k]);
    yhat[i] = g.predict(f.apply(s.degraded));
    soft[i] = soft_predict(yhat[i], cfg);
    labels[i] = s.label;
    for (std::size_t a = 0; a < n_attr; ++a) groups[a][i] = s.groups[a];
  }

  const auto detail = soft_eodd_detail(soft, labels, groups);
  if (!detail.defined) return res;  // fairness term inactive for this step

  res.fairness_active = true;
  res.soft_eodd = detail.value;
  double bce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = g.logit(f.apply(batch[i].degraded));
    bce += labels[i] == 1 ? softplus(-z) : softplus(z);
  }
  res.bce = bce / static_cast<double>(n);
  res.fairness_value = res.bce + detail.value * detail.value;

  double coef = 1.0;
  if (pipeline.ema.value) {
    res.ema_after = (1.0 - cfg.ema_momentum) * *pipeline.ema.value + cfg.ema_momentum * res.fairness_value;
    coef = cfg.ema_momentum;
  } else {
    res.ema_after = res.fairness_value;
  }
  res.loss = res.rec_loss + cfg.lambda_fair * *res.ema_after;

  // d soft_eodd / d soft_i for the members of the maximizing cells.
  std::size_t n_i = 0, n_j = 0;
  const auto& col = groups[detail.attribute];
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != detail.y) continue;
    n_i += col[i] == detail.group_i;
    n_j += col[i] == detail.group_j;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double dv_dlogit = (yhat[i] - labels[i]) / static_cast<double>(n);
    if (labels[i] == detail.y && (col[i] == detail.group_i || col[i] == detail.group_j)) {
      const double de_dsoft = col[i] == detail.group_i ? detail.sign / static_cast<double>(n_i)
                                                       : -detail.sign / static_cast<double>(n_j);
      const double dsoft_dyhat = soft[i] * (1.0 - soft[i]) / cfg.temperature;
      const double dyhat_dlogit = yhat[i] * (1.0 - yhat[i]);
      dv_dlogit += 2.0 * detail.value * de_dsoft * dsoft_dyhat * dyhat_dlogit;
    }
    const double scale = cfg.lambda_fair * coef * dv_dlogit;
    for (std::size_t k = 0; k < res.gradient.size(); ++k) res.gradient[k] += scale * dlogit_dparam[i][k];
  }
  if (!std::isfinite(res.loss) || !all_finite(res.gradient)) {
    throw std::runtime_error("eodd_loss: non-finite loss or gradient");
  }
  return res;
}

// ---------------------------------------------------------------------------

ProportionalityCheck check_proportionality(std::span<const double> scores, std::span<const int> labels,
                                           std::span<const int> groups) {
  if (scores.size() != labels.size() || scores.size() != groups.size()) {
    throw std::invalid_argument("check_proportionality: size mismatch");
  }
  ProportionalityCheck out;
  double n = 0, s_a = 0, s_y = 0, s_ay = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if ((groups[i] != 0 && groups[i] != 1) || (labels[i] != 0 && labels[i] != 1)) {
      throw std::invalid_argument("check_proportionality: labels and groups must be binary");
    }
    n += 1;
    s_a += groups[i];
    s_y += labels[i];
    s_ay += groups[i] * labels[i];
  }
  // Each (A, Y) cell must be non-empty for the rates to exist.
  if (s_ay == 0 || s_ay == s_y || s_a - s_ay == 0 || n - s_y - s_a + s_ay == 0) {
    out.skipped = true;
    out.reason = "degenerate marginals: an (A, Y) cell is empty";
    return out;
  }

  auto term = [&](int y) {
    ProportionalityTerm t;
    t.y = y;
    double n_y = 0, n_ay = 0, sum_f = 0, sum_af = 0, sum_f_a1 = 0, sum_f_a0 = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (labels[i] != y) continue;
      n_y += 1;
      n_ay += groups[i];
      sum_f += scores[i];
      sum_af += groups[i] * scores[i];
      (groups[i] == 1 ? sum_f_a1 : sum_f_a0) += scores[i];
    }
    t.proxy = sum_f_a1 / n_ay - sum_f_a0 / (n_y - n_ay);
    t.covariance = sum_af / n_y - (n_ay / n_y) * (sum_f / n_y);
    t.factor = n_y * n_y / (n_ay * (n_y - n_ay));
    const double rhs = t.factor * t.covariance;
    const double scale = std::max({std::abs(t.proxy), std::abs(rhs), 1e-300});
    t.relative_error = std::abs(t.proxy - rhs) / scale;
    return t;
  };
  out.positive = term(1);
  out.negative = term(0);
  return out;
}

ProportionalityReport verify_covariance_proportionality(std::span<const double> scores,
                                                        std::span<const int> labels,
                                                        std::span<const std::string> groups) {
  if (scores.size() != labels.size() || scores.size() != groups.size()) {
    throw std::invalid_argument("verify_covariance_proportionality: size mismatch");
  }
  const std::set<std::string> names(groups.begin(), groups.end());
  const std::vector<std::string> ordered(names.begin(), names.end());
  ProportionalityReport report;
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    for (std::size_t j = i + 1; j < ordered.size(); ++j) {
      std::vector<double> s;
      std::vector<int> y, a;
      for (std::size_t k = 0; k < scores.size(); ++k) {
        if (groups[k] != ordered[i] && groups[k] != ordered[j]) continue;
        s.push_back(scores[k]);
        y.push_back(labels[k]);
        a.push_back(groups[k] == ordered[j] ? 1 : 0);
      }
      auto check = check_proportionality(s, y, a);
      check.group_a = ordered[i];
      check.group_b = ordered[j];
      if (check.skipped) {
        ++report.skipped;
      } else {
        report.max_relative_error = std::max(
            {report.max_relative_error, check.positive.relative_error, check.negative.relative_error});
      }
      report.checks.push_back(std::move(check));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::uniform: return "uniform";
    case Strategy::reweight: return "reweight";
    case Strategy::eodd_constraint: return "eodd";
  }
  return "?";
}

Strategy parse_strategy(const std::string& text) {
  if (text == "uniform" || text == "standard") return Strategy::uniform;
  if (text == "reweight") return Strategy::reweight;
  if (text == "eodd" || text == "eodd_constraint") return Strategy::eodd_constraint;
  throw std::invalid_argument("unknown mitigation strategy '" + text + "'");
}

EvaluationSummary evaluate(std::span<const Sample> samples, const ToyPipeline& pipeline,
                           const SoftEoddConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  EvaluationSummary out;
  std::vector<double> yhat, soft;
  std::vector<int> labels;
  const std::size_t n_attr = samples.front().groups.size();
  std::vector<std::vector<int>> groups(n_attr);
  double pixels = 0.0;
  for (const auto& s : samples) pixels += static_cast<double>(s.clean.size());
  for (const auto& s : samples) {
    const Image xhat = pipeline.reconstructor.apply(s.degraded);
    for (std::size_t p = 0; p < xhat.size(); ++p) {
      const double d = xhat[p] - s.clean[p];
      out.rec_loss += d * d / pixels;
    }
    Image clamped = xhat;
    for (auto& v : clamped) v = std::clamp(v, 0.0, 1.0);
    out.psnr_db += quality::psnr(s.clean, clamped) / static_cast<double>(samples.size());
    yhat.push_back(pipeline.classifier.predict(xhat));
    soft.push_back(soft_predict(yhat.back(), cfg));
    labels.push_back(s.label);
    for (std::size_t a = 0; a < n_attr; ++a) groups[a].push_back(s.groups[a]);
  }
  const auto sd = soft_eodd_detail(soft, labels, groups);
  out.soft_eodd = sd.defined ? sd.value : 0.0;
  std::vector<double> hard(yhat.size());
  for (std::size_t k = 0; k < yhat.size(); ++k) hard[k] = yhat[k] > cfg.tau ? 1.0 : 0.0;
  const auto hd = soft_eodd_detail(hard, labels, groups);
  out.hard_eodd = hd.defined ? hd.value : 0.0;
  return out;
}

FinetuneResult finetune(const ToyPipeline& pipeline, std::span<const Sample> train,
                        std::span<const Sample> eval, Strategy strategy, const SoftEoddConfig& cfg,
                        const FinetuneOptions& options) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("finetune: no training samples");
  if (options.batch_size == 0) throw std::invalid_argument("finetune: batch size must be positive");
  if (strategy == Strategy::reweight && options.sample_weights.size() != train.size()) {
    throw std::invalid_argument("finetune: reweight strategy needs one weight per training sample");
  }
  const auto eval_set = eval.empty() ? train : eval;
  FinetuneResult out{pipeline, {}, false, {}};

  auto log_epoch = [&](std::size_t epoch, double train_loss, std::size_t inactive) {
    const auto s = evaluate(eval_set, out.pipeline, cfg);
    out.log.push_back({epoch, train_loss, s.rec_loss, s.soft_eodd, s.hard_eodd, s.psnr_db, inactive});
  };
  log_epoch(0, 0.0, 0);

  const std::vector<double> weights =
      strategy == Strategy::reweight ? options.sample_weights : std::vector<double>(train.size(), 1.0);
  const WeightedSampler sampler(weights);
  Rng rng(derive_seed(options.seed, "finetune"));
  const std::size_t steps_per_epoch = (train.size() + options.batch_size - 1) / options.batch_size;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Sample> batch;
  const std::size_t n_params = pipeline.reconstructor.parameter_count();
  std::vector<double> m1(n_params, 0.0), m2(n_params, 0.0);
  std::size_t t = 0;
  Eigen::LDLT<Eigen::MatrixXd> precond;
  if (options.optimizer == Optimizer::gauss_newton) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_params), static_cast<Eigen::Index>(n_params));
    double pixels = 0.0;
    for (const auto& s : train) {
      const auto jac = shifted_inputs(s.degraded, pipeline.reconstructor.kernel_size);
      for (std::size_t i = 0; i < n_params; ++i) {
        for (std::size_t j = i; j < n_params; ++j) {
          h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += 2.0 * dot(jac[i], jac[j]);
        }
      }
      pixels += static_cast<double>(s.degraded.size());
    }
    h = h.selfadjointView<Eigen::Upper>();
    precond.compute(h / pixels);
    if (precond.info() != Eigen::Success) throw std::invalid_argument("finetune: singular reconstruction Hessian");
  }

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    if (strategy == Strategy::eodd_constraint) {
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);
    }
    double loss_sum = 0.0;
    std::size_t inactive = 0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      batch.clear();
      if (strategy == Strategy::eodd_constraint) {
        const std::size_t begin = step * options.batch_size;
        const std::size_t end = std::min(begin + options.batch_size, train.size());
        for (std::size_t k = begin; k < end; ++k) batch.push_back(train[order[k]]);
      } else {
        for (std::size_t k = 0; k < options.batch_size; ++k) batch.push_back(train[sampler.draw(rng)]);
      }
      EoddLossResult r;
      try {
        r = strategy == Strategy::eodd_constraint ? eodd_loss(batch, out.pipeline, cfg)
                                                  : mse_loss(batch, out.pipeline.reconstructor);
      } catch (const std::runtime_error& e) {
        out.diverged = true;
        out.message = "epoch " + std::to_string(epoch) + ": " + e.what();
        return out;
      }
      auto params = out.pipeline.reconstructor.parameters();
      if (options.optimizer == Optimizer::adam) {
        ++t;
        const double c1 = 1.0 - std::pow(options.adam_beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(options.adam_beta2, static_cast<double>(t));
        for (std::size_t k = 0; k < params.size(); ++k) {
          m1[k] = options.adam_beta1 * m1[k] + (1.0 - options.adam_beta1) * r.gradient[k];
          m2[k] = options.adam_beta2 * m2[k] + (1.0 - options.adam_beta2) * r.gradient[k] * r.gradient[k];
          params[k] -= options.learning_rate * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + options.adam_epsilon);
        }
      } else if (options.optimizer == Optimizer::gauss_newton) {
        const Eigen::VectorXd step =
            precond.solve(Eigen::Map<const Eigen::VectorXd>(r.gradient.data(), static_cast<Eigen::Index>(n_params)));
        for (std::size_t k = 0; k < params.size(); ++k) params[k] -= options.learning_rate * step(static_cast<Eigen::Index>(k));
      } else {
        for (std::size_t k = 0; k < params.size(); ++k) params[k] -= options.learning_rate * r.gradient[k];
      }
      if (!all_finite(params)) {
        out.diverged = true;
        out.message = "epoch " + std::to_string(epoch) + ": parameters became non-finite";
        return out;
      }
      out.pipeline.reconstructor.set_parameters(params);
      if (strategy == Strategy::eodd_constraint) {
        if (r.fairness_active) {
          out.pipeline.ema.value = r.ema_after;
        } else {
          ++inactive;
        }
      }
      loss_sum += r.loss;
    }
    log_epoch(epoch, loss_sum / static_cast<double>(steps_per_epoch), inactive);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Image gaussian_blur(const Image& x, double sigma) {
  const int h = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * h + 1));
  double sum = 0.0;
  for (int i = -h; i <= h; ++i) {
    k[static_cast<std::size_t>(i + h)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<std::size_t>(i + h)];
  }
  for (auto& v : k) v /= sum;
  const auto rows = static_cast<int>(x.rows()), cols = static_cast<int>(x.cols());
  auto clamp_idx = [](int i, int n) { return std::clamp(i, 0, n - 1); };
  Image tmp(x.rows(), x.cols()), out(x.rows(), x.cols());
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double s = 0.0;
      for (int i = -h; i <= h; ++i) s += k[static_cast<std::size_t>(i + h)] * x(r, clamp_idx(c + i, cols));
      tmp(r, c) = s;
    }
  }
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double s = 0.0;
      for (int i = -h; i <= h; ++i) s += k[static_cast<std::size_t>(i + h)] * tmp(clamp_idx(r + i, rows), c);
      out(r, c) = s;
    }
  }
  return out;
}

Mask radial_region(std::size_t size, double r_min, double r_max) {
  Mask m(size, size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t col = 0; col < size; ++col) {
      const double d = std::hypot(static_cast<double>(r) - c, static_cast<double>(col) - c);
      if (d >= r_min && d <= r_max) m(r, col) = 1.0;
    }
  }
  return m;
}

}  // namespace

std::vector<Mask> corpus_classifier_regions(std::size_t image_size, double center_radius) {
  return {radial_region(image_size, 0.0, center_radius),
          radial_region(image_size, 0.4 * static_cast<double>(image_size), 1e9)};
}

BiasedCorpus make_biased_corpus(const BiasedCorpusOptions& o) {
  if (o.subjects < 10) throw std::invalid_argument("make_biased_corpus: need at least 10 subjects");
  if (o.image_size < 16) throw std::invalid_argument("make_biased_corpus: image size must be >= 16");
  Rng rng(derive_seed(o.seed, "biased_corpus"));
  BiasedCorpus corpus;
  corpus.attributes = {"sex", "age"};
  const std::size_t n = o.image_size;
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  const double periphery = 0.4 * static_cast<double>(n);
  corpus.classifier_regions = corpus_classifier_regions(n, o.center_radius);

  for (std::size_t s = 0; s < o.subjects; ++s) {
    dataset::SubjectRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "S%05zu", s);
    rec.subject_id = id;
    const bool minority = rng.uniform() < o.minority_fraction;
    rec.sex = minority ? "B" : "A";
    rec.age_years = std::floor(rng.uniform(20.0, 90.0));
    const int label = rng.uniform() < 0.5 ? 1 : 0;
    rec.labels["finding"] = label;

    const double background = o.background + rng.uniform(-0.05, 0.05);
    const double lesion = (label == 1 ? 0.22 : 0.10) + o.lesion_spread * rng.normal();
    const double sign = rng.uniform() < 0.5 && o.random_sign ? -1.0 : 1.0;
    const double feature = minority ? sign * o.feature_amplitude * rng.uniform(0.5, 1.0) : 0.0;
    const double inner = o.feature_inner, outer = o.feature_inner + o.feature_width;
    Image clean(n, n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t col = 0; col < n; ++col) {
        const double dy = static_cast<double>(r) - c, dx = static_cast<double>(col) - c;
        const double d = std::hypot(dx, dy);
        double v = background + lesion * std::exp(-0.5 * d * d / (o.lesion_sigma * o.lesion_sigma));
        const bool on_feature = o.feature == FeatureShape::bar
                                    ? -dx >= inner && -dx <= outer && std::abs(dy) <= outer && d < periphery
                                    : d >= inner && d <= outer;
        if (on_feature) v += feature;
        clean(r, col) = std::clamp(v, 0.0, 1.0);
      }
    }
    Image degraded = gaussian_blur(clean, o.blur_sigma);
    for (auto& v : degraded) v += o.noise_sigma * rng.normal();

    Sample sample;
    sample.subject_id = rec.subject_id;
    sample.clean = std::move(clean);
    sample.degraded = std::move(degraded);
    sample.label = label;
    corpus.samples.push_back(std::move(sample));
    corpus.records.push_back(std::move(rec));
  }
  const auto sex = dataset::partition_by(corpus.records, "sex");
  const auto age = dataset::partition_by(corpus.records, "age");
  auto index_of = [](const dataset::SubgroupPartition& p, const std::string& id) {
    int k = 0;
    for (const auto& [label, members] : p.groups) {
      if (members.contains(id)) return k;
      ++k;
    }
    return -1;
  };
  for (std::size_t s = 0; s < corpus.samples.size(); ++s) {
    const auto& id = corpus.records[s].subject_id;
    corpus.samples[s].groups = {index_of(sex, id), index_of(age, id)};
  }
  return corpus;
}

}  // namespace reconfair::mitigation
