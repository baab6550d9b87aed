#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ngvi/distributions.hpp"
#include "ngvi/rng.hpp"

namespace ngvi {

using Batch = std::span<const std::size_t>;

/// Rows of features with one integer label per row.
struct Dataset {
  Mat features;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  Eigen::Index num_features() const noexcept { return features.cols(); }

  void validate() const {
    if (labels.empty()) throw std::invalid_argument("Dataset: N must be >= 1");
    if (static_cast<std::size_t>(features.rows()) != labels.size()) {
      throw DimensionError("Dataset: feature rows and labels disagree");
    }
    if (!features.allFinite()) {
      throw std::invalid_argument("Dataset: non-finite feature value");
    }
  }
};

inline Dataset with_bias(const Dataset& data) {
  Dataset out;
  out.features.resize(data.features.rows(), data.features.cols() + 1);
  out.features.col(0).setOnes();
  out.features.rightCols(data.features.cols()) = data.features;
  out.labels = data.labels;
  return out;
}

// Appends x1^2, x1*x2, x2^2 to 2-D raw features.
inline Dataset with_quadratic_features(const Dataset& data) {
  if (data.features.cols() != 2) {
    throw DimensionError("quadratic expansion expects 2 raw features");
  }
  Dataset out;
  const auto n = data.features.rows();
  out.features.resize(n, 5);
  out.features.leftCols(2) = data.features;
  out.features.col(2) = data.features.col(0).cwiseAbs2();
  out.features.col(3) = data.features.col(0).cwiseProduct(data.features.col(1));
  out.features.col(4) = data.features.col(1).cwiseAbs2();
  out.labels = data.labels;
  return out;
}

/**
 * A Bayesian target with prior N(0, I / lambda) and a factorized likelihood
 * over N data. Per-datum hooks report the log-likelihood and the gradient and
 * Hessian diagonal of the negative log-likelihood, -log p(D_i | z).
 */
class TargetModel {
 public:
  explicit TargetModel(double prior_precision) : lambda_(prior_precision) {
    if (!(prior_precision > 0.0)) {
      throw std::invalid_argument("TargetModel: prior precision must be > 0");
    }
  }
  virtual ~TargetModel() = default;

  virtual std::string kind() const = 0;
  virtual Eigen::Index dim() const = 0;
  virtual std::size_t num_data() const = 0;

  virtual double datum_log_lik(std::size_t i, const Vec& z) const = 0;
  virtual void datum_neg_grad(std::size_t i, const Vec& z, Vec& out) const = 0;
  virtual void datum_neg_hess_diag(std::size_t i, const Vec& z,
                                   Vec& out) const = 0;

  double prior_precision() const noexcept { return lambda_; }

  DiagGaussian prior() const {
    return DiagGaussian::isotropic(dim(), 0.0, 1.0 / lambda_);
  }

  double log_prior(const Vec& z) const {
    detail::require_dim(dim(), z.size(), "log_prior");
    const double d = static_cast<double>(z.size());
    return 0.5 * d * std::log(lambda_ / (2.0 * std::numbers::pi)) -
           0.5 * lambda_ * z.squaredNorm();
  }

  const std::vector<std::size_t>& all_indices() const {
    if (all_.size() != num_data()) {
      all_.resize(num_data());
      std::iota(all_.begin(), all_.end(), std::size_t{0});
    }
    return all_;
  }

  Batch resolve(Batch batch) const {
    return batch.empty() ? Batch(all_indices()) : batch;
  }

 private:
  double lambda_;
  mutable std::vector<std::size_t> all_;
};

/// log p(z) + sum_{i in batch} log p(D_i | z). No rescaling.
inline double log_joint(const TargetModel& model, const Vec& z,
                        Batch batch = {}) {
  double acc = model.log_prior(z);
  for (std::size_t i : model.resolve(batch)) acc += model.datum_log_lik(i, z);
  return acc;
}

// (N / |M|) sum_{i in M} log p(D_i | z)
inline double log_likelihood(const TargetModel& model, const Vec& z,
                             Batch batch = {}) {
  const Batch b = model.resolve(batch);
  double acc = 0.0;
  for (std::size_t i : b) acc += model.datum_log_lik(i, z);
  return acc * static_cast<double>(model.num_data()) /
         static_cast<double>(b.size());
}

/// g(z): gradient of the negative log-likelihood, rescaled by N / |M|.
inline Vec grad_neg_loglik(const TargetModel& model, const Vec& z,
                           Batch batch = {}) {
  detail::require_dim(model.dim(), z.size(), "grad_neg_loglik");
  const Batch b = model.resolve(batch);
  Vec acc = Vec::Zero(z.size());
  Vec tmp(z.size());
  for (std::size_t i : b) {
    model.datum_neg_grad(i, z, tmp);
    acc += tmp;
  }
  return acc * (static_cast<double>(model.num_data()) /
                static_cast<double>(b.size()));
}

/// H(z): diagonal Hessian of the negative log-likelihood, rescaled by N / |M|.
inline Vec hess_diag_neg_loglik(const TargetModel& model, const Vec& z,
                                Batch batch = {}) {
  detail::require_dim(model.dim(), z.size(), "hess_diag_neg_loglik");
  const Batch b = model.resolve(batch);
  Vec acc = Vec::Zero(z.size());
  Vec tmp(z.size());
  for (std::size_t i : b) {
    model.datum_neg_hess_diag(i, z, tmp);
    acc += tmp;
  }
  return acc * (static_cast<double>(model.num_data()) /
                static_cast<double>(b.size()));
}

/// Gauss-Newton diagonal: N times the batch mean of squared per-example gradients.
inline Vec ggn_diag(const TargetModel& model, const Vec& z, Batch batch = {}) {
  detail::require_dim(model.dim(), z.size(), "ggn_diag");
  const Batch b = model.resolve(batch);
  Vec acc = Vec::Zero(z.size());
  Vec tmp(z.size());
  for (std::size_t i : b) {
    model.datum_neg_grad(i, z, tmp);
    acc += tmp.cwiseAbs2();
  }
  return acc * (static_cast<double>(model.num_data()) /
                static_cast<double>(b.size()));
}

namespace detail {

// log sigmoid(u), split at zero so neither branch overflows.
inline double log_sigmoid(double u) {
  return u >= 0.0 ? -std::log1p(std::exp(-u)) : u - std::log1p(std::exp(u));
}

inline double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

}  // namespace detail

using detail::sigmoid;

/// Bernoulli likelihood with a logistic link on x_i . z, labels in {0, 1}.
class LogisticModel final : public TargetModel {
 public:
  LogisticModel(Dataset data, double prior_precision)
      : TargetModel(prior_precision), data_(std::move(data)) {
    data_.validate();
    for (int y : data_.labels) {
      if (y != 0 && y != 1) {
        throw std::invalid_argument("LogisticModel: labels must be 0 or 1");
      }
    }
  }

  std::string kind() const override { return "logistic"; }
  Eigen::Index dim() const override { return data_.num_features(); }
  std::size_t num_data() const override { return data_.size(); }
  const Dataset& data() const noexcept { return data_; }

  double datum_log_lik(std::size_t i, const Vec& z) const override {
    const double u = margin(i, z);
    return data_.labels[i] == 1 ? detail::log_sigmoid(u)
                                : detail::log_sigmoid(-u);
  }

  void datum_neg_grad(std::size_t i, const Vec& z, Vec& out) const override {
    const double r = sigmoid(margin(i, z)) - data_.labels[i];
    out = r * row(i).transpose();
  }

  void datum_neg_hess_diag(std::size_t i, const Vec& z, Vec& out) const override {
    const double s = sigmoid(margin(i, z));
    out = s * (1.0 - s) * row(i).transpose().cwiseAbs2();
  }

 private:
  Mat::ConstRowXpr row(std::size_t i) const {
    return data_.features.row(static_cast<Eigen::Index>(i));
  }
  double margin(std::size_t i, const Vec& z) const { return row(i).transpose().dot(z); }

  Dataset data_;
};

/**
 * Observations y_n ~ N(z, diag(noise_variance)). With the Gaussian prior the
 * posterior is Gaussian, which makes this the convergence oracle target.
 */
class GaussianObservationModel final : public TargetModel {
 public:
  GaussianObservationModel(Mat observations, Vec noise_variance,
                           double prior_precision)
      : TargetModel(prior_precision),
        obs_(std::move(observations)),
        noise_(std::move(noise_variance)) {
    detail::require_dim(obs_.cols(), noise_.size(), "GaussianObservationModel");
    if (obs_.rows() < 1) {
      throw std::invalid_argument("GaussianObservationModel: need >= 1 observation");
    }
    if ((noise_.array() <= 0.0).any()) {
      throw std::invalid_argument("GaussianObservationModel: noise must be > 0");
    }
  }

  std::string kind() const override { return "conjugate"; }
  Eigen::Index dim() const override { return obs_.cols(); }
  std::size_t num_data() const override {
    return static_cast<std::size_t>(obs_.rows());
  }
  const Mat& observations() const noexcept { return obs_; }
  const Vec& noise_variance() const noexcept { return noise_; }

  double datum_log_lik(std::size_t i, const Vec& z) const override {
    return gauss_log_pdf(DiagGaussian(z, noise_), y(i));
  }

  void datum_neg_grad(std::size_t i, const Vec& z, Vec& out) const override {
    out = (z - y(i)).cwiseQuotient(noise_);
  }

  void datum_neg_hess_diag(std::size_t, const Vec&, Vec& out) const override {
    out = noise_.cwiseInverse();
  }

 private:
  Vec y(std::size_t i) const {
    return obs_.row(static_cast<Eigen::Index>(i)).transpose();
  }

  Mat obs_;
  Vec noise_;
};

/**
 * Builds a target whose exact posterior is N(mean, diag(variance)) under
 * prior N(0, I / lambda): one pseudo-observation with noise chosen so the
 * posterior precision is 1 / variance. Requires variance < 1 / lambda.
 */
inline GaussianObservationModel make_conjugate_target(const Vec& mean,
                                                      const Vec& variance,
                                                      double prior_precision = 1.0) {
  detail::require_dim(mean.size(), variance.size(), "make_conjugate_target");
  const Vec like_precision = variance.cwiseInverse().array() - prior_precision;
  if ((like_precision.array() <= 0.0).any()) {
    throw std::invalid_argument(
        "make_conjugate_target: posterior variance must be below 1/lambda");
  }
  const Vec noise = like_precision.cwiseInverse();
  // posterior mean = variance * y / noise
  const Vec y = mean.cwiseProduct(noise).cwiseQuotient(variance);
  return GaussianObservationModel(y.transpose(), noise, prior_precision);
}

/**
 * Sign-ambiguous observations: p(y | z) = w N(y | z, s2 I) + (1 - w) N(y | -z, s2 I).
 * With one observation the posterior is exactly a two-component mixture with
 * modes near +y and -y.
 */
class BimodalModel final : public TargetModel {
 public:
  BimodalModel(Mat observations, double noise_variance, double weight,
               double prior_precision)
      : TargetModel(prior_precision),
        obs_(std::move(observations)),
        noise_(noise_variance),
        weight_(weight) {
    if (obs_.rows() < 1) throw std::invalid_argument("BimodalModel: need data");
    if (!(noise_ > 0.0)) throw std::invalid_argument("BimodalModel: noise must be > 0");
    if (!(weight_ > 0.0 && weight_ < 1.0)) {
      throw std::invalid_argument("BimodalModel: weight must be in (0, 1)");
    }
  }

  std::string kind() const override { return "bimodal"; }
  Eigen::Index dim() const override { return obs_.cols(); }
  std::size_t num_data() const override {
    return static_cast<std::size_t>(obs_.rows());
  }
  double noise_variance() const noexcept { return noise_; }
  double weight() const noexcept { return weight_; }
  const Mat& observations() const noexcept { return obs_; }

  double datum_log_lik(std::size_t i, const Vec& z) const override {
    const auto t = branch_terms(i, z);
    return t.log_lik;
  }

  void datum_neg_grad(std::size_t i, const Vec& z, Vec& out) const override {
    const auto t = branch_terms(i, z);
    out = -(t.r_pos * t.a_pos + t.r_neg * t.a_neg);
  }

  void datum_neg_hess_diag(std::size_t i, const Vec& z, Vec& out) const override {
    const auto t = branch_terms(i, z);
    const Vec grad = t.r_pos * t.a_pos + t.r_neg * t.a_neg;
    const Vec second = t.r_pos * t.a_pos.cwiseAbs2() +
                       t.r_neg * t.a_neg.cwiseAbs2() -
                       Vec::Constant(z.size(), 1.0 / noise_);
    out = -(second - grad.cwiseAbs2());
  }

  /// Exact posterior, available for a single observation.
  std::optional<MixturePosterior> exact_posterior() const {
    if (num_data() != 1) return std::nullopt;
    const double precision = prior_precision() + 1.0 / noise_;
    const Vec y = obs_.row(0).transpose();
    const Vec m = y / (noise_ * precision);
    const Vec v = Vec::Constant(y.size(), 1.0 / precision);
    Vec logits(2);
    logits << std::log(weight_), std::log1p(-weight_);
    return MixturePosterior({DiagGaussian(m, v), DiagGaussian(-m, v)}, logits);
  }

 private:
  struct Terms {
    double log_lik;
    double r_pos, r_neg;
    Vec a_pos, a_neg;  // d/dz of each branch's log density
  };

  Terms branch_terms(std::size_t i, const Vec& z) const {
    detail::require_dim(dim(), z.size(), "BimodalModel");
    const Vec y = obs_.row(static_cast<Eigen::Index>(i)).transpose();
    const Vec s2 = Vec::Constant(z.size(), noise_);
    const double lp = std::log(weight_) + gauss_log_pdf(DiagGaussian(z, s2), y);
    const double ln = std::log1p(-weight_) + gauss_log_pdf(DiagGaussian(-z, s2), y);
    const double m = std::max(lp, ln);
    const double lse = m + std::log(std::exp(lp - m) + std::exp(ln - m));
    return {lse, std::exp(lp - lse), std::exp(ln - lse), (y - z) / noise_,
            -(y + z) / noise_};
  }

  Mat obs_;
  double noise_;
  double weight_;
};

/// Without-replacement minibatches; a fresh permutation every epoch.
class Minibatcher {
 public:
  Minibatcher(std::size_t n, std::size_t batch_size, RngStream rng)
      : n_(n), size_(batch_size == 0 ? n : batch_size), rng_(std::move(rng)) {
    if (n_ == 0) throw std::invalid_argument("Minibatcher: empty dataset");
    if (size_ > n_) throw std::invalid_argument("Minibatcher: |M| must be <= N");
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  bool full_batch() const noexcept { return size_ == n_; }
  std::size_t batches_per_epoch() const noexcept { return (n_ + size_ - 1) / size_; }

  /// Reshuffles (unless full batch) and returns the batches of one epoch.
  std::vector<std::vector<std::size_t>> epoch() {
    if (!full_batch()) {
      for (std::size_t i = n_ - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng_.bits() % (i + 1));
        std::swap(order_[i], order_[j]);
      }
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n_; start += size_) {
      const std::size_t stop = std::min(n_, start + size_);
      out.emplace_back(order_.begin() + static_cast<std::ptrdiff_t>(start),
                       order_.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return out;
  }

 private:
  std::size_t n_;
  std::size_t size_;
  RngStream rng_;
  std::vector<std::size_t> order_;
};

enum class Layout { two_gaussians, two_moons, xor_blobs };

inline Layout parse_layout(const std::string& s) {
  if (s == "two-gaussians") return Layout::two_gaussians;
  if (s == "two-moons") return Layout::two_moons;
  if (s == "xor") return Layout::xor_blobs;
  throw std::invalid_argument("unknown layout '" + s + "'");
}

inline std::string to_string(Layout l) {
  switch (l) {
    case Layout::two_gaussians: return "two-gaussians";
    case Layout::two_moons: return "two-moons";
    case Layout::xor_blobs: return "xor";
  }
  return "?";
}

/**
 * Deterministic 2-D binary classification data. Labels alternate 0, 1, so the
 * classes are balanced to within one example. Set quadratic to append the
 * degree-2 monomials.
 */
inline Dataset make_synthetic_classification(std::size_t n, std::uint64_t seed,
                                             Layout layout,
                                             bool quadratic = false) {
  if (n < 2) throw std::invalid_argument("make_synthetic_classification: n >= 2");
  RngStream rng(seed, 0x5eedULL);
  Dataset data;
  data.features.resize(static_cast<Eigen::Index>(n), 2);
  data.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    const auto r = static_cast<Eigen::Index>(i);
    double x0 = 0.0, x1 = 0.0;
    switch (layout) {
      case Layout::two_gaussians: {
        const double c = y == 1 ? 1.5 : -1.5;
        x0 = c + rng.normal();
        x1 = c + rng.normal();
        break;
      }
      case Layout::two_moons: {
        const double t = std::numbers::pi * rng.uniform();
        if (y == 0) {
          x0 = std::cos(t);
          x1 = std::sin(t);
        } else {
          x0 = 1.0 - std::cos(t);
          x1 = 0.5 - std::sin(t);
        }
        x0 += 0.1 * rng.normal();
        x1 += 0.1 * rng.normal();
        break;
      }
      case Layout::xor_blobs: {
        // label 1 in quadrants (+,+) and (-,-)
        const double s = rng.uniform() < 0.5 ? 1.0 : -1.0;
        x0 = s * 1.5 + 0.5 * rng.normal();
        x1 = (y == 1 ? s : -s) * 1.5 + 0.5 * rng.normal();
        break;
      }
    }
    data.features(r, 0) = x0;
    data.features(r, 1) = x1;
    data.labels[i] = y;
  }
  return quadratic ? with_quadratic_features(data) : data;
}

/// 1-D logistic data: x ~ N(0, 1), y ~ Bernoulli(sigmoid(weight * x)).
inline Dataset make_logistic_1d(std::size_t n, std::uint64_t seed, double weight) {
  RngStream rng(seed, 0x1dULL);
  Dataset data;
  data.features.resize(static_cast<Eigen::Index>(n), 1);
  data.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.normal();
    data.features(static_cast<Eigen::Index>(i), 0) = x;
    data.labels[i] = rng.uniform() < sigmoid(weight * x) ? 1 : 0;
  }
  return data;
}

}  // namespace ngvi
