#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ngvi/distributions.hpp"
#include "ngvi/io.hpp"
#include "ngvi/models.hpp"

namespace ngvi {

struct EstimatorReport {
  double value = 0.0;
  Vec per_sample;
  double variance = 0.0;  // unbiased variance of per_sample
  std::size_t n_samples = 0;

  double standard_error() const {
    return n_samples > 0 ? std::sqrt(variance / static_cast<double>(n_samples)) : 0.0;
  }

  static EstimatorReport from_samples(Vec values) {
    EstimatorReport r;
    r.n_samples = static_cast<std::size_t>(values.size());
    if (r.n_samples == 0) throw std::invalid_argument("EstimatorReport: no samples");
    r.value = values.mean();
    if (r.n_samples > 1) {
      r.variance = (values.array() - r.value).square().sum() /
                   static_cast<double>(r.n_samples - 1);
    }
    r.per_sample = std::move(values);
    return r;
  }
};

/// One stream per mixture component, stream id = component index.
inline std::vector<RngStream> component_streams(std::uint64_t seed, std::size_t k,
                                                std::uint64_t id_offset = 0) {
  std::vector<RngStream> out;
  out.reserve(k);
  for (std::size_t c = 0; c < k; ++c) out.emplace_back(seed, id_offset + c);
  return out;
}

/// Mean over S draws z ~ q of log_joint(z) - log q(z).
inline EstimatorReport elbo_naive(const MixturePosterior& q, const TargetModel& model,
                                  std::size_t samples, RngStream& rng) {
  if (samples < 1) throw std::invalid_argument("elbo_naive: S >= 1");
  Vec values(static_cast<Eigen::Index>(samples));
  for (std::size_t s = 0; s < samples; ++s) {
    const Vec z = mog_sample(q, rng).z;
    values[static_cast<Eigen::Index>(s)] = log_joint(model, z) - mog_log_pdf(q, z);
  }
  return EstimatorReport::from_samples(std::move(values));
}

inline EstimatorReport elbo_naive(const DiagGaussian& q, const TargetModel& model,
                                  std::size_t samples, RngStream& rng) {
  return elbo_naive(MixturePosterior(q), model, samples, rng);
}

/// ELBO gradient wrt (mu, log sigma^2) of a diagonal Gaussian.
struct GaussianGradientEstimate {
  Vec d_mean;
  Vec d_log_var;
  Vec var_d_mean;     // per-sample variance of each coordinate
  Vec var_d_log_var;
  EstimatorReport elbo;
};

namespace detail {

inline GaussianGradientEstimate summarize_gradient(const Mat& mean_terms,
                                                   const Mat& log_var_terms,
                                                   Vec elbo_terms) {
  const auto n = static_cast<double>(mean_terms.cols());
  GaussianGradientEstimate out;
  out.d_mean = mean_terms.rowwise().mean();
  out.d_log_var = log_var_terms.rowwise().mean();
  out.var_d_mean =
      (mean_terms.colwise() - out.d_mean).cwiseAbs2().rowwise().sum() / (n - 1.0);
  out.var_d_log_var =
      (log_var_terms.colwise() - out.d_log_var).cwiseAbs2().rowwise().sum() / (n - 1.0);
  out.elbo = EstimatorReport::from_samples(std::move(elbo_terms));
  return out;
}

}  // namespace detail

/**
 * Score-function (black-box) estimator:
 *   grad ~= 1/S sum_s (log p(x, z_s) - log q(z_s)) grad_phi log q(z_s),
 * with phi = (mu, log sigma^2).
 */
inline GaussianGradientEstimate score_function_grad(const DiagGaussian& q,
                                                    const TargetModel& model,
                                                    std::size_t samples, RngStream& rng) {
  if (samples < 2) throw std::invalid_argument("score_function_grad: S >= 2");
  const Eigen::Index d = q.dim();
  const auto n = static_cast<Eigen::Index>(samples);
  Mat mean_terms(d, n), log_var_terms(d, n);
  Vec elbo_terms(n);
  for (Eigen::Index s = 0; s < n; ++s) {
    const Vec z = gauss_sample(q, rng);
    const double w = log_joint(model, z) - gauss_log_pdf(q, z);
    const Vec r = z - q.mean;
    mean_terms.col(s) = w * r.cwiseQuotient(q.variance);
    log_var_terms.col(s) =
        w * 0.5 * (r.cwiseAbs2().cwiseQuotient(q.variance).array() - 1.0).matrix();
    elbo_terms[s] = w;
  }
  return detail::summarize_gradient(mean_terms, log_var_terms, std::move(elbo_terms));
}

/**
 * Reparameterized estimator for the same gradient, z = mu + sigma * eps, with
 * the entropy gradient taken analytically. Serves as the low-variance
 * comparator for score_function_grad.
 */
inline GaussianGradientEstimate reparam_grad(const DiagGaussian& q, const TargetModel& model,
                                             std::size_t samples, RngStream& rng) {
  if (samples < 2) throw std::invalid_argument("reparam_grad: S >= 2");
  const Eigen::Index d = q.dim();
  const auto n = static_cast<Eigen::Index>(samples);
  const double lambda = model.prior_precision();
  const Vec sd = q.variance.cwiseSqrt();
  Mat mean_terms(d, n), log_var_terms(d, n);
  Vec elbo_terms(n);
  for (Eigen::Index s = 0; s < n; ++s) {
    const Vec eps = rng.normal_vector(d);
    const Vec z = q.mean + sd.cwiseProduct(eps);
    const Vec grad_joint = -lambda * z - grad_neg_loglik(model, z);
    mean_terms.col(s) = grad_joint;
    log_var_terms.col(s) =
        (0.5 * grad_joint.cwiseProduct(sd).cwiseProduct(eps).array() + 0.5).matrix();
    elbo_terms[s] = log_joint(model, z) - gauss_log_pdf(q, z);
  }
  return detail::summarize_gradient(mean_terms, log_var_terms, std::move(elbo_terms));
}

namespace detail {

inline void require_streams(const MixturePosterior& q, std::span<RngStream> streams,
                            std::size_t samples, const char* what) {
  if (samples < 1) throw std::invalid_argument(std::string(what) + ": S >= 1");
  if (streams.size() != q.size()) {
    throw std::invalid_argument(std::string(what) + ": need one stream per component");
  }
}

}  // namespace detail

/**
 * Mixture entropy with a sampled control variate:
 *   H[z] ~= H[z|w] - Hhat[z|w] - sum_c pi_c 1/S sum_s log q(zhat_cs),
 * where H[z|w] = sum_c pi_c H_c is analytic, zhat_cs ~ q(z | w = c) and
 * Hhat[z|w] = sum_c pi_c 1/S sum_s -log q(zhat_cs | w = c) reuses the same draws.
 * Per-sample value s is sum_c pi_c [H_c + log q_c(zhat_cs) - log q(zhat_cs)], so a
 * single component yields the exact entropy with zero variance.
 */
inline EstimatorReport entropy_trick(const MixturePosterior& q, std::size_t samples,
                                     std::span<RngStream> streams) {
  detail::require_streams(q, streams, samples, "entropy_trick");
  const Vec pi = q.weights();
  Vec values = Vec::Zero(static_cast<Eigen::Index>(samples));
  for (std::size_t c = 0; c < q.size(); ++c) {
    const auto& comp = q.component(c);
    const double h_c = gauss_entropy(comp);
    const double pi_c = pi[static_cast<Eigen::Index>(c)];
    for (std::size_t s = 0; s < samples; ++s) {
      const Vec z = gauss_sample(comp, streams[c]);
      values[static_cast<Eigen::Index>(s)] +=
          pi_c * (h_c + gauss_log_pdf(comp, z) - mog_log_pdf(q, z));
    }
  }
  return EstimatorReport::from_samples(std::move(values));
}

inline EstimatorReport entropy_trick(const MixturePosterior& q, std::size_t samples,
                                     std::uint64_t seed) {
  auto streams = component_streams(seed, q.size());
  return entropy_trick(q, samples, streams);
}

/**
 * ELBO as a pi-weighted sum of per-component terms, every draw from a single
 * Gaussian component:
 *   L ~= sum_c pi_c [ E_c[log p(D|z)] - KL(q_c || p) + log q_c(zhat) - log q(zhat) ].
 * KL(q_c || p) is analytic; the same draws feed the likelihood and both
 * entropy-correction terms.
 */
inline EstimatorReport elbo_entropy_trick(const MixturePosterior& q, const TargetModel& model,
                                          std::size_t samples, std::span<RngStream> streams) {
  detail::require_streams(q, streams, samples, "elbo_entropy_trick");
  const Vec pi = q.weights();
  const DiagGaussian prior = model.prior();
  Vec values = Vec::Zero(static_cast<Eigen::Index>(samples));
  for (std::size_t c = 0; c < q.size(); ++c) {
    const auto& comp = q.component(c);
    const double kl_c = gauss_kl(comp, prior);
    const double pi_c = pi[static_cast<Eigen::Index>(c)];
    for (std::size_t s = 0; s < samples; ++s) {
      const Vec z = gauss_sample(comp, streams[c]);
      double lik = 0.0;
      for (std::size_t i : model.all_indices()) lik += model.datum_log_lik(i, z);
      values[static_cast<Eigen::Index>(s)] +=
          pi_c * (lik - kl_c + gauss_log_pdf(comp, z) - mog_log_pdf(q, z));
    }
  }
  return EstimatorReport::from_samples(std::move(values));
}

inline EstimatorReport elbo_entropy_trick(const MixturePosterior& q, const TargetModel& model,
                                          std::size_t samples, std::uint64_t seed) {
  auto streams = component_streams(seed, q.size());
  return elbo_entropy_trick(q, model, samples, streams);
}

enum class ElboEstimator { naive, entropy_trick };

inline std::string to_string(ElboEstimator e) {
  return e == ElboEstimator::naive ? "naive" : "entropy-trick";
}

inline ElboEstimator parse_elbo_estimator(const std::string& s) {
  if (s == "naive") return ElboEstimator::naive;
  if (s == "entropy-trick") return ElboEstimator::entropy_trick;
  throw std::invalid_argument("unknown ELBO estimator '" + s + "'");
}

struct BenchProblem {
  std::string name;
  std::shared_ptr<const TargetModel> model;
  MixturePosterior q;
};

struct BenchRow {
  std::string estimator;
  std::string problem;
  std::size_t samples;
  std::size_t replicate;
  double value;
};

struct BenchCell {
  std::string estimator;
  std::string problem;
  std::size_t samples;
  double mean;
  double variance;  // across replicates
  double standard_error;
};

struct BenchTable {
  std::vector<BenchRow> rows;
  std::vector<BenchCell> cells;

  const BenchCell* find(const std::string& estimator, const std::string& problem,
                        std::size_t samples) const {
    for (const auto& c : cells) {
      if (c.estimator == estimator && c.problem == problem && c.samples == samples) return &c;
    }
    return nullptr;
  }

  std::string rows_csv() const {
    std::ostringstream out;
    out << "estimator,problem,S,replicate,value\n";
    for (const auto& r : rows) {
      out << r.estimator << ',' << r.problem << ',' << r.samples << ',' << r.replicate << ','
          << format_double(r.value) << '\n';
    }
    return out.str();
  }

  std::string cells_csv() const {
    std::ostringstream out;
    out << "estimator,problem,S,mean,variance,se\n";
    for (const auto& c : cells) {
      out << c.estimator << ',' << c.problem << ',' << c.samples << ','
          << format_double(c.mean) << ',' << format_double(c.variance) << ','
          << format_double(c.standard_error) << '\n';
    }
    return out.str();
  }
};

/**
 * Replicated ELBO estimates over an (estimator x problem x S) grid. S is the
 * per-component count for the entropy trick; the naive estimator gets the
 * same total budget, K * S mixture draws. Replicate r of every cell uses
 * seed-derived streams, so equal seeds give identical tables.
 */
inline BenchTable variance_bench(const std::vector<BenchProblem>& problems,
                                 const std::vector<ElboEstimator>& estimators,
                                 const std::vector<std::size_t>& sample_grid,
                                 std::size_t replicates, std::uint64_t seed) {
  if (problems.empty() || estimators.empty() || sample_grid.empty() || replicates < 2) {
    throw std::invalid_argument("variance_bench: grid must be non-empty and R >= 2");
  }
  BenchTable table;
  for (std::size_t p = 0; p < problems.size(); ++p) {
    const auto& prob = problems[p];
    const std::size_t k = prob.q.size();
    for (const auto est : estimators) {
      for (std::size_t s : sample_grid) {
        Vec values(static_cast<Eigen::Index>(replicates));
        for (std::size_t r = 0; r < replicates; ++r) {
          const std::uint64_t cell_seed =
              seed ^ (0x9e3779b97f4a7c15ULL * (p + 1)) ^ (0xbf58476d1ce4e5b9ULL * (s + 1));
          double v = 0.0;
          if (est == ElboEstimator::naive) {
            RngStream rng(cell_seed, r * 1024);
            v = elbo_naive(prob.q, *prob.model, s * k, rng).value;
          } else {
            auto streams = component_streams(cell_seed, k, r * 1024);
            v = elbo_entropy_trick(prob.q, *prob.model, s, streams).value;
          }
          values[static_cast<Eigen::Index>(r)] = v;
          table.rows.push_back({to_string(est), prob.name, s, r, v});
        }
        const auto rep = EstimatorReport::from_samples(values);
        table.cells.push_back({to_string(est), prob.name, s, rep.value, rep.variance,
                               rep.standard_error()});
      }
    }
  }
  return table;
}

}  // namespace ngvi
