#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ngvi/rng.hpp"

namespace ngvi {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void require_dim(Eigen::Index expected, Eigen::Index got,
                        const char* what) {
  if (expected != got) {
    throw DimensionError(std::string(what) + ": expected dimension " +
                         std::to_string(expected) + ", got " +
                         std::to_string(got));
  }
}

inline double log_sum_exp(const Vec& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

}  // namespace detail

/// Diagonal Gaussian N(mean, diag(variance)).
struct DiagGaussian {
  Vec mean;
  Vec variance;

  DiagGaussian() = default;

  DiagGaussian(Vec m, Vec v) : mean(std::move(m)), variance(std::move(v)) {
    detail::require_dim(mean.size(), variance.size(), "DiagGaussian");
    for (Eigen::Index j = 0; j < variance.size(); ++j) {
      if (!(variance[j] > 0.0)) {
        throw std::invalid_argument("DiagGaussian: variance must be positive");
      }
    }
  }

  static DiagGaussian isotropic(Eigen::Index d, double mean_value,
                                double var_value) {
    return {Vec::Constant(d, mean_value), Vec::Constant(d, var_value)};
  }

  Eigen::Index dim() const noexcept { return mean.size(); }
  Vec precision() const { return variance.cwiseInverse(); }
};

/**
 * Mixture of diagonal Gaussians with softmax mixing logits. The weights are
 * pi = softmax(logits); normalize() shifts the logits so max(logits) == 0,
 * which leaves pi unchanged.
 */
class MixturePosterior {
 public:
  MixturePosterior() = default;

  MixturePosterior(std::vector<DiagGaussian> components, Vec logits)
      : components_(std::move(components)), logits_(std::move(logits)) {
    if (components_.empty()) {
      throw std::invalid_argument("MixturePosterior: need at least one component");
    }
    detail::require_dim(static_cast<Eigen::Index>(components_.size()),
                        logits_.size(), "MixturePosterior logits");
    for (const auto& c : components_) {
      detail::require_dim(components_.front().dim(), c.dim(),
                          "MixturePosterior component");
    }
    for (Eigen::Index c = 0; c < logits_.size(); ++c) {
      if (!std::isfinite(logits_[c])) {
        throw std::invalid_argument("MixturePosterior: non-finite logit");
      }
    }
    normalize();
  }

  explicit MixturePosterior(DiagGaussian single)
      : MixturePosterior(std::vector<DiagGaussian>{std::move(single)},
                         Vec::Zero(1)) {}

  std::size_t size() const noexcept { return components_.size(); }
  Eigen::Index dim() const { return components_.front().dim(); }

  const std::vector<DiagGaussian>& components() const noexcept {
    return components_;
  }
  const DiagGaussian& component(std::size_t c) const { return components_[c]; }
  DiagGaussian& component(std::size_t c) { return components_[c]; }

  const Vec& logits() const noexcept { return logits_; }

  void set_logits(Vec logits) {
    detail::require_dim(logits_.size(), logits.size(), "set_logits");
    logits_ = std::move(logits);
    normalize();
  }

  Vec log_weights() const {
    return logits_.array() - detail::log_sum_exp(logits_);
  }
  Vec weights() const { return log_weights().array().exp(); }

  void normalize() { logits_.array() -= logits_.maxCoeff(); }

 private:
  std::vector<DiagGaussian> components_;
  Vec logits_;
};

inline double gauss_log_pdf(const DiagGaussian& g, const Vec& z) {
  detail::require_dim(g.dim(), z.size(), "gauss_log_pdf");
  const double log_two_pi = std::log(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    const double r = z[j] - g.mean[j];
    acc += -0.5 * (log_two_pi + std::log(g.variance[j])) -
           r * r / (2.0 * g.variance[j]);
  }
  return acc;
}

inline Vec gauss_sample(const DiagGaussian& g, RngStream& rng) {
  Vec eps = rng.normal_vector(g.dim());
  return g.mean + g.variance.cwiseSqrt().cwiseProduct(eps);
}

inline double gauss_entropy(const DiagGaussian& g) {
  const double log_two_pi_e = std::log(2.0 * std::numbers::pi) + 1.0;
  return 0.5 * (g.variance.array().log() + log_two_pi_e).sum();
}

// KL(q || p) between diagonal Gaussians.
inline double gauss_kl(const DiagGaussian& q, const DiagGaussian& p) {
  detail::require_dim(q.dim(), p.dim(), "gauss_kl");
  double acc = 0.0;
  for (Eigen::Index j = 0; j < q.dim(); ++j) {
    const double ratio = q.variance[j] / p.variance[j];
    const double r = q.mean[j] - p.mean[j];
    acc += 0.5 * (ratio + r * r / p.variance[j] - 1.0 - std::log(ratio));
  }
  return acc;
}

namespace detail {

// log pi_c + log N(z | mu_c, sigma_c) for every component.
inline Vec joint_log_terms(const MixturePosterior& q, const Vec& z) {
  detail::require_dim(q.dim(), z.size(), "mixture evaluation");
  const Vec log_pi = q.log_weights();
  Vec terms(static_cast<Eigen::Index>(q.size()));
  for (std::size_t c = 0; c < q.size(); ++c) {
    const auto i = static_cast<Eigen::Index>(c);
    terms[i] = log_pi[i] + gauss_log_pdf(q.component(c), z);
  }
  return terms;
}

// Posterior component probabilities pi_c * delta_c(z); they sum to one.
inline Vec weighted_responsibilities(const MixturePosterior& q, const Vec& z) {
  const Vec terms = joint_log_terms(q, z);
  const Vec shifted = (terms.array() - terms.maxCoeff()).exp();
  return shifted / shifted.sum();
}

}  // namespace detail

inline double mog_log_pdf(const MixturePosterior& q, const Vec& z) {
  return detail::log_sum_exp(detail::joint_log_terms(q, z));
}

struct MixtureDraw {
  std::size_t component;
  Vec z;
};

/**
 * Draws a component index from pi and then a point from that component. With
 * a single component no uniform is consumed, so the draw coincides with
 * gauss_sample on the same stream state.
 */
inline MixtureDraw mog_sample(const MixturePosterior& q, RngStream& rng) {
  std::size_t index = 0;
  if (q.size() > 1) {
    const Vec pi = q.weights();
    const double u = rng.uniform();
    double cumulative = 0.0;
    index = q.size() - 1;
    for (std::size_t c = 0; c + 1 < q.size(); ++c) {
      cumulative += pi[static_cast<Eigen::Index>(c)];
      if (u < cumulative) {
        index = c;
        break;
      }
    }
  }
  return {index, gauss_sample(q.component(index), rng)};
}

/**
 * delta_c(z) = N(z | mu_c, Sigma_c) / sum_c' pi_c' N(z | mu_c', Sigma_c').
 * The numerator carries no pi_c; sum_c pi_c delta_c(z) == 1.
 */
inline Vec responsibilities(const MixturePosterior& q, const Vec& z) {
  const Vec terms = detail::joint_log_terms(q, z);
  const double top = terms.maxCoeff();
  const Vec shifted = (terms.array() - top).exp();
  const double log_q = top + std::log(shifted.sum());
  const Vec log_pi = q.log_weights();
  Vec delta(terms.size());
  for (Eigen::Index c = 0; c < terms.size(); ++c) {
    const double pi = std::exp(log_pi[c]);
    // Divide the normalized term when pi is representable; otherwise go through logs.
    delta[c] = pi > 1e-200 ? (shifted[c] / shifted.sum()) / pi
                           : std::exp(terms[c] - log_pi[c] - log_q);
  }
  return delta;
}

/// Gradient of log q(z): -sum_c pi_c delta_c(z) (z - mu_c) / sigma_c^2.
inline Vec mog_score(const MixturePosterior& q, const Vec& z) {
  const Vec r = detail::weighted_responsibilities(q, z);
  Vec score = Vec::Zero(z.size());
  for (std::size_t c = 0; c < q.size(); ++c) {
    const auto& g = q.component(c);
    score -= r[static_cast<Eigen::Index>(c)] *
             (z - g.mean).cwiseQuotient(g.variance);
  }
  return score;
}

/**
 * Diagonal of the Hessian of log q(z), from
 *   d2 log q = (d2 q) / q - (d q / q)^2,
 *   (d2 q) / q = sum_c r_c (a_c^2 - 1 / sigma_c^2),  a_c = (z - mu_c) / sigma_c^2,
 * with r_c = pi_c delta_c(z). Written as sum_c r_c (a_c - abar)^2 - sum_c r_c /
 * sigma_c^2 so the squared terms cannot cancel catastrophically.
 */
inline Vec mog_curvature_diag(const MixturePosterior& q, const Vec& z) {
  const Vec r = detail::weighted_responsibilities(q, z);
  const Eigen::Index d = z.size();
  Vec abar = Vec::Zero(d);
  for (std::size_t c = 0; c < q.size(); ++c) {
    const auto& g = q.component(c);
    abar += r[static_cast<Eigen::Index>(c)] *
            (z - g.mean).cwiseQuotient(g.variance);
  }
  Vec spread = Vec::Zero(d);
  Vec inv_var = Vec::Zero(d);
  for (std::size_t c = 0; c < q.size(); ++c) {
    const auto& g = q.component(c);
    const double rc = r[static_cast<Eigen::Index>(c)];
    const Vec dev = (z - g.mean).cwiseQuotient(g.variance) - abar;
    spread += rc * dev.cwiseAbs2();
    inv_var += rc * g.variance.cwiseInverse();
  }
  return spread - inv_var;
}

}  // namespace ngvi
