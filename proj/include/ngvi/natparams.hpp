#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>

#include "ngvi/distributions.hpp"
#include "ngvi/models.hpp"
#include "ngvi/oracle.hpp"

namespace ngvi {

/// eta1 = mu / sigma^2, eta2 = -1 / (2 sigma^2), elementwise.
struct NaturalParams {
  Vec eta1;
  Vec eta2;

  void validate() const {
    detail::require_dim(eta1.size(), eta2.size(), "NaturalParams");
    if ((eta2.array() >= 0.0).any()) {
      throw std::invalid_argument("NaturalParams: eta2 must be negative");
    }
  }

  Vec stacked() const {
    Vec out(eta1.size() + eta2.size());
    out << eta1, eta2;
    return out;
  }
  static NaturalParams unstack(const Vec& v) {
    const Eigen::Index d = v.size() / 2;
    return {v.head(d), v.tail(d)};
  }
};

/// m1 = E[z] = mu, m2 = diag E[z z^T] = mu^2 + sigma^2.
struct ExpectationParams {
  Vec m1;
  Vec m2;

  void validate() const {
    detail::require_dim(m1.size(), m2.size(), "ExpectationParams");
    if (((m2 - m1.cwiseAbs2()).array() <= 0.0).any()) {
      throw std::invalid_argument("ExpectationParams: m2 - m1^2 must be positive");
    }
  }

  Vec stacked() const {
    Vec out(m1.size() + m2.size());
    out << m1, m2;
    return out;
  }
  static ExpectationParams unstack(const Vec& v) {
    const Eigen::Index d = v.size() / 2;
    return {v.head(d), v.tail(d)};
  }
};

inline NaturalParams to_natural(const DiagGaussian& g) {
  return {g.mean.cwiseQuotient(g.variance), -0.5 * g.variance.cwiseInverse()};
}

inline DiagGaussian from_natural(const NaturalParams& eta) {
  eta.validate();
  const Vec var = (-0.5 * eta.eta2.cwiseInverse()).eval();
  return {eta.eta1.cwiseProduct(var), var};
}

inline ExpectationParams to_expectation(const DiagGaussian& g) {
  return {g.mean, g.mean.cwiseAbs2() + g.variance};
}

inline DiagGaussian from_expectation(const ExpectationParams& m) {
  m.validate();
  return {m.m1, m.m2 - m.m1.cwiseAbs2()};
}

/**
 * Chain rule from (mu, Sigma) gradients to expectation-parameter gradients
 * for a diagonal Gaussian:
 *   dL/dm1 = dL/dmu - 2 (dL/dSigma) * mu,   dL/dm2 = dL/dSigma.
 */
inline ExpectationParams expectation_gradient(const DiagGaussian& g,
                                              const oracle::GaussianElboGradient& grad) {
  return {grad.d_mean - 2.0 * grad.d_var.cwiseProduct(g.mean), grad.d_var};
}

struct NatGradReport {
  /// max_k |(F^-1 dL/deta)_k - (dL/dm)_k| / max(1, ||dL/dm||_inf)
  double max_rel_discrepancy = 0.0;
  /// ||F F^-1 - I||_inf
  double identity_residual = 0.0;
  /// Same discrepancy with dL/dm built from n_mc Monte-Carlo samples.
  double mc_max_rel_discrepancy = 0.0;
  Vec natural_gradient;      // F^-1 dL/deta
  Vec expectation_gradient;  // dL/dm
};

/**
 * Checks F(eta)^-1 grad_eta L = grad_m L numerically. grad_eta L comes from
 * finite differences of the quadrature ELBO in eta-space and F is the
 * finite-difference Jacobian dm/deta; grad_m L comes from quadrature
 * expectations of the target's gradient and Hessian through the chain rule.
 * Limited to d <= 2 by the quadrature.
 */
inline NatGradReport natgrad_check(const TargetModel& model, const DiagGaussian& g,
                                   std::size_t n_mc, RngStream& rng) {
  if (g.dim() > 2) throw std::invalid_argument("natgrad_check: d must be <= 2");
  detail::require_dim(model.dim(), g.dim(), "natgrad_check");

  const Vec eta0 = to_natural(g).stacked();
  const auto elbo_of_eta = [&](const Vec& eta) {
    return oracle::quad_elbo(from_natural(NaturalParams::unstack(eta)), model);
  };
  const auto mean_of_eta = [](const Vec& eta) {
    return to_expectation(from_natural(NaturalParams::unstack(eta))).stacked();
  };

  const Vec grad_eta = oracle::finite_diff_grad(elbo_of_eta, eta0, 1e-5);
  const Mat fisher = oracle::finite_diff_jacobian(mean_of_eta, eta0, 1e-6);
  const Eigen::PartialPivLU<Mat> lu(fisher);
  const Mat fisher_inv = lu.inverse();

  NatGradReport report;
  report.natural_gradient = lu.solve(grad_eta);
  report.expectation_gradient =
      expectation_gradient(g, oracle::quad_gaussian_elbo_grad(g, model)).stacked();
  report.identity_residual =
      (fisher * fisher_inv - Mat::Identity(fisher.rows(), fisher.cols()))
          .cwiseAbs()
          .maxCoeff();

  const auto discrepancy = [&](const Vec& reference) {
    const double scale = std::max(1.0, reference.cwiseAbs().maxCoeff());
    return (report.natural_gradient - reference).cwiseAbs().maxCoeff() / scale;
  };
  report.max_rel_discrepancy = discrepancy(report.expectation_gradient);

  if (n_mc > 0) {
    const Eigen::Index d = g.dim();
    const double lambda = model.prior_precision();
    Vec d_mean = Vec::Zero(d), hess = Vec::Zero(d);
    for (std::size_t s = 0; s < n_mc; ++s) {
      const Vec z = gauss_sample(g, rng);
      d_mean += -lambda * z - grad_neg_loglik(model, z);
      hess += hess_diag_neg_loglik(model, z);
    }
    const double inv_n = 1.0 / static_cast<double>(n_mc);
    oracle::GaussianElboGradient mc{
        d_mean * inv_n,
        -0.5 * (Vec::Constant(d, lambda) + hess * inv_n) + 0.5 * g.variance.cwiseInverse()};
    report.mc_max_rel_discrepancy = discrepancy(expectation_gradient(g, mc).stacked());
  }
  return report;
}

}  // namespace ngvi
