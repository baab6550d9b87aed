#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "ngvi/distributions.hpp"
#include "ngvi/models.hpp"

// Ground-truth machinery used to certify the estimators and optimizers:
// trapezoid quadrature at d <= 2, central finite differences, and closed-form
// Gaussian posteriors.

namespace ngvi::oracle {

class QuadratureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor trapezoid grid. Points per dimension must be odd.
struct QuadratureGrid {
  Vec lower;
  Vec upper;
  int points = 4001;

  Eigen::Index dim() const { return lower.size(); }

  void validate() const {
    detail::require_dim(lower.size(), upper.size(), "QuadratureGrid");
    if (dim() < 1 || dim() > 2) {
      throw std::invalid_argument("QuadratureGrid: only d <= 2 is supported");
    }
    if (points < 3 || points % 2 == 0) {
      throw std::invalid_argument("QuadratureGrid: points must be odd and >= 3");
    }
    if ((upper - lower).minCoeff() <= 0.0) {
      throw std::invalid_argument("QuadratureGrid: empty interval");
    }
  }

  QuadratureGrid refined() const { return {lower, upper, 2 * points - 1}; }
};

inline int default_points(Eigen::Index d) { return d == 1 ? 4001 : 401; }

/// Bounds covering +-width standard deviations of every component.
inline QuadratureGrid grid_for(const MixturePosterior& q, double width = 12.0) {
  const Eigen::Index d = q.dim();
  Vec lo = Vec::Constant(d, std::numeric_limits<double>::infinity());
  Vec hi = Vec::Constant(d, -std::numeric_limits<double>::infinity());
  for (const auto& c : q.components()) {
    const Vec sd = c.variance.cwiseSqrt();
    lo = lo.cwiseMin(c.mean - width * sd);
    hi = hi.cwiseMax(c.mean + width * sd);
  }
  return {lo, hi, default_points(d)};
}

inline QuadratureGrid grid_for(const DiagGaussian& g, double width = 12.0) {
  return grid_for(MixturePosterior(g), width);
}

inline QuadratureGrid merge(const QuadratureGrid& a, const QuadratureGrid& b) {
  return {a.lower.cwiseMin(b.lower), a.upper.cwiseMax(b.upper),
          std::max(a.points, b.points)};
}

using VecIntegrand = std::function<Vec(const Vec&)>;

/// Trapezoid rule for a vector-valued integrand of width `out_dim`.
inline Vec trapezoid(const VecIntegrand& f, const QuadratureGrid& grid,
                     Eigen::Index out_dim) {
  grid.validate();
  const int n = grid.points;
  const Vec step = (grid.upper - grid.lower) / static_cast<double>(n - 1);
  auto weight = [n](int i) { return (i == 0 || i == n - 1) ? 0.5 : 1.0; };
  Vec acc = Vec::Zero(out_dim);
  Vec z(grid.dim());
  if (grid.dim() == 1) {
    for (int i = 0; i < n; ++i) {
      z[0] = grid.lower[0] + i * step[0];
      acc += weight(i) * f(z);
    }
    return acc * step[0];
  }
  for (int i = 0; i < n; ++i) {
    z[0] = grid.lower[0] + i * step[0];
    for (int k = 0; k < n; ++k) {
      z[1] = grid.lower[1] + k * step[1];
      acc += (weight(i) * weight(k)) * f(z);
    }
  }
  return acc * (step[0] * step[1]);
}

/**
 * Integrates with `grid` and with the doubled grid; the result must move by
 * less than tol * max(1, |value|) in every coordinate or QuadratureError is
 * thrown. Returns the refined value.
 */
inline Vec integrate_checked(const VecIntegrand& f, const QuadratureGrid& grid,
                             Eigen::Index out_dim, double tol = 1e-8) {
  const Vec coarse = trapezoid(f, grid, out_dim);
  const Vec fine = trapezoid(f, grid.refined(), out_dim);
  for (Eigen::Index k = 0; k < out_dim; ++k) {
    if (!std::isfinite(fine[k]) ||
        std::abs(fine[k] - coarse[k]) > tol * std::max(1.0, std::abs(fine[k]))) {
      throw QuadratureError("quadrature did not converge under grid doubling");
    }
  }
  return fine;
}

/// E_q[f] = integral of exp(log_density) * f over the grid, with the doubling check.
inline double quad_expectation(const std::function<double(const Vec&)>& log_density,
                               const std::function<double(const Vec&)>& integrand,
                               const QuadratureGrid& grid, double tol = 1e-8) {
  const VecIntegrand f = [&](const Vec& z) {
    const double w = std::exp(log_density(z));
    Vec out(1);
    out[0] = w == 0.0 ? 0.0 : w * integrand(z);
    return out;
  };
  return integrate_checked(f, grid, 1, tol)[0];
}

inline double quad_entropy(const MixturePosterior& q, double tol = 1e-8) {
  const auto lq = [&](const Vec& z) { return mog_log_pdf(q, z); };
  return quad_expectation(lq, [&](const Vec& z) { return -lq(z); }, grid_for(q), tol);
}

/// E_q[log p(z) + sum_i log p(D_i | z) - log q(z)] by quadrature.
inline double quad_elbo(const MixturePosterior& q, const TargetModel& model,
                        double tol = 1e-8) {
  const auto lq = [&](const Vec& z) { return mog_log_pdf(q, z); };
  return quad_expectation(
      lq, [&](const Vec& z) { return log_joint(model, z) - lq(z); }, grid_for(q), tol);
}

inline double quad_elbo(const DiagGaussian& g, const TargetModel& model,
                        double tol = 1e-8) {
  return quad_elbo(MixturePosterior(g), model, tol);
}

/// log of the integral of exp(log_joint) over `grid` (shifted by the grid max).
inline double quad_log_evidence(const TargetModel& model, const QuadratureGrid& grid,
                                double tol = 1e-8) {
  auto run = [&](const QuadratureGrid& g) {
    double shift = -std::numeric_limits<double>::infinity();
    trapezoid([&](const Vec& z) {
      shift = std::max(shift, log_joint(model, z));
      return Vec::Zero(1).eval();
    }, g, 1);
    const Vec v = trapezoid([&](const Vec& z) {
      Vec out(1);
      out[0] = std::exp(log_joint(model, z) - shift);
      return out;
    }, g, 1);
    return shift + std::log(v[0]);
  };
  const double coarse = run(grid);
  const double fine = run(grid.refined());
  if (std::abs(fine - coarse) > tol * std::max(1.0, std::abs(fine))) {
    throw QuadratureError("log evidence did not converge under grid doubling");
  }
  return fine;
}

/// KL(q || posterior) = log evidence - ELBO; the grid must cover the posterior.
inline double quad_kl_to_posterior(const MixturePosterior& q, const TargetModel& model,
                                   const QuadratureGrid& posterior_grid,
                                   double tol = 1e-8) {
  return quad_log_evidence(model, posterior_grid, tol) - quad_elbo(q, model, tol);
}

/// Exact ELBO gradient wrt (mean, variance) of a diagonal Gaussian.
struct GaussianElboGradient {
  Vec d_mean;
  Vec d_var;
};

/**
 * Uses the Gaussian identities dE[f]/dmu = E[grad f], dE[f]/dvar = E[diag hess f] / 2,
 * plus d entropy / d var = 1 / (2 var), with each expectation by quadrature.
 */
inline GaussianElboGradient quad_gaussian_elbo_grad(const DiagGaussian& g,
                                                    const TargetModel& model,
                                                    double tol = 1e-8) {
  const Eigen::Index d = g.dim();
  const double lambda = model.prior_precision();
  const VecIntegrand f = [&](const Vec& z) {
    const double w = std::exp(gauss_log_pdf(g, z));
    Vec out = Vec::Zero(2 * d);
    if (w == 0.0) return out;
    out.head(d) = w * (-lambda * z - grad_neg_loglik(model, z));
    out.tail(d) = w * (-0.5 * (Vec::Constant(d, lambda) + hess_diag_neg_loglik(model, z)));
    return out;
  };
  const Vec v = integrate_checked(f, grid_for(g), 2 * d, tol);
  return {v.head(d), v.tail(d) + 0.5 * g.variance.cwiseInverse()};
}

/// Central differences with per-coordinate step h * max(1, |x_j|).
inline Vec finite_diff_grad(const std::function<double(const Vec&)>& f, const Vec& x,
                            double h = 1e-5) {
  Vec grad(x.size());
  Vec xp = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double step = h * std::max(1.0, std::abs(x[j]));
    xp[j] = x[j] + step;
    const double fp = f(xp);
    xp[j] = x[j] - step;
    const double fm = f(xp);
    xp[j] = x[j];
    grad[j] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

inline Vec finite_diff_second(const std::function<double(const Vec&)>& f, const Vec& x,
                              double h = 1e-4) {
  Vec out(x.size());
  Vec xp = x;
  const double f0 = f(x);
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double step = h * std::max(1.0, std::abs(x[j]));
    xp[j] = x[j] + step;
    const double fp = f(xp);
    xp[j] = x[j] - step;
    const double fm = f(xp);
    xp[j] = x[j];
    out[j] = (fp - 2.0 * f0 + fm) / (step * step);
  }
  return out;
}

/// Jacobian of a vector map by central differences; column j is d f / d x_j.
inline Mat finite_diff_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x,
                                double h = 1e-6) {
  const Vec f0 = f(x);
  Mat jac(f0.size(), x.size());
  Vec xp = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double step = h * std::max(1.0, std::abs(x[j]));
    xp[j] = x[j] + step;
    const Vec fp = f(xp);
    xp[j] = x[j] - step;
    const Vec fm = f(xp);
    xp[j] = x[j];
    jac.col(j) = (fp - fm) / (2.0 * step);
  }
  return jac;
}

/// Gaussian observations y_n ~ N(z, diag(noise_variance)), rows of `observations`.
struct GaussianLikelihoodSpec {
  Mat observations;
  Vec noise_variance;
};

struct ConjugateResult {
  DiagGaussian posterior;
  double log_evidence;
};

/// Closed-form posterior and evidence under prior N(0, I / lambda).
inline ConjugateResult conjugate_posterior(double lambda, const GaussianLikelihoodSpec& spec) {
  const Eigen::Index d = spec.noise_variance.size();
  const auto n = static_cast<double>(spec.observations.rows());
  detail::require_dim(d, spec.observations.cols(), "conjugate_posterior");
  Vec mean(d), var(d);
  double log_ev = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const double s2 = spec.noise_variance[j];
    const double sum_y = n > 0 ? spec.observations.col(j).sum() : 0.0;
    const double sum_y2 = n > 0 ? spec.observations.col(j).squaredNorm() : 0.0;
    const double precision = lambda + n / s2;
    var[j] = 1.0 / precision;
    mean[j] = (sum_y / s2) / precision;
    log_ev += -0.5 * n * std::log(2.0 * std::numbers::pi * s2) +
              0.5 * std::log(lambda / precision) - 0.5 * sum_y2 / s2 +
              0.5 * (sum_y / s2) * (sum_y / s2) / precision;
  }
  return {DiagGaussian(mean, var), log_ev};
}

inline ConjugateResult conjugate_posterior(const GaussianObservationModel& model) {
  return conjugate_posterior(model.prior_precision(),
                             {model.observations(), model.noise_variance()});
}

}  // namespace ngvi::oracle
