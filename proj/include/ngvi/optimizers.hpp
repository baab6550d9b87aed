#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ngvi/distributions.hpp"
#include "ngvi/estimators.hpp"
#include "ngvi/models.hpp"
#include "ngvi/oracle.hpp"

namespace ngvi {

struct OptimizerConfig {
  double beta = 0.01;
  std::size_t epochs = 500;
  std::size_t mc_samples = 1;
  std::size_t minibatch = 0;  // 0 means full batch
  std::uint64_t seed = 0;
  double variance_floor = 1e-8;
  std::size_t threads = 1;
  // Use the literal density-weighted mixing-weight step instead of the
  // default one (kept for comparison runs).
  bool paper_literal_pi = false;

  std::size_t log_every = 1;
  std::size_t elbo_samples = 16;
  ElboEstimator elbo_estimator = ElboEstimator::entropy_trick;
  bool early_stop = false;
  bool record_wall_time = false;

  void validate() const {
    if (!(beta > 0.0)) throw std::invalid_argument("OptimizerConfig: beta must be > 0");
    if (mc_samples < 1) throw std::invalid_argument("OptimizerConfig: mc_samples >= 1");
    if (!(variance_floor > 0.0)) {
      throw std::invalid_argument("OptimizerConfig: variance_floor must be > 0");
    }
    if (log_every < 1) throw std::invalid_argument("OptimizerConfig: log_every >= 1");
    if (elbo_samples < 1) throw std::invalid_argument("OptimizerConfig: elbo_samples >= 1");
    if (threads < 1) throw std::invalid_argument("OptimizerConfig: threads >= 1");
  }
};

struct StepStats {
  double grad_norm = 0.0;
  int clamps = 0;
};

namespace detail {

// Variance from a precision, floored. NaN passes through so callers can abort.
inline double floored_variance(double precision, double floor, int& clamps) {
  if (std::isnan(precision)) return precision;
  if (!(precision > 0.0) || !(1.0 / precision >= floor)) {
    ++clamps;
    return floor;
  }
  return 1.0 / precision;
}

inline Vec floored_variance(const Vec& precision, double floor, int& clamps) {
  Vec out(precision.size());
  for (Eigen::Index j = 0; j < precision.size(); ++j) {
    out[j] = floored_variance(precision[j], floor, clamps);
  }
  return out;
}

// DiagGaussian without the positivity check; NaNs must reach the fit loop.
inline DiagGaussian unchecked_gaussian(Vec mean, Vec variance) {
  DiagGaussian g;
  g.mean = std::move(mean);
  g.variance = std::move(variance);
  return g;
}

inline void record(StepStats* stats, double grad_sq, int clamps) {
  if (stats != nullptr) {
    stats->grad_norm = std::sqrt(grad_sq);
    stats->clamps += clamps;
  }
}

}  // namespace detail

/**
 * Natural-gradient step in the natural parameters of a diagonal Gaussian,
 * given the ELBO gradient wrt (mu, Sigma):
 *   Sigma_new^-1 = Sigma^-1 - 2 beta dL/dSigma,
 *   mu_new       = mu + beta Sigma_new dL/dmu.
 * The precision is updated first and the mean step uses the new covariance.
 */
inline DiagGaussian natural_gradient_update(const DiagGaussian& q, const Vec& d_mean,
                                            const Vec& d_var, double beta, double floor,
                                            int& clamps) {
  const Vec precision = q.variance.cwiseInverse() - 2.0 * beta * d_var;
  Vec var = detail::floored_variance(precision, floor, clamps);
  Vec mean = q.mean + beta * var.cwiseProduct(d_mean);
  return detail::unchecked_gaussian(std::move(mean), std::move(var));
}

/// Plain ascent on (mu, log sigma^2) with the score-function gradient.
inline DiagGaussian bbvi_step(const DiagGaussian& q, const TargetModel& model,
                              const OptimizerConfig& cfg, RngStream& rng,
                              StepStats* stats = nullptr) {
  const auto est = score_function_grad(q, model, std::max<std::size_t>(2, cfg.mc_samples), rng);
  Vec mean = q.mean + cfg.beta * est.d_mean;
  Vec log_var = q.variance.array().log().matrix() + cfg.beta * est.d_log_var;
  int clamps = 0;
  Vec var = log_var.array().exp().matrix();
  for (Eigen::Index j = 0; j < var.size(); ++j) {
    if (var[j] < cfg.variance_floor) {
      var[j] = cfg.variance_floor;
      ++clamps;
    }
  }
  detail::record(stats, est.d_mean.squaredNorm() + est.d_log_var.squaredNorm(), clamps);
  return detail::unchecked_gaussian(std::move(mean), std::move(var));
}

/**
 * Monte-Carlo ELBO gradient wrt (mu, Sigma) of a diagonal Gaussian via the
 * Bonnet and Price identities:
 *   dL/dmu    = E[-lambda z - g(z)],
 *   dL/dSigma = E[-lambda - H(z)] / 2 + Sigma^-1 / 2.
 */
inline oracle::GaussianElboGradient mc_gaussian_elbo_grad(const DiagGaussian& q,
                                                          const TargetModel& model,
                                                          std::size_t samples, RngStream& rng,
                                                          Batch batch = {}) {
  const Eigen::Index d = q.dim();
  const double lambda = model.prior_precision();
  Vec d_mean = Vec::Zero(d), hess = Vec::Zero(d);
  for (std::size_t s = 0; s < samples; ++s) {
    const Vec z = gauss_sample(q, rng);
    d_mean += -lambda * z - grad_neg_loglik(model, z, batch);
    hess += hess_diag_neg_loglik(model, z, batch);
  }
  const double inv = 1.0 / static_cast<double>(samples);
  return {d_mean * inv,
          -0.5 * (Vec::Constant(d, lambda) + hess * inv) + 0.5 * q.variance.cwiseInverse()};
}

inline DiagGaussian ngvi_meanfield_step(const DiagGaussian& q, const TargetModel& model,
                                        const OptimizerConfig& cfg, RngStream& rng,
                                        Batch batch = {}, StepStats* stats = nullptr) {
  const auto grad = mc_gaussian_elbo_grad(q, model, cfg.mc_samples, rng, batch);
  int clamps = 0;
  auto out = natural_gradient_update(q, grad.d_mean, grad.d_var, cfg.beta,
                                     cfg.variance_floor, clamps);
  detail::record(stats, grad.d_mean.squaredNorm() + grad.d_var.squaredNorm(), clamps);
  return out;
}

/**
 * Shared body of VON and VOGN:
 *   Sigma_new^-1 = (1 - beta) Sigma^-1 + beta [C(z0) + lambda],
 *   mu_new       = mu - beta Sigma_new [g(z0) + lambda mu],
 * with z0 ~ q (averaged over mc_samples draws) and C the curvature callback.
 */
template <class Curvature>
DiagGaussian variational_newton_step(const DiagGaussian& q, const TargetModel& model,
                                     const OptimizerConfig& cfg, RngStream& rng, Batch batch,
                                     StepStats* stats, Curvature&& curvature) {
  const Eigen::Index d = q.dim();
  const double lambda = model.prior_precision();
  Vec g = Vec::Zero(d), c = Vec::Zero(d);
  for (std::size_t s = 0; s < cfg.mc_samples; ++s) {
    const Vec z = gauss_sample(q, rng);
    g += grad_neg_loglik(model, z, batch);
    c += curvature(model, z, batch);
  }
  const double inv = 1.0 / static_cast<double>(cfg.mc_samples);
  g *= inv;
  c *= inv;
  const Vec precision = (1.0 - cfg.beta) * q.variance.cwiseInverse() +
                        cfg.beta * (c + Vec::Constant(d, lambda));
  int clamps = 0;
  Vec var = detail::floored_variance(precision, cfg.variance_floor, clamps);
  const Vec step = g + lambda * q.mean;
  Vec mean = q.mean - cfg.beta * var.cwiseProduct(step);
  detail::record(stats, step.squaredNorm(), clamps);
  return detail::unchecked_gaussian(std::move(mean), std::move(var));
}

inline DiagGaussian von_step(const DiagGaussian& q, const TargetModel& model,
                             const OptimizerConfig& cfg, RngStream& rng, Batch batch = {},
                             StepStats* stats = nullptr) {
  return variational_newton_step(q, model, cfg, rng, batch, stats,
                                 [](const TargetModel& m, const Vec& z, Batch b) {
                                   return hess_diag_neg_loglik(m, z, b);
                                 });
}

inline DiagGaussian vogn_step(const DiagGaussian& q, const TargetModel& model,
                              const OptimizerConfig& cfg, RngStream& rng, Batch batch = {},
                              StepStats* stats = nullptr) {
  return variational_newton_step(q, model, cfg, rng, batch, stats,
                                 [](const TargetModel& m, const Vec& z, Batch b) {
                                   return ggn_diag(m, z, b);
                                 });
}

/**
 * h(z) = log q(z) - log p(z) - l(z) with its z-gradient and Hessian diagonal,
 * where l is the (rescaled) log-likelihood. The ELBO is E_q[-h].
 */
struct NegElboTerms {
  double h;
  Vec grad;
  Vec curv;
};

inline NegElboTerms neg_elbo_terms(const MixturePosterior& q, const TargetModel& model,
                                   const Vec& z, Batch batch = {}) {
  const double lambda = model.prior_precision();
  NegElboTerms t;
  t.h = mog_log_pdf(q, z) - model.log_prior(z) - log_likelihood(model, z, batch);
  t.grad = mog_score(q, z) + lambda * z + grad_neg_loglik(model, z, batch);
  t.curv = mog_curvature_diag(q, z) + Vec::Constant(z.size(), lambda) +
           hess_diag_neg_loglik(model, z, batch);
  return t;
}

/**
 * One-sample ELBO gradient pieces for a draw z ~ q(z | w = c):
 *   d_mean = -grad h(z)          estimates (1 / pi_c) dL/dmu_c,
 *   d_var  = -diag hess h(z) / 2 estimates (1 / pi_c) dL/dsigma_c^2,
 *   neg_h  = -h(z); neg_h(z_c) - neg_h(z_K) estimates dL/dpi_c with pi_K = 1 - sum.
 */
struct ComponentGradientSample {
  Vec d_mean;
  Vec d_var;
  double neg_h;
};

inline ComponentGradientSample component_gradient_sample(const MixturePosterior& q,
                                                         const TargetModel& model,
                                                         const Vec& z, Batch batch = {}) {
  const auto t = neg_elbo_terms(q, model, z, batch);
  return {-t.grad, -0.5 * t.curv, -t.h};
}

/// Means drawn from N(0, mean_variance I), unit variances, equal weights.
inline MixturePosterior init_mixture(Eigen::Index d, std::size_t k, std::uint64_t seed,
                                     double mean_variance = 0.1) {
  std::vector<DiagGaussian> comps;
  for (std::size_t c = 0; c < k; ++c) {
    RngStream rng(seed, 0x1000 + c);
    comps.emplace_back(std::sqrt(mean_variance) * rng.normal_vector(d), Vec::Ones(d));
  }
  return {std::move(comps), Vec::Zero(static_cast<Eigen::Index>(k))};
}

namespace detail {

inline MixturePosterior assemble(std::vector<DiagGaussian> comps, Vec logits) {
  // bypass validation so non-finite values surface in the fit loop
  MixturePosterior out(std::vector<DiagGaussian>(comps.size(),
                                                 DiagGaussian::isotropic(comps.front().dim(), 0.0, 1.0)),
                       Vec::Zero(logits.size()));
  for (std::size_t c = 0; c < comps.size(); ++c) out.component(c) = std::move(comps[c]);
  out.set_logits(std::move(logits));
  return out;
}

}  // namespace detail

/**
 * Serial mixture NGVI epoch. Draw i ~ Categorical(pi) and z0 from component i;
 * with delta_c = N(z0 | mu_c, Sigma_c) / q(z0), every component takes
 *   Sigma_c^-1 += beta delta_c hess h(z0),
 *   mu_c       -= beta Sigma_c,new delta_c grad h(z0),
 * and the relative logits rho_c = log(pi_c / pi_K) take
 *   rho_c -= beta (delta_c - delta_K) h(z0).
 * Logits are kept relative to the last component; softmax ignores the shift.
 * With mc_samples > 1 the increments are averaged.
 */
inline MixturePosterior mog_ngvi_serial_epoch(const MixturePosterior& q, const TargetModel& model,
                                              const OptimizerConfig& cfg, RngStream& rng,
                                              Batch batch = {}, StepStats* stats = nullptr) {
  const std::size_t k = q.size();
  const Eigen::Index d = q.dim();
  std::vector<Vec> d_mean(k, Vec::Zero(d)), d_var(k, Vec::Zero(d));
  Vec d_logit = Vec::Zero(static_cast<Eigen::Index>(k));
  const auto last = static_cast<Eigen::Index>(k - 1);
  for (std::size_t s = 0; s < cfg.mc_samples; ++s) {
    const auto draw = mog_sample(q, rng);
    const auto t = neg_elbo_terms(q, model, draw.z, batch);
    const Vec delta = responsibilities(q, draw.z);
    for (std::size_t c = 0; c < k; ++c) {
      const double dc = delta[static_cast<Eigen::Index>(c)];
      d_mean[c] += -dc * t.grad;
      d_var[c] += -0.5 * dc * t.curv;
      d_logit[static_cast<Eigen::Index>(c)] += -(dc - delta[last]) * t.h;
    }
  }
  const double inv = 1.0 / static_cast<double>(cfg.mc_samples);
  int clamps = 0;
  double grad_sq = 0.0;
  std::vector<DiagGaussian> comps;
  comps.reserve(k);
  for (std::size_t c = 0; c < k; ++c) {
    d_mean[c] *= inv;
    d_var[c] *= inv;
    grad_sq += d_mean[c].squaredNorm() + d_var[c].squaredNorm();
    comps.push_back(natural_gradient_update(q.component(c), d_mean[c], d_var[c], cfg.beta,
                                            cfg.variance_floor, clamps));
  }
  Vec rho = q.logits().array() - q.logits()[last];
  rho += cfg.beta * inv * d_logit;
  rho[last] = 0.0;
  detail::record(stats, grad_sq + (inv * d_logit).squaredNorm(), clamps);
  return detail::assemble(std::move(comps), std::move(rho));
}

enum class ComponentSchedule { forward, reverse, threaded };

struct ComponentUpdate {
  DiagGaussian component;
  double mean_neg_h = 0.0;      // MC estimate of E_c[-h]
  double mean_density_h = 0.0;  // MC estimate of E_c[N_c(z) h(z)], literal pi step only
  double grad_sq = 0.0;
  int clamps = 0;
};

/**
 * Update of one component from a frozen snapshot, with draws from that
 * component only:
 *   eta2_c += beta (1 / pi_c) dL/dsigma_c^2   (Sigma_c^-1 += beta E_c[hess h]),
 *   mu_c   += beta Sigma_c,new (1 / pi_c) dL/dmu_c.
 * Reads the snapshot, writes nothing shared, and consumes only `rng`.
 */
inline ComponentUpdate update_component(const MixturePosterior& snapshot, std::size_t c,
                                        const TargetModel& model, const OptimizerConfig& cfg,
                                        RngStream& rng, Batch batch) {
  const auto& comp = snapshot.component(c);
  const Eigen::Index d = comp.dim();
  Vec d_mean = Vec::Zero(d), d_var = Vec::Zero(d);
  ComponentUpdate out;
  for (std::size_t s = 0; s < cfg.mc_samples; ++s) {
    const Vec z = gauss_sample(comp, rng);
    const auto g = component_gradient_sample(snapshot, model, z, batch);
    d_mean += g.d_mean;
    d_var += g.d_var;
    out.mean_neg_h += g.neg_h;
    if (cfg.paper_literal_pi) out.mean_density_h += -std::exp(gauss_log_pdf(comp, z)) * g.neg_h;
  }
  const double inv = 1.0 / static_cast<double>(cfg.mc_samples);
  d_mean *= inv;
  d_var *= inv;
  out.mean_neg_h *= inv;
  out.mean_density_h *= inv;
  out.grad_sq = d_mean.squaredNorm() + d_var.squaredNorm();
  out.component =
      natural_gradient_update(comp, d_mean, d_var, cfg.beta, cfg.variance_floor, out.clamps);
  return out;
}

/**
 * Component-parallel mixture NGVI epoch. Each component is updated from the
 * epoch-start snapshot with its own stream (streams[c]); after the barrier the
 * relative logits take
 *   rho_c += beta (E_c[-h] - E_K[-h]),
 * estimated with the same per-component draws, with rho_K held at 0. With
 * cfg.paper_literal_pi the logit step is beta (E_c[N_c h] + E_K[N_K h]) instead.
 * A single component keeps its weight fixed.
 */
inline MixturePosterior mog_ngvi_parallel_epoch(const MixturePosterior& q,
                                                const TargetModel& model,
                                                const OptimizerConfig& cfg,
                                                std::span<RngStream> streams, Batch batch = {},
                                                StepStats* stats = nullptr,
                                                ComponentSchedule schedule =
                                                    ComponentSchedule::forward) {
  const std::size_t k = q.size();
  if (streams.size() != k) {
    throw std::invalid_argument("mog_ngvi_parallel_epoch: need one stream per component");
  }
  std::vector<ComponentUpdate> updates(k);
  auto run = [&](std::size_t c) {
    updates[c] = update_component(q, c, model, cfg, streams[c], batch);
  };
  if (schedule == ComponentSchedule::threaded && cfg.threads > 1 && k > 1) {
    const std::size_t workers = std::min(cfg.threads, k);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < k; c += workers) run(c);
      });
    }
    for (auto& t : pool) t.join();
  } else if (schedule == ComponentSchedule::reverse) {
    for (std::size_t c = k; c-- > 0;) run(c);
  } else {
    for (std::size_t c = 0; c < k; ++c) run(c);
  }

  int clamps = 0;
  double grad_sq = 0.0;
  std::vector<DiagGaussian> comps;
  comps.reserve(k);
  for (auto& u : updates) {
    clamps += u.clamps;
    grad_sq += u.grad_sq;
    comps.push_back(std::move(u.component));
  }
  const auto last = static_cast<Eigen::Index>(k - 1);
  Vec rho = q.logits().array() - q.logits()[last];
  for (std::size_t c = 0; c + 1 < k; ++c) {
    const double step = cfg.paper_literal_pi
                            ? updates[c].mean_density_h + updates[k - 1].mean_density_h
                            : updates[c].mean_neg_h - updates[k - 1].mean_neg_h;
    rho[static_cast<Eigen::Index>(c)] += cfg.beta * step;
    grad_sq += step * step;
  }
  rho[last] = 0.0;
  detail::record(stats, grad_sq, clamps);
  return detail::assemble(std::move(comps), std::move(rho));
}

enum class OptimizerKind { bbvi, ngvi, von, vogn, mog_serial, mog_parallel };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::bbvi: return "bbvi";
    case OptimizerKind::ngvi: return "ngvi";
    case OptimizerKind::von: return "von";
    case OptimizerKind::vogn: return "vogn";
    case OptimizerKind::mog_serial: return "mog-serial";
    case OptimizerKind::mog_parallel: return "mog-parallel";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  for (auto k : {OptimizerKind::bbvi, OptimizerKind::ngvi, OptimizerKind::von,
                 OptimizerKind::vogn, OptimizerKind::mog_serial, OptimizerKind::mog_parallel}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

inline bool is_mixture_optimizer(OptimizerKind k) {
  return k == OptimizerKind::mog_serial || k == OptimizerKind::mog_parallel;
}

struct ComponentSnapshot {
  Vec mean;
  Vec variance;
  double weight;
};

struct RunRecord {
  std::size_t iteration = 0;
  double elbo = 0.0;
  double elbo_se = 0.0;
  double grad_norm = 0.0;
  int clamps = 0;  // since the previous record
  double wall_ms = 0.0;
  std::vector<ComponentSnapshot> components;
};

enum class FitStatus { completed, early_stopped, nan_abort };

inline std::string to_string(FitStatus s) {
  switch (s) {
    case FitStatus::completed: return "completed";
    case FitStatus::early_stopped: return "early_stopped";
    case FitStatus::nan_abort: return "nan_abort";
  }
  return "?";
}

struct FitResult {
  MixturePosterior posterior;
  std::vector<RunRecord> records;
  FitStatus status = FitStatus::completed;
  std::size_t epochs_run = 0;
  int total_clamps = 0;
  std::string diagnostic;
};

namespace detail {

inline bool all_finite(const MixturePosterior& q) {
  for (const auto& c : q.components()) {
    if (!c.mean.allFinite() || !c.variance.allFinite()) return false;
  }
  return q.logits().allFinite();
}

inline std::vector<ComponentSnapshot> snapshot(const MixturePosterior& q) {
  std::vector<ComponentSnapshot> out;
  const Vec pi = q.logits().allFinite() ? q.weights() : q.logits();
  for (std::size_t c = 0; c < q.size(); ++c) {
    out.push_back({q.component(c).mean, q.component(c).variance,
                   pi[static_cast<Eigen::Index>(c)]});
  }
  return out;
}

}  // namespace detail

// Stream ids used by fit; the optimizer streams never feed the ELBO logging.
inline constexpr std::uint64_t kMainStream = 0;
inline constexpr std::uint64_t kBatchStream = 1;
inline constexpr std::uint64_t kLogStream = 2;
inline constexpr std::uint64_t kComponentStreamBase = 16;
inline constexpr std::uint64_t kLogComponentStreamBase = 4096;

/**
 * Runs cfg.epochs epochs (one optimizer step per minibatch) and logs a
 * RunRecord every cfg.log_every epochs. Gaussian optimizers need K == 1.
 * Stops early when enabled and the mean logged ELBO over the last 100
 * iterations moved by less than 1e-6 relative to the 100 before. A
 * non-finite parameter aborts the run, keeping the last finite posterior and
 * appending a diagnostic record.
 */
inline FitResult fit(const MixturePosterior& q0, const TargetModel& model,
                     const OptimizerConfig& cfg, OptimizerKind kind) {
  cfg.validate();
  detail::require_dim(model.dim(), q0.dim(), "fit");
  if (!is_mixture_optimizer(kind) && q0.size() != 1) {
    throw std::invalid_argument("fit: " + to_string(kind) + " needs a single Gaussian");
  }

  FitResult result;
  result.posterior = q0;
  const auto start = std::chrono::steady_clock::now();

  RngStream rng(cfg.seed, kMainStream);
  RngStream log_rng(cfg.seed, kLogStream);
  auto streams = component_streams(cfg.seed, q0.size(), kComponentStreamBase);
  auto log_streams = component_streams(cfg.seed, q0.size(), kLogComponentStreamBase);
  Minibatcher batcher(model.num_data(), cfg.minibatch, RngStream(cfg.seed, kBatchStream));

  const std::size_t window = std::max<std::size_t>(1, (100 + cfg.log_every - 1) / cfg.log_every);
  std::vector<double> logged;
  int clamps_since_log = 0;
  StepStats last;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (const auto& batch : batcher.epoch()) {
      const Batch b = batcher.full_batch() ? Batch{} : Batch(batch);
      StepStats stats;
      MixturePosterior next;
      const MixturePosterior& q = result.posterior;
      switch (kind) {
        case OptimizerKind::bbvi:
          next = detail::assemble({bbvi_step(q.component(0), model, cfg, rng, &stats)},
                                  q.logits());
          break;
        case OptimizerKind::ngvi:
          next = detail::assemble(
              {ngvi_meanfield_step(q.component(0), model, cfg, rng, b, &stats)}, q.logits());
          break;
        case OptimizerKind::von:
          next = detail::assemble({von_step(q.component(0), model, cfg, rng, b, &stats)},
                                  q.logits());
          break;
        case OptimizerKind::vogn:
          next = detail::assemble({vogn_step(q.component(0), model, cfg, rng, b, &stats)},
                                  q.logits());
          break;
        case OptimizerKind::mog_serial:
          next = mog_ngvi_serial_epoch(q, model, cfg, rng, b, &stats);
          break;
        case OptimizerKind::mog_parallel:
          next = mog_ngvi_parallel_epoch(q, model, cfg, streams, b, &stats,
                                         cfg.threads > 1 ? ComponentSchedule::threaded
                                                         : ComponentSchedule::forward);
          break;
      }
      clamps_since_log += stats.clamps;
      result.total_clamps += stats.clamps;
      last = stats;
      if (!detail::all_finite(next) || !std::isfinite(stats.grad_norm)) {
        RunRecord rec;
        rec.iteration = epoch;
        rec.elbo = std::numeric_limits<double>::quiet_NaN();
        rec.elbo_se = std::numeric_limits<double>::quiet_NaN();
        rec.grad_norm = stats.grad_norm;
        rec.clamps = clamps_since_log;
        rec.components = detail::snapshot(next);
        result.records.push_back(std::move(rec));
        result.status = FitStatus::nan_abort;
        result.diagnostic = "non-finite parameter after epoch " + std::to_string(epoch);
        result.epochs_run = epoch;
        return result;
      }
      result.posterior = std::move(next);
    }
    result.epochs_run = epoch;

    if (epoch % cfg.log_every == 0) {
      const EstimatorReport rep =
          cfg.elbo_estimator == ElboEstimator::naive
              ? elbo_naive(result.posterior, model, cfg.elbo_samples * result.posterior.size(),
                           log_rng)
              : elbo_entropy_trick(result.posterior, model, cfg.elbo_samples, log_streams);
      RunRecord rec;
      rec.iteration = epoch;
      rec.elbo = rep.value;
      rec.elbo_se = rep.standard_error();
      rec.grad_norm = last.grad_norm;
      rec.clamps = clamps_since_log;
      rec.wall_ms = cfg.record_wall_time
                        ? std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - start)
                              .count()
                        : 0.0;
      rec.components = detail::snapshot(result.posterior);
      result.records.push_back(std::move(rec));
      clamps_since_log = 0;
      logged.push_back(rep.value);

      if (cfg.early_stop && logged.size() >= 2 * window) {
        double recent = 0.0, previous = 0.0;
        for (std::size_t i = 0; i < window; ++i) {
          recent += logged[logged.size() - 1 - i];
          previous += logged[logged.size() - 1 - window - i];
        }
        recent /= static_cast<double>(window);
        previous /= static_cast<double>(window);
        if (std::abs(recent - previous) < 1e-6 * std::max(std::abs(previous), 1e-300)) {
          result.status = FitStatus::early_stopped;
          return result;
        }
      }
    }
  }
  return result;
}

}  // namespace ngvi
