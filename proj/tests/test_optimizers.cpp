#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "ngvi/optimizers.hpp"
#include "ngvi/oracle.hpp"
#include "test_support.hpp"

namespace ngvi {
namespace {

using testing::vec;

// Exact ELBO gradient wrt (mu, Sigma) for Gaussian observations, by hand.
oracle::GaussianElboGradient conjugate_grad(const GaussianObservationModel& m,
                                            const DiagGaussian& q) {
  const double lambda = m.prior_precision();
  const auto n = static_cast<double>(m.num_data());
  const Vec s2 = m.noise_variance();
  const Vec sum_y = m.observations().colwise().sum().transpose();
  Vec d_mean = -lambda * q.mean - (n * q.mean - sum_y).cwiseQuotient(s2);
  Vec d_var = -0.5 * (Vec::Constant(q.dim(), lambda) + n * s2.cwiseInverse()) +
              0.5 * q.variance.cwiseInverse();
  return {d_mean, d_var};
}

DiagGaussian exact_step(const DiagGaussian& q, const oracle::GaussianElboGradient& g,
                        double beta) {
  int clamps = 0;
  return natural_gradient_update(q, g.d_mean, g.d_var, beta, 1e-8, clamps);
}

// Gives NaN gradients once any coordinate leaves [-5, 5].
class ExplodingModel final : public TargetModel {
 public:
  ExplodingModel() : TargetModel(1.0) {}
  std::string kind() const override { return "exploding"; }
  Eigen::Index dim() const override { return 1; }
  std::size_t num_data() const override { return 1; }
  double datum_log_lik(std::size_t, const Vec& z) const override { return 10.0 * z[0]; }
  void datum_neg_grad(std::size_t, const Vec& z, Vec& out) const override {
    out = Vec::Constant(1, std::abs(z[0]) > 5.0 ? std::numeric_limits<double>::quiet_NaN()
                                                : -10.0);
  }
  void datum_neg_hess_diag(std::size_t, const Vec&, Vec& out) const override {
    out = Vec::Zero(1);
  }
};

// Likelihood constant in z; the optimum is the prior and the ELBO converges.
class ConstantLikelihoodModel final : public TargetModel {
 public:
  ConstantLikelihoodModel() : TargetModel(1.0) {}
  std::string kind() const override { return "constant"; }
  Eigen::Index dim() const override { return 2; }
  std::size_t num_data() const override { return 3; }
  double datum_log_lik(std::size_t, const Vec&) const override { return -1.0; }
  void datum_neg_grad(std::size_t, const Vec& z, Vec& out) const override {
    out = Vec::Zero(z.size());
  }
  void datum_neg_hess_diag(std::size_t, const Vec& z, Vec& out) const override {
    out = Vec::Zero(z.size());
  }
};

LogisticModel two_gaussians_model(std::size_t n = 200, std::uint64_t seed = 0) {
  return LogisticModel(with_bias(make_synthetic_classification(n, seed, Layout::two_gaussians)),
                       1.0);
}

BimodalModel bimodal() { return BimodalModel(Mat::Constant(1, 1, 2.0), 0.25, 0.5, 1.0); }

void expect_same(const MixturePosterior& a, const MixturePosterior& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t c = 0; c < a.size(); ++c) {
    EXPECT_EQ(a.component(c).mean, b.component(c).mean) << c;
    EXPECT_EQ(a.component(c).variance, b.component(c).variance) << c;
  }
  EXPECT_EQ(a.logits(), b.logits());
}

TEST(NaturalGradientUpdate, ZeroGradientIsFixedPoint) {
  const DiagGaussian q(vec({0.3, -1.0}), vec({0.5, 2.0}));
  int clamps = 0;
  const auto out = natural_gradient_update(q, Vec::Zero(2), Vec::Zero(2), 0.7, 1e-8, clamps);
  EXPECT_EQ(out.mean, q.mean);
  EXPECT_LT((out.variance - q.variance).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(clamps, 0);
}

TEST(NaturalGradientUpdate, ClampsAndFlags) {
  const DiagGaussian q(vec({0.0}), vec({1.0}));
  int clamps = 0;
  const auto out = natural_gradient_update(q, vec({0.0}), vec({10.0}), 1.0, 1e-8, clamps);
  EXPECT_EQ(clamps, 1);
  EXPECT_DOUBLE_EQ(out.variance[0], 1e-8);
}

TEST(NgviMeanField, OneStepFromPriorLandsOnPosterior) {
  Mat y(3, 2);
  y << 0.5, 1.0, 1.5, -0.2, 0.1, 0.4;
  const GaussianObservationModel m(y, vec({0.5, 2.0}), 1.3);
  const auto post = oracle::conjugate_posterior(m).posterior;
  const DiagGaussian prior = m.prior();
  const auto out = exact_step(prior, conjugate_grad(m, prior), 1.0);
  EXPECT_LT((out.variance.cwiseInverse() - post.variance.cwiseInverse()).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_LT((out.mean - post.mean).cwiseAbs().maxCoeff(), 1e-12);
  // and the hand gradient agrees with the quadrature oracle on a d = 2 grid
  const auto quad = oracle::quad_gaussian_elbo_grad(prior, m);
  const auto hand = conjugate_grad(m, prior);
  EXPECT_LT((quad.d_mean - hand.d_mean).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((quad.d_var - hand.d_var).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(NgviMeanField, QuadratureGradientsConvergeToPosterior) {
  const auto m = make_conjugate_target(vec({0.8}), vec({0.3}));
  const auto post = oracle::conjugate_posterior(m).posterior;
  DiagGaussian q(vec({-1.0}), vec({2.0}));
  int steps = 0;
  for (; steps < 1000; ++steps) {
    q = exact_step(q, oracle::quad_gaussian_elbo_grad(q, m), 0.1);
    if (std::abs(q.mean[0] - post.mean[0]) < 1e-7 &&
        std::abs(q.variance[0] - post.variance[0]) < 1e-7) {
      break;
    }
  }
  EXPECT_LT(steps, 1000);
  EXPECT_NEAR(q.mean[0], 0.8, 1e-6);
  EXPECT_NEAR(q.variance[0], 0.3, 1e-6);
}

TEST(NgviMeanField, QuadratureElboIsMonotone) {
  const LogisticModel m(make_logistic_1d(20, 0, 2.0), 1.0);
  for (double beta : {0.1, 0.05}) {
    DiagGaussian q(vec({-1.5}), vec({2.0}));
    double prev = oracle::quad_elbo(q, m);
    for (int t = 0; t < 150; ++t) {
      q = exact_step(q, oracle::quad_gaussian_elbo_grad(q, m), beta);
      const double now = oracle::quad_elbo(q, m);
      EXPECT_GE(now, prev - 1e-9) << "beta " << beta << " step " << t;
      prev = now;
    }
  }
}

TEST(NgviMeanField, MonteCarloStepUsesBonnetPrice) {
  const auto m = make_conjugate_target(vec({0.4, -0.6}), vec({0.2, 0.5}));
  const DiagGaussian q(vec({0.1, 0.1}), vec({1.0, 0.7}));
  OptimizerConfig cfg;
  cfg.beta = 0.3;
  cfg.mc_samples = 200000;
  RngStream rng(3);
  // for a Gaussian target the gradient is linear in z, so the MC step is
  // close to the exact one
  const auto mc = ngvi_meanfield_step(q, m, cfg, rng);
  const auto exact = exact_step(q, conjugate_grad(m, q), 0.3);
  EXPECT_LT((mc.mean - exact.mean).cwiseAbs().maxCoeff(), 0.01);
  EXPECT_LT((mc.variance - exact.variance).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Bbvi, ConjugateTargetMean) {
  const auto m = make_conjugate_target(vec({0.7}), vec({0.2}));
  OptimizerConfig cfg;
  cfg.beta = 0.01;
  cfg.mc_samples = 64;
  RngStream rng(0);
  DiagGaussian q(vec({0.0}), vec({1.0}));
  for (int t = 0; t < 5000; ++t) q = bbvi_step(q, m, cfg, rng);
  EXPECT_NEAR(q.mean[0], 0.7, 0.05);
}

TEST(Bbvi, StepIsPlainAscentOnMeanAndLogVariance) {
  const auto m = two_gaussians_model(40);
  const DiagGaussian q(vec({0.1, 0.2, 0.3}), vec({0.5, 0.6, 0.7}));
  OptimizerConfig cfg;
  cfg.beta = 0.05;
  cfg.mc_samples = 8;
  RngStream a(4), b(4);
  const auto est = score_function_grad(q, m, 8, a);
  const auto out = bbvi_step(q, m, cfg, b);
  EXPECT_LT((out.mean - (q.mean + 0.05 * est.d_mean)).cwiseAbs().maxCoeff(), 1e-15);
  const Vec log_var = q.variance.array().log().matrix() + 0.05 * est.d_log_var;
  EXPECT_LT((out.variance.array().log().matrix() - log_var).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Bbvi, ElboTrendIncreases) {
  const auto m = two_gaussians_model(100);
  OptimizerConfig cfg;
  cfg.beta = 0.01;
  cfg.mc_samples = 16;
  cfg.epochs = 1000;
  cfg.elbo_samples = 8;
  const auto r = fit(MixturePosterior(DiagGaussian(vec({0, 0, 0}), vec({1, 1, 1}))), m, cfg,
                     OptimizerKind::bbvi);
  ASSERT_EQ(r.records.size(), 1000u);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 100; ++i) {
    first += r.records[i].elbo;
    last += r.records[r.records.size() - 1 - i].elbo;
  }
  EXPECT_GT(last, first);
}

TEST(Von, BetaOneSetsPrecisionToCurvature) {
  const auto m = two_gaussians_model(50);
  const DiagGaussian q(vec({0.2, 0.4, 0.1}), vec({0.3, 0.3, 0.3}));
  OptimizerConfig cfg;
  cfg.beta = 1.0;
  RngStream a(9), b(9);
  const Vec z0 = gauss_sample(q, a);
  const auto out = von_step(q, m, cfg, b);
  const Vec expected = hess_diag_neg_loglik(m, z0) + Vec::Constant(3, 1.0);
  EXPECT_LT((out.variance.cwiseInverse() - expected).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Von, GaussianTargetFixedPointPrecision) {
  Mat y(4, 1);
  y << 0.3, 0.9, -0.2, 0.5;
  const GaussianObservationModel m(y, vec({0.7}), 2.0);
  const auto post = oracle::conjugate_posterior(m).posterior;
  OptimizerConfig cfg;
  cfg.beta = 0.5;
  RngStream rng(1);
  DiagGaussian q(vec({0.0}), vec({5.0}));
  double mean_sum = 0.0;
  for (int t = 0; t < 4000; ++t) {
    q = von_step(q, m, cfg, rng);
    if (t >= 2000) mean_sum += q.mean[0];
  }
  EXPECT_NEAR(q.variance[0], post.variance[0], 1e-14);
  EXPECT_NEAR(mean_sum / 2000.0, post.mean[0], 0.01);
}

TEST(Vogn, MatchesVonWhenCurvatureIsHessian) {
  const auto m = two_gaussians_model(60);
  OptimizerConfig cfg;
  cfg.beta = 0.1;
  RngStream a(5), b(5);
  DiagGaussian qa(vec({0, 0, 0}), vec({1, 1, 1})), qb = qa;
  for (int t = 0; t < 50; ++t) {
    qa = von_step(qa, m, cfg, a);
    qb = variational_newton_step(qb, m, cfg, b, {}, nullptr,
                                 [](const TargetModel& mm, const Vec& z, Batch bb) {
                                   return hess_diag_neg_loglik(mm, z, bb);
                                 });
  }
  EXPECT_EQ(qa.mean, qb.mean);
  EXPECT_EQ(qa.variance, qb.variance);
}

TEST(Vogn, PrecisionStaysAboveLambda) {
  const auto m = two_gaussians_model(100);
  OptimizerConfig cfg;
  cfg.beta = 0.3;
  cfg.minibatch = 10;
  RngStream rng(2);
  Minibatcher batcher(100, 10, RngStream(2, 1));
  DiagGaussian q(vec({0, 0, 0}), vec({1, 1, 1}));
  for (int e = 0; e < 50; ++e) {
    for (const auto& b : batcher.epoch()) {
      q = vogn_step(q, m, cfg, rng, b);
      EXPECT_GE(q.variance.cwiseInverse().minCoeff(), 1.0 - 1e-12);
    }
  }
}

TEST(VonVogn, TwoGaussiansAccuracy) {
  const auto m = two_gaussians_model(200, 0);
  const auto test = with_bias(make_synthetic_classification(1000, 1, Layout::two_gaussians));
  OptimizerConfig cfg;
  cfg.epochs = 500;
  cfg.beta = 0.1;
  cfg.log_every = 100;
  const MixturePosterior q0(DiagGaussian(vec({0, 0, 0}), vec({1, 1, 1})));
  const auto von = fit(q0, m, cfg, OptimizerKind::von);
  const auto vogn = fit(q0, m, cfg, OptimizerKind::vogn);
  const double acc_von = testing::accuracy(test, von.posterior.component(0).mean);
  const double acc_vogn = testing::accuracy(test, vogn.posterior.component(0).mean);
  EXPECT_GE(acc_von, 0.9);
  EXPECT_NEAR(acc_vogn, acc_von, 0.05);
}

TEST(NegElboTerms, DerivativesMatchFiniteDifferences) {
  const auto m = two_gaussians_model(30);
  const MixturePosterior q({DiagGaussian(vec({0.1, 0.5, 0.2}), vec({0.4, 0.3, 0.5})),
                            DiagGaussian(vec({-0.3, 0.9, 0.6}), vec({0.6, 0.2, 0.3}))},
                           vec({0.2, 0.0}));
  RngStream rng(1);
  for (int t = 0; t < 20; ++t) {
    const Vec z = mog_sample(q, rng).z;
    const auto terms = neg_elbo_terms(q, m, z);
    const auto h = [&](const Vec& x) { return neg_elbo_terms(q, m, x).h; };
    const Vec fd = oracle::finite_diff_grad(h, z, 1e-5);
    const Vec fd2 = oracle::finite_diff_second(h, z, 1e-4);
    for (Eigen::Index j = 0; j < 3; ++j) {
      EXPECT_LT(testing::rel_err(terms.grad[j], fd[j]), 1e-6);
      EXPECT_LT(testing::rel_err(terms.curv[j], fd2[j]), 1e-4);
    }
  }
}

// One serial K = 1 step against VON from the same draw: equal precisions, and
// the means differ by exactly beta Sigma_new (P - lambda)(z0 - mu).
TEST(MogSerial, SingleComponentReducesToVon) {
  const auto m = two_gaussians_model(50);
  const DiagGaussian g(vec({0.2, 0.4, -0.1}), vec({0.3, 0.5, 0.8}));
  OptimizerConfig cfg;
  cfg.beta = 0.2;
  RngStream a(7), b(7), c(7);
  const Vec z0 = gauss_sample(g, c);
  const auto von = von_step(g, m, cfg, a);
  const auto serial = mog_ngvi_serial_epoch(MixturePosterior(g), m, cfg, b).component(0);
  EXPECT_LT((serial.variance - von.variance).cwiseAbs().maxCoeff(), 1e-14);
  const Vec gap = cfg.beta * von.variance.cwiseProduct(
                                 (g.precision().array() - 1.0).matrix().cwiseProduct(z0 - g.mean));
  EXPECT_LT((serial.mean - von.mean - gap).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(MogSerial, SingleComponentMatchesVonPrecisionOnGaussianTarget) {
  Mat y(2, 1);
  y << 0.4, 1.0;
  const GaussianObservationModel m(y, vec({0.5}), 1.0);
  OptimizerConfig cfg;
  cfg.beta = 0.1;
  RngStream a(3), b(3);
  DiagGaussian qv(vec({0.0}), vec({1.0}));
  MixturePosterior qs(qv);
  for (int t = 0; t < 200; ++t) {
    qv = von_step(qv, m, cfg, a);
    qs = mog_ngvi_serial_epoch(qs, m, cfg, b);
    EXPECT_NEAR(qs.component(0).variance[0], qv.variance[0], 1e-13);
  }
}

TEST(MogParallel, SingleComponentMatchesSerialBitwise) {
  const auto m = two_gaussians_model(40);
  OptimizerConfig cfg;
  cfg.beta = 0.05;
  MixturePosterior qs(DiagGaussian(vec({0.1, -0.2, 0.3}), vec({1, 1, 1})));
  MixturePosterior qp = qs;
  RngStream serial_rng(11, 16);
  std::vector<RngStream> streams = {RngStream(11, 16)};
  for (int t = 0; t < 100; ++t) {
    qs = mog_ngvi_serial_epoch(qs, m, cfg, serial_rng);
    qp = mog_ngvi_parallel_epoch(qp, m, cfg, streams);
  }
  expect_same(qs, qp);
}

TEST(MogParallel, ScheduleDoesNotChangeResult) {
  const auto m = bimodal();
  OptimizerConfig cfg;
  cfg.beta = 0.05;
  cfg.threads = 3;
  const auto q0 = init_mixture(1, 4, 2);
  for (auto sched : {ComponentSchedule::reverse, ComponentSchedule::threaded}) {
    MixturePosterior a = q0, b = q0;
    auto sa = component_streams(5, 4, 16);
    auto sb = component_streams(5, 4, 16);
    for (int t = 0; t < 200; ++t) {
      a = mog_ngvi_parallel_epoch(a, m, cfg, sa, {}, nullptr, ComponentSchedule::forward);
      b = mog_ngvi_parallel_epoch(b, m, cfg, sb, {}, nullptr, sched);
    }
    expect_same(a, b);
  }
}

TEST(MogParallel, MirroredStreamsPreserveSymmetry) {
  const auto m = bimodal();
  OptimizerConfig cfg;
  cfg.beta = 0.02;
  MixturePosterior q({DiagGaussian(vec({0.3}), vec({1.0})), DiagGaussian(vec({-0.3}), vec({1.0}))},
                     vec({0.0, 0.0}));
  std::vector<RngStream> streams = {RngStream(4, 16), RngStream(4, 16, true)};
  for (int t = 0; t < 2000; ++t) {
    q = mog_ngvi_parallel_epoch(q, m, cfg, streams);
    ASSERT_NEAR(q.component(0).mean[0], -q.component(1).mean[0], 1e-10) << t;
    ASSERT_NEAR(q.component(0).variance[0], q.component(1).variance[0], 1e-10) << t;
    ASSERT_NEAR(q.weights()[0], 0.5, 1e-10) << t;
  }
}

TEST(MogSerial, MirroredSeedsMirrorTheRun) {
  const auto m = bimodal();
  OptimizerConfig cfg;
  cfg.beta = 0.02;
  const MixturePosterior q0({DiagGaussian(vec({0.3}), vec({1.0})),
                             DiagGaussian(vec({-0.3}), vec({1.0}))},
                            vec({0.0, 0.0}));
  MixturePosterior a = q0, b = q0;
  RngStream ra(8), rb(8, 0, true);
  for (int t = 0; t < 2000; ++t) {
    a = mog_ngvi_serial_epoch(a, m, cfg, ra);
    b = mog_ngvi_serial_epoch(b, m, cfg, rb);
    ASSERT_NEAR(b.component(0).mean[0], -a.component(1).mean[0], 1e-10) << t;
    ASSERT_NEAR(b.component(1).mean[0], -a.component(0).mean[0], 1e-10) << t;
    ASSERT_NEAR(b.component(0).variance[0], a.component(1).variance[0], 1e-10) << t;
    ASSERT_NEAR(b.weights()[0], a.weights()[1], 1e-10) << t;
  }
}

TEST(MogParallel, PermutationEquivariant) {
  const auto m = two_gaussians_model(30);
  OptimizerConfig cfg;
  cfg.beta = 0.05;
  const auto q = init_mixture(3, 3, 1);
  const MixturePosterior perm({q.component(2), q.component(0), q.component(1)},
                              vec({q.logits()[2], q.logits()[0], q.logits()[1]}));
  auto s = component_streams(3, 3, 16);
  std::vector<RngStream> sp = {s[2], s[0], s[1]};
  MixturePosterior a = q, b = perm;
  for (int t = 0; t < 50; ++t) {
    a = mog_ngvi_parallel_epoch(a, m, cfg, s);
    b = mog_ngvi_parallel_epoch(b, m, cfg, sp);
  }
  const std::size_t map[] = {2, 0, 1};
  // logits are stored relative to the last component, so the softmax of a
  // permuted vector can differ in the last bit
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_LT((b.component(c).mean - a.component(map[c]).mean).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((b.component(c).variance - a.component(map[c]).variance).cwiseAbs().maxCoeff(),
              1e-12);
    EXPECT_NEAR(b.weights()[c], a.weights()[map[c]], 1e-12);
  }
}

TEST(MogOptimizers, IteratesStayValid) {
  const auto m = two_gaussians_model(50);
  OptimizerConfig cfg;
  cfg.beta = 0.5;
  cfg.epochs = 200;
  cfg.log_every = 1;
  cfg.elbo_samples = 2;
  for (auto kind : {OptimizerKind::mog_serial, OptimizerKind::mog_parallel}) {
    const auto r = fit(init_mixture(3, 3, 0), m, cfg, kind);
    for (const auto& rec : r.records) {
      double total = 0.0;
      for (const auto& c : rec.components) {
        EXPECT_GE(c.variance.minCoeff(), cfg.variance_floor);
        EXPECT_GE(c.weight, 0.0);
        EXPECT_LE(c.weight, 1.0);
        total += c.weight;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(MogOptimizers, ClampsAreCounted) {
  const auto m = two_gaussians_model(50);
  OptimizerConfig cfg;
  cfg.beta = 5.0;
  cfg.epochs = 20;
  const auto r = fit(init_mixture(3, 2, 0), m, cfg, OptimizerKind::mog_parallel);
  int logged = 0;
  for (const auto& rec : r.records) logged += rec.clamps;
  EXPECT_GT(r.total_clamps, 0);
  EXPECT_EQ(logged, r.total_clamps);
}

TEST(MogSerial, BimodalPosteriorRecovered) {
  const auto m = bimodal();
  OptimizerConfig cfg;
  cfg.beta = 0.01;
  cfg.epochs = 5000;
  cfg.log_every = 5000;
  const auto exact = *m.exact_posterior();
  for (auto kind : {OptimizerKind::mog_serial, OptimizerKind::mog_parallel}) {
    const auto r = fit(init_mixture(1, 2, 0), m, cfg, kind);
    const double kl = oracle::quad_kl_to_posterior(r.posterior, m, oracle::grid_for(exact));
    EXPECT_LT(kl, 0.05) << to_string(kind);
  }
}

TEST(InitMixture, Deterministic) {
  const auto a = init_mixture(3, 4, 9), b = init_mixture(3, 4, 9);
  expect_same(a, b);
  EXPECT_EQ(a.component(0).variance, Vec::Ones(3));
  EXPECT_NE(a.component(0).mean, a.component(1).mean);
  EXPECT_NEAR(a.weights()[2], 0.25, 1e-15);
}

TEST(Fit, ZeroEpochsReturnsInput) {
  const auto m = bimodal();
  OptimizerConfig cfg;
  cfg.epochs = 0;
  const auto q0 = init_mixture(1, 2, 3);
  const auto r = fit(q0, m, cfg, OptimizerKind::mog_parallel);
  expect_same(r.posterior, q0);
  EXPECT_TRUE(r.records.empty());
}

TEST(Fit, RerunIsBitwiseIdentical) {
  const auto m = two_gaussians_model(60);
  OptimizerConfig cfg;
  cfg.epochs = 30;
  cfg.minibatch = 20;
  cfg.log_every = 3;
  for (auto kind : {OptimizerKind::bbvi, OptimizerKind::ngvi, OptimizerKind::von,
                    OptimizerKind::vogn, OptimizerKind::mog_serial,
                    OptimizerKind::mog_parallel}) {
    const auto q0 = is_mixture_optimizer(kind) ? init_mixture(3, 3, 1) : init_mixture(3, 1, 1);
    const auto a = fit(q0, m, cfg, kind);
    const auto b = fit(q0, m, cfg, kind);
    ASSERT_EQ(a.records.size(), 10u) << to_string(kind);
    ASSERT_EQ(a.records.size(), b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      EXPECT_EQ(a.records[i].iteration, 3 * (i + 1));
      EXPECT_EQ(a.records[i].elbo, b.records[i].elbo);
      EXPECT_EQ(a.records[i].grad_norm, b.records[i].grad_norm);
      EXPECT_EQ(a.records[i].wall_ms, 0.0);
      for (std::size_t c = 0; c < a.records[i].components.size(); ++c) {
        EXPECT_EQ(a.records[i].components[c].mean, b.records[i].components[c].mean);
      }
    }
    expect_same(a.posterior, b.posterior);
  }
}

TEST(Fit, NanAbortsWithDiagnostic) {
  const ExplodingModel m;
  OptimizerConfig cfg;
  cfg.epochs = 1000;
  cfg.beta = 0.5;
  const auto r = fit(MixturePosterior(DiagGaussian(vec({0.0}), vec({1.0}))), m, cfg,
                     OptimizerKind::von);
  EXPECT_EQ(r.status, FitStatus::nan_abort);
  EXPECT_FALSE(r.diagnostic.empty());
  ASSERT_FALSE(r.records.empty());
  EXPECT_TRUE(std::isnan(r.records.back().elbo));
  EXPECT_LT(r.epochs_run, 1000u);
  EXPECT_TRUE(r.posterior.component(0).mean.allFinite());
}

TEST(Fit, EarlyStopOnConvergedElbo) {
  const ConstantLikelihoodModel m;
  OptimizerConfig cfg;
  cfg.epochs = 5000;
  cfg.beta = 0.2;
  cfg.early_stop = true;
  const auto r = fit(MixturePosterior(DiagGaussian(vec({1.0, -2.0}), vec({3.0, 0.2}))), m, cfg,
                     OptimizerKind::von);
  EXPECT_EQ(r.status, FitStatus::early_stopped);
  EXPECT_LT(r.epochs_run, 5000u);
  EXPECT_NEAR(r.records.back().elbo, -3.0, 1e-5);
}

TEST(Fit, RejectsIncompatibleSetup) {
  const auto m = bimodal();
  OptimizerConfig cfg;
  EXPECT_THROW(fit(init_mixture(1, 2, 0), m, cfg, OptimizerKind::von), std::invalid_argument);
  EXPECT_THROW(fit(init_mixture(2, 1, 0), m, cfg, OptimizerKind::von), DimensionError);
  cfg.beta = 0.0;
  EXPECT_THROW(fit(init_mixture(1, 1, 0), m, cfg, OptimizerKind::von), std::invalid_argument);
  EXPECT_THROW(parse_optimizer("adam"), std::invalid_argument);
  EXPECT_EQ(parse_optimizer("mog-parallel"), OptimizerKind::mog_parallel);
}

}  // namespace
}  // namespace ngvi
