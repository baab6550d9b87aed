#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "ngvi/io.hpp"
#include "ngvi/models.hpp"
#include "ngvi/oracle.hpp"
#include "test_support.hpp"

namespace ngvi {
namespace {

using testing::rel_err;
using testing::vec;

Dataset small_logistic(std::size_t n, std::uint64_t seed) {
  return with_bias(make_synthetic_classification(n, seed, Layout::two_gaussians));
}

std::vector<std::unique_ptr<TargetModel>> model_zoo() {
  std::vector<std::unique_ptr<TargetModel>> out;
  out.push_back(std::make_unique<LogisticModel>(small_logistic(40, 3), 1.0));
  out.push_back(std::make_unique<LogisticModel>(make_logistic_1d(20, 1, 2.0), 0.5));
  Mat obs(3, 2);
  obs << 0.5, -1.0, 1.5, 0.2, -0.3, 0.8;
  out.push_back(std::make_unique<GaussianObservationModel>(obs, vec({0.7, 2.0}), 1.5));
  out.push_back(std::make_unique<BimodalModel>(Mat::Constant(1, 1, 2.0), 0.25, 0.5, 1.0));
  Mat obs2(2, 2);
  obs2 << 1.0, -0.5, 0.8, 0.3;
  out.push_back(std::make_unique<BimodalModel>(obs2, 0.6, 0.7, 2.0));
  return out;
}

TEST(LogJoint, LogisticAtZero) {
  const LogisticModel m(small_logistic(30, 0), 2.0);
  const double d = 3.0;
  EXPECT_NEAR(log_joint(m, Vec::Zero(3)),
              d / 2.0 * std::log(2.0 / (2 * std::numbers::pi)) - 30.0 * std::log(2.0), 1e-12);
}

TEST(LogJoint, ConjugateMatchesClosedForm) {
  Mat obs(2, 2);
  obs << 1.0, 2.0, -0.5, 0.3;
  const Vec noise = vec({0.5, 1.5});
  const GaussianObservationModel m(obs, noise, 0.8);
  const Vec z = vec({0.4, -0.2});
  double expected = 0.0;
  for (int j = 0; j < 2; ++j) {
    expected += -0.5 * std::log(2 * std::numbers::pi / 0.8) - 0.5 * 0.8 * z[j] * z[j];
    for (int n = 0; n < 2; ++n) {
      const double r = obs(n, j) - z[j];
      expected += -0.5 * std::log(2 * std::numbers::pi * noise[j]) - 0.5 * r * r / noise[j];
    }
  }
  EXPECT_NEAR(log_joint(m, z), expected, 1e-12);
}

TEST(LogJoint, AdditiveOverDisjointBatches) {
  const LogisticModel m(small_logistic(30, 5), 1.0);
  const Vec z = vec({0.3, -0.7, 1.1});
  std::vector<std::vector<std::size_t>> batches(4);
  for (std::size_t i = 0; i < 30; ++i) batches[i % 4].push_back(i);
  double sum = 0.0;
  for (const auto& b : batches) sum += log_joint(m, z, b);
  EXPECT_NEAR(sum, log_joint(m, z) + 3.0 * m.log_prior(z), 1e-10);
}

TEST(GradNegLoglik, ZeroAtOriginForSymmetricBalancedData) {
  Dataset data;
  data.features.resize(4, 2);
  data.features << 1.0, 2.0, -1.0, -2.0, 1.0, 2.0, -1.0, -2.0;
  data.labels = {1, 1, 0, 0};
  const LogisticModel m(data, 1.0);
  EXPECT_LT(grad_neg_loglik(m, Vec::Zero(2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GradNegLoglik, SaturatedLikelihoodVanishes) {
  Dataset data;
  data.features = Mat::Constant(1, 2, 1.0);
  data.labels = {1};
  const LogisticModel m(data, 1.0);
  const Vec z = Vec::Constant(2, 25.0);
  EXPECT_LT(grad_neg_loglik(m, z).cwiseAbs().maxCoeff(), 1e-20);
  EXPECT_LT(hess_diag_neg_loglik(m, z).cwiseAbs().maxCoeff(), 1e-20);
}

TEST(HessDiag, MaxCurvatureAtHalf) {
  const Dataset data = small_logistic(24, 2);
  const LogisticModel m(data, 1.0);
  const std::vector<std::size_t> batch = {0, 3, 7, 11, 20, 21};
  const Vec h = hess_diag_neg_loglik(m, Vec::Zero(3), batch);
  Vec expected = Vec::Zero(3);
  for (std::size_t i : batch) {
    expected += 0.25 * data.features.row(static_cast<Eigen::Index>(i)).transpose().cwiseAbs2();
  }
  expected *= 24.0 / 6.0;
  EXPECT_LT((h - expected).cwiseAbs().maxCoeff(), 1e-12);
}

// Finite-difference oracle on every model at 100 random points.
TEST(ModelDerivatives, MatchFiniteDifferences) {
  RngStream rng(17);
  for (const auto& model : model_zoo()) {
    const auto nll = [&](const Vec& z) { return -log_likelihood(*model, z); };
    const auto grad = [&](const Vec& z) { return grad_neg_loglik(*model, z); };
    for (int trial = 0; trial < 100; ++trial) {
      const Vec z = 1.5 * rng.normal_vector(model->dim());
      const Vec g = grad_neg_loglik(*model, z);
      const Vec fd = oracle::finite_diff_grad(nll, z, 1e-5);
      const Vec h = hess_diag_neg_loglik(*model, z);
      const Vec fd2 = oracle::finite_diff_jacobian(grad, z, 1e-5).diagonal();
      for (Eigen::Index j = 0; j < z.size(); ++j) {
        EXPECT_LT(rel_err(g[j], fd[j]), 1e-6) << model->kind() << " trial " << trial;
        EXPECT_LT(rel_err(h[j], fd2[j]), 1e-4) << model->kind() << " trial " << trial;
      }
    }
  }
}

TEST(GgnDiag, SingleExampleIsScaledSquaredGradient) {
  const LogisticModel m(small_logistic(10, 4), 1.0);
  const Vec z = vec({0.2, 0.5, -0.4});
  const std::vector<std::size_t> one = {6};
  const Vec g1 = grad_neg_loglik(m, z, one) / 10.0;  // undo the N/|M| scaling
  EXPECT_LT((ggn_diag(m, z, one) - 10.0 * g1.cwiseAbs2()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GgnDiag, NonNegativeAndLogisticHessianNonNegative) {
  RngStream rng(8);
  const auto zoo = model_zoo();
  for (int trial = 0; trial < 100; ++trial) {
    for (const auto& model : zoo) {
      const Vec z = 3.0 * rng.normal_vector(model->dim());
      EXPECT_GE(ggn_diag(*model, z).minCoeff(), 0.0);
      if (model->kind() == "logistic") {
        EXPECT_GE(hess_diag_neg_loglik(*model, z).minCoeff(), 0.0);
      }
    }
  }
}

TEST(GgnDiag, WithinFactorTwoOfHessianAtMap) {
  const Dataset data = small_logistic(200, 0);
  const LogisticModel m(data, 1.0);
  const Vec w = testing::logistic_map(data, 1.0);
  const Vec ggn = ggn_diag(m, w);
  const Vec hess = hess_diag_neg_loglik(m, w);
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    EXPECT_LE(ggn[j], 2.0 * hess[j]) << j;
    EXPECT_GE(ggn[j], 0.5 * hess[j]) << j;
  }
}

TEST(Minibatch, EpochAverageReproducesFullGradient) {
  const LogisticModel m(small_logistic(60, 6), 1.0);
  Minibatcher batcher(60, 12, RngStream(1, 1));
  const Vec z = vec({0.1, -0.3, 0.8});
  const Vec full = grad_neg_loglik(m, z);
  for (int e = 0; e < 3; ++e) {
    const auto batches = batcher.epoch();
    ASSERT_EQ(batches.size(), 5u);
    Vec avg = Vec::Zero(3);
    for (const auto& b : batches) avg += grad_neg_loglik(m, z, b);
    avg /= 5.0;
    EXPECT_LT((avg - full).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Minibatch, EpochIsAPartition) {
  Minibatcher batcher(23, 5, RngStream(2, 1));
  EXPECT_EQ(batcher.batches_per_epoch(), 5u);
  for (int e = 0; e < 4; ++e) {
    std::multiset<std::size_t> seen;
    for (const auto& b : batcher.epoch()) {
      EXPECT_LE(b.size(), 5u);
      seen.insert(b.begin(), b.end());
    }
    ASSERT_EQ(seen.size(), 23u);
    std::size_t expect = 0;
    for (std::size_t i : seen) EXPECT_EQ(i, expect++);
  }
  EXPECT_THROW(Minibatcher(4, 5, RngStream(0)), std::invalid_argument);
  EXPECT_TRUE(Minibatcher(4, 0, RngStream(0)).full_batch());
}

TEST(ConjugateTarget, PosteriorIsRequestedGaussian) {
  const Vec mu = vec({1.0, -2.0});
  const Vec var = vec({0.3, 0.05});
  const auto model = make_conjugate_target(mu, var, 1.0);
  const auto post = oracle::conjugate_posterior(model).posterior;
  EXPECT_LT((post.mean - mu).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((post.variance - var).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(make_conjugate_target(mu, vec({2.0, 0.1}), 1.0), std::invalid_argument);
}

TEST(ConjugateTarget, LargePriorPrecisionCollapsesToPrior) {
  Mat obs(1, 1);
  obs << 3.0;
  for (double lambda : {1e3, 1e6, 1e9}) {
    const GaussianObservationModel m(obs, Vec::Constant(1, 1.0), lambda);
    const auto post = oracle::conjugate_posterior(m).posterior;
    EXPECT_NEAR(post.mean[0], 0.0, 10.0 / lambda);
    EXPECT_NEAR(post.variance[0] * lambda, 1.0, 10.0 / lambda);
  }
}

TEST(ConjugateTarget, QuadratureEvidenceMatchesClosedForm) {
  const auto model = make_conjugate_target(vec({0.7}), vec({0.4}), 1.0);
  const auto exact = oracle::conjugate_posterior(model);
  const auto grid = oracle::grid_for(exact.posterior);
  EXPECT_NEAR(oracle::quad_log_evidence(model, grid), exact.log_evidence, 1e-6);
}

TEST(BimodalModel, ExactPosteriorIntegratesAgainstJoint) {
  const BimodalModel m(Mat::Constant(1, 1, 2.0), 0.25, 0.5, 1.0);
  const auto post = *m.exact_posterior();
  const auto grid = oracle::grid_for(post);
  const double log_ev = oracle::quad_log_evidence(m, grid);
  for (double z : {-2.0, -1.6, 0.0, 0.4, 1.6, 2.5}) {
    const Vec zz = Vec::Constant(1, z);
    EXPECT_NEAR(mog_log_pdf(post, zz), log_joint(m, zz) - log_ev, 1e-8) << z;
  }
}

TEST(SyntheticData, DeterministicBytes) {
  for (auto layout : {Layout::two_gaussians, Layout::two_moons, Layout::xor_blobs}) {
    EXPECT_EQ(dataset_to_csv(make_synthetic_classification(100, 7, layout)),
              dataset_to_csv(make_synthetic_classification(100, 7, layout)));
    EXPECT_NE(dataset_to_csv(make_synthetic_classification(100, 7, layout)),
              dataset_to_csv(make_synthetic_classification(100, 8, layout)));
  }
}

TEST(SyntheticData, LabelBalance) {
  for (auto layout : {Layout::two_gaussians, Layout::two_moons, Layout::xor_blobs}) {
    for (std::size_t n : {2u, 101u, 200u}) {
      const auto data = make_synthetic_classification(n, 0, layout);
      const double ones = std::accumulate(data.labels.begin(), data.labels.end(), 0.0);
      EXPECT_NEAR(ones / static_cast<double>(n), 0.5, 0.05);
    }
  }
}

TEST(SyntheticData, TwoGaussiansLinearlyClassifiable) {
  const auto train = small_logistic(200, 0);
  const auto test = small_logistic(1000, 1);
  const Vec w = testing::logistic_map(train, 1.0);
  EXPECT_GT(testing::accuracy(test, w), 0.95);
}

TEST(SyntheticData, XorNeedsQuadraticFeatures) {
  const auto raw = with_bias(make_synthetic_classification(400, 0, Layout::xor_blobs));
  const auto quad =
      with_bias(make_synthetic_classification(400, 0, Layout::xor_blobs, true));
  const auto raw_test = with_bias(make_synthetic_classification(1000, 1, Layout::xor_blobs));
  const auto quad_test =
      with_bias(make_synthetic_classification(1000, 1, Layout::xor_blobs, true));
  EXPECT_EQ(quad.num_features(), 6);
  EXPECT_LT(testing::accuracy(raw_test, testing::logistic_map(raw, 1.0)), 0.75);
  EXPECT_GT(testing::accuracy(quad_test, testing::logistic_map(quad, 1.0)), 0.95);
}

TEST(Layout, ParseRoundTrip) {
  for (auto layout : {Layout::two_gaussians, Layout::two_moons, Layout::xor_blobs}) {
    EXPECT_EQ(parse_layout(to_string(layout)), layout);
  }
  EXPECT_THROW(parse_layout("spiral"), std::invalid_argument);
}

TEST(Dataset, Validation) {
  Dataset empty;
  EXPECT_THROW(empty.validate(), std::invalid_argument);
  Dataset bad;
  bad.features = Mat::Zero(2, 1);
  bad.labels = {0};
  EXPECT_THROW(bad.validate(), DimensionError);
  bad.labels = {0, 2};
  EXPECT_THROW(LogisticModel(bad, 1.0), std::invalid_argument);
}

}  // namespace
}  // namespace ngvi
