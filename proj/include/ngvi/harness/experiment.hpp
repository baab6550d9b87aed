#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "ngvi/harness/config.hpp"
#include "ngvi/oracle.hpp"

namespace ngvi::harness {

enum ExitCode : int { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_nan = 3 };

inline constexpr std::uint64_t kPredictiveStream = 3;
inline constexpr const char* kRunSchema = "ngvi-run/1";

/// Model plus the raw (untransformed) data needed for predictions and plots.
struct Problem {
  std::shared_ptr<const TargetModel> model;
  std::optional<Dataset> train_raw, test_raw;
  bool bias = false;
  bool quadratic = false;

  Dataset featurize(const Dataset& raw) const {
    Dataset out = quadratic ? with_quadratic_features(raw) : raw;
    return bias ? with_bias(out) : out;
  }
};

inline Mat to_matrix(const std::vector<std::vector<double>>& rows) {
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return m;
}

inline Problem build_problem(const ModelSpec& m) {
  Problem p;
  if (m.kind == "bimodal") {
    p.model = std::make_shared<BimodalModel>(to_matrix(m.observations), m.noise_variance.front(),
                                             m.weight, m.lambda);
    return p;
  }
  if (m.kind == "conjugate") {
    p.model = std::make_shared<GaussianObservationModel>(
        to_matrix(m.observations), Eigen::Map<const Vec>(m.noise_variance.data(),
                                                         static_cast<Eigen::Index>(m.noise_variance.size())),
        m.lambda);
    return p;
  }
  switch (m.source) {
    case DataSource::synthetic:
      p.train_raw = make_synthetic_classification(m.n, m.data_seed, m.layout);
      if (m.test_n > 0) {
        p.test_raw = make_synthetic_classification(m.test_n, m.data_seed + 1, m.layout);
      }
      break;
    case DataSource::csv:
      p.train_raw = load_csv(m.path);
      if (!m.test_path.empty()) p.test_raw = load_csv(m.test_path);
      break;
    case DataSource::idx: {
      IdxOptions opts;
      opts.subset = m.subset;
      opts.seed = m.data_seed;
      opts.binary_zero_one = true;
      p.train_raw = load_idx(m.images, m.labels, opts);
      if (!m.test_images.empty()) {
        opts.subset = 0;
        p.test_raw = load_idx(m.test_images, m.test_labels, opts);
      }
      break;
    }
  }
  p.bias = m.bias;
  p.quadratic = m.quadratic;
  p.model = std::make_shared<LogisticModel>(p.featurize(*p.train_raw), m.lambda);
  return p;
}

/// Draws from q used for every predictive probability of one run.
inline Mat predictive_draws(const MixturePosterior& q, std::size_t samples, std::uint64_t seed) {
  RngStream rng(seed, kPredictiveStream);
  Mat z(static_cast<Eigen::Index>(samples), q.dim());
  for (std::size_t s = 0; s < samples; ++s) {
    z.row(static_cast<Eigen::Index>(s)) = mog_sample(q, rng).z.transpose();
  }
  return z;
}

/// E_q[sigmoid(x . z)] per row of the featurized data.
inline Vec predictive_probability(const Mat& features, const Mat& draws) {
  const Mat margins = features * draws.transpose();
  Vec out(features.rows());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    double acc = 0.0;
    for (Eigen::Index s = 0; s < draws.rows(); ++s) acc += sigmoid(margins(i, s));
    out[i] = acc / static_cast<double>(draws.rows());
  }
  return out;
}

inline double predictive_accuracy(const Dataset& featurized, const Mat& draws) {
  const Vec p = predictive_probability(featurized.features, draws);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < featurized.size(); ++i) {
    if ((p[static_cast<Eigen::Index>(i)] > 0.5 ? 1 : 0) == featurized.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(featurized.size());
}

/// x,y,prob on a grid x grid lattice over the padded bounding box of the data.
inline std::string boundary_csv(const Problem& p, const Mat& draws, std::size_t grid,
                                double padding) {
  const Mat& x = p.train_raw->features;
  const double x0 = x.col(0).minCoeff() - padding, x1 = x.col(0).maxCoeff() + padding;
  const double y0 = x.col(1).minCoeff() - padding, y1 = x.col(1).maxCoeff() + padding;
  const auto step = [&](double lo, double hi, std::size_t i) {
    return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(grid - 1);
  };
  std::ostringstream out;
  out << "x,y,prob\n";
  Dataset row;
  row.features.resize(static_cast<Eigen::Index>(grid), 2);
  row.labels.assign(grid, 0);
  for (std::size_t i = 0; i < grid; ++i) {
    const double gx = step(x0, x1, i);
    for (std::size_t j = 0; j < grid; ++j) {
      row.features(static_cast<Eigen::Index>(j), 0) = gx;
      row.features(static_cast<Eigen::Index>(j), 1) = step(y0, y1, j);
    }
    const Vec prob = predictive_probability(p.featurize(row).features, draws);
    for (std::size_t j = 0; j < grid; ++j) {
      out << format_double(gx) << ',' << format_double(row.features(static_cast<Eigen::Index>(j), 1))
          << ',' << format_double(prob[static_cast<Eigen::Index>(j)]) << '\n';
    }
  }
  return out.str();
}

/// Header iter,elbo,elbo_se,grad_norm,clamps,wall_ms then mu{c}_{j}, sigma{c}_{j}
/// (variances) and pi{c} per component.
inline std::string run_csv(const std::vector<RunRecord>& records, std::size_t k, Eigen::Index d) {
  std::ostringstream out;
  out << "iter,elbo,elbo_se,grad_norm,clamps,wall_ms";
  for (std::size_t c = 0; c < k; ++c) {
    for (Eigen::Index j = 0; j < d; ++j) out << ",mu" << c << '_' << j;
    for (Eigen::Index j = 0; j < d; ++j) out << ",sigma" << c << '_' << j;
    out << ",pi" << c;
  }
  out << '\n';
  for (const auto& r : records) {
    out << r.iteration << ',' << format_double(r.elbo) << ',' << format_double(r.elbo_se) << ','
        << format_double(r.grad_norm) << ',' << r.clamps << ',' << format_double(r.wall_ms);
    for (const auto& c : r.components) {
      for (Eigen::Index j = 0; j < d; ++j) out << ',' << format_double(c.mean[j]);
      for (Eigen::Index j = 0; j < d; ++j) out << ',' << format_double(c.variance[j]);
      out << ',' << format_double(c.weight);
    }
    out << '\n';
  }
  return out.str();
}

inline Json posterior_to_json(const MixturePosterior& q) {
  Json comps = Json::array();
  const Vec w = q.weights();
  for (std::size_t c = 0; c < q.size(); ++c) {
    const auto& g = q.component(c);
    comps.push_back({{"mean", std::vector<double>(g.mean.data(), g.mean.data() + g.dim())},
                     {"variance",
                      std::vector<double>(g.variance.data(), g.variance.data() + g.dim())},
                     {"weight", w[static_cast<Eigen::Index>(c)]}});
  }
  return comps;
}

// JSON has no NaN; non-finite values become null.
inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

struct ExperimentResult {
  FitResult fit;
  Json summary;
  int exit_code = exit_ok;
};

/// Runs one configured experiment and writes run.csv, summary.json and, for
/// 2-D data, boundary.csv and dataset.csv into cfg.output.dir.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const Problem p = build_problem(cfg.model);
  const Eigen::Index d = p.model->dim();
  const MixturePosterior q0 =
      init_mixture(d, cfg.posterior.k, cfg.opt.seed, cfg.posterior.init_mean_variance);

  ExperimentResult res;
  res.fit = fit(q0, *p.model, cfg.opt, cfg.optimizer);
  const FitResult& f = res.fit;
  const bool aborted = f.status == FitStatus::nan_abort;
  res.exit_code = aborted ? exit_nan : exit_ok;

  Json& s = res.summary;
  s["schema"] = kRunSchema;
  s["config"] = to_json(cfg);
  s["status"] = to_string(f.status);
  s["epochs_run"] = f.epochs_run;
  s["total_clamps"] = f.total_clamps;
  s["diagnostic"] = f.diagnostic;
  s["dim"] = d;
  s["k"] = f.posterior.size();
  s["model_kind"] = p.model->kind();
  if (!f.records.empty()) {
    s["final_elbo"] = number_or_null(f.records.back().elbo);
    s["final_elbo_se"] = number_or_null(f.records.back().elbo_se);
  } else {
    s["final_elbo"] = nullptr;
    s["final_elbo_se"] = nullptr;
  }
  s["posterior"] = posterior_to_json(f.posterior);

  Json metrics = Json::object();
  std::optional<std::string> boundary;
  if (!aborted && p.train_raw) {
    const Mat draws = predictive_draws(f.posterior, cfg.output.predictive_samples, cfg.opt.seed);
    metrics["train_accuracy"] = predictive_accuracy(p.featurize(*p.train_raw), draws);
    if (p.test_raw) metrics["test_accuracy"] = predictive_accuracy(p.featurize(*p.test_raw), draws);
    if (p.train_raw->num_features() == 2) {
      boundary = boundary_csv(p, draws, cfg.output.grid, cfg.output.padding);
    }
  }
  if (!aborted && d <= 2) {
    if (const auto* bm = dynamic_cast<const BimodalModel*>(p.model.get())) {
      if (auto exact = bm->exact_posterior()) {
        metrics["kl_to_exact"] =
            oracle::quad_kl_to_posterior(f.posterior, *bm, oracle::grid_for(*exact));
      }
    } else if (const auto* gm = dynamic_cast<const GaussianObservationModel*>(p.model.get())) {
      const auto exact = oracle::conjugate_posterior(*gm).posterior;
      metrics["kl_to_exact"] = oracle::quad_kl_to_posterior(f.posterior, *gm, oracle::grid_for(exact));
    }
  }
  s["metrics"] = metrics;

  const auto& dir = cfg.output.dir;
  std::filesystem::create_directories(dir);
  atomic_write(dir / "run.csv", run_csv(f.records, f.posterior.size(), d));
  if (boundary) {
    atomic_write(dir / "boundary.csv", *boundary);
    atomic_write(dir / "dataset.csv", dataset_to_csv(*p.train_raw));
  }
  atomic_write(dir / "summary.json", s.dump(2) + "\n");
  return res;
}

}  // namespace ngvi::harness
