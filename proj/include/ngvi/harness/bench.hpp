#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ngvi/harness/config.hpp"
#include "ngvi/harness/experiment.hpp"

namespace ngvi::harness {

struct BenchProblemSpec {
  std::string name;
  ModelSpec model;
  std::vector<std::vector<double>> means, variances;
  std::vector<double> weights;
};

struct BenchConfig {
  std::string source;
  std::vector<BenchProblemSpec> problems;
  std::vector<ElboEstimator> estimators;
  std::vector<std::uint64_t> samples;
  std::uint64_t replicates = 200;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};

inline MixturePosterior fixed_mixture(const BenchProblemSpec& p) {
  std::vector<DiagGaussian> comps;
  Vec logits(static_cast<Eigen::Index>(p.weights.size()));
  for (std::size_t c = 0; c < p.means.size(); ++c) {
    const auto& m = p.means[c];
    const auto& v = p.variances[c];
    comps.emplace_back(Eigen::Map<const Vec>(m.data(), static_cast<Eigen::Index>(m.size())),
                       Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
    logits[static_cast<Eigen::Index>(c)] = std::log(p.weights[c]);
  }
  return {std::move(comps), logits};
}

inline BenchConfig parse_bench(const ConfigDocument& doc, const Overrides& ov = {}) {
  const Section root(doc, doc.root(), "");
  root.allow_only({"bench", "output"});
  const Section b = root.section("bench");
  b.allow_only({"problems", "estimators", "samples", "replicates", "seed"});
  BenchConfig cfg;
  cfg.source = doc.file();

  const auto& probs = b.raw("problems");
  if (!probs.is_array() || probs.empty()) b.fail("problems", "expected a non-empty array");
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const Section ps(doc, probs[i], b.child("problems") + "/" + std::to_string(i));
    ps.allow_only({"name", "model", "mixture"});
    BenchProblemSpec spec;
    spec.name = ps.text("name");
    spec.model = parse_model(ps.section("model"));
    const Section mix = ps.section("mixture");
    mix.allow_only({"means", "variances", "weights"});
    spec.means = mix.rows("means");
    spec.variances = mix.rows("variances");
    spec.weights = mix.numbers("weights");
    if (spec.variances.size() != spec.means.size() ||
        spec.variances.front().size() != spec.means.front().size()) {
      mix.fail("variances", "shape must match means");
    }
    if (spec.weights.size() != spec.means.size()) mix.fail("weights", "one weight per component");
    double total = 0.0;
    for (double w : spec.weights) {
      if (!(w > 0.0)) mix.fail("weights", "must be > 0");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) mix.fail("weights", "must sum to 1");
    for (const auto& row : spec.variances) {
      for (double v : row) {
        if (!(v > 0.0)) mix.fail("variances", "must be > 0");
      }
    }
    if (static_cast<Eigen::Index>(spec.means.front().size()) != build_problem(spec.model).model->dim()) {
      mix.fail("means", "dimension does not match the model");
    }
    cfg.problems.push_back(std::move(spec));
  }

  if (b.has("estimators")) {
    const auto& est = b.raw("estimators");
    if (!est.is_array() || est.empty()) b.fail("estimators", "expected a non-empty array");
    for (const auto& e : est) {
      if (!e.is_string()) b.fail("estimators", "expected strings");
      try {
        cfg.estimators.push_back(parse_elbo_estimator(e.get<std::string>()));
      } catch (const std::invalid_argument& ex) {
        b.fail("estimators", ex.what());
      }
    }
  } else {
    cfg.estimators = {ElboEstimator::naive, ElboEstimator::entropy_trick};
  }
  if (b.has("samples")) {
    for (double s : b.numbers("samples")) {
      if (!(s >= 1.0) || s != std::floor(s)) b.fail("samples", "expected positive integers");
      cfg.samples.push_back(static_cast<std::uint64_t>(s));
    }
  } else {
    cfg.samples = {1, 2, 4, 8, 16};
  }
  cfg.replicates = b.count("replicates", 200);
  if (cfg.replicates < 2) b.fail("replicates", "must be >= 2");
  cfg.seed = ov.seed ? *ov.seed : b.count("seed", 0);

  if (root.has("output")) {
    const Section o = root.section("output");
    o.allow_only({"dir"});
    cfg.out = o.text("dir");
  }
  if (ov.out) cfg.out = *ov.out;
  if (cfg.out.empty()) {
    throw ConfigError(doc.file(), doc.line_of("/output"), "output.dir: missing (or pass --out)");
  }
  return cfg;
}

inline BenchConfig load_bench(const std::filesystem::path& path, const Overrides& ov = {}) {
  return parse_bench(ConfigDocument::load(path), ov);
}

struct BenchResult {
  BenchTable table;
  Json summary;
};

/// Variance of each estimator's replicates and the naive / entropy-trick ratio
/// per (problem, S). Writes bench.csv, bench_summary.csv and bench_summary.json.
inline BenchResult run_bench(const BenchConfig& cfg) {
  std::vector<BenchProblem> problems;
  for (const auto& p : cfg.problems) {
    problems.push_back({p.name, build_problem(p.model).model, fixed_mixture(p)});
  }
  const std::vector<std::size_t> grid(cfg.samples.begin(), cfg.samples.end());
  BenchResult res;
  res.table = variance_bench(problems, cfg.estimators, grid, cfg.replicates, cfg.seed);

  Json ratios = Json::array();
  for (const auto& p : cfg.problems) {
    for (std::size_t s : grid) {
      const auto* naive = res.table.find(to_string(ElboEstimator::naive), p.name, s);
      const auto* et = res.table.find(to_string(ElboEstimator::entropy_trick), p.name, s);
      if (naive && et) {
        ratios.push_back({{"problem", p.name},
                          {"S", s},
                          {"naive_variance", naive->variance},
                          {"entropy_trick_variance", et->variance},
                          {"ratio", number_or_null(naive->variance / et->variance)}});
      }
    }
  }
  Json problems_json = Json::array();
  for (const auto& p : cfg.problems) {
    problems_json.push_back({{"name", p.name},
                             {"model", model_to_json(p.model)},
                             {"mixture",
                              {{"means", p.means}, {"variances", p.variances}, {"weights", p.weights}}}});
  }
  Json estimators = Json::array();
  for (auto e : cfg.estimators) estimators.push_back(to_string(e));
  res.summary["config"] = {{"bench",
                            {{"problems", problems_json},
                             {"estimators", estimators},
                             {"samples", cfg.samples},
                             {"replicates", cfg.replicates},
                             {"seed", cfg.seed}}},
                           {"output", {{"dir", cfg.out.string()}}}};
  res.summary["ratios"] = ratios;

  std::filesystem::create_directories(cfg.out);
  atomic_write(cfg.out / "bench.csv", res.table.rows_csv());
  atomic_write(cfg.out / "bench_summary.csv", res.table.cells_csv());
  atomic_write(cfg.out / "bench_summary.json", res.summary.dump(2) + "\n");
  return res;
}

}  // namespace ngvi::harness
