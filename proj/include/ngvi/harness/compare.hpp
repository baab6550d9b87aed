#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ngvi/harness/experiment.hpp"

namespace ngvi::harness {

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunSummary {
  std::filesystem::path dir;
  std::string model_kind;
  Eigen::Index dim = 0;
  std::vector<DiagGaussian> components;
  std::vector<double> weights;
  std::optional<double> final_elbo;
  std::optional<double> test_accuracy;
  std::vector<double> elbo_trace;
};

inline RunSummary load_run(const std::filesystem::path& dir) {
  const auto path = dir / "summary.json";
  if (!std::filesystem::is_regular_file(path)) {
    throw SchemaError(dir.string() + ": no summary.json");
  }
  RunSummary r;
  r.dir = dir;
  try {
    const Json s = Json::parse(read_file(path));
    if (s.at("schema") != kRunSchema) throw SchemaError(path.string() + ": unknown schema");
    r.model_kind = s.at("model_kind").get<std::string>();
    r.dim = s.at("dim").get<Eigen::Index>();
    for (const auto& c : s.at("posterior")) {
      const auto m = c.at("mean").get<std::vector<double>>();
      const auto v = c.at("variance").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(m.size()) != r.dim ||
          static_cast<Eigen::Index>(v.size()) != r.dim) {
        throw SchemaError(path.string() + ": component dimension mismatch");
      }
      r.components.emplace_back(Eigen::Map<const Vec>(m.data(), r.dim),
                                Eigen::Map<const Vec>(v.data(), r.dim));
      r.weights.push_back(c.at("weight").get<double>());
    }
    if (!s.at("final_elbo").is_null()) r.final_elbo = s.at("final_elbo").get<double>();
    const auto& m = s.at("metrics");
    if (m.contains("test_accuracy")) r.test_accuracy = m.at("test_accuracy").get<double>();
  } catch (const Json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }

  const auto csv = dir / "run.csv";
  if (std::filesystem::is_regular_file(csv)) {
    std::istringstream in(read_file(csv));
    std::string line;
    std::getline(in, line);
    if (line.rfind("iter,elbo,", 0) != 0) throw SchemaError(csv.string() + ": bad header");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      r.elbo_trace.push_back(parse_double(split_csv_line(line).at(1)));
    }
  }
  return r;
}

/**
 * Assignment of run components to reference components minimizing the summed
 * squared mean distance: perm[c] is the run component matched to reference c.
 * Exhaustive over permutations, which is exact and cheap for the K used here.
 */
inline std::vector<std::size_t> best_permutation(const std::vector<DiagGaussian>& ref,
                                                 const std::vector<DiagGaussian>& run) {
  if (ref.size() != run.size()) throw SchemaError("component counts differ");
  if (ref.size() > 8) throw SchemaError("component matching supports K <= 8");
  std::vector<std::size_t> perm(ref.size()), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (std::size_t c = 0; c < ref.size(); ++c) {
      cost += (ref[c].mean - run[perm[c]].mean).squaredNorm();
    }
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Variance of the second half of an ELBO trace, where the run is closest to
// stationary.
inline double tail_variance(const std::vector<double>& trace) {
  const std::size_t start = trace.size() / 2;
  const auto n = static_cast<double>(trace.size() - start);
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  double mean = 0.0;
  for (std::size_t i = start; i < trace.size(); ++i) mean += trace[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = start; i < trace.size(); ++i) ss += (trace[i] - mean) * (trace[i] - mean);
  return ss / (n - 1.0);
}

struct ComparisonRow {
  std::string run;
  std::string metric;
  double value;
  double reference;
  double delta;
};

/// Each run after the first against the first: matched parameters, ELBO,
/// accuracy and the ratio of ELBO trace variances (run / reference).
inline std::vector<ComparisonRow> compare_runs(const std::vector<std::filesystem::path>& dirs) {
  if (dirs.size() < 2) throw std::invalid_argument("compare: need at least two runs");
  std::vector<RunSummary> runs;
  for (const auto& d : dirs) runs.push_back(load_run(d));
  const RunSummary& ref = runs.front();
  std::vector<ComparisonRow> rows;
  for (std::size_t r = 1; r < runs.size(); ++r) {
    const RunSummary& run = runs[r];
    const std::string name = run.dir.string();
    if (run.model_kind != ref.model_kind || run.dim != ref.dim ||
        run.components.size() != ref.components.size()) {
      throw SchemaError(name + ": not comparable with " + ref.dir.string() +
                        " (model, dimension or K differ)");
    }
    const auto add = [&](std::string metric, double value, double reference) {
      rows.push_back({name, std::move(metric), value, reference, value - reference});
    };
    if (run.final_elbo && ref.final_elbo) add("final_elbo", *run.final_elbo, *ref.final_elbo);
    if (run.test_accuracy && ref.test_accuracy) {
      add("test_accuracy", *run.test_accuracy, *ref.test_accuracy);
    }
    const auto perm = best_permutation(ref.components, run.components);
    double max_delta = 0.0;
    for (std::size_t c = 0; c < perm.size(); ++c) {
      const auto& a = run.components[perm[c]];
      const auto& b = ref.components[c];
      const std::string tag = std::to_string(c);
      for (Eigen::Index j = 0; j < ref.dim; ++j) {
        add("mu" + tag + "_" + std::to_string(j), a.mean[j], b.mean[j]);
        max_delta = std::max(max_delta, std::abs(rows.back().delta));
      }
      for (Eigen::Index j = 0; j < ref.dim; ++j) {
        add("sigma" + tag + "_" + std::to_string(j), a.variance[j], b.variance[j]);
        max_delta = std::max(max_delta, std::abs(rows.back().delta));
      }
      add("pi" + tag, run.weights[perm[c]], ref.weights[c]);
      max_delta = std::max(max_delta, std::abs(rows.back().delta));
    }
    rows.push_back({name, "max_param_delta", max_delta, 0.0, max_delta});
    const double vr = tail_variance(run.elbo_trace), vref = tail_variance(ref.elbo_trace);
    if (std::isfinite(vr) && std::isfinite(vref) && vref > 0.0) {
      rows.push_back({name, "elbo_variance_ratio", vr / vref, 1.0, vr / vref - 1.0});
    }
  }
  return rows;
}

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::ostringstream out;
  out << "run,metric,value,reference,delta\n";
  for (const auto& r : rows) {
    out << r.run << ',' << r.metric << ',' << format_double(r.value) << ','
        << format_double(r.reference) << ',' << format_double(r.delta) << '\n';
  }
  return out.str();
}

}  // namespace ngvi::harness
