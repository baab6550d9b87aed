#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ngvi/harness/bench.hpp"
#include "ngvi/harness/compare.hpp"
#include "ngvi/harness/experiment.hpp"

using namespace ngvi;
using namespace ngvi::harness;

namespace {

int run_fit(const std::string& config, const Overrides& ov) {
  const ExperimentConfig cfg = load_experiment(config, ov);
  const auto res = run_experiment(cfg);
  std::cout << "status " << to_string(res.fit.status) << ", " << res.fit.epochs_run
            << " epochs, artifacts in " << cfg.output.dir.string() << '\n';
  if (res.exit_code == exit_nan) std::cerr << "error: " << res.fit.diagnostic << '\n';
  return res.exit_code;
}

int run_bench_cmd(const std::string& config, const Overrides& ov) {
  const BenchConfig cfg = load_bench(config, ov);
  const auto res = run_bench(cfg);
  for (const auto& r : res.summary["ratios"]) {
    std::cout << r["problem"].get<std::string>() << " S=" << r["S"].get<std::size_t>()
              << " naive/entropy-trick variance ratio " << r["ratio"].dump() << '\n';
  }
  return exit_ok;
}

int run_compare(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
  const std::string csv = comparison_csv(compare_runs(dirs));
  if (out.empty()) {
    std::cout << csv;
  } else {
    atomic_write(out, csv);
  }
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Natural-gradient variational inference experiments"};
  app.require_subcommand(1);

  std::string config, out, optimizer, compare_out;
  std::optional<std::uint64_t> seed, k;
  std::vector<std::string> runs;

  auto* fit_cmd = app.add_subcommand("fit", "Fit a posterior and write run artifacts");
  fit_cmd->add_option("--config", config, "Experiment config (JSON)")->required();
  fit_cmd->add_option("--seed", seed, "Override optimizer.seed");
  fit_cmd->add_option("--out", out, "Override output.dir");
  fit_cmd->add_option("--optimizer", optimizer, "Override optimizer.name");
  fit_cmd->add_option("--k", k, "Override posterior.k");

  auto* bench_cmd = app.add_subcommand("bench-variance", "ELBO estimator variance benchmark");
  bench_cmd->add_option("--config", config, "Benchmark config (JSON)")->required();
  bench_cmd->add_option("--seed", seed, "Override bench.seed");
  bench_cmd->add_option("--out", out, "Override output.dir");

  auto* cmp_cmd = app.add_subcommand("compare", "Compare run directories against the first");
  cmp_cmd->add_option("--runs", runs, "Run directories, comma separated")
      ->required()
      ->delimiter(',');
  cmp_cmd->add_option("--out", compare_out, "Write the comparison CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_ok : exit_config;
  }

  Overrides ov;
  ov.seed = seed;
  if (!out.empty()) ov.out = out;
  if (!optimizer.empty()) ov.optimizer = optimizer;
  ov.k = k;

  try {
    if (*fit_cmd) return run_fit(config, ov);
    if (*bench_cmd) return run_bench_cmd(config, ov);
    return run_compare(runs, compare_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const SchemaError& e) {
    std::cerr << "compare error: " << e.what() << '\n';
    return exit_failure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_failure;
  }
}
