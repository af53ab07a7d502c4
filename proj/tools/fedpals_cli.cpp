#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedpals/harness.hpp"

namespace {

fedpals::ExperimentConfig load_config_arg(const std::string& arg) {
  // Accept either a preset name or a path to a JSON config.
  const auto names = fedpals::experiment_preset_names();
  for (const auto& n : names) {
    if (arg == n) return fedpals::experiment_preset(arg);
  }
  return fedpals::load_experiment_config(arg);
}

void apply_overrides(fedpals::ExperimentConfig& cfg, std::uint64_t seed_offset,
                     const std::string& output_dir) {
  if (seed_offset != 0) {
    for (auto& s : cfg.seeds) s += seed_offset;
  }
  if (!output_dir.empty()) cfg.output_dir = output_dir;
}

int run_simulate(const std::string& config_arg, std::uint64_t seed_offset,
                 const std::string& output_dir) {
  fedpals::ExperimentConfig cfg = load_config_arg(config_arg);
  apply_overrides(cfg, seed_offset, output_dir);
  // A single training run: first grid value, first seed, first strategy.
  cfg.grid.values = {cfg.grid.values.front()};
  cfg.seeds = {cfg.seeds.front()};
  cfg.strategies = {cfg.strategies.front()};
  const fedpals::ExperimentOutput out = fedpals::run_experiment(cfg);
  std::cout << fedpals::format_records_csv(out.records);
  std::cerr << "records: " << out.records_path << "\nsummary: " << out.summary_path << "\n";
  return 0;
}

int run_sweep(const std::string& config_arg, std::uint64_t seed_offset,
              const std::string& output_dir) {
  fedpals::ExperimentConfig cfg = load_config_arg(config_arg);
  apply_overrides(cfg, seed_offset, output_dir);
  const fedpals::ExperimentOutput out = fedpals::run_experiment(cfg);
  const fedpals::ComparisonReport report = fedpals::compare_strategies({out.summary_path});
  std::cout << report.text;
  std::cerr << "records: " << out.records_path << "\nsummary: " << out.summary_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-shift-aware federated learning simulator"};
  app.require_subcommand(1);

  std::string config_arg;
  std::string output_dir;
  std::uint64_t seed_offset = 0;

  auto* simulate = app.add_subcommand("simulate", "run one training run from a config or preset");
  simulate->add_option("config", config_arg, "config path or preset name")->required();
  simulate->add_option("--seed-offset", seed_offset, "added to every configured seed");
  simulate->add_option("--output-dir", output_dir, "overrides the configured output directory");

  auto* sweep = app.add_subcommand("sweep", "run the full (setting x seed x strategy) grid");
  sweep->add_option("config", config_arg, "config path or preset name")->required();
  sweep->add_option("--seed-offset", seed_offset, "added to every configured seed");
  sweep->add_option("--output-dir", output_dir, "overrides the configured output directory");

  std::string marginal_path;
  double lambda_value = 0.0;
  double ess_value = 0.0;
  auto* solve = app.add_subcommand("solve-weights", "solve aggregation weights for a marginal file");
  solve->add_option("file", marginal_path, "marginal-set JSON file")->required();
  auto* lambda_opt = solve->add_option("--lambda", lambda_value, "regularization strength");
  auto* ess_opt = solve->add_option("--ess-target", ess_value, "ESS fraction in (0, 1]");
  lambda_opt->excludes(ess_opt);

  int grad_cases = 20;
  std::uint64_t check_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--cases", grad_cases, "cases per architecture");
  gradcheck->add_option("--seed", check_seed, "rng seed");

  auto* props = app.add_subcommand("verify-props", "run the aggregation/update property checks");
  props->add_option("--seed", check_seed, "rng seed");

  std::vector<std::string> summary_paths;
  std::string csv_out;
  auto* compare = app.add_subcommand("compare", "side-by-side report of summary files");
  compare->add_option("summaries", summary_paths, "summary CSV files")->required();
  compare->add_option("--csv", csv_out, "also write the delimited report here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) {
      return run_simulate(config_arg, seed_offset, output_dir);
    }
    if (sweep->parsed()) {
      return run_sweep(config_arg, seed_offset, output_dir);
    }
    if (solve->parsed()) {
      const fedpals::MarginalFile file = fedpals::load_marginal_file(marginal_path);
      std::optional<double> lambda;
      std::optional<double> ess;
      if (ess_opt->count() > 0) {
        ess = ess_value;
      } else {
        lambda = lambda_value;  // --lambda or its default 0
      }
      std::cout << fedpals::solve_weights_record(file, lambda, ess) << "\n";
      return 0;
    }
    if (gradcheck->parsed()) {
      bool ok = true;
      for (const auto kind : {fedpals::ModelKind::kLogistic, fedpals::ModelKind::kMlp}) {
        const auto result = fedpals::run_gradient_checks(kind, grad_cases, check_seed);
        const char* name = kind == fedpals::ModelKind::kLogistic ? "logistic" : "mlp";
        std::cout << (result.pass ? "[PASS] " : "[FAIL] ") << name << ": worst relative error "
                  << result.worst_rel_err << " over " << result.cases << " cases\n";
        ok = ok && result.pass;
      }
      return ok ? 0 : 1;
    }
    if (props->parsed()) {
      bool ok = true;
      for (const auto& check : fedpals::run_property_checks(check_seed)) {
        std::cout << (check.pass ? "[PASS] " : "[FAIL] ") << check.name << " = " << check.value
                  << "\n";
        ok = ok && check.pass;
      }
      return ok ? 0 : 1;
    }
    if (compare->parsed()) {
      const fedpals::ComparisonReport report = fedpals::compare_strategies(summary_paths);
      std::cout << report.text;
      if (!csv_out.empty()) {
        std::ofstream out(csv_out, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open " + csv_out + " for writing");
        out << report.csv;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
