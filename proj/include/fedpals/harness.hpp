#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedpals/federation.hpp"

namespace fedpals {

struct StrategySpec {
  Strategy strategy;
  std::string label;  // unique per experiment; defaults to strategy.name()
};

enum class TaskKind { kGaussianExplicit, kCircle };

struct TaskConfig {
  TaskKind kind = TaskKind::kGaussianExplicit;
  std::vector<std::vector<double>> means;  // explicit Gaussian task
  int classes = 0;                         // circle task
  double radius = 5.0;

  GaussianTaskSpec build() const;
};

enum class PartitionScheme { kExplicit, kSparsity, kDirichlet };

struct PartitionConfig {
  PartitionScheme scheme = PartitionScheme::kExplicit;
  std::vector<std::vector<double>> marginals;  // explicit
  std::vector<std::int64_t> sizes;             // explicit
  int clients = 0;
  int labels_per_client = 0;       // sparsity
  int samples_per_label = 0;       // sparsity
  double beta = 0.0;               // dirichlet
  std::int64_t client_size = 0;    // dirichlet
};

enum class TargetKind { kDeltaMix, kExplicit, kSampled };

struct TargetConfig {
  TargetKind kind = TargetKind::kExplicit;
  double delta = 0.0;          // delta_mix
  std::vector<double> probs;   // explicit
};

enum class GridParameter { kNone, kDelta, kLabelsPerClient, kBeta, kNoise };

struct GridConfig {
  GridParameter parameter = GridParameter::kNone;
  std::vector<double> values{0.0};
};

struct ModelConfig {
  ModelKind kind = ModelKind::kLogistic;
  int hidden = 16;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string output_dir = "out";
  std::vector<std::uint64_t> seeds{0};
  std::vector<StrategySpec> strategies;
  TaskConfig task;
  PartitionConfig partition;
  TargetConfig target;
  GridConfig grid;
  int rounds = 150;
  double client_fraction = 1.0;
  LocalUpdateConfig local;
  ModelConfig model;
  int test_size = 2000;
  LabelSampling label_sampling = LabelSampling::kStratifiedExact;

  void validate() const;  // throws with the offending field name
};

/// Built-in experiment presets: synthetic-projection, sparsity-sweep,
/// dirichlet-sweep, oracle-baseline, target-perturbation.
ExperimentConfig experiment_preset(const std::string& name);
std::vector<std::string> experiment_preset_names();

/// Loads a config file; a "preset" field pulls in the named preset first and
/// any other fields present overlay it.
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config_text(const std::string& json_text);

/// One emitted row: a training round of one (setting, seed, strategy) run.
struct ExperimentRecord {
  double setting = 0.0;
  std::uint64_t seed = 0;
  std::string strategy;
  RoundRecord round;
};

struct SummaryRow {
  std::string strategy;
  double setting = 0.0;
  double mean = 0.0;    // final-round target accuracy, averaged over seeds
  double stddev = 0.0;  // sample standard deviation; 0 for a single seed
  int seed_count = 0;
};

struct ExperimentOutput {
  std::string records_path;
  std::string summary_path;
  std::vector<ExperimentRecord> records;  // canonical order
  std::vector<SummaryRow> summary;
};

/// Runs every (setting, seed, strategy) combination, in a worker pool sized
/// by FEDPALS_WORKERS (default 1), and writes the records and summary files.
/// Row order is canonical regardless of scheduling; reruns are byte-identical.
ExperimentOutput run_experiment(const ExperimentConfig& cfg);

std::vector<SummaryRow> summarize(const std::vector<ExperimentRecord>& records);

extern const char kRecordsHeader[];
std::string format_records_csv(const std::vector<ExperimentRecord>& records);
std::string format_summary_csv(const std::vector<SummaryRow>& rows);
std::vector<ExperimentRecord> parse_records_csv(const std::string& path);
std::vector<SummaryRow> parse_summary_csv(const std::string& path);

struct ComparisonReport {
  std::string text;
  std::string csv;
};

/// Side-by-side table of summary files sharing a setting grid, with the
/// per-setting winner and the fedpals-minus-fedavg gap where both appear.
ComparisonReport compare_strategies(const std::vector<std::string>& summary_paths);

/// Marginal-set file: {"clients": [{"id", "n", "probs"}...], "target": {"probs"}}.
struct MarginalFile {
  ClientMarginalSet clients;
  LabelMarginal target;
};
MarginalFile load_marginal_file(const std::string& path);
MarginalFile parse_marginal_file_text(const std::string& json_text);

/// The solve-weights CLI payload: alpha, residual, ESS, ESS/N, objective and
/// iteration count as a JSON object. Exactly one of lambda/ess_target is set.
std::string solve_weights_record(const MarginalFile& file, std::optional<double> lambda,
                                 std::optional<double> ess_target);

/// Central finite-difference check of the analytic gradients, including a
/// positive proximal coefficient on half the cases.
struct GradCheckResult {
  int cases = 0;
  double worst_rel_err = 0.0;
  bool pass = false;
};
GradCheckResult run_gradient_checks(ModelKind kind, int cases, std::uint64_t seed,
                                    double tolerance = 1e-5);

/// A coverage-exact finite instance for the unbiased-update check: one
/// feature point per class, integer class counts, and rational weights chosen
/// so the weighted client marginals reproduce the target marginal exactly.
struct UnbiasednessInstance {
  std::vector<ClientState> clients;
  AggregationWeights alpha_exact{std::vector<double>{1.0}};
  Dataset target;
  ParamVector params;
  double eta = 0.5;
};
UnbiasednessInstance make_unbiasedness_instance(std::uint64_t seed);

/// Named pass/fail checks behind the verify-props subcommand.
struct PropCheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;  // the checked quantity (gap, max deviation, ...)
};
std::vector<PropCheckResult> run_property_checks(std::uint64_t seed);

}  // namespace fedpals
