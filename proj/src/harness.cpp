#include "fedpals/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "fedpals/random.hpp"

namespace fedpals {

namespace {

using nlohmann::json;

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double_field(const std::string& text, const std::string& context) {
  try {
    size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("bad numeric value '" + text + "' in " + context);
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << content;
  if (!out) throw std::runtime_error("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

[[noreturn]] void config_error(const std::string& field, const std::string& why) {
  throw std::runtime_error("config field '" + field + "': " + why);
}

const json& require_field(const json& j, const std::string& key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) config_error(where + "." + key, "missing");
  return *it;
}

Strategy parse_strategy(const json& j, const std::string& where, std::string* label) {
  const std::string name = require_field(j, "name", where).get<std::string>();
  Strategy s;
  if (name == "fedavg") {
    s = Strategy::fedavg();
  } else if (name == "fedpals") {
    if (j.contains("ess_target")) {
      s = Strategy::fedpals_ess(j.at("ess_target").get<double>());
    } else {
      s = Strategy::fedpals(j.value("lambda", 0.0));
    }
  } else if (name == "fedpals_prox") {
    s = Strategy::fedpals_prox(j.value("lambda", 0.0), j.value("prox_mu", 0.0));
  } else if (name == "oracle") {
    s = Strategy::oracle();
  } else {
    config_error(where + ".name", "unknown strategy '" + name + "'");
  }
  *label = j.value("label", name);
  return s;
}

void apply_config_json(ExperimentConfig& cfg, const json& j) {
  static const std::set<std::string> known{
      "preset",     "name",   "output_dir", "seeds",          "strategies",
      "task",       "partition", "target",  "grid",           "rounds",
      "client_fraction", "local", "model",  "test_size",      "label_sampling"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) config_error(key, "unknown field");
  }

  if (j.contains("name")) cfg.name = j.at("name").get<std::string>();
  if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("rounds")) cfg.rounds = j.at("rounds").get<int>();
  if (j.contains("client_fraction")) cfg.client_fraction = j.at("client_fraction").get<double>();
  if (j.contains("test_size")) cfg.test_size = j.at("test_size").get<int>();

  if (j.contains("strategies")) {
    cfg.strategies.clear();
    for (const auto& sj : j.at("strategies")) {
      StrategySpec spec;
      spec.strategy = parse_strategy(sj, "strategies", &spec.label);
      cfg.strategies.push_back(std::move(spec));
    }
  }

  if (j.contains("task")) {
    const json& tj = j.at("task");
    const std::string kind = require_field(tj, "kind", "task").get<std::string>();
    if (kind == "gaussian") {
      cfg.task.kind = TaskKind::kGaussianExplicit;
      cfg.task.means = require_field(tj, "means", "task").get<std::vector<std::vector<double>>>();
    } else if (kind == "circle") {
      cfg.task.kind = TaskKind::kCircle;
      cfg.task.classes = require_field(tj, "classes", "task").get<int>();
      cfg.task.radius = tj.value("radius", 5.0);
    } else {
      config_error("task.kind", "unknown task '" + kind + "'");
    }
  }

  if (j.contains("partition")) {
    const json& pj = j.at("partition");
    const std::string scheme = require_field(pj, "scheme", "partition").get<std::string>();
    cfg.partition = PartitionConfig{};
    if (scheme == "explicit") {
      cfg.partition.scheme = PartitionScheme::kExplicit;
      cfg.partition.marginals =
          require_field(pj, "marginals", "partition").get<std::vector<std::vector<double>>>();
      cfg.partition.sizes =
          require_field(pj, "sizes", "partition").get<std::vector<std::int64_t>>();
    } else if (scheme == "sparsity") {
      cfg.partition.scheme = PartitionScheme::kSparsity;
      cfg.partition.clients = require_field(pj, "clients", "partition").get<int>();
      cfg.partition.labels_per_client = pj.value("labels_per_client", 1);
      cfg.partition.samples_per_label =
          require_field(pj, "samples_per_label", "partition").get<int>();
    } else if (scheme == "dirichlet") {
      cfg.partition.scheme = PartitionScheme::kDirichlet;
      cfg.partition.clients = require_field(pj, "clients", "partition").get<int>();
      cfg.partition.beta = pj.value("beta", 1.0);
      cfg.partition.client_size =
          require_field(pj, "client_size", "partition").get<std::int64_t>();
    } else {
      config_error("partition.scheme", "unknown scheme '" + scheme + "'");
    }
  }

  if (j.contains("target")) {
    const json& tj = j.at("target");
    const std::string kind = require_field(tj, "kind", "target").get<std::string>();
    cfg.target = TargetConfig{};
    if (kind == "delta_mix") {
      cfg.target.kind = TargetKind::kDeltaMix;
      cfg.target.delta = tj.value("delta", 0.0);
    } else if (kind == "explicit") {
      cfg.target.kind = TargetKind::kExplicit;
      cfg.target.probs = require_field(tj, "probs", "target").get<std::vector<double>>();
    } else if (kind == "sampled") {
      cfg.target.kind = TargetKind::kSampled;
    } else {
      config_error("target.kind", "unknown target '" + kind + "'");
    }
  }

  if (j.contains("grid")) {
    const json& gj = j.at("grid");
    const std::string parameter = require_field(gj, "parameter", "grid").get<std::string>();
    if (parameter == "none") {
      cfg.grid.parameter = GridParameter::kNone;
    } else if (parameter == "delta") {
      cfg.grid.parameter = GridParameter::kDelta;
    } else if (parameter == "labels_per_client") {
      cfg.grid.parameter = GridParameter::kLabelsPerClient;
    } else if (parameter == "beta") {
      cfg.grid.parameter = GridParameter::kBeta;
    } else if (parameter == "noise") {
      cfg.grid.parameter = GridParameter::kNoise;
    } else {
      config_error("grid.parameter", "unknown parameter '" + parameter + "'");
    }
    cfg.grid.values = require_field(gj, "values", "grid").get<std::vector<double>>();
  }

  if (j.contains("local")) {
    const json& lj = j.at("local");
    cfg.local.epochs = lj.value("epochs", cfg.local.epochs);
    cfg.local.batch_size = lj.value("batch_size", cfg.local.batch_size);
    cfg.local.learning_rate = lj.value("learning_rate", cfg.local.learning_rate);
    cfg.local.prox_mu = lj.value("prox_mu", cfg.local.prox_mu);
  }

  if (j.contains("model")) {
    const json& mj = j.at("model");
    const std::string kind = require_field(mj, "kind", "model").get<std::string>();
    if (kind == "logistic") {
      cfg.model.kind = ModelKind::kLogistic;
    } else if (kind == "mlp") {
      cfg.model.kind = ModelKind::kMlp;
      cfg.model.hidden = mj.value("hidden", 16);
    } else {
      config_error("model.kind", "unknown model '" + kind + "'");
    }
  }

  if (j.contains("label_sampling")) {
    const std::string mode = j.at("label_sampling").get<std::string>();
    if (mode == "stratified") {
      cfg.label_sampling = LabelSampling::kStratifiedExact;
    } else if (mode == "iid") {
      cfg.label_sampling = LabelSampling::kIid;
    } else {
      config_error("label_sampling", "unknown mode '" + mode + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

enum SeedTag : std::uint64_t {
  kClientDataTag = 0xda7a,
  kTestDataTag = 0x7e57,
  kFederationTag = 0xfed0,
  kNoiseTag = 0x901e,
  kPartitionTag = 0x9a97,
};

struct ResolvedInstance {
  std::vector<LabelMarginal> client_marginals;
  std::vector<std::int64_t> client_sizes;
  LabelMarginal target{std::vector<double>{1.0}};
};

ResolvedInstance resolve_instance(const ExperimentConfig& cfg, double setting,
                                  std::uint64_t seed, int num_classes) {
  ResolvedInstance inst;
  const bool sampled_target = cfg.target.kind == TargetKind::kSampled;

  switch (cfg.partition.scheme) {
    case PartitionScheme::kExplicit: {
      for (const auto& probs : cfg.partition.marginals) {
        inst.client_marginals.emplace_back(probs);
      }
      inst.client_sizes = cfg.partition.sizes;
      break;
    }
    case PartitionScheme::kSparsity: {
      int labels = cfg.partition.labels_per_client;
      if (cfg.grid.parameter == GridParameter::kLabelsPerClient) {
        labels = static_cast<int>(std::lround(setting));
      }
      const int draws = cfg.partition.clients + (sampled_target ? 1 : 0);
      ClientMarginalSet set = sparsity_partition(num_classes, draws, labels,
                                                 cfg.partition.samples_per_label,
                                                 derive_seed(seed, kPartitionTag));
      if (sampled_target) {
        inst.target = set.marginals.back();
        set.marginals.pop_back();
        set.sizes.pop_back();
      }
      inst.client_marginals = std::move(set.marginals);
      inst.client_sizes = std::move(set.sizes);
      break;
    }
    case PartitionScheme::kDirichlet: {
      double beta = cfg.partition.beta;
      if (cfg.grid.parameter == GridParameter::kBeta) beta = setting;
      const int draws = cfg.partition.clients + (sampled_target ? 1 : 0);
      std::vector<LabelMarginal> marginals =
          dirichlet_partition(num_classes, draws, beta, derive_seed(seed, kPartitionTag));
      if (sampled_target) {
        inst.target = marginals.back();
        marginals.pop_back();
      }
      inst.client_marginals = std::move(marginals);
      inst.client_sizes.assign(inst.client_marginals.size(), cfg.partition.client_size);
      break;
    }
  }

  switch (cfg.target.kind) {
    case TargetKind::kDeltaMix: {
      double delta = cfg.target.delta;
      if (cfg.grid.parameter == GridParameter::kDelta) delta = setting;
      inst.target = make_target_delta(delta);
      break;
    }
    case TargetKind::kExplicit:
      inst.target = LabelMarginal(cfg.target.probs);
      break;
    case TargetKind::kSampled:
      break;  // already filled above
  }

  if (cfg.grid.parameter == GridParameter::kNoise) {
    inst.target = perturb_target(inst.target, setting, derive_seed(seed, kNoiseTag));
  }
  return inst;
}

std::vector<ExperimentRecord> run_single(const ExperimentConfig& cfg, double setting,
                                         std::uint64_t seed, const StrategySpec& spec) {
  const GaussianTaskSpec task = cfg.task.build();
  const int num_classes = task.num_classes();

  ResolvedInstance inst = resolve_instance(cfg, setting, seed, num_classes);
  if (spec.strategy.kind == StrategyKind::kOracle) {
    // Oracle clients are drawn from the target distribution itself.
    std::fill(inst.client_marginals.begin(), inst.client_marginals.end(), inst.target);
  }

  std::vector<ClientState> clients;
  clients.reserve(inst.client_marginals.size());
  for (size_t i = 0; i < inst.client_marginals.size(); ++i) {
    Dataset data = sample_gaussian_dataset(
        task, inst.client_marginals[i], static_cast<int>(inst.client_sizes[i]),
        derive_seed(seed, kClientDataTag, static_cast<std::uint64_t>(i)), cfg.label_sampling);
    clients.push_back(make_client(static_cast<int>(i), std::move(data)));
  }
  const Dataset test = sample_gaussian_dataset(task, inst.target, cfg.test_size,
                                               derive_seed(seed, kTestDataTag),
                                               LabelSampling::kStratifiedExact);

  FederationConfig fed;
  fed.arch.kind = cfg.model.kind;
  fed.arch.input_dim = task.dim();
  fed.arch.num_classes = num_classes;
  fed.arch.hidden_width = cfg.model.kind == ModelKind::kMlp ? cfg.model.hidden : 0;
  fed.strategy = spec.strategy;
  fed.rounds = cfg.rounds;
  fed.local = cfg.local;
  fed.client_fraction = cfg.client_fraction;
  fed.master_seed = derive_seed(seed, kFederationTag);
  fed.target_marginal = inst.target;

  std::vector<RoundRecord> rounds = train(fed, clients, test);
  std::vector<ExperimentRecord> rows;
  rows.reserve(rounds.size());
  for (auto& r : rounds) {
    ExperimentRecord row;
    row.setting = setting;
    row.seed = seed;
    row.strategy = spec.label;
    row.round = std::move(r);
    rows.push_back(std::move(row));
  }
  return rows;
}

int worker_count_from_env(size_t jobs) {
  int workers = 1;
  if (const char* env = std::getenv("FEDPALS_WORKERS")) {
    workers = std::atoi(env);
    if (workers < 1) workers = 1;
  }
  return static_cast<int>(std::min<size_t>(static_cast<size_t>(workers), jobs));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config surface
// ---------------------------------------------------------------------------

GaussianTaskSpec TaskConfig::build() const {
  if (kind == TaskKind::kCircle) return circle_task(classes, radius);
  GaussianTaskSpec spec;
  spec.means = means;
  if (spec.means.empty()) throw std::runtime_error("config field 'task.means': empty");
  return spec;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) config_error("seeds", "need at least one seed");
  if (strategies.empty()) config_error("strategies", "need at least one strategy");
  std::set<std::string> labels;
  for (const auto& s : strategies) {
    if (!labels.insert(s.label).second) {
      config_error("strategies", "duplicate label '" + s.label + "'");
    }
  }
  if (grid.values.empty()) config_error("grid.values", "need at least one value");
  if (rounds < 1) config_error("rounds", "must be >= 1");
  if (!(client_fraction > 0.0) || client_fraction > 1.0) {
    config_error("client_fraction", "must lie in (0, 1]");
  }
  if (test_size < 1) config_error("test_size", "must be >= 1");
  if (task.kind == TaskKind::kGaussianExplicit) {
    if (task.means.empty()) config_error("task.means", "empty");
    const size_t d = task.means.front().size();
    for (const auto& m : task.means) {
      if (m.size() != d) config_error("task.means", "inconsistent dimensions");
    }
  } else if (task.classes < 2) {
    config_error("task.classes", "must be >= 2");
  }
  const int num_classes = task.kind == TaskKind::kCircle
                              ? task.classes
                              : static_cast<int>(task.means.size());
  switch (partition.scheme) {
    case PartitionScheme::kExplicit:
      if (partition.marginals.empty()) config_error("partition.marginals", "empty");
      if (partition.marginals.size() != partition.sizes.size()) {
        config_error("partition.sizes", "length differs from marginals");
      }
      for (const auto& m : partition.marginals) {
        if (static_cast<int>(m.size()) != num_classes) {
          config_error("partition.marginals", "class count differs from the task");
        }
      }
      if (target.kind == TargetKind::kSampled) {
        config_error("target.kind", "sampled target needs a sampling partition scheme");
      }
      break;
    case PartitionScheme::kSparsity:
      if (partition.clients < 1) config_error("partition.clients", "must be >= 1");
      if (partition.samples_per_label < 1) {
        config_error("partition.samples_per_label", "must be >= 1");
      }
      break;
    case PartitionScheme::kDirichlet:
      if (partition.clients < 1) config_error("partition.clients", "must be >= 1");
      if (partition.client_size < 1) config_error("partition.client_size", "must be >= 1");
      break;
  }
  if (target.kind == TargetKind::kExplicit &&
      static_cast<int>(target.probs.size()) != num_classes) {
    config_error("target.probs", "class count differs from the task");
  }
  if (grid.parameter == GridParameter::kDelta && target.kind != TargetKind::kDeltaMix) {
    config_error("grid.parameter", "delta grid needs a delta_mix target");
  }
  if (grid.parameter == GridParameter::kLabelsPerClient &&
      partition.scheme != PartitionScheme::kSparsity) {
    config_error("grid.parameter", "labels_per_client grid needs a sparsity partition");
  }
  if (grid.parameter == GridParameter::kBeta &&
      partition.scheme != PartitionScheme::kDirichlet) {
    config_error("grid.parameter", "beta grid needs a dirichlet partition");
  }
}

std::vector<std::string> experiment_preset_names() {
  return {"synthetic-projection", "sparsity-sweep", "dirichlet-sweep", "oracle-baseline",
          "target-perturbation"};
}

ExperimentConfig experiment_preset(const std::string& name) {
  ExperimentConfig cfg;
  cfg.name = name;
  // Multi-epoch local training with small batches: client updates drift
  // toward their local optima, so the aggregation weights act as effective
  // class priors and the weighting strategies separate. Single-step
  // full-batch rounds on these near-separable tasks leave the strategies
  // within noise of each other.
  cfg.local = LocalUpdateConfig{20, 8, 0.1, 0.0};
  cfg.rounds = 50;
  cfg.test_size = 2000;

  const auto seeds_upto = [](int count) {
    std::vector<std::uint64_t> seeds(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) seeds[static_cast<size_t>(i)] = static_cast<std::uint64_t>(i);
    return seeds;
  };
  const auto two_client_partition = [&cfg]() {
    cfg.partition.scheme = PartitionScheme::kExplicit;
    cfg.partition.marginals = {{0.5, 0.5, 0.0}, {0.5, 0.0, 0.5}};
    cfg.partition.sizes = {40, 18};
  };

  if (name == "synthetic-projection") {
    cfg.seeds = seeds_upto(5);
    cfg.strategies = {{Strategy::fedavg(), "fedavg"}, {Strategy::fedpals(0.0), "fedpals"}};
    cfg.task.kind = TaskKind::kGaussianExplicit;
    cfg.task.means = default_three_class_task().means;
    two_client_partition();
    cfg.target.kind = TargetKind::kDeltaMix;
    cfg.grid.parameter = GridParameter::kDelta;
    cfg.grid.values = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  } else if (name == "sparsity-sweep" || name == "oracle-baseline") {
    cfg.seeds = seeds_upto(8);
    cfg.strategies = {{Strategy::fedavg(), "fedavg"}, {Strategy::fedpals(0.0), "fedpals"}};
    if (name == "oracle-baseline") {
      cfg.strategies.push_back({Strategy::oracle(), "oracle"});
    }
    cfg.task.kind = TaskKind::kCircle;
    cfg.task.classes = 10;
    cfg.task.radius = 5.0;
    cfg.partition.scheme = PartitionScheme::kSparsity;
    cfg.partition.clients = 10;
    cfg.partition.samples_per_label = 20;
    cfg.target.kind = TargetKind::kSampled;
    cfg.grid.parameter = GridParameter::kLabelsPerClient;
    cfg.grid.values = {2, 3, 6, 10};
  } else if (name == "dirichlet-sweep") {
    cfg.seeds = seeds_upto(8);
    cfg.strategies = {{Strategy::fedavg(), "fedavg"}, {Strategy::fedpals(0.0), "fedpals"}};
    cfg.task.kind = TaskKind::kCircle;
    cfg.task.classes = 10;
    cfg.task.radius = 5.0;
    cfg.partition.scheme = PartitionScheme::kDirichlet;
    cfg.partition.clients = 10;
    cfg.partition.client_size = 60;
    cfg.target.kind = TargetKind::kSampled;
    cfg.grid.parameter = GridParameter::kBeta;
    cfg.grid.values = {0.1, 1.0, 10.0};
    cfg.model.kind = ModelKind::kMlp;
    cfg.model.hidden = 16;
  } else if (name == "target-perturbation") {
    cfg.seeds = seeds_upto(3);
    cfg.strategies = {{Strategy::fedavg(), "fedavg"}, {Strategy::fedpals(0.0), "fedpals"}};
    cfg.task.kind = TaskKind::kGaussianExplicit;
    cfg.task.means = default_three_class_task().means;
    two_client_partition();
    cfg.target.kind = TargetKind::kDeltaMix;
    cfg.target.delta = 0.0;
    cfg.grid.parameter = GridParameter::kNoise;
    cfg.grid.values = {1e-3, 1e-2, 5e-1};
  } else {
    throw std::runtime_error("unknown preset '" + name + "'");
  }
  return cfg;
}

ExperimentConfig parse_experiment_config_text(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig cfg;
  if (j.contains("preset")) {
    cfg = experiment_preset(j.at("preset").get<std::string>());
  }
  apply_config_json(cfg, j);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config_text(read_text_file(path));
}

// ---------------------------------------------------------------------------
// Experiment execution
// ---------------------------------------------------------------------------

const char kRecordsHeader[] =
    "round,strategy,lambda,ess,residual,target_acc,target_loss,macro_f1,seed,setting";

std::vector<SummaryRow> summarize(const std::vector<ExperimentRecord>& records) {
  // Final-round accuracy per (strategy, setting, seed) run.
  std::map<std::pair<std::string, double>, std::map<std::uint64_t, std::pair<int, double>>> last;
  for (const auto& r : records) {
    auto& per_seed = last[{r.strategy, r.setting}][r.seed];
    if (r.round.round >= per_seed.first) {
      per_seed = {r.round.round, r.round.target_accuracy};
    }
  }
  std::vector<SummaryRow> rows;
  for (const auto& [key, seeds] : last) {
    SummaryRow row;
    row.strategy = key.first;
    row.setting = key.second;
    row.seed_count = static_cast<int>(seeds.size());
    double sum = 0.0;
    for (const auto& [seed, acc] : seeds) sum += acc.second;
    row.mean = sum / static_cast<double>(row.seed_count);
    if (row.seed_count > 1) {
      double sq = 0.0;
      for (const auto& [seed, acc] : seeds) {
        const double d = acc.second - row.mean;
        sq += d * d;
      }
      row.stddev = std::sqrt(sq / static_cast<double>(row.seed_count - 1));
    }
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const SummaryRow& a, const SummaryRow& b) {
    if (a.setting != b.setting) return a.setting < b.setting;
    return a.strategy < b.strategy;
  });
  return rows;
}

std::string format_records_csv(const std::vector<ExperimentRecord>& records) {
  std::string out = kRecordsHeader;
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.round.round);
    out += ',';
    out += r.strategy;
    out += ',';
    out += format_double(r.round.lambda);
    out += ',';
    out += format_double(r.round.ess);
    out += ',';
    out += format_double(r.round.residual);
    out += ',';
    out += format_double(r.round.target_accuracy);
    out += ',';
    out += format_double(r.round.target_loss);
    out += ',';
    out += format_double(r.round.macro_f1);
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += format_double(r.setting);
    out += '\n';
  }
  return out;
}

std::string format_summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "strategy,setting,mean_final_acc,std_final_acc,seed_count\n";
  for (const auto& r : rows) {
    out += r.strategy;
    out += ',';
    out += format_double(r.setting);
    out += ',';
    out += format_double(r.mean);
    out += ',';
    out += format_double(r.stddev);
    out += ',';
    out += std::to_string(r.seed_count);
    out += '\n';
  }
  return out;
}

std::vector<ExperimentRecord> parse_records_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) || line != kRecordsHeader) {
    throw std::runtime_error(path + ": unexpected records header");
  }
  std::vector<ExperimentRecord> records;
  int line_no = 1;
  while (std::getline(ss, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 10) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected 10 fields");
    }
    const std::string where = path + ":" + std::to_string(line_no);
    ExperimentRecord r;
    r.round.round = static_cast<int>(parse_double_field(fields[0], where));
    r.strategy = fields[1];
    r.round.strategy = fields[1];
    r.round.lambda = parse_double_field(fields[2], where);
    r.round.ess = parse_double_field(fields[3], where);
    r.round.residual = parse_double_field(fields[4], where);
    r.round.target_accuracy = parse_double_field(fields[5], where);
    r.round.target_loss = parse_double_field(fields[6], where);
    r.round.macro_f1 = parse_double_field(fields[7], where);
    r.seed = static_cast<std::uint64_t>(parse_double_field(fields[8], where));
    r.setting = parse_double_field(fields[9], where);
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<SummaryRow> parse_summary_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line) ||
      line != "strategy,setting,mean_final_acc,std_final_acc,seed_count") {
    throw std::runtime_error(path + ": unexpected summary header");
  }
  std::vector<SummaryRow> rows;
  int line_no = 1;
  while (std::getline(ss, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 5) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected 5 fields");
    }
    const std::string where = path + ":" + std::to_string(line_no);
    SummaryRow r;
    r.strategy = fields[0];
    r.setting = parse_double_field(fields[1], where);
    r.mean = parse_double_field(fields[2], where);
    r.stddev = parse_double_field(fields[3], where);
    r.seed_count = static_cast<int>(parse_double_field(fields[4], where));
    rows.push_back(std::move(r));
  }
  return rows;
}

ExperimentOutput run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();

  struct Job {
    double setting;
    std::uint64_t seed;
    size_t strategy_index;
  };
  std::vector<Job> jobs;
  for (double setting : cfg.grid.values) {
    for (std::uint64_t seed : cfg.seeds) {
      for (size_t s = 0; s < cfg.strategies.size(); ++s) {
        jobs.push_back({setting, seed, s});
      }
    }
  }
  // Canonical row order: setting, seed, strategy label, round.
  std::sort(jobs.begin(), jobs.end(), [&cfg](const Job& a, const Job& b) {
    if (a.setting != b.setting) return a.setting < b.setting;
    if (a.seed != b.seed) return a.seed < b.seed;
    return cfg.strategies[a.strategy_index].label < cfg.strategies[b.strategy_index].label;
  });

  std::vector<std::vector<ExperimentRecord>> results(jobs.size());
  std::atomic<size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  const int workers = worker_count_from_env(jobs.size());
  const auto work = [&]() {
    while (!failed.load()) {
      const size_t i = next.fetch_add(1);
      if (i >= jobs.size()) break;
      try {
        results[i] = run_single(cfg, jobs[i].setting, jobs[i].seed,
                                cfg.strategies[jobs[i].strategy_index]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
        break;
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  ExperimentOutput out;
  for (auto& rows : results) {
    for (auto& r : rows) out.records.push_back(std::move(r));
  }
  out.summary = summarize(out.records);

  std::filesystem::create_directories(cfg.output_dir);
  out.records_path = (std::filesystem::path(cfg.output_dir) / (cfg.name + "_records.csv")).string();
  out.summary_path = (std::filesystem::path(cfg.output_dir) / (cfg.name + "_summary.csv")).string();
  write_text_file(out.records_path, format_records_csv(out.records));
  write_text_file(out.summary_path, format_summary_csv(out.summary));
  return out;
}

// ---------------------------------------------------------------------------
// Strategy comparison
// ---------------------------------------------------------------------------

ComparisonReport compare_strategies(const std::vector<std::string>& summary_paths) {
  if (summary_paths.empty()) throw std::runtime_error("no summary files given");

  std::vector<double> settings;
  std::vector<std::string> strategies;  // first-seen order
  std::map<std::pair<std::string, double>, SummaryRow> cells;

  bool first = true;
  for (const auto& path : summary_paths) {
    const auto rows = parse_summary_csv(path);
    std::set<double> file_settings;
    for (const auto& r : rows) file_settings.insert(r.setting);
    if (first) {
      settings.assign(file_settings.begin(), file_settings.end());
      first = false;
    } else if (!std::equal(settings.begin(), settings.end(), file_settings.begin(),
                           file_settings.end())) {
      throw std::runtime_error(path + ": setting grid differs from the first summary");
    }
    for (const auto& r : rows) {
      if (std::find(strategies.begin(), strategies.end(), r.strategy) == strategies.end()) {
        strategies.push_back(r.strategy);
      }
      if (!cells.emplace(std::make_pair(r.strategy, r.setting), r).second) {
        throw std::runtime_error(path + ": duplicate entry for strategy '" + r.strategy + "'");
      }
    }
  }

  const bool has_gap = std::find(strategies.begin(), strategies.end(), "fedpals") !=
                           strategies.end() &&
                       std::find(strategies.begin(), strategies.end(), "fedavg") !=
                           strategies.end();

  std::ostringstream text;
  std::ostringstream csv;
  text << "setting";
  csv << "setting";
  for (const auto& s : strategies) {
    text << '\t' << s;
    csv << ',' << s << "_mean," << s << "_std";
  }
  text << "\twinner";
  csv << ",winner";
  if (has_gap) {
    text << "\tfedpals-fedavg";
    csv << ",fedpals_minus_fedavg";
  }
  text << '\n';
  csv << '\n';

  for (double setting : settings) {
    text << format_double(setting);
    csv << format_double(setting);
    std::string winner;
    double best = -1.0;
    for (const auto& s : strategies) {
      const auto it = cells.find({s, setting});
      if (it == cells.end()) {
        throw std::runtime_error("strategy '" + s + "' missing setting " +
                                 format_double(setting));
      }
      char cell[64];
      std::snprintf(cell, sizeof(cell), "%.4f +- %.4f", it->second.mean, it->second.stddev);
      text << '\t' << cell;
      csv << ',' << format_double(it->second.mean) << ',' << format_double(it->second.stddev);
      if (it->second.mean > best) {
        best = it->second.mean;
        winner = s;
      }
    }
    text << '\t' << winner;
    csv << ',' << winner;
    if (has_gap) {
      const double gap =
          cells.at({"fedpals", setting}).mean - cells.at({"fedavg", setting}).mean;
      text << '\t' << format_double(gap);
      csv << ',' << format_double(gap);
    }
    text << '\n';
    csv << '\n';
  }
  return {text.str(), csv.str()};
}

// ---------------------------------------------------------------------------
// Marginal files and solve-weights
// ---------------------------------------------------------------------------

MarginalFile parse_marginal_file_text(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("marginal file parse error: ") + e.what());
  }
  if (!j.contains("clients") || !j.at("clients").is_array() || j.at("clients").empty()) {
    throw std::runtime_error("marginal file: missing or empty 'clients' array");
  }
  std::vector<LabelMarginal> marginals;
  std::vector<std::int64_t> sizes;
  int index = 0;
  for (const auto& cj : j.at("clients")) {
    const std::string where = "clients[" + std::to_string(index) + "]";
    if (!cj.contains("id")) throw std::runtime_error("marginal file: " + where + " missing 'id'");
    if (!cj.contains("n")) throw std::runtime_error("marginal file: " + where + " missing 'n'");
    if (!cj.contains("probs")) {
      throw std::runtime_error("marginal file: " + where + " missing 'probs'");
    }
    try {
      marginals.emplace_back(cj.at("probs").get<std::vector<double>>());
    } catch (const std::exception& e) {
      throw std::runtime_error("marginal file: " + where + ".probs: " + e.what());
    }
    sizes.push_back(cj.at("n").get<std::int64_t>());
    ++index;
  }
  if (!j.contains("target") || !j.at("target").contains("probs")) {
    throw std::runtime_error("marginal file: missing 'target.probs'");
  }
  LabelMarginal target(j.at("target").at("probs").get<std::vector<double>>());
  return {ClientMarginalSet(std::move(marginals), std::move(sizes)), std::move(target)};
}

MarginalFile load_marginal_file(const std::string& path) {
  try {
    return parse_marginal_file_text(read_text_file(path));
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

std::string solve_weights_record(const MarginalFile& file, std::optional<double> lambda,
                                 std::optional<double> ess_target) {
  if (lambda.has_value() == ess_target.has_value()) {
    throw std::runtime_error("pass exactly one of lambda / ess-target");
  }
  json out;
  double lambda_used = 0.0;
  if (ess_target) {
    const EssSearchResult search = lambda_for_ess(file.clients, file.target, *ess_target);
    lambda_used = search.lambda;
    out["ess_target"] = *ess_target;
    out["ess_target_clamped"] = search.clamped_at_zero;
  } else {
    lambda_used = *lambda;
  }
  const SolveReport report =
      solve_fedpals(FedPalsProblem(file.clients, file.target, lambda_used));
  out["lambda"] = lambda_used;
  out["alpha"] = report.weights.values();
  out["residual"] = report.residual;
  out["ess"] = report.ess;
  out["ess_fraction"] = report.ess / static_cast<double>(file.clients.total_size());
  out["objective"] = report.objective;
  out["iterations"] = report.iterations;
  out["converged"] = report.converged;
  return out.dump(2);
}

// ---------------------------------------------------------------------------
// Gradient and update-property checks
// ---------------------------------------------------------------------------

GradCheckResult run_gradient_checks(ModelKind kind, int cases, std::uint64_t seed,
                                    double tolerance) {
  GradCheckResult result;
  result.cases = cases;
  for (int c = 0; c < cases; ++c) {
    auto rng = make_rng(derive_seed(seed, 0x94ad, static_cast<std::uint64_t>(c)));
    std::uniform_int_distribution<int> dim_pick(2, 5);
    std::uniform_int_distribution<int> class_pick(2, 4);
    std::uniform_int_distribution<int> hidden_pick(3, 6);
    std::uniform_int_distribution<int> n_pick(3, 8);
    std::uniform_real_distribution<double> value(-1.0, 1.0);

    ModelArch arch;
    arch.kind = kind;
    arch.input_dim = dim_pick(rng);
    arch.num_classes = class_pick(rng);
    arch.hidden_width = kind == ModelKind::kMlp ? hidden_pick(rng) : 0;

    Dataset batch;
    batch.dim = arch.input_dim;
    batch.num_classes = arch.num_classes;
    const int n = n_pick(rng);
    std::uniform_int_distribution<int> label_pick(0, arch.num_classes - 1);
    for (int i = 0; i < n; ++i) {
      batch.labels.push_back(label_pick(rng));
      for (int jdx = 0; jdx < arch.input_dim; ++jdx) batch.features.push_back(value(rng));
    }

    ParamVector params = init_params(arch, derive_seed(seed, 0x7a3, 0));
    for (double& p : params.values) p = 0.5 * value(rng);

    const bool with_prox = (c % 2) == 1;
    const double prox_mu = with_prox ? 0.3 : 0.0;
    ParamVector anchor = params;
    if (with_prox) {
      for (double& a : anchor.values) a += 0.2 * value(rng);
    }
    const ParamVector* anchor_ptr = with_prox ? &anchor : nullptr;

    const LossGrad analytic = loss_and_grad(params, batch, prox_mu, anchor_ptr);
    const double h = 1e-5;
    for (size_t jdx = 0; jdx < params.values.size(); ++jdx) {
      ParamVector plus = params;
      ParamVector minus = params;
      plus.values[jdx] += h;
      minus.values[jdx] -= h;
      const double numeric = (loss_and_grad(plus, batch, prox_mu, anchor_ptr).loss -
                              loss_and_grad(minus, batch, prox_mu, anchor_ptr).loss) /
                             (2.0 * h);
      const double g = analytic.grad.values[jdx];
      const double rel = std::abs(g - numeric) / std::max(1.0, std::abs(g));
      result.worst_rel_err = std::max(result.worst_rel_err, rel);
    }
  }
  result.pass = result.worst_rel_err < tolerance;
  return result;
}

UnbiasednessInstance make_unbiasedness_instance(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    auto rng = make_rng(derive_seed(seed, 0x0b1a5, attempt));
    std::uniform_int_distribution<int> class_pick(2, 3);
    std::uniform_int_distribution<int> client_pick(2, 4);
    std::uniform_real_distribution<double> coord(-2.5, 2.5);
    std::uniform_int_distribution<int> weight_pick(1, 9);

    const int k = class_pick(rng);
    const int m = client_pick(rng);
    const int per_client = 12;  // common size keeps the target counts integral

    // One universe point per class: all client class-conditionals coincide.
    std::vector<std::vector<double>> points(static_cast<size_t>(k));
    for (auto& p : points) p = {coord(rng), coord(rng)};

    // Integer class counts per client; every client covers >= 1 class.
    std::vector<std::vector<int>> counts(static_cast<size_t>(m),
                                         std::vector<int>(static_cast<size_t>(k), 0));
    for (int i = 0; i < m; ++i) {
      int remaining = per_client;
      for (int y = 0; y < k - 1; ++y) {
        std::uniform_int_distribution<int> split(0, remaining);
        counts[static_cast<size_t>(i)][static_cast<size_t>(y)] = split(rng);
        remaining -= counts[static_cast<size_t>(i)][static_cast<size_t>(y)];
      }
      counts[static_cast<size_t>(i)][static_cast<size_t>(k - 1)] = remaining;
    }

    // Rational weights w_i / W; the target then has integer class counts
    // sum_i w_i c_{i,y} out of W * per_client draws.
    std::vector<int> w(static_cast<size_t>(m));
    int w_total = 0;
    for (int& wi : w) {
      wi = weight_pick(rng);
      w_total += wi;
    }

    const auto make_point_dataset = [&](const std::vector<int>& class_counts) {
      Dataset data;
      data.dim = 2;
      data.num_classes = k;
      for (int y = 0; y < k; ++y) {
        for (int rep = 0; rep < class_counts[static_cast<size_t>(y)]; ++rep) {
          data.labels.push_back(y);
          data.features.push_back(points[static_cast<size_t>(y)][0]);
          data.features.push_back(points[static_cast<size_t>(y)][1]);
        }
      }
      return data;
    };

    UnbiasednessInstance inst;
    for (int i = 0; i < m; ++i) {
      inst.clients.push_back(make_client(i, make_point_dataset(counts[static_cast<size_t>(i)])));
    }
    std::vector<double> alpha(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
      alpha[static_cast<size_t>(i)] =
          static_cast<double>(w[static_cast<size_t>(i)]) / static_cast<double>(w_total);
    }
    inst.alpha_exact = AggregationWeights(std::move(alpha));

    std::vector<int> target_counts(static_cast<size_t>(k), 0);
    for (int y = 0; y < k; ++y) {
      for (int i = 0; i < m; ++i) {
        target_counts[static_cast<size_t>(y)] +=
            w[static_cast<size_t>(i)] * counts[static_cast<size_t>(i)][static_cast<size_t>(y)];
      }
    }
    inst.target = make_point_dataset(target_counts);

    ModelArch arch{ModelKind::kLogistic, 2, k, 0};
    inst.params = init_params(arch, seed);
    std::uniform_real_distribution<double> param_value(-0.4, 0.4);
    for (double& p : inst.params.values) p = param_value(rng);
    inst.eta = 0.5;

    // The control comparison below is only meaningful when the size-weighted
    // client mixture visibly differs from the target marginal.
    const LabelMarginal target_marginal = empirical_marginal(inst.target.labels, k);
    double mismatch = 0.0;
    for (int y = 0; y < k; ++y) {
      double mix = 0.0;
      for (int i = 0; i < m; ++i) {
        mix += inst.clients[static_cast<size_t>(i)].marginal[y] / static_cast<double>(m);
      }
      mismatch = std::max(mismatch, std::abs(mix - target_marginal[y]));
    }
    if (mismatch >= 0.05) return inst;
  }
}

std::vector<PropCheckResult> run_property_checks(std::uint64_t seed) {
  std::vector<PropCheckResult> checks;

  // Exact-coverage aggregation matches the target-domain update.
  double worst_gap = 0.0;
  double best_control = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 10; ++i) {
    const UnbiasednessInstance inst =
        make_unbiasedness_instance(derive_seed(seed, 0x1, static_cast<std::uint64_t>(i)));
    worst_gap = std::max(worst_gap, verify_unbiasedness(inst.clients, inst.alpha_exact,
                                                        inst.target, inst.params, inst.eta));
    // FedAvg control: size-proportional weights on the same instance.
    std::vector<std::int64_t> sizes;
    for (const auto& c : inst.clients) sizes.push_back(c.size);
    const AggregationWeights control = fedavg_weights(sizes);
    double control_gap = 0.0;
    std::vector<double> aggregated(inst.params.values.size(), 0.0);
    for (size_t c = 0; c < inst.clients.size(); ++c) {
      const LossGrad lg = loss_and_grad(inst.params, inst.clients[c].data);
      for (size_t jdx = 0; jdx < aggregated.size(); ++jdx) {
        aggregated[jdx] += control[static_cast<int>(c)] *
                           (inst.params.values[jdx] - inst.eta * lg.grad.values[jdx]);
      }
    }
    const LossGrad target_lg = loss_and_grad(inst.params, inst.target);
    for (size_t jdx = 0; jdx < aggregated.size(); ++jdx) {
      const double target_update =
          inst.params.values[jdx] - inst.eta * target_lg.grad.values[jdx];
      control_gap = std::max(control_gap, std::abs(aggregated[jdx] - target_update));
    }
    best_control = std::min(best_control, control_gap);
  }
  checks.push_back({"unbiased-update-gap", worst_gap < 1e-10, worst_gap});
  checks.push_back({"fedavg-control-gap", best_control > 1e-3, best_control});

  // Large-lambda weights collapse to FedAvg.
  double worst_dev = 0.0;
  for (int i = 0; i < 50; ++i) {
    auto rng = make_rng(derive_seed(seed, 0x2, static_cast<std::uint64_t>(i)));
    std::uniform_int_distribution<int> m_pick(2, 10);
    std::uniform_int_distribution<int> k_pick(2, 10);
    std::uniform_int_distribution<std::int64_t> n_pick(1, 1000);
    std::gamma_distribution<double> unit_gamma(1.0, 1.0);
    const int m = m_pick(rng);
    const int k = k_pick(rng);
    const auto draw_marginal = [&]() {
      std::vector<double> p(static_cast<size_t>(k));
      double sum = 0.0;
      for (double& x : p) {
        x = unit_gamma(rng) + 1e-12;
        sum += x;
      }
      for (double& x : p) x /= sum;
      return LabelMarginal(std::move(p));
    };
    std::vector<LabelMarginal> marginals;
    std::vector<std::int64_t> sizes;
    for (int c = 0; c < m; ++c) {
      marginals.push_back(draw_marginal());
      sizes.push_back(n_pick(rng));
    }
    const ClientMarginalSet clients(std::move(marginals), std::move(sizes));
    const LabelMarginal target = draw_marginal();
    const SolveReport report = solve_fedpals(FedPalsProblem(clients, target, 1e10));
    const AggregationWeights fa = fedavg_weights(clients.sizes);
    for (int c = 0; c < m; ++c) {
      worst_dev = std::max(worst_dev, std::abs(report.weights[c] - fa[c]));
    }
  }
  checks.push_back({"large-lambda-fedavg", worst_dev < 1e-4, worst_dev});
  return checks;
}

}  // namespace fedpals
