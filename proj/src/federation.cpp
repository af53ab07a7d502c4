#include "fedpals/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "fedpals/random.hpp"

namespace fedpals {

namespace {

constexpr double kCoverageTol = 1e-8;

// Uniform subsample of ceil(fraction * M) client indices without
// replacement, seeded by (master_seed, round_index). Returned sorted so the
// aggregation order is the client-index order.
std::vector<int> pick_participants(int num_clients, double fraction, std::uint64_t master_seed,
                                   int round_index) {
  const int count = std::max(
      1, static_cast<int>(std::ceil(fraction * static_cast<double>(num_clients))));
  if (count >= num_clients) {
    std::vector<int> all(static_cast<size_t>(num_clients));
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  std::vector<int> ids(static_cast<size_t>(num_clients));
  std::iota(ids.begin(), ids.end(), 0);
  auto rng = make_rng(derive_seed(master_seed, 0xa11, static_cast<std::uint64_t>(round_index)));
  for (int j = 0; j < count; ++j) {
    std::uniform_int_distribution<int> pick(j, num_clients - 1);
    std::swap(ids[static_cast<size_t>(j)], ids[static_cast<size_t>(pick(rng))]);
  }
  ids.resize(static_cast<size_t>(count));
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct RoundWeights {
  AggregationWeights alpha;
  double lambda = 0.0;
  double residual = 0.0;
  double ess = 0.0;
};

// Server-side weight rule. Sees only marginals and sizes, never client data.
RoundWeights compute_round_weights(const Strategy& strategy, const ClientMarginalSet& participants,
                                   const LabelMarginal& target) {
  switch (strategy.kind) {
    case StrategyKind::kFedAvg:
    case StrategyKind::kOracle: {
      AggregationWeights alpha = fedavg_weights(participants.sizes);
      // Residual reported at the weights actually used.
      double residual = 0.0;
      for (int y = 0; y < participants.num_classes(); ++y) {
        double mix = 0.0;
        for (int i = 0; i < participants.num_clients(); ++i) {
          mix += alpha[i] * participants.marginals[static_cast<size_t>(i)][y];
        }
        const double r = mix - target[y];
        residual += r * r;
      }
      const double ess = effective_sample_size(alpha, participants.sizes);
      return {std::move(alpha), 0.0, residual, ess};
    }
    case StrategyKind::kFedPals:
    case StrategyKind::kFedPalsProx: {
      double lambda = strategy.lambda;
      if (strategy.use_ess_target) {
        lambda = lambda_for_ess(participants, target, strategy.ess_target).lambda;
      }
      const SolveReport report = solve_fedpals(FedPalsProblem(participants, target, lambda));
      return {report.weights, lambda, report.residual, report.ess};
    }
  }
  throw std::logic_error("unknown strategy");
}

}  // namespace

std::string Strategy::name() const {
  switch (kind) {
    case StrategyKind::kFedAvg:
      return "fedavg";
    case StrategyKind::kFedPals:
      return "fedpals";
    case StrategyKind::kFedPalsProx:
      return "fedpals_prox";
    case StrategyKind::kOracle:
      return "oracle";
  }
  return "unknown";
}

Strategy Strategy::fedavg() { return {}; }

Strategy Strategy::fedpals(double lambda) {
  Strategy s;
  s.kind = StrategyKind::kFedPals;
  s.lambda = lambda;
  return s;
}

Strategy Strategy::fedpals_ess(double ess_fraction) {
  Strategy s;
  s.kind = StrategyKind::kFedPals;
  s.use_ess_target = true;
  s.ess_target = ess_fraction;
  return s;
}

Strategy Strategy::fedpals_prox(double lambda, double prox_mu) {
  Strategy s;
  s.kind = StrategyKind::kFedPalsProx;
  s.lambda = lambda;
  s.prox_mu = prox_mu;
  return s;
}

Strategy Strategy::oracle() {
  Strategy s;
  s.kind = StrategyKind::kOracle;
  return s;
}

ClientState make_client(int id, Dataset data) {
  ClientState state;
  state.id = id;
  state.marginal = empirical_marginal(data.labels, data.num_classes);
  state.size = data.size();
  state.data = std::move(data);
  return state;
}

ParamVector aggregate(const std::vector<ParamVector>& updates, const AggregationWeights& alpha) {
  if (updates.empty()) throw std::invalid_argument("no updates to aggregate");
  if (static_cast<int>(updates.size()) != alpha.size()) {
    throw std::invalid_argument("update count and weight count differ");
  }
  const ModelArch layout = updates.front().layout;
  for (const auto& u : updates) {
    if (!(u.layout == layout) || u.values.size() != updates.front().values.size()) {
      throw std::invalid_argument("parameter layouts differ across updates");
    }
  }
  ParamVector out;
  out.layout = layout;
  out.values.assign(updates.front().values.size(), 0.0);
  for (size_t i = 0; i < updates.size(); ++i) {
    const double w = alpha[static_cast<int>(i)];
    if (w == 0.0) continue;
    const auto& v = updates[i].values;
    for (size_t j = 0; j < v.size(); ++j) out.values[j] += w * v[j];
  }
  return out;
}

std::pair<ParamVector, RoundRecord> run_round(const ParamVector& global,
                                              const std::vector<ClientState>& clients,
                                              const FederationConfig& cfg, int round_index) {
  if (clients.empty()) throw std::invalid_argument("no clients");
  const auto t0 = std::chrono::steady_clock::now();

  const std::vector<int> participants =
      pick_participants(static_cast<int>(clients.size()), cfg.client_fraction, cfg.master_seed,
                        round_index);

  std::vector<LabelMarginal> part_marginals;
  std::vector<std::int64_t> part_sizes;
  part_marginals.reserve(participants.size());
  for (int idx : participants) {
    part_marginals.push_back(clients[static_cast<size_t>(idx)].marginal);
    part_sizes.push_back(clients[static_cast<size_t>(idx)].size);
  }
  const ClientMarginalSet server_view(std::move(part_marginals), std::move(part_sizes));

  LocalUpdateConfig local = cfg.local;
  if (cfg.strategy.kind == StrategyKind::kFedPalsProx) {
    local.prox_mu = cfg.strategy.prox_mu;
  }

  std::vector<ParamVector> updates;
  updates.reserve(participants.size());
  for (int idx : participants) {
    const ClientState& client = clients[static_cast<size_t>(idx)];
    updates.push_back(local_update(
        global, client.data, local,
        derive_seed(cfg.master_seed, static_cast<std::uint64_t>(client.id),
                    static_cast<std::uint64_t>(round_index))));
  }

  const RoundWeights weights =
      compute_round_weights(cfg.strategy, server_view, cfg.target_marginal);
  ParamVector next = aggregate(updates, weights.alpha);

  RoundRecord record;
  record.round = round_index;
  record.strategy = cfg.strategy.name();
  record.lambda = weights.lambda;
  record.alpha.assign(clients.size(), 0.0);
  for (size_t j = 0; j < participants.size(); ++j) {
    record.alpha[static_cast<size_t>(participants[j])] = weights.alpha[static_cast<int>(j)];
  }
  record.residual = weights.residual;
  record.ess = weights.ess;
  record.covered = weights.residual <= kCoverageTol;
  const auto t1 = std::chrono::steady_clock::now();
  record.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return {std::move(next), std::move(record)};
}

std::vector<RoundRecord> train(const FederationConfig& cfg,
                               const std::vector<ClientState>& clients,
                               const Dataset& target_test) {
  if (cfg.rounds < 1) throw std::invalid_argument("rounds must be >= 1");
  if (!(cfg.client_fraction > 0.0) || cfg.client_fraction > 1.0) {
    throw std::invalid_argument("client fraction must lie in (0, 1]");
  }
  if (target_test.size() == 0) throw std::invalid_argument("empty target test set");

  ParamVector global = init_params(cfg.arch, derive_seed(cfg.master_seed, 0x141));
  std::vector<RoundRecord> records;
  records.reserve(static_cast<size_t>(cfg.rounds));
  for (int round = 0; round < cfg.rounds; ++round) {
    auto [next, record] = run_round(global, clients, cfg, round);
    global = std::move(next);
    const EvalMetrics metrics = evaluate(global, target_test);
    record.target_accuracy = metrics.accuracy;
    record.target_loss = metrics.mean_loss;
    record.macro_f1 = metrics.macro_f1;
    records.push_back(std::move(record));
  }
  return records;
}

double verify_unbiasedness(const std::vector<ClientState>& clients,
                           const AggregationWeights& alpha_c, const Dataset& target_universe,
                           const ParamVector& params, double eta) {
  if (clients.empty()) throw std::invalid_argument("no clients");
  if (static_cast<int>(clients.size()) != alpha_c.size()) {
    throw std::invalid_argument("weight count does not match client count");
  }
  if (target_universe.size() == 0) throw std::invalid_argument("empty target dataset");

  // The instance must satisfy exact coverage: the weighted client marginals
  // must reproduce the target's empirical marginal.
  const int k = target_universe.num_classes;
  const LabelMarginal target_marginal = empirical_marginal(target_universe.labels, k);
  double residual = 0.0;
  for (int y = 0; y < k; ++y) {
    double mix = 0.0;
    for (size_t i = 0; i < clients.size(); ++i) {
      mix += alpha_c[static_cast<int>(i)] * clients[i].marginal[y];
    }
    const double r = mix - target_marginal[y];
    residual += r * r;
  }
  if (residual > 1e-12) {
    throw std::invalid_argument("constructed instance violates exact coverage");
  }

  // Full-batch updates are deterministic, so the expectation is exact. The
  // aggregate sum_i alpha_i (theta - eta g_i) is evaluated with theta factored
  // out, which the weights' unit sum justifies.
  std::vector<double> weighted_grad(params.values.size(), 0.0);
  for (size_t i = 0; i < clients.size(); ++i) {
    const LossGrad lg = loss_and_grad(params, clients[i].data);
    const double w = alpha_c[static_cast<int>(i)];
    for (size_t j = 0; j < weighted_grad.size(); ++j) {
      weighted_grad[j] += w * lg.grad.values[j];
    }
  }
  const LossGrad target_lg = loss_and_grad(params, target_universe);
  double gap = 0.0;
  for (size_t j = 0; j < weighted_grad.size(); ++j) {
    gap = std::max(gap, std::abs(eta * (weighted_grad[j] - target_lg.grad.values[j])));
  }
  return gap;
}

void save_checkpoint(const ParamVector& params, int round, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::int32_t r = round;
  out.write(reinterpret_cast<const char*>(&r), sizeof(r));
  save_params(params, out);
}

std::pair<ParamVector, int> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::int32_t round = 0;
  in.read(reinterpret_cast<char*>(&round), sizeof(round));
  if (!in) throw std::runtime_error("truncated checkpoint");
  return {load_params(in), round};
}

}  // namespace fedpals
