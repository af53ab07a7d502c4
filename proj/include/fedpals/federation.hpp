#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedpals/aggregation.hpp"
#include "fedpals/distshift.hpp"
#include "fedpals/learners.hpp"

namespace fedpals {

enum class StrategyKind { kFedAvg, kFedPals, kFedPalsProx, kOracle };

/// Server-side aggregation rule. FedPals variants carry either a fixed
/// lambda or an ESS fraction resolved per round by binary search; the prox
/// variant additionally sets the clients' proximal coefficient.
struct Strategy {
  StrategyKind kind = StrategyKind::kFedAvg;
  double lambda = 0.0;
  bool use_ess_target = false;
  double ess_target = 0.0;
  double prox_mu = 0.0;

  std::string name() const;

  static Strategy fedavg();
  static Strategy fedpals(double lambda);
  static Strategy fedpals_ess(double ess_fraction);
  static Strategy fedpals_prox(double lambda, double prox_mu);
  static Strategy oracle();
};

struct FederationConfig {
  ModelArch arch;
  Strategy strategy;
  int rounds = 1;
  LocalUpdateConfig local;
  double client_fraction = 1.0;
  std::uint64_t master_seed = 0;
  LabelMarginal target_marginal{std::vector<double>{1.0}};
};

/// Everything a client holds. Only size and marginal ever reach the server's
/// weight computation; features and labels stay on the client side of
/// run_round.
struct ClientState {
  int id = 0;
  Dataset data;
  LabelMarginal marginal{std::vector<double>{1.0}};
  std::int64_t size = 0;
};

ClientState make_client(int id, Dataset data);

struct RoundRecord {
  int round = 0;
  std::string strategy;
  double lambda = 0.0;
  std::vector<double> alpha;  // over all clients, zeros for non-participants
  double residual = 0.0;
  double ess = 0.0;
  bool covered = true;
  double target_accuracy = 0.0;
  double target_loss = 0.0;
  double macro_f1 = 0.0;
  double wall_ms = 0.0;
};

/// Coordinatewise convex combination of parameter vectors, accumulated in
/// client-index order.
ParamVector aggregate(const std::vector<ParamVector>& updates, const AggregationWeights& alpha);

/// One communication round: subsample participants, run local updates from
/// the broadcast parameters, solve the round's weights over participants
/// only, and aggregate.
std::pair<ParamVector, RoundRecord> run_round(const ParamVector& global,
                                              const std::vector<ClientState>& clients,
                                              const FederationConfig& cfg, int round_index);

/// Full training loop: rounds sequential from init_params, evaluating on the
/// target test set every round. Deterministic given cfg.master_seed.
std::vector<RoundRecord> train(const FederationConfig& cfg,
                               const std::vector<ClientState>& clients,
                               const Dataset& target_test);

/// Exact single-round bias check on a finite instance: compares the
/// alpha-weighted aggregate of full-batch client updates against the update
/// computed on the target dataset, returning the max absolute coordinate gap.
/// Requires the instance to satisfy exact coverage (weighted client marginals
/// equal the target marginal within 1e-12 squared residual).
double verify_unbiasedness(const std::vector<ClientState>& clients,
                           const AggregationWeights& alpha_c, const Dataset& target_universe,
                           const ParamVector& params, double eta);

/// Binary checkpoint: parameters plus the next round index.
void save_checkpoint(const ParamVector& params, int round, const std::string& path);
std::pair<ParamVector, int> load_checkpoint(const std::string& path);

}  // namespace fedpals
