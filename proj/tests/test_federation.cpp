#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <stdexcept>

#include "fedpals/federation.hpp"
#include "fedpals/harness.hpp"
#include "fedpals/random.hpp"

using namespace fedpals;

namespace {

Dataset toy_dataset(const GaussianTaskSpec& task, const LabelMarginal& marginal, int n,
                    std::uint64_t seed) {
  return sample_gaussian_dataset(task, marginal, n, seed);
}

FederationConfig base_config(const LabelMarginal& target) {
  FederationConfig cfg;
  cfg.arch = {ModelKind::kLogistic, 2, 3, 0};
  cfg.rounds = 5;
  cfg.local = {1, 0, 0.1, 0.0};
  cfg.master_seed = 17;
  cfg.target_marginal = target;
  return cfg;
}

std::vector<ClientState> two_planar_clients(std::uint64_t seed) {
  const GaussianTaskSpec task = default_three_class_task();
  std::vector<ClientState> clients;
  clients.push_back(
      make_client(0, toy_dataset(task, LabelMarginal({0.5, 0.5, 0.0}), 40, derive_seed(seed, 0))));
  clients.push_back(
      make_client(1, toy_dataset(task, LabelMarginal({0.5, 0.0, 0.5}), 18, derive_seed(seed, 1))));
  return clients;
}

}  // namespace

TEST_CASE("aggregate forms convex combinations coordinatewise") {
  ParamVector a{std::vector<double>(4, 2.0), {ModelKind::kLogistic, 1, 2, 0}};
  ParamVector b{std::vector<double>(4, 4.0), {ModelKind::kLogistic, 1, 2, 0}};
  const ParamVector mid = aggregate({a, b}, AggregationWeights({0.5, 0.5}));
  for (double v : mid.values) CHECK(v == 3.0);

  const ParamVector picked = aggregate({a, b}, AggregationWeights({0.0, 1.0}));
  CHECK(picked.values == b.values);

  ParamVector other{std::vector<double>(6, 1.0), {ModelKind::kLogistic, 1, 3, 0}};
  CHECK_THROWS_AS(aggregate({a, other}, AggregationWeights({0.5, 0.5})), std::invalid_argument);
  CHECK_THROWS_AS(aggregate({a, b}, AggregationWeights({1.0})), std::invalid_argument);
}

TEST_CASE("aggregate matches an extended-precision oracle") {
  std::mt19937_64 rng(321);
  std::uniform_real_distribution<double> value(-3.0, 3.0);
  const int m = 6;
  const int p = 40;
  std::vector<ParamVector> updates;
  for (int i = 0; i < m; ++i) {
    ParamVector pv;
    pv.layout = {ModelKind::kMlp, 3, 4, 4};
    for (int j = 0; j < p; ++j) pv.values.push_back(value(rng));
    updates.push_back(std::move(pv));
  }
  std::exponential_distribution<double> exp_draw(1.0);
  std::vector<double> w(m);
  double sum = 0.0;
  for (double& x : w) {
    x = exp_draw(rng);
    sum += x;
  }
  for (double& x : w) x /= sum;
  const ParamVector combined = aggregate(updates, AggregationWeights(w));
  for (int j = 0; j < p; ++j) {
    long double exact = 0.0L;
    for (int i = 0; i < m; ++i) {
      exact += static_cast<long double>(w[static_cast<size_t>(i)]) *
               static_cast<long double>(
                   updates[static_cast<size_t>(i)].values[static_cast<size_t>(j)]);
    }
    CHECK(std::abs(combined.values[static_cast<size_t>(j)] - static_cast<double>(exact)) < 1e-12);
  }
}

TEST_CASE("single client rounds return that client's update") {
  const GaussianTaskSpec task = default_three_class_task();
  std::vector<ClientState> clients;
  clients.push_back(make_client(0, toy_dataset(task, LabelMarginal({0.4, 0.3, 0.3}), 20, 5)));
  for (auto strategy : {Strategy::fedavg(), Strategy::fedpals(0.0), Strategy::oracle()}) {
    FederationConfig cfg = base_config(LabelMarginal({0.4, 0.3, 0.3}));
    cfg.strategy = strategy;
    const ParamVector global = init_params(cfg.arch, 3);
    const auto [next, record] = run_round(global, clients, cfg, 0);
    const ParamVector expected =
        local_update(global, clients[0].data, cfg.local, derive_seed(cfg.master_seed, 0, 0));
    CHECK(next.values == expected.values);
    CHECK(record.alpha == std::vector<double>{1.0});
  }
}

TEST_CASE("identical clients under fedavg match a centralized step") {
  const GaussianTaskSpec task = default_three_class_task();
  const Dataset shared = toy_dataset(task, LabelMarginal({0.4, 0.3, 0.3}), 30, 9);
  std::vector<ClientState> clients;
  for (int i = 0; i < 3; ++i) clients.push_back(make_client(i, shared));

  FederationConfig cfg = base_config(LabelMarginal({0.4, 0.3, 0.3}));
  cfg.strategy = Strategy::fedavg();
  const ParamVector global = init_params(cfg.arch, 4);
  const auto [next, record] = run_round(global, clients, cfg, 0);

  // Full-batch updates ignore the shuffle stream, so every client takes the
  // same deterministic step and the average reproduces the centralized one.
  const ParamVector central = local_update(global, shared, cfg.local, 999);
  for (size_t j = 0; j < next.values.size(); ++j) {
    CHECK(next.values[j] == doctest::Approx(central.values[j]).epsilon(1e-12));
  }
}

TEST_CASE("fedpals solves the round weights over the in-hull target") {
  std::vector<ClientState> clients = two_planar_clients(1);
  FederationConfig cfg = base_config(LabelMarginal({0.5, 0.25, 0.25}));
  cfg.strategy = Strategy::fedpals(0.0);
  cfg.rounds = 3;
  const Dataset test = toy_dataset(default_three_class_task(), cfg.target_marginal, 200, 2);
  const auto records = train(cfg, clients, test);
  for (const auto& r : records) {
    CHECK(r.alpha[0] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(r.alpha[1] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(r.covered);
    CHECK(r.residual < 1e-10);
    CHECK(r.strategy == "fedpals");
  }
}

TEST_CASE("training is deterministic given the master seed") {
  std::vector<ClientState> clients = two_planar_clients(4);
  FederationConfig cfg = base_config(LabelMarginal({0.5, 0.25, 0.25}));
  cfg.strategy = Strategy::fedpals(0.0);
  const Dataset test = toy_dataset(default_three_class_task(), cfg.target_marginal, 100, 8);
  const auto a = train(cfg, clients, test);
  const auto b = train(cfg, clients, test);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].target_accuracy == b[i].target_accuracy);
    CHECK(a[i].target_loss == b[i].target_loss);
    CHECK(a[i].alpha == b[i].alpha);
    CHECK(a[i].ess == b[i].ess);
  }
}

TEST_CASE("huge lambda reproduces the fedavg trajectory") {
  std::vector<ClientState> clients = two_planar_clients(6);
  const Dataset test = toy_dataset(default_three_class_task(), make_target_delta(0.3), 100, 3);

  FederationConfig fedavg_cfg = base_config(make_target_delta(0.3));
  fedavg_cfg.strategy = Strategy::fedavg();
  fedavg_cfg.rounds = 10;
  FederationConfig pals_cfg = fedavg_cfg;
  pals_cfg.strategy = Strategy::fedpals(1e10);

  const auto avg = train(fedavg_cfg, clients, test);
  const auto pals = train(pals_cfg, clients, test);
  for (size_t r = 0; r < avg.size(); ++r) {
    for (size_t i = 0; i < avg[r].alpha.size(); ++i) {
      CHECK(std::abs(avg[r].alpha[i] - pals[r].alpha[i]) < 1e-4);
    }
  }
  CHECK(std::abs(avg.back().target_loss - pals.back().target_loss) < 1e-3);
  CHECK(std::abs(avg.back().target_accuracy - pals.back().target_accuracy) < 1e-3);
}

TEST_CASE("client subsampling pads the weight vector with zeros") {
  const GaussianTaskSpec task = default_three_class_task();
  std::vector<ClientState> clients;
  for (int i = 0; i < 6; ++i) {
    clients.push_back(
        make_client(i, toy_dataset(task, LabelMarginal({0.4, 0.3, 0.3}), 20, derive_seed(5, i))));
  }
  FederationConfig cfg = base_config(LabelMarginal({0.4, 0.3, 0.3}));
  cfg.strategy = Strategy::fedpals(0.0);
  cfg.client_fraction = 0.5;
  cfg.rounds = 8;
  const Dataset test = toy_dataset(task, cfg.target_marginal, 100, 6);
  const auto records = train(cfg, clients, test);
  for (const auto& r : records) {
    int participants = 0;
    double sum = 0.0;
    for (double a : r.alpha) {
      if (a != 0.0) ++participants;
      sum += a;
    }
    CHECK(participants <= 3);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  // Different rounds eventually pick different participant sets.
  bool varies = false;
  for (size_t r = 1; r < records.size(); ++r) {
    std::vector<bool> a, b;
    for (double x : records[r - 1].alpha) a.push_back(x != 0.0);
    for (double x : records[r].alpha) b.push_back(x != 0.0);
    if (a != b) varies = true;
  }
  CHECK(varies);
}

TEST_CASE("oracle strategy behaves like fedavg on aligned clients") {
  // Oracle clients share the target marginal, so both objective terms are
  // minimized at the fedavg point and the weight rules coincide.
  const GaussianTaskSpec task = default_three_class_task();
  const LabelMarginal target({0.4, 0.3, 0.3});
  std::vector<ClientState> clients;
  for (int i = 0; i < 3; ++i) {
    clients.push_back(make_client(i, toy_dataset(task, target, 20 + 10 * i, derive_seed(7, i))));
  }
  for (const auto& c : clients) {
    for (int y = 0; y < 3; ++y) CHECK(c.marginal[y] == doctest::Approx(target[y]).epsilon(1e-9));
  }
  std::vector<std::int64_t> sizes;
  std::vector<LabelMarginal> marginals;
  for (const auto& c : clients) {
    sizes.push_back(c.size);
    marginals.push_back(c.marginal);
  }
  const AggregationWeights fa = fedavg_weights(sizes);
  const SolveReport pals =
      solve_fedpals(FedPalsProblem(ClientMarginalSet(marginals, sizes), target, 0.0));
  for (int i = 0; i < fa.size(); ++i) {
    CHECK(pals.weights[i] == doctest::Approx(fa[i]).epsilon(1e-5));
  }

  FederationConfig cfg = base_config(target);
  cfg.strategy = Strategy::oracle();
  const ParamVector global = init_params(cfg.arch, 1);
  const auto [next, record] = run_round(global, clients, cfg, 0);
  CHECK(record.strategy == "oracle");
  for (int i = 0; i < fa.size(); ++i) {
    CHECK(record.alpha[static_cast<size_t>(i)] == doctest::Approx(fa[i]).epsilon(1e-12));
  }
}

TEST_CASE("fedpals_prox passes the proximal coefficient to clients") {
  std::vector<ClientState> clients = two_planar_clients(11);
  FederationConfig cfg = base_config(LabelMarginal({0.5, 0.25, 0.25}));
  cfg.strategy = Strategy::fedpals_prox(0.0, 0.5);
  cfg.local.epochs = 3;
  cfg.local.batch_size = 8;
  const Dataset test = toy_dataset(default_three_class_task(), cfg.target_marginal, 100, 12);
  const auto prox_records = train(cfg, clients, test);
  CHECK(prox_records.back().strategy == "fedpals_prox");

  FederationConfig plain = cfg;
  plain.strategy = Strategy::fedpals(0.0);
  const auto plain_records = train(plain, clients, test);
  // Multi-step proximal training pulls updates toward the broadcast point,
  // so the trajectories must differ.
  CHECK(prox_records.back().target_loss != plain_records.back().target_loss);
}

TEST_CASE("ess-target strategy reaches the requested fraction") {
  std::vector<ClientState> clients = two_planar_clients(13);
  FederationConfig cfg = base_config(make_target_delta(1.0));
  cfg.strategy = Strategy::fedpals_ess(0.95);
  cfg.rounds = 2;
  const Dataset test = toy_dataset(default_three_class_task(), cfg.target_marginal, 100, 14);
  const auto records = train(cfg, clients, test);
  for (const auto& r : records) {
    CHECK(std::abs(r.ess / 58.0 - 0.95) <= 0.01 * 0.95);
    CHECK(r.lambda > 0.0);
  }
}

TEST_CASE("unbiasedness verifier") {
  const UnbiasednessInstance inst = make_unbiasedness_instance(100);

  const double gap =
      verify_unbiasedness(inst.clients, inst.alpha_exact, inst.target, inst.params, inst.eta);
  CHECK(gap < 1e-10);

  // Zero learning rate makes the gap exactly zero.
  CHECK(verify_unbiasedness(inst.clients, inst.alpha_exact, inst.target, inst.params, 0.0) == 0.0);

  // FedAvg weights on the same instance do not satisfy exact coverage.
  std::vector<std::int64_t> sizes;
  for (const auto& c : inst.clients) sizes.push_back(c.size);
  const AggregationWeights control = fedavg_weights(sizes);
  CHECK_THROWS_WITH_AS(
      verify_unbiasedness(inst.clients, control, inst.target, inst.params, inst.eta),
      "constructed instance violates exact coverage", std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
  const ParamVector params = init_params({ModelKind::kMlp, 3, 4, 5}, 77);
  const auto path = std::filesystem::temp_directory_path() / "fedpals_ckpt_test.bin";
  save_checkpoint(params, 42, path.string());
  const auto [loaded, round] = load_checkpoint(path.string());
  CHECK(round == 42);
  CHECK(loaded.values == params.values);
  CHECK(loaded.layout == params.layout);
  std::filesystem::remove(path);
}
