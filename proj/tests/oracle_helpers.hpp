#pragma once

// Brute-force oracles used to freeze expected values. Everything here is
// independent of the solver implementation: objectives are evaluated
// directly from their definition and optima are located by grid enumeration.

#include <cmath>
#include <random>
#include <vector>

#include "fedpals/aggregation.hpp"
#include "fedpals/labelspace.hpp"

namespace oracle {

inline double objective_at(const fedpals::ClientMarginalSet& clients,
                           const fedpals::LabelMarginal& target, double lambda,
                           const std::vector<double>& alpha) {
  const int k = clients.num_classes();
  double residual = 0.0;
  for (int y = 0; y < k; ++y) {
    double mix = 0.0;
    for (int i = 0; i < clients.num_clients(); ++i) {
      mix += alpha[static_cast<size_t>(i)] * clients.marginals[static_cast<size_t>(i)][y];
    }
    const double r = mix - target[y];
    residual += r * r;
  }
  double penalty = 0.0;
  for (int i = 0; i < clients.num_clients(); ++i) {
    penalty += alpha[static_cast<size_t>(i)] * alpha[static_cast<size_t>(i)] /
               static_cast<double>(clients.sizes[static_cast<size_t>(i)]);
  }
  return residual + lambda * penalty;
}

inline double residual_at(const fedpals::ClientMarginalSet& clients,
                          const fedpals::LabelMarginal& target,
                          const std::vector<double>& alpha) {
  return objective_at(clients, target, 0.0, alpha);
}

inline double ess_at(const std::vector<double>& alpha,
                     const std::vector<std::int64_t>& sizes) {
  double denom = 0.0;
  for (size_t i = 0; i < alpha.size(); ++i) {
    denom += alpha[i] * alpha[i] / static_cast<double>(sizes[i]);
  }
  return 1.0 / denom;
}

struct GridOptimum {
  double objective = 0.0;
  std::vector<double> alpha;
};

// Exhaustive scan of the 1-simplex (two clients) at the given step.
inline GridOptimum grid_search_m2(const fedpals::ClientMarginalSet& clients,
                                  const fedpals::LabelMarginal& target, double lambda,
                                  double step) {
  GridOptimum best{std::numeric_limits<double>::infinity(), {0.0, 0.0}};
  const int steps = static_cast<int>(std::llround(1.0 / step));
  for (int i = 0; i <= steps; ++i) {
    const double a = static_cast<double>(i) * step;
    const std::vector<double> alpha{a, 1.0 - a};
    const double obj = objective_at(clients, target, lambda, alpha);
    if (obj < best.objective) best = {obj, alpha};
  }
  return best;
}

// Exhaustive scan of the 2-simplex (three clients) at the given step.
inline GridOptimum grid_search_m3(const fedpals::ClientMarginalSet& clients,
                                  const fedpals::LabelMarginal& target, double lambda,
                                  double step) {
  GridOptimum best{std::numeric_limits<double>::infinity(), {0.0, 0.0, 0.0}};
  const int steps = static_cast<int>(std::llround(1.0 / step));
  for (int i = 0; i <= steps; ++i) {
    const double a = static_cast<double>(i) * step;
    for (int j = 0; j <= steps - i; ++j) {
      const double b = static_cast<double>(j) * step;
      const std::vector<double> alpha{a, b, 1.0 - a - b};
      const double obj = objective_at(clients, target, lambda, alpha);
      if (obj < best.objective) best = {obj, alpha};
    }
  }
  return best;
}

// Max-ESS point among near-satisfying grid points of the 2-simplex.
inline double grid_max_ess_on_face(const fedpals::ClientMarginalSet& clients,
                                   const fedpals::LabelMarginal& target, double step,
                                   double residual_tol) {
  double best = 0.0;
  const int steps = static_cast<int>(std::llround(1.0 / step));
  for (int i = 0; i <= steps; ++i) {
    const double a = static_cast<double>(i) * step;
    for (int j = 0; j <= steps - i; ++j) {
      const double b = static_cast<double>(j) * step;
      const std::vector<double> alpha{a, b, 1.0 - a - b};
      if (residual_at(clients, target, alpha) <= residual_tol) {
        best = std::max(best, ess_at(alpha, clients.sizes));
      }
    }
  }
  return best;
}

// Uniform Dirichlet sample: a random feasible point of the simplex.
inline std::vector<double> random_simplex_point(std::mt19937_64& rng, int m) {
  std::exponential_distribution<double> exp_draw(1.0);
  std::vector<double> alpha(static_cast<size_t>(m));
  double sum = 0.0;
  for (double& a : alpha) {
    a = exp_draw(rng);
    sum += a;
  }
  for (double& a : alpha) a /= sum;
  return alpha;
}

inline fedpals::LabelMarginal random_marginal(std::mt19937_64& rng, int k) {
  return fedpals::LabelMarginal(random_simplex_point(rng, k));
}

struct RandomProblem {
  fedpals::ClientMarginalSet clients;
  fedpals::LabelMarginal target;
};

inline RandomProblem random_problem(std::mt19937_64& rng, int max_clients = 10,
                                    int max_classes = 10, std::int64_t max_size = 1000) {
  std::uniform_int_distribution<int> m_pick(2, max_clients);
  std::uniform_int_distribution<int> k_pick(2, max_classes);
  const int m = m_pick(rng);
  const int k = k_pick(rng);
  std::uniform_int_distribution<std::int64_t> n_pick(1, max_size);
  std::vector<fedpals::LabelMarginal> marginals;
  std::vector<std::int64_t> sizes;
  for (int i = 0; i < m; ++i) {
    marginals.push_back(random_marginal(rng, k));
    sizes.push_back(n_pick(rng));
  }
  return {fedpals::ClientMarginalSet(std::move(marginals), std::move(sizes)),
          random_marginal(rng, k)};
}

}  // namespace oracle
