#pragma once

#include <cstdint>
#include <vector>

#include "fedpals/labelspace.hpp"

namespace fedpals {

/// A point on the (M-1)-simplex used to convexly combine client updates.
/// Entries are validated nonnegative and renormalized to sum exactly 1 when
/// the input sum is within 1e-9 of 1.
class AggregationWeights {
 public:
  static constexpr double kSumTolerance = 1e-9;

  explicit AggregationWeights(std::vector<double> alpha);

  int size() const { return static_cast<int>(alpha_.size()); }
  double operator[](int i) const { return alpha_[static_cast<size_t>(i)]; }
  const std::vector<double>& values() const { return alpha_; }

 private:
  std::vector<double> alpha_;
};

/// Inputs of the regularized weight problem
///   minimize ||alpha^T S - T||^2 + lambda * sum_i alpha_i^2 / n_i
/// over the simplex. lambda must be finite and >= 0; the lambda->infinity
/// case is exposed separately through fedpals_limit_weights.
struct FedPalsProblem {
  FedPalsProblem(ClientMarginalSet client_set, LabelMarginal target_marginal,
                 double lambda_value);

  ClientMarginalSet clients;
  LabelMarginal target;
  double lambda = 0.0;
};

struct SolveReport {
  AggregationWeights weights;
  double residual = 0.0;   // ||alpha^T S - T||^2, recomputed at the final alpha
  double ess = 0.0;        // 1 / sum_i alpha_i^2 / n_i
  double objective = 0.0;  // residual + lambda * sum_i alpha_i^2 / n_i
  int iterations = 0;
  bool converged = true;
};

// Substituted for lambda when a caller requests exactly 0 so the solver picks
// the max-ESS point of the otherwise non-unique satisfying set.
constexpr double kZeroLambdaRegularization = 1e-9;

/// Sample-size-proportional weights alpha_i = n_i / sum_j n_j.
AggregationWeights fedavg_weights(const std::vector<std::int64_t>& sizes);

/// Euclidean projection onto the probability simplex (sort-based threshold
/// rule, deterministic tie handling by index order).
AggregationWeights project_to_simplex(const std::vector<double>& v);

/// Solves the simplex-constrained quadratic program above. Returns a feasible
/// alpha whose objective is within tol of the global optimum; converged is
/// false only when max_iters is exhausted (the result is still feasible and
/// the best point found).
SolveReport solve_fedpals(const FedPalsProblem& problem, double tol = 1e-12,
                          int max_iters = 200000);

enum class WeightLimit { kLambdaToZero, kLambdaToInfinity };

/// Limiting weights of the regularized problem: lambda->infinity returns
/// fedavg_weights exactly; lambda->zero returns the minimum-residual alpha of
/// largest effective sample size.
AggregationWeights fedpals_limit_weights(const ClientMarginalSet& clients,
                                         const LabelMarginal& target,
                                         WeightLimit limit);

/// Effective sample size 1 / sum_i alpha_i^2 / n_i of a weighted aggregate.
double effective_sample_size(const AggregationWeights& alpha,
                             const std::vector<std::int64_t>& sizes);

struct EssSearchResult {
  double lambda = 0.0;
  double achieved_fraction = 0.0;
  // True when ESS(lambda=0)/N already exceeds the requested fraction and
  // lambda=0 was returned as the closest achievable point.
  bool clamped_at_zero = false;
};

/// Finds lambda whose solution has ESS/N within rel_tol (relative) of
/// target_fraction, by bisection with geometric bracket expansion. Throws
/// "degenerate: target equals client aggregate" when T equals the FedAvg
/// mixture and the target fraction is below 1.
EssSearchResult lambda_for_ess(const ClientMarginalSet& clients,
                               const LabelMarginal& target,
                               double target_fraction, double rel_tol = 0.01);

}  // namespace fedpals
